mod common;

use common::gradcheck::{loss_max_error, raster_max_error, scene, TOL};
use ctsplat::geometry::pose_at_angle;
use ctsplat::rasterizer::{render, render_backward};
use ctsplat::{Gaussian, GaussianCloud};
use nalgebra::Vector3;

#[test]
fn rasterizer_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    for seed in 0..100 {
        let (s, _) = scene(seed);
        let (err, at) = raster_max_error(&s);
        if err >= TOL {
            failures.push(format!("seed {seed}: {err:e} at {at}"));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (err, at) = loss_max_error(seed);
        assert!(err < TOL, "seed {seed}: {err:e} at {at}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (s, _) = scene(3);
    let p = s.dims.0 * s.dims.1;
    let g = render_backward(&s.cloud, &s.pose, s.dims, 0.0, &vec![0.0; p], &vec![0.0; p]).unwrap();
    for i in 0..s.cloud.len() {
        assert_eq!(g.position[i], Vector3::zeros());
        assert_eq!(g.log_scale[i], Vector3::zeros());
        assert_eq!(g.rotation[i], [0.0; 4]);
        assert_eq!(g.opacity_logit[i], 0.0);
        assert_eq!(g.intensity[i], 0.0);
    }
}

#[test]
fn single_splat_intensity_gradient_is_alpha() {
    let geom = common::geometry_for(8);
    let pose = pose_at_angle(&geom, 0.0);
    let g = Gaussian {
        position: Vector3::new(0.0, 3.0, -2.0),
        log_scale: Vector3::repeat(20f64.ln()),
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: 0.3,
        intensity: 0.7,
    };
    let cloud = GaussianCloud::new(vec![g], 100.0).unwrap();
    let img = render(&cloud, &pose, (8, 8), 0.0).unwrap();
    let alpha = img.opacity.clone().unwrap();
    for p in 0..64 {
        let mut d = vec![0.0; 64];
        d[p] = 1.0;
        let grads = render_backward(&cloud, &pose, (8, 8), 0.0, &d, &vec![0.0; 64]).unwrap();
        // One splat over a black background: C = c·α and I_α = α.
        assert!((grads.intensity[0] - alpha[p]).abs() < 1e-14, "pixel {p}");
        assert!((img.pixels[p] - 0.7 * alpha[p]).abs() < 1e-14);
    }
}

#[test]
fn gradient_scenes_cover_the_threshold_paths() {
    // Near-opaque and anisotropic scenes are part of the sample.
    let mut opaque = 0;
    let mut anisotropic = 0;
    for seed in 0..100 {
        let (s, _) = scene(seed);
        if s.cloud.gaussians.iter().any(|g| g.opacity() > 0.99) {
            opaque += 1;
        }
        if s.cloud.gaussians.iter().any(|g| g.log_scale.max() - g.log_scale.min() > 10f64.ln()) {
            anisotropic += 1;
        }
    }
    assert!(opaque >= 5, "{opaque}");
    assert!(anisotropic >= 10, "{anisotropic}");
}
