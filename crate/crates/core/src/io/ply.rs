//! Binary little-endian PLY persistence for Gaussian clouds.
//!
//! Native layout: one `vertex` element with twelve `float` properties
//! `x y z log_scale_0 log_scale_1 log_scale_2 rot_w rot_x rot_y rot_z
//! opacity_logit intensity`, 48 bytes per Gaussian. The header carries
//! `comment ctsplat native 1` and `comment scene_extent <value>`.
//!
//! The compatibility layout mirrors the common splatting viewer format
//! (`x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3`);
//! the grayscale intensity is written to all three DC terms so that
//! `0.5 + SH_C0 · f_dc` reproduces it.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{Gaussian, GaussianCloud};

pub const NATIVE_VERSION: u32 = 1;
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_REST: usize = 45;

pub const NATIVE_PROPERTIES: [&str; 12] = [
    "x",
    "y",
    "z",
    "log_scale_0",
    "log_scale_1",
    "log_scale_2",
    "rot_w",
    "rot_x",
    "rot_y",
    "rot_z",
    "opacity_logit",
    "intensity",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyLayout {
    Native,
    /// Third-party splat viewer layout (62 floats per vertex).
    Compat,
}

fn compat_properties() -> Vec<String> {
    let mut p: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    p.extend((0..3).map(|i| format!("f_dc_{i}")));
    p.extend((0..SH_REST).map(|i| format!("f_rest_{i}")));
    p.push("opacity".into());
    p.extend((0..3).map(|i| format!("scale_{i}")));
    p.extend((0..4).map(|i| format!("rot_{i}")));
    p
}

fn header(layout: PlyLayout, n: usize, scene_extent: f64) -> String {
    let (tag, props): (&str, Vec<String>) = match layout {
        PlyLayout::Native => ("native", NATIVE_PROPERTIES.map(String::from).to_vec()),
        PlyLayout::Compat => ("compat", compat_properties()),
    };
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("comment ctsplat {tag} {NATIVE_VERSION}\n"));
    h.push_str(&format!("comment scene_extent {scene_extent:?}\n"));
    h.push_str(&format!("element vertex {n}\n"));
    for p in props {
        h.push_str(&format!("property float {p}\n"));
    }
    h.push_str("end_header\n");
    h
}

/// Serializes a cloud. Values are stored as `f32`.
pub fn encode_ply(cloud: &GaussianCloud, layout: PlyLayout) -> Vec<u8> {
    let head = header(layout, cloud.len(), cloud.scene_extent);
    let floats_per = match layout {
        PlyLayout::Native => NATIVE_PROPERTIES.len(),
        PlyLayout::Compat => compat_properties().len(),
    };
    let mut out = Vec::with_capacity(head.len() + 4 * floats_per * cloud.len());
    out.extend_from_slice(head.as_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for g in &cloud.gaussians {
        match layout {
            PlyLayout::Native => {
                g.position.iter().for_each(|v| put(*v));
                g.log_scale.iter().for_each(|v| put(*v));
                g.rotation.iter().for_each(|v| put(*v));
                put(g.opacity_logit);
                put(g.intensity);
            }
            PlyLayout::Compat => {
                g.position.iter().for_each(|v| put(*v));
                (0..3).for_each(|_| put(0.0));
                let dc = (g.intensity - 0.5) / SH_C0;
                (0..3).for_each(|_| put(dc));
                (0..SH_REST).for_each(|_| put(0.0));
                put(g.opacity_logit);
                g.log_scale.iter().for_each(|v| put(*v));
                g.rotation.iter().for_each(|v| put(*v));
            }
        }
    }
    out
}

pub fn write_ply(cloud: &GaussianCloud, path: &Path, layout: PlyLayout) -> Result<()> {
    std::fs::write(path, encode_ply(cloud, layout)).map_err(|e| Error::io(path, e))
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses either layout. Native files round-trip bit-exactly.
pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(usize, String)> {
        let start = *offset;
        let end = bytes[start..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| parse_err(start, "unterminated header"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end])
            .map_err(|_| parse_err(start, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (at, magic) = next_line(&mut offset)?;
    if magic != "ply" {
        return Err(parse_err(at, "missing `ply` magic"));
    }
    let mut n_vertices: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut scene_extent: Option<f64> = None;
    let mut saw_format = false;
    loop {
        let (at, line) = next_line(&mut offset)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => saw_format = true,
            ["format", ..] => return Err(parse_err(at, format!("unsupported format `{line}`"))),
            ["comment", "ctsplat", _, version] => {
                if version.parse::<u32>().ok() != Some(NATIVE_VERSION) {
                    return Err(parse_err(at, format!("unknown ctsplat version `{version}`")));
                }
            }
            ["comment", "scene_extent", v] => {
                scene_extent = Some(
                    v.parse()
                        .map_err(|_| parse_err(at, format!("bad scene_extent `{v}`")))?,
                );
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if n_vertices.is_some() {
                    return Err(parse_err(at, "duplicate vertex element"));
                }
                n_vertices = Some(
                    n.parse()
                        .map_err(|_| parse_err(at, format!("bad vertex count `{n}`")))?,
                );
            }
            ["element", ..] => return Err(parse_err(at, format!("unexpected element `{line}`"))),
            ["property", "float", name] if n_vertices.is_some() => properties.push(name.to_string()),
            ["property", ..] => return Err(parse_err(at, format!("unsupported property `{line}`"))),
            _ => return Err(parse_err(at, format!("malformed header line `{line}`"))),
        }
    }
    if !saw_format {
        return Err(parse_err(0, "missing format line"));
    }
    let n = n_vertices.ok_or_else(|| parse_err(offset, "missing vertex element"))?;
    let layout = if properties.iter().map(String::as_str).eq(NATIVE_PROPERTIES) {
        PlyLayout::Native
    } else if properties == compat_properties() {
        PlyLayout::Compat
    } else {
        return Err(parse_err(offset, "unrecognized vertex property layout"));
    };

    let stride = 4 * properties.len();
    let body = &bytes[offset..];
    if body.len() < stride * n {
        return Err(parse_err(
            bytes.len(),
            format!("truncated body: expected {} bytes, found {}", stride * n, body.len()),
        ));
    }
    if body.len() > stride * n {
        return Err(parse_err(offset + stride * n, "trailing bytes after vertex data"));
    }

    let gaussians = body
        .chunks_exact(stride)
        .map(|rec| {
            let f: Vec<f64> = rec
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            match layout {
                PlyLayout::Native => Gaussian {
                    position: Vector3::new(f[0], f[1], f[2]),
                    log_scale: Vector3::new(f[3], f[4], f[5]),
                    rotation: [f[6], f[7], f[8], f[9]],
                    opacity_logit: f[10],
                    intensity: f[11],
                },
                PlyLayout::Compat => {
                    let o = 9 + SH_REST;
                    Gaussian {
                        position: Vector3::new(f[0], f[1], f[2]),
                        log_scale: Vector3::new(f[o + 1], f[o + 2], f[o + 3]),
                        rotation: [f[o + 4], f[o + 5], f[o + 6], f[o + 7]],
                        opacity_logit: f[o],
                        intensity: 0.5 + SH_C0 * f[6],
                    }
                }
            }
        })
        .collect();
    let extent = scene_extent.unwrap_or(1.0);
    GaussianCloud::new(gaussians, extent)
        .map_err(|e| parse_err(0, format!("invalid scene_extent: {e}")))
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes)
}

/// Byte size of the native encoding without serializing it.
pub fn native_size(cloud: &GaussianCloud) -> usize {
    header(PlyLayout::Native, cloud.len(), cloud.scene_extent).len() + 48 * cloud.len()
}
