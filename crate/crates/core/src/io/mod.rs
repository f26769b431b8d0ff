//! Persistence: PLY clouds, PNG projections, the JSON scene manifest, and
//! loading a whole dataset.

pub mod manifest;
pub mod ply;
pub mod png16;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use manifest::{read_manifest, write_manifest, PhantomInfo, SceneManifest, ViewEntry};
pub use ply::{decode_ply, encode_ply, read_ply, write_ply, PlyLayout};
pub use png16::{read_float_sidecar, read_image, write_float_sidecar, write_image};

use crate::error::{Error, Result};
use crate::geometry::{pose_at_angle, CameraPose};
use crate::image::ProjectionImage;

/// A manifest with its projection images and derived cameras.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: SceneManifest,
    pub root: PathBuf,
    pub images: Vec<ProjectionImage>,
    pub poses: Vec<CameraPose>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let images = (0..manifest.views.len())
            .into_par_iter()
            .map(|k| read_image(&manifest.resolve(&root, k)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, root, images)
    }

    pub fn from_parts(
        manifest: SceneManifest,
        root: PathBuf,
        mut images: Vec<ProjectionImage>,
    ) -> Result<Self> {
        manifest.validate()?;
        if images.len() != manifest.views.len() {
            return Err(Error::Manifest(format!(
                "{} images for {} views",
                images.len(),
                manifest.views.len()
            )));
        }
        let geom = *manifest.scan();
        for (img, view) in images.iter_mut().zip(&manifest.views) {
            if (img.width, img.height) != geom.image_dims() {
                return Err(Error::Manifest(format!(
                    "{} is {}x{}, geometry says {}x{}",
                    view.image_path, img.width, img.height, geom.image_width, geom.image_height
                )));
            }
            img.view_angle_deg = view.angle_deg;
        }
        let poses = manifest
            .views
            .iter()
            .map(|v| pose_at_angle(&geom, v.angle_deg))
            .collect();
        Ok(Self {
            manifest,
            root,
            images,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.manifest.scan().image_dims()
    }
}
