//! JSON scene manifest: scan geometry plus the list of projection views.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "geometry": {
//!     "source_to_isocenter": 1000.0, "source_to_detector": 1500.0,
//!     "detector_width": 300.0, "detector_height": 300.0,
//!     "image_width": 128, "image_height": 128,
//!     "n_views": 360, "angular_start_deg": 0.0, "angular_step_deg": 1.0,
//!     "fov_side": 200.0
//!   },
//!   "normalization": 123.4,
//!   "phantom": { "dims": [128, 128, 128], "spacing": [1.5625, 1.5625, 1.5625] },
//!   "views": [ { "angle_deg": 0.0, "image_path": "view_0000.png" } ]
//! }
//! ```
//!
//! `phantom` and each view's `split_hint` are optional. Unknown keys at the
//! top level, inside `geometry` and inside each view are preserved.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    #[serde(flatten)]
    pub scan: ScanGeometry,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomInfo {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl PhantomInfo {
    /// Bytes of the dense voxel grid stored as `f32`.
    pub fn dense_bytes(&self) -> u64 {
        4 * self.dims.iter().map(|d| *d as u64).product::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub angle_deg: f64,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_hint: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    pub geometry: GeometryRecord,
    /// Divisor applied to raw line integrals by the DRR generator.
    pub normalization: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomInfo>,
    pub views: Vec<ViewEntry>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SceneManifest {
    pub fn new(geometry: ScanGeometry, normalization: f64, views: Vec<ViewEntry>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            geometry: GeometryRecord {
                scan: geometry,
                extra: Map::new(),
            },
            normalization,
            phantom: None,
            views,
            extra: Map::new(),
        }
    }

    pub fn scan(&self) -> &ScanGeometry {
        &self.geometry.scan
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        self.geometry
            .scan
            .validate()
            .map_err(|e| Error::Manifest(e.to_string()))?;
        let mut seen = HashSet::new();
        for v in &self.views {
            if !v.angle_deg.is_finite() || !seen.insert(v.angle_deg.to_bits()) {
                return Err(Error::Manifest(format!(
                    "view angle {} is duplicated or not finite",
                    v.angle_deg
                )));
            }
        }
        Ok(())
    }

    /// Resolves a view's image path against the manifest's directory.
    pub fn resolve(&self, manifest_dir: &Path, view: usize) -> PathBuf {
        manifest_dir.join(&self.views[view].image_path)
    }

    pub fn to_canonical_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        match value.get("format_version").and_then(Value::as_u64) {
            None => return Err(Error::Manifest("missing field `format_version`".into())),
            Some(v) if v != MANIFEST_VERSION as u64 => {
                return Err(Error::Manifest(format!(
                    "unsupported format_version {v} (expected {MANIFEST_VERSION})"
                )))
            }
            Some(_) => {}
        }
        let m: SceneManifest =
            serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn write_manifest(m: &SceneManifest, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_canonical_string()?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SceneManifest::from_json_str(&text)
}
