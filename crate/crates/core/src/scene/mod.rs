//! Scene ingestion: images, instance masks, crops, and synthetic scenes with ground truth.

pub mod components;
pub mod crops;
pub mod io;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use components::{connected_components, default_min_area, foreground_from_border, BoundingBox, InstanceMask};
pub use crops::{composite_background, extract_crops, CropSet};
pub use synth::{synth_scene_generate, GroundTruth, SynthConfig, SynthDataset, SynthScene};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::render::{Camera, PosePrior};
use crate::shading::LightConfig;

/// Per-scene settings: camera, camera-frame light and pose prior.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub camera: Camera,
    pub light: LightConfig,
    pub prior: PosePrior,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.prior.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A scene image with its instance masks.
#[derive(Clone, Debug)]
pub struct SceneImage {
    pub rgb: Raster,
    pub instances: Vec<InstanceMask>,
}

/// `mask_<k>.png` files of `dir`, ordered by `k`.
pub fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(k) = name.strip_prefix("mask_").and_then(|s| s.strip_suffix(".png")).and_then(|s| s.parse::<usize>().ok()) {
            found.push((k, path));
        }
    }
    if found.is_empty() {
        return Err(Error::invalid(format!("no mask_<k>.png files in {}", dir.display())));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

impl SceneImage {
    /// Loads `image` and the masks in `masks_dir`; overlapping masks are rejected.
    pub fn load(image: &Path, masks_dir: &Path) -> Result<Self> {
        let rgb = io::load_rgb(image)?;
        let mut instances = Vec::new();
        for p in mask_files(masks_dir)? {
            let m = io::load_gray(&p)?;
            if (m.height(), m.width()) != (rgb.height(), rgb.width()) {
                return Err(Error::invalid(format!(
                    "{} is {}x{} but the scene is {}x{}",
                    p.display(),
                    m.width(),
                    m.height(),
                    rgb.width(),
                    rgb.height()
                )));
            }
            instances.push(InstanceMask::from_mask(&m)?);
        }
        let mut covered = vec![false; rgb.height() * rgb.width()];
        for inst in &instances {
            for (i, v) in inst.mask.data().iter().enumerate() {
                if *v > 0.0 {
                    if covered[i] {
                        return Err(Error::invalid("instance masks overlap"));
                    }
                    covered[i] = true;
                }
            }
        }
        Ok(Self { rgb, instances })
    }

    /// Segments `rgb` against its border color and splits the foreground into components.
    pub fn segment(rgb: Raster, threshold: f64, min_area: Option<usize>) -> Result<Self> {
        let fg = foreground_from_border(&rgb, threshold)?;
        let min_area = min_area.unwrap_or_else(|| default_min_area(rgb.height(), rgb.width()));
        let instances = connected_components(&fg, min_area)?;
        Ok(Self { rgb, instances })
    }

    pub fn crops(&self, resolution: usize) -> Result<CropSet> {
        extract_crops(&self.rgb, &self.instances, resolution)
    }
}
