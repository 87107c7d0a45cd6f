//! Per-frame preprocessing chain: crop, CFA split, zero-mean, residue.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{extract_residue, DenoiseConfig, FrameResidue};
use crate::container::stable_hash;
use crate::error::Result;
use crate::raster::{crop_window, split_cfa, zero_mean, CfaChannel, CfaStack, CropWindow, RasterImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Applied before the CFA split. `None` (JSON `null`) keeps the full frame.
    #[serde(default = "default_crop")]
    pub crop: Option<CropWindow>,
    #[serde(default)]
    pub denoise: DenoiseConfig,
}

fn default_crop() -> Option<CropWindow> {
    Some(CropWindow::PROTOCOL)
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            crop: default_crop(),
            denoise: DenoiseConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn hash(&self) -> u64 {
        stable_hash(self)
    }
}

/// Cropped, zero-mean CFA planes ready for filtering.
pub fn prepare_planes(img: &RasterImage, cfg: &PipelineConfig) -> Result<CfaStack> {
    let cropped;
    let img = match cfg.crop {
        Some(win) => {
            cropped = crop_window(img, win)?;
            &cropped
        }
        None => img,
    };
    split_cfa(img)?.try_map(|_, p| Ok(zero_mean(p)))
}

/// Runs the full residue chain on one frame.
pub fn frame_residue(img: &RasterImage, image_id: &str, cfg: &PipelineConfig) -> Result<FrameResidue> {
    let planes = prepare_planes(img, cfg)?;
    let residues: Vec<_> = CfaChannel::ALL
        .par_iter()
        .map(|&c| extract_residue(planes.plane(c), &cfg.denoise).map(|r| r.residue))
        .collect::<Result<_>>()?;
    let residues: [_; 4] = residues.try_into().expect("four planes");
    Ok(FrameResidue {
        image_id: image_id.to_string(),
        stack: CfaStack::new(residues, planes.layout())?,
        config_hash: cfg.hash(),
        meta: img.meta().clone(),
    })
}
