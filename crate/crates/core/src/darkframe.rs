//! Master dark frames and dark-current removal.

use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerKind};
use crate::error::{Error, Result};
use crate::raster::{split_cfa, CfaLayout, CfaStack, RasterImage};

/// Largest temperature spread (°C) tolerated when pooling or applying darks.
pub const TEMPERATURE_TOLERANCE_C: f64 = 1.0;

const INTEGRATION_REL_TOLERANCE: f64 = 1e-9;

/// Mean of several dark captures taken under the same conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct DarkFrame {
    pixels: Array2<f64>,
    layout: CfaLayout,
    bit_depth: u32,
    pub frame_count: usize,
    pub temperature: f64,
    pub integration_time: f64,
    pub camera_id: String,
}

#[derive(Serialize, Deserialize)]
struct DarkHeader {
    camera_id: String,
    frame_count: usize,
    temperature_c: f64,
    integration_time_s: f64,
    cfa_layout: CfaLayout,
    bit_depth: u32,
}

fn same_integration(a: f64, b: f64) -> bool {
    (a - b).abs() <= INTEGRATION_REL_TOLERANCE * a.abs().max(b.abs())
}

impl DarkFrame {
    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    /// Per-CFA view of the master dark.
    pub fn planes(&self) -> Result<CfaStack> {
        split_cfa(&self.as_image()?)
    }

    pub fn as_image(&self) -> Result<RasterImage> {
        RasterImage::new(
            self.pixels.clone(),
            self.bit_depth,
            self.layout,
            crate::raster::CaptureMeta {
                integration_time: self.integration_time,
                temperature: self.temperature,
                camera_id: self.camera_id.clone(),
                lens_id: String::from("DARK"),
                illumination: 0.0,
            },
        )
    }

    /// `<camera>_T<temp>_t<exp>.dark`
    pub fn file_name(&self) -> String {
        format!(
            "{}_T{:.1}_t{:.6}.dark",
            self.camera_id, self.temperature, self.integration_time
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = DarkHeader {
            camera_id: self.camera_id.clone(),
            frame_count: self.frame_count,
            temperature_c: self.temperature,
            integration_time_s: self.integration_time,
            cfa_layout: self.layout,
            bit_depth: self.bit_depth,
        };
        Container {
            kind: ContainerKind::Dark,
            config_hash: 0,
            meta: serde_json::to_value(header).expect("header serialises"),
            planes: vec![self.pixels.clone()],
        }
        .write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(ContainerKind::Dark)?;
        let h: DarkHeader =
            serde_json::from_value(c.meta).map_err(|e| Error::Decode(format!("dark header: {e}")))?;
        let pixels = c
            .planes
            .into_iter()
            .next()
            .ok_or_else(|| Error::Decode("dark file without pixel plane".into()))?;
        let dark = DarkFrame {
            pixels,
            layout: h.cfa_layout,
            bit_depth: h.bit_depth,
            frame_count: h.frame_count,
            temperature: h.temperature_c,
            integration_time: h.integration_time_s,
            camera_id: h.camera_id,
        };
        // Re-validates the value range and geometry.
        dark.as_image()?;
        Ok(dark)
    }
}

/// Averages dark captures into a master dark.
pub fn build_dark_frame(darks: &[RasterImage]) -> Result<DarkFrame> {
    let first = darks
        .first()
        .ok_or_else(|| Error::Protocol("no dark frames supplied".into()))?;
    let dim = first.pixels().dim();
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in darks {
        if d.pixels().dim() != dim {
            return Err(Error::Validation(format!(
                "dark frame is {}x{}, expected {}x{}",
                d.width(),
                d.height(),
                dim.1,
                dim.0
            )));
        }
        if d.layout() != first.layout() {
            return Err(Error::Validation("dark frames use different CFA layouts".into()));
        }
        if !same_integration(d.meta().integration_time, first.meta().integration_time) {
            return Err(Error::CalibrationMismatch {
                field: "integration_time",
                detail: format!(
                    "{} s vs {} s",
                    d.meta().integration_time,
                    first.meta().integration_time
                ),
            });
        }
        if d.meta().camera_id != first.meta().camera_id {
            return Err(Error::CalibrationMismatch {
                field: "camera_id",
                detail: format!("{} vs {}", d.meta().camera_id, first.meta().camera_id),
            });
        }
        t_min = t_min.min(d.meta().temperature);
        t_max = t_max.max(d.meta().temperature);
    }
    if t_max - t_min > TEMPERATURE_TOLERANCE_C {
        return Err(Error::CalibrationMismatch {
            field: "temperature",
            detail: format!("darks span {t_min} °C to {t_max} °C"),
        });
    }

    let mut sum = Array2::<f64>::zeros(dim);
    for d in darks {
        sum += d.pixels();
    }
    let n = darks.len() as f64;
    let pixels = sum.mapv(|v| (v / n).clamp(0.0, 1.0));
    Ok(DarkFrame {
        pixels,
        layout: first.layout(),
        bit_depth: first.bit_depth(),
        frame_count: darks.len(),
        temperature: darks.iter().map(|d| d.meta().temperature).sum::<f64>() / n,
        integration_time: first.meta().integration_time,
        camera_id: first.meta().camera_id.clone(),
    })
}

/// `clamp(img - dark, 0, 1)` after checking that the dark applies to `img`.
pub fn subtract_dark(img: &RasterImage, dark: &DarkFrame) -> Result<RasterImage> {
    if img.pixels().dim() != dark.pixels.dim() {
        return Err(Error::CalibrationMismatch {
            field: "dimensions",
            detail: format!(
                "image {:?} vs dark {:?}",
                img.pixels().dim(),
                dark.pixels.dim()
            ),
        });
    }
    if !same_integration(img.meta().integration_time, dark.integration_time) {
        return Err(Error::CalibrationMismatch {
            field: "integration_time",
            detail: format!("image {} s vs dark {} s", img.meta().integration_time, dark.integration_time),
        });
    }
    if (img.meta().temperature - dark.temperature).abs() > TEMPERATURE_TOLERANCE_C {
        return Err(Error::CalibrationMismatch {
            field: "temperature",
            detail: format!("image {} °C vs dark {} °C", img.meta().temperature, dark.temperature),
        });
    }
    let mut out = img.pixels().clone();
    Zip::from(&mut out)
        .and(&dark.pixels)
        .for_each(|p, &d| *p = (*p - d).clamp(0.0, 1.0));
    img.with_pixels(out)
}
