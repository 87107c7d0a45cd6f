//! Raw frame representation and the geometric preprocessing applied before
//! residue extraction: raw ingestion, cropping, CFA plane separation and
//! zero-mean normalisation.
//!
//! Pixels are held as `f64` in `[0, 1]`. A raw file is a headerless stream of
//! little-endian `u16` samples in row-major order; its dimensions and capture
//! metadata live in a `<name>.meta.json` sidecar next to it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lens identifier used for lensless (pinhole) captures.
pub const PINHOLE: &str = "PINHOLE";

/// Bayer mosaic arrangement of the sensor, named by the top-left 2x2 cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaLayout {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
    Mono,
}

/// One of the four colour sites in a 2x2 Bayer cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CfaChannel {
    R,
    G1,
    G2,
    B,
}

impl CfaChannel {
    pub const ALL: [CfaChannel; 4] = [CfaChannel::R, CfaChannel::G1, CfaChannel::G2, CfaChannel::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            CfaChannel::R => "R",
            CfaChannel::G1 => "G1",
            CfaChannel::G2 => "G2",
            CfaChannel::B => "B",
        }
    }
}

impl fmt::Display for CfaChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl CfaLayout {
    /// `(row, col)` offset of `channel` inside the 2x2 cell. `None` for `Mono`.
    ///
    /// G1 is the green sharing a row with red, G2 the green sharing a row with blue.
    pub fn offset(self, channel: CfaChannel) -> Option<(usize, usize)> {
        use CfaChannel::*;
        let cell = match self {
            CfaLayout::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            CfaLayout::Bggr => [(1, 1), (1, 0), (0, 1), (0, 0)],
            CfaLayout::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            CfaLayout::Gbrg => [(1, 0), (1, 1), (0, 0), (0, 1)],
            CfaLayout::Mono => return None,
        };
        Some(match channel {
            R => cell[0],
            G1 => cell[1],
            G2 => cell[2],
            B => cell[3],
        })
    }

    pub fn is_mosaic(self) -> bool {
        self != CfaLayout::Mono
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaLayout::Rggb => "RGGB",
            CfaLayout::Bggr => "BGGR",
            CfaLayout::Grbg => "GRBG",
            CfaLayout::Gbrg => "GBRG",
            CfaLayout::Mono => "MONO",
        }
    }
}

impl fmt::Display for CfaLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfaLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaLayout::Rggb),
            "BGGR" => Ok(CfaLayout::Bggr),
            "GRBG" => Ok(CfaLayout::Grbg),
            "GBRG" => Ok(CfaLayout::Gbrg),
            "MONO" => Ok(CfaLayout::Mono),
            other => Err(Error::UnsupportedLayout(other.to_string())),
        }
    }
}

/// Acquisition conditions of a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    /// Seconds.
    pub integration_time: f64,
    /// Degrees Celsius.
    pub temperature: f64,
    pub camera_id: String,
    /// Lens identifier, or [`PINHOLE`].
    pub lens_id: String,
    /// Relative scene illumination (0 for dark captures).
    pub illumination: f64,
}

impl Default for CaptureMeta {
    fn default() -> Self {
        CaptureMeta {
            integration_time: 1.0 / 1008.0,
            temperature: 30.0,
            camera_id: String::from("unknown"),
            lens_id: String::from("unknown"),
            illumination: 1.0,
        }
    }
}

impl CaptureMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.integration_time > 0.0) || !self.integration_time.is_finite() {
            return Err(Error::Validation(format!(
                "integration time must be positive, got {}",
                self.integration_time
            )));
        }
        if !self.temperature.is_finite() {
            return Err(Error::Validation("temperature must be finite".into()));
        }
        Ok(())
    }

    pub fn is_pinhole(&self) -> bool {
        self.lens_id == PINHOLE
    }
}

/// A single-channel raw frame with intensities normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pixels: Array2<f64>,
    bit_depth: u32,
    layout: CfaLayout,
    meta: CaptureMeta,
}

impl RasterImage {
    /// Builds an image after checking the pixel range, CFA geometry and metadata.
    pub fn new(pixels: Array2<f64>, bit_depth: u32, layout: CfaLayout, meta: CaptureMeta) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Validation("image must be non-empty".into()));
        }
        if layout.is_mosaic() && (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0) {
            return Err(Error::Validation(format!(
                "{layout} image must have even dimensions >= 2, got {w}x{h}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        meta.validate()?;
        Ok(RasterImage {
            pixels,
            bit_depth,
            layout,
            meta,
        })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn bit_depth(&self) -> u32 {
        self.bit_depth
    }

    pub fn layout(&self) -> CfaLayout {
        self.layout
    }

    pub fn meta(&self) -> &CaptureMeta {
        &self.meta
    }

    pub fn with_meta(mut self, meta: CaptureMeta) -> Result<Self> {
        meta.validate()?;
        self.meta = meta;
        Ok(self)
    }

    /// Same geometry and metadata, new pixel data. Values are checked.
    pub fn with_pixels(&self, pixels: Array2<f64>) -> Result<Self> {
        RasterImage::new(pixels, self.bit_depth, self.layout, self.meta.clone())
    }
}

/// The four Bayer sub-planes of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CfaStack {
    planes: [Array2<f64>; 4],
    layout: CfaLayout,
}

impl CfaStack {
    pub fn new(planes: [Array2<f64>; 4], layout: CfaLayout) -> Result<Self> {
        let dim = planes[0].dim();
        if let Some(c) = CfaChannel::ALL.iter().find(|c| planes[c.index()].dim() != dim) {
            return Err(Error::Validation(format!(
                "plane {c} is {:?}, expected {:?}",
                planes[c.index()].dim(),
                dim
            )));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Validation("CFA planes must be non-empty".into()));
        }
        Ok(CfaStack { planes, layout })
    }

    pub fn plane(&self, channel: CfaChannel) -> &Array2<f64> {
        &self.planes[channel.index()]
    }

    pub fn planes(&self) -> &[Array2<f64>; 4] {
        &self.planes
    }

    pub fn into_planes(self) -> [Array2<f64>; 4] {
        self.planes
    }

    pub fn layout(&self) -> CfaLayout {
        self.layout
    }

    /// `(rows, cols)` of each plane.
    pub fn plane_dim(&self) -> (usize, usize) {
        self.planes[0].dim()
    }

    /// Applies `f` to every plane, keeping the layout tag.
    pub fn try_map<F>(&self, mut f: F) -> Result<CfaStack>
    where
        F: FnMut(CfaChannel, &Array2<f64>) -> Result<Array2<f64>>,
    {
        let [r, g1, g2, b] = &self.planes;
        CfaStack::new(
            [
                f(CfaChannel::R, r)?,
                f(CfaChannel::G1, g1)?,
                f(CfaChannel::G2, g2)?,
                f(CfaChannel::B, b)?,
            ],
            self.layout,
        )
    }
}

/// Sidecar metadata stored next to every `.raw` frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u32,
    pub cfa_layout: CfaLayout,
    pub camera_id: String,
    pub lens_id: String,
    pub integration_time_s: f64,
    pub temperature_c: f64,
    pub illumination: f64,
}

impl RawSidecar {
    pub fn meta(&self) -> CaptureMeta {
        CaptureMeta {
            integration_time: self.integration_time_s,
            temperature: self.temperature_c,
            camera_id: self.camera_id.clone(),
            lens_id: self.lens_id.clone(),
            illumination: self.illumination,
        }
    }

    fn from_image(img: &RasterImage) -> Self {
        let m = img.meta();
        RawSidecar {
            width: img.width(),
            height: img.height(),
            bit_depth: img.bit_depth(),
            cfa_layout: img.layout(),
            camera_id: m.camera_id.clone(),
            lens_id: m.lens_id.clone(),
            integration_time_s: m.integration_time,
            temperature_c: m.temperature,
            illumination: m.illumination,
        }
    }
}

/// `<name>.raw` -> `<name>.meta.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("meta.json")
}

pub fn read_sidecar(raw: &Path) -> Result<Option<RawSidecar>> {
    let path = sidecar_path(raw);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::json(&path, e))
}

fn max_code(bit_depth: u32) -> Result<f64> {
    if !(1..=16).contains(&bit_depth) {
        return Err(Error::Validation(format!("bit depth {bit_depth} not in 1..=16")));
    }
    Ok(((1u32 << bit_depth) - 1) as f64)
}

/// Reads a raw frame, scaling codes by `1 / (2^bit_depth - 1)`.
///
/// Dimensions and metadata come from the sidecar when present; the sidecar's
/// layout and depth must then agree with the declared ones. Without a sidecar
/// the frame must be square.
pub fn load_raw(path: &Path, layout: CfaLayout, bit_depth: u32) -> Result<RasterImage> {
    let max = max_code(bit_depth)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Decode(format!(
            "{}: odd byte count {} for 16-bit samples",
            path.display(),
            bytes.len()
        )));
    }
    let samples: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let sidecar = read_sidecar(path)?;
    let (width, height, meta) = match &sidecar {
        Some(sc) => {
            if sc.cfa_layout != layout {
                return Err(Error::Validation(format!(
                    "declared layout {layout} but sidecar says {}",
                    sc.cfa_layout
                )));
            }
            if sc.bit_depth != bit_depth {
                return Err(Error::Validation(format!(
                    "declared bit depth {bit_depth} but sidecar says {}",
                    sc.bit_depth
                )));
            }
            if sc.width * sc.height != samples.len() {
                return Err(Error::Validation(format!(
                    "sidecar declares {}x{} but file holds {} samples",
                    sc.width,
                    sc.height,
                    samples.len()
                )));
            }
            (sc.width, sc.height, sc.meta())
        }
        None => {
            let side = (samples.len() as f64).sqrt().round() as usize;
            if side * side != samples.len() || side == 0 {
                return Err(Error::Decode(format!(
                    "{}: no sidecar and {} samples is not a square frame",
                    path.display(),
                    samples.len()
                )));
            }
            (side, side, CaptureMeta::default())
        }
    };

    if let Some(code) = samples.iter().find(|&&c| c as f64 > max) {
        return Err(Error::Decode(format!(
            "{}: sample {code} exceeds {bit_depth}-bit range",
            path.display()
        )));
    }
    let pixels = Array2::from_shape_vec((height, width), samples.iter().map(|&c| c as f64 / max).collect())
        .map_err(|e| Error::Decode(e.to_string()))?;
    RasterImage::new(pixels, bit_depth, layout, meta)
}

/// Reads a raw frame taking layout and depth from its sidecar.
pub fn load_raw_auto(path: &Path) -> Result<RasterImage> {
    let sc = read_sidecar(path)?.ok_or_else(|| Error::Ingestion {
        path: sidecar_path(path),
    })?;
    load_raw(path, sc.cfa_layout, sc.bit_depth)
}

/// Writes `img` as a `.raw` + `.meta.json` pair, rounding to the image's bit depth.
pub fn write_raw(img: &RasterImage, path: &Path) -> Result<()> {
    let max = max_code(img.bit_depth())?;
    let mut bytes = Vec::with_capacity(img.width() * img.height() * 2);
    for &v in img.pixels().iter() {
        let code = (v * max).round().clamp(0.0, max) as u16;
        bytes.extend_from_slice(&code.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sc = RawSidecar::from_image(img);
    let sc_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sc).map_err(|e| Error::json(&sc_path, e))?;
    fs::write(&sc_path, text).map_err(|e| Error::io(&sc_path, e))
}

/// A crop rectangle in full-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub offset_x: usize,
    pub offset_y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropWindow {
    /// 1024x1024 window offset 38 pixels from the top-left corner.
    pub const PROTOCOL: CropWindow = CropWindow {
        offset_x: 38,
        offset_y: 38,
        width: 1024,
        height: 1024,
    };
}

/// Extracts the sub-window; CFA images require even offsets and sizes so
/// that the mosaic phase is preserved.
pub fn crop(img: &RasterImage, offset_x: usize, offset_y: usize, w: usize, h: usize) -> Result<RasterImage> {
    if w == 0 || h == 0 || offset_x + w > img.width() || offset_y + h > img.height() {
        return Err(Error::Range(format!(
            "window {w}x{h}+{offset_x}+{offset_y} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    if img.layout().is_mosaic() && (!offset_x.is_multiple_of(2) || !offset_y.is_multiple_of(2) || !w.is_multiple_of(2) || !h.is_multiple_of(2)) {
        return Err(Error::Phase(format!(
            "window {w}x{h}+{offset_x}+{offset_y} breaks the {} mosaic phase",
            img.layout()
        )));
    }
    let pixels = img
        .pixels()
        .slice(s![offset_y..offset_y + h, offset_x..offset_x + w])
        .to_owned();
    Ok(RasterImage {
        pixels,
        bit_depth: img.bit_depth,
        layout: img.layout,
        meta: img.meta.clone(),
    })
}

pub fn crop_window(img: &RasterImage, win: CropWindow) -> Result<RasterImage> {
    crop(img, win.offset_x, win.offset_y, win.width, win.height)
}

/// Separates the mosaic into its four colour planes, each half-size.
pub fn split_cfa(img: &RasterImage) -> Result<CfaStack> {
    let layout = img.layout();
    if !layout.is_mosaic() {
        return Err(Error::UnsupportedLayout(format!("cannot split a {layout} image")));
    }
    let px = img.pixels();
    let plane = |c: CfaChannel| {
        let (dy, dx) = layout.offset(c).expect("mosaic layout");
        px.slice(s![dy..;2, dx..;2]).to_owned()
    };
    CfaStack::new(
        [
            plane(CfaChannel::R),
            plane(CfaChannel::G1),
            plane(CfaChannel::G2),
            plane(CfaChannel::B),
        ],
        layout,
    )
}

/// Interleaves four planes back into a mosaic array. Inverse of [`split_cfa`].
pub fn merge_planes(stack: &CfaStack) -> Result<Array2<f64>> {
    let layout = stack.layout();
    if !layout.is_mosaic() {
        return Err(Error::UnsupportedLayout(format!("cannot merge into {layout}")));
    }
    let (ph, pw) = stack.plane_dim();
    let mut out = Array2::zeros((ph * 2, pw * 2));
    for c in CfaChannel::ALL {
        let (dy, dx) = layout.offset(c).expect("mosaic layout");
        out.slice_mut(s![dy..;2, dx..;2]).assign(stack.plane(c));
    }
    Ok(out)
}

/// Rebuilds a full image from planes produced by [`split_cfa`], carrying the
/// given depth and metadata.
pub fn merge_cfa(stack: &CfaStack, bit_depth: u32, meta: CaptureMeta) -> Result<RasterImage> {
    RasterImage::new(merge_planes(stack)?, bit_depth, stack.layout(), meta)
}

/// Subtracts the sample mean. A second correction pass removes the rounding
/// left by the first so the output mean sits at the f64 noise floor.
pub fn zero_mean(plane: &Array2<f64>) -> Array2<f64> {
    let n = plane.len().max(1) as f64;
    let mean = plane.sum() / n;
    let mut out = plane.mapv(|v| v - mean);
    let drift = out.sum() / n;
    if drift != 0.0 {
        out.mapv_inplace(|v| v - drift);
    }
    out
}

pub(crate) fn mean(a: &Array2<f64>) -> f64 {
    a.sum() / a.len() as f64
}
