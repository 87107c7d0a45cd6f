//! Synthetic sensor, lens and flat-field capture generator.
//!
//! A rendered pixel follows
//!
//! ```text
//! quantize( s (1 + a H) (1 - v) m (1 + K) + D0 2^((T - 30) / d) t + shot + read + flicker + reset )
//! ```
//!
//! clamped to `[0, 1]`, where `K` is the sensor gain map, `D0` the dark-rate
//! map, `H` the lens aberration field, `v` the vignette and `m` the dust mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::stable_hash;
use crate::denoise::extract_residue;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::raster::{mean, write_raw, zero_mean, CaptureMeta, CfaChannel, CfaLayout, RasterImage, PINHOLE};

/// Reference temperature of the dark-rate map, °C.
pub const REFERENCE_TEMPERATURE_C: f64 = 30.0;

/// Lens id given to dark captures.
pub const DARK_LENS: &str = "DARK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSources {
    pub shot: bool,
    /// Quanta collected at full scale; shot variance is `signal / full_well`.
    pub full_well: f64,
    pub read_std: f64,
    /// 0 disables quantization.
    pub adc_bits: u32,
    /// Std of a per-frame global offset.
    pub flicker_amp: f64,
    pub reset_std: f64,
}

impl Default for NoiseSources {
    fn default() -> Self {
        NoiseSources {
            shot: true,
            full_well: 200.0,
            read_std: 0.001,
            adc_bits: 10,
            flicker_amp: 0.0,
            reset_std: 0.0,
        }
    }
}

impl NoiseSources {
    /// Everything off: renders are deterministic patterns.
    pub fn none() -> Self {
        NoiseSources {
            shot: false,
            full_well: 200.0,
            read_std: 0.0,
            adc_bits: 0,
            flicker_amp: 0.0,
            reset_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("full_well", self.full_well),
            ("read_std", self.read_std),
            ("flicker_amp", self.flicker_amp),
            ("reset_std", self.reset_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("noise {name} must be finite and non-negative, got {v}")));
            }
        }
        if self.shot && self.full_well <= 0.0 {
            return Err(Error::Validation("shot noise needs a positive full_well".into()));
        }
        if self.adc_bits > 16 {
            return Err(Error::Validation(format!("adc_bits {} exceeds 16", self.adc_bits)));
        }
        Ok(())
    }

    fn lsb(&self) -> Option<f64> {
        (self.adc_bits > 0).then(|| 1.0 / ((1u32 << self.adc_bits) - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorParams {
    pub prnu_std: f64,
    /// Mean dark rate at the reference temperature, full-scale units per second.
    pub dark_rate_mean: f64,
    /// Spatial std of the dark rate relative to its mean.
    pub dark_rate_rel_std: f64,
    /// Temperature rise (°C) that doubles the dark rate.
    pub dark_doubling_c: f64,
    pub noise: NoiseSources,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            prnu_std: 0.01,
            // 0.2% of full scale at 1/1008 s.
            dark_rate_mean: 2.016,
            dark_rate_rel_std: 0.5,
            dark_doubling_c: 6.0,
            noise: NoiseSources::default(),
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prnu_std", self.prnu_std),
            ("dark_rate_mean", self.dark_rate_mean),
            ("dark_rate_rel_std", self.dark_rate_rel_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("sensor {name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.dark_doubling_c > 0.0) {
            return Err(Error::Validation("dark_doubling_c must be positive".into()));
        }
        self.noise.validate()
    }
}

/// A synthetic sensor: fixed gain and dark-rate maps plus its noise sources.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorProfile {
    pub id: String,
    pub seed: u64,
    pub layout: CfaLayout,
    pub params: SensorParams,
    prnu: Array2<f64>,
    dark_rate: Array2<f64>,
}

impl SensorProfile {
    pub fn generate(
        id: &str,
        seed: u64,
        width: usize,
        height: usize,
        layout: CfaLayout,
        params: &SensorParams,
    ) -> Result<Self> {
        params.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::Validation("sensor dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, params.prnu_std).map_err(|e| Error::Validation(e.to_string()))?;
        let mut prnu = Array2::from_shape_simple_fn((height, width), || normal.sample(&mut rng));
        let m = mean(&prnu);
        prnu.mapv_inplace(|v| v - m);

        let dark_rate = if params.dark_rate_mean == 0.0 {
            Array2::zeros((height, width))
        } else if params.dark_rate_rel_std == 0.0 {
            Array2::from_elem((height, width), params.dark_rate_mean)
        } else {
            let shape = 1.0 / (params.dark_rate_rel_std * params.dark_rate_rel_std);
            let gamma = Gamma::new(shape, params.dark_rate_mean / shape).map_err(|e| Error::Validation(e.to_string()))?;
            Array2::from_shape_simple_fn((height, width), || gamma.sample(&mut rng))
        };

        Ok(SensorProfile {
            id: id.to_string(),
            seed,
            layout,
            params: params.clone(),
            prnu,
            dark_rate,
        })
    }

    pub fn prnu_map(&self) -> &Array2<f64> {
        &self.prnu
    }

    pub fn dark_rate_map(&self) -> &Array2<f64> {
        &self.dark_rate
    }

    pub fn dim(&self) -> (usize, usize) {
        self.prnu.dim()
    }

    /// Dark signal per pixel for one capture.
    pub fn dark_signal(&self, temperature: f64, integration_time: f64) -> Array2<f64> {
        let k = 2f64.powf((temperature - REFERENCE_TEMPERATURE_C) / self.params.dark_doubling_c) * integration_time;
        self.dark_rate.mapv(|d| d * k)
    }

    /// Bit depth recorded on rendered frames.
    pub fn bit_depth(&self) -> u32 {
        match self.params.noise.adc_bits {
            0 => 16,
            b => b,
        }
    }
}

/// Occluding dust particle; centre and radius in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DustDisk {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LensParams {
    pub aberration_amp: f64,
    /// Relative falloff at the frame corners.
    pub vignette_strength: f64,
    /// Radius of the box blur subtracted from white noise to form the aberration field.
    pub highpass_radius: usize,
}

impl Default for LensParams {
    fn default() -> Self {
        LensParams {
            aberration_amp: 0.005,
            vignette_strength: 0.02,
            highpass_radius: 2,
        }
    }
}

impl LensParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.aberration_amp >= 0.0) || !(0.0..1.0).contains(&self.vignette_strength) {
            return Err(Error::Validation(format!(
                "lens needs aberration_amp >= 0 and vignette_strength in [0, 1), got {} and {}",
                self.aberration_amp, self.vignette_strength
            )));
        }
        if self.highpass_radius == 0 {
            return Err(Error::Validation("highpass_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// A synthetic lens: aberration field, vignette and dust mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LensProfile {
    pub id: String,
    pub seed: u64,
    pub aberration_amp: f64,
    pub dust: Vec<DustDisk>,
    field: Array2<f64>,
    vignette: Array2<f64>,
    dust_mask: Array2<f64>,
}

impl LensProfile {
    pub fn generate(
        id: &str,
        seed: u64,
        width: usize,
        height: usize,
        params: &LensParams,
        dust: &[DustDisk],
    ) -> Result<Self> {
        params.validate()?;
        for d in dust {
            if !(0.0..=1.0).contains(&d.opacity) || !(d.radius >= 0.0) {
                return Err(Error::Validation(format!("invalid dust disk {d:?}")));
            }
        }
        let pinhole = id == PINHOLE;
        if pinhole && !dust.is_empty() {
            return Err(Error::Validation("a pinhole lens carries no dust".into()));
        }
        let aberration_amp = if pinhole { 0.0 } else { params.aberration_amp };
        Ok(LensProfile {
            id: id.to_string(),
            seed,
            aberration_amp,
            dust: dust.to_vec(),
            field: aberration_field(seed, width, height, params.highpass_radius),
            vignette: vignette(width, height, params.vignette_strength),
            dust_mask: dust_mask(width, height, dust),
        })
    }

    /// Pinhole optic: no aberration, no dust, same vignette geometry.
    pub fn pinhole(seed: u64, width: usize, height: usize, params: &LensParams) -> Result<Self> {
        LensProfile::generate(PINHOLE, seed, width, height, params, &[])
    }

    /// Capped optic for dark captures.
    pub fn lens_cap(width: usize, height: usize) -> Self {
        LensProfile {
            id: DARK_LENS.to_string(),
            seed: 0,
            aberration_amp: 0.0,
            dust: Vec::new(),
            field: Array2::zeros((height, width)),
            vignette: Array2::ones((height, width)),
            dust_mask: Array2::ones((height, width)),
        }
    }

    pub fn is_pinhole(&self) -> bool {
        self.id == PINHOLE
    }

    /// Zero-mean, unit-variance high-pass field `H`.
    pub fn aberration_field(&self) -> &Array2<f64> {
        &self.field
    }

    /// Transmission `1 - v`.
    pub fn vignette(&self) -> &Array2<f64> {
        &self.vignette
    }

    pub fn dust_mask(&self) -> &Array2<f64> {
        &self.dust_mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.field.dim()
    }

    /// Noiseless optical transmission `(1 + a H) (1 - v) m`.
    pub fn transmission(&self) -> Array2<f64> {
        let mut t = self.field.mapv(|h| 1.0 + self.aberration_amp * h);
        t *= &self.vignette;
        t *= &self.dust_mask;
        t
    }
}

/// White noise minus its periodic box blur, normalised to zero mean and unit variance.
fn aberration_field(seed: u64, width: usize, height: usize, radius: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = Array2::from_shape_simple_fn((height, width), || rng.sample::<f64, _>(StandardNormal));
    let blurred = box_blur_periodic(&white, radius);
    let mut h = white - blurred;
    let m = mean(&h);
    h.mapv_inplace(|v| v - m);
    let sd = (h.mapv(|v| v * v).sum() / h.len() as f64).sqrt();
    if sd > 0.0 {
        h.mapv_inplace(|v| v / sd);
    }
    h
}

fn box_blur_periodic(a: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let r = radius as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = (-r..=r).map(|d| a[[y, wrap(x as isize + d, w)]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((h, w));
    let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = (-r..=r).map(|d| rows[[wrap(y as isize + d, h), x]]).sum::<f64>() / n;
        }
    }
    out
}

/// Radial quadratic falloff, `strength` at the corners.
fn vignette(width: usize, height: usize, strength: f64) -> Array2<f64> {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let r2max = (cx * cx + cy * cy).max(f64::MIN_POSITIVE);
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        1.0 - strength * (dx * dx + dy * dy) / r2max
    })
}

fn dust_mask(width: usize, height: usize, dust: &[DustDisk]) -> Array2<f64> {
    Array2::from_shape_fn((height, width), |(y, x)| {
        dust.iter().fold(1.0, |m, d| {
            let (dx, dy) = (x as f64 - d.center_x, y as f64 - d.center_y);
            if dx * dx + dy * dy <= d.radius * d.radius {
                m * (1.0 - d.opacity)
            } else {
                m
            }
        })
    })
}

/// One capture of a flat field (or of darkness when `scene` is 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureRequest {
    pub scene: f64,
    pub integration_time: f64,
    pub temperature: f64,
    pub frame_seed: u64,
}

impl Default for CaptureRequest {
    fn default() -> Self {
        CaptureRequest {
            scene: 0.6,
            integration_time: 1.0 / 1008.0,
            temperature: REFERENCE_TEMPERATURE_C,
            frame_seed: 0,
        }
    }
}

impl CaptureRequest {
    pub fn dark(self) -> Self {
        CaptureRequest { scene: 0.0, ..self }
    }

    pub fn with_seed(self, frame_seed: u64) -> Self {
        CaptureRequest { frame_seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.scene) {
            return Err(Error::Validation(format!("scene level {} outside [0, 1]", self.scene)));
        }
        if !(self.integration_time > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Validation("capture needs positive integration time and finite temperature".into()));
        }
        Ok(())
    }
}

fn frame_rng(sensor_seed: u64, frame_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sensor_seed);
    rng.set_stream(frame_seed);
    rng
}

/// Photo-generated signal before noise: `s (1 + a H) (1 - v) m (1 + K)`.
pub fn photo_signal(sensor: &SensorProfile, lens: &LensProfile, scene: f64) -> Array2<f64> {
    let mut p = lens.transmission();
    Zip::from(&mut p)
        .and(sensor.prnu_map())
        .for_each(|p, &k| *p = scene * *p * (1.0 + k));
    p
}

/// Renders one raw frame.
pub fn render_frame(sensor: &SensorProfile, lens: &LensProfile, req: &CaptureRequest) -> Result<RasterImage> {
    req.validate()?;
    if sensor.dim() != lens.dim() {
        return Err(Error::Shape(format!(
            "sensor is {:?} but lens field is {:?}",
            sensor.dim(),
            lens.dim()
        )));
    }
    let noise = &sensor.params.noise;
    let photo = photo_signal(sensor, lens, req.scene);
    let dark = sensor.dark_signal(req.temperature, req.integration_time);
    let mut rng = frame_rng(sensor.seed, req.frame_seed);
    let flicker = if noise.flicker_amp > 0.0 {
        noise.flicker_amp * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let lsb = noise.lsb();

    let mut pixels = Array2::zeros(photo.dim());
    Zip::from(&mut pixels)
        .and(&photo)
        .and(&dark)
        .for_each(|out, &p, &d| {
            let mut v = if noise.shot && p > 0.0 {
                let lambda = noise.full_well * p;
                let count: f64 = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
                count / noise.full_well
            } else {
                p
            };
            v += d + flicker;
            if noise.read_std > 0.0 {
                v += noise.read_std * rng.sample::<f64, _>(StandardNormal);
            }
            if noise.reset_std > 0.0 {
                v += noise.reset_std * rng.sample::<f64, _>(StandardNormal);
            }
            v = v.clamp(0.0, 1.0);
            // Same code/max form the raw loader decodes, so frames round-trip exactly.
            if let Some(q) = lsb {
                let max = q.recip().round();
                v = (v * max).round() / max;
            }
            *out = v.min(1.0);
        });

    RasterImage::new(
        pixels,
        sensor.bit_depth(),
        sensor.layout,
        CaptureMeta {
            integration_time: req.integration_time,
            temperature: req.temperature,
            camera_id: sensor.id.clone(),
            lens_id: if req.scene == 0.0 { DARK_LENS.to_string() } else { lens.id.clone() },
            illumination: req.scene,
        },
    )
}

/// Mean per-pixel variance of the frame-to-frame noise for a capture.
///
/// The flicker term is a global offset and does not reach the residue, so it is left out.
pub fn expected_noise_variance(sensor: &SensorProfile, lens: &LensProfile, req: &CaptureRequest) -> f64 {
    let n = &sensor.params.noise;
    let shot = if n.shot {
        mean(&photo_signal(sensor, lens, req.scene)) / n.full_well
    } else {
        0.0
    };
    let quant = n.lsb().map_or(0.0, |q| q * q / 12.0);
    shot + n.read_std * n.read_std + n.reset_std * n.reset_std + quant
}

/// Correlation energies the pipeline should measure for one camera and lens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedEnergies {
    pub prnu: f64,
    pub fpn: f64,
    pub los: f64,
    pub spn: f64,
    pub extended_fingerprint: f64,
    /// Residue power of the gain, dark and lens patterns.
    pub prnu_power: f64,
    pub fpn_power: f64,
    pub los_power: f64,
    /// Residue power of the frame-to-frame noise.
    pub noise_power: f64,
    pub reference_count: usize,
}

/// Mean residue power over the four CFA planes of a noiseless full-frame pattern.
fn residue_power(pattern: &Array2<f64>, layout: CfaLayout, cfg: &PipelineConfig) -> Result<f64> {
    let view = match cfg.crop {
        Some(c) => {
            let (h, w) = pattern.dim();
            if c.offset_x + c.width > w || c.offset_y + c.height > h {
                return Err(Error::Range(format!("crop {c:?} exceeds {w}x{h} pattern")));
            }
            pattern.slice(s![c.offset_y..c.offset_y + c.height, c.offset_x..c.offset_x + c.width])
        }
        None => pattern.view(),
    };
    let mut total = 0.0;
    for ch in CfaChannel::ALL {
        let (r0, c0) = layout
            .offset(ch)
            .ok_or_else(|| Error::UnsupportedLayout(layout.to_string()))?;
        let plane = zero_mean(&view.slice(s![r0..;2, c0..;2]).to_owned());
        let res = extract_residue(&plane, &cfg.denoise)?.residue;
        total += res.mapv(|v| v * v).sum() / res.len() as f64;
    }
    Ok(total / 4.0)
}

/// Ground-truth correlation energies for references of `reference_count`
/// frames matched against single frames of the same camera and lens.
///
/// Each fixed pattern (gain, dark, lens) is passed through the residue filter
/// without noise; its power is normalised by the expected correlation
/// denominator `sqrt((S + n)(S + n / N))`, with `S` the total pattern power
/// and `n` the filtered noise power.
pub fn ground_truth_energies(
    sensor: &SensorProfile,
    lens: &LensProfile,
    req: &CaptureRequest,
    cfg: &PipelineConfig,
    reference_count: usize,
) -> Result<ExpectedEnergies> {
    if reference_count == 0 {
        return Err(Error::Validation("reference_count must be positive".into()));
    }
    if sensor.dim() != lens.dim() {
        return Err(Error::Shape("sensor and lens dimensions differ".into()));
    }
    let s = req.scene;
    let base = &lens.vignette * s;
    let prnu_pattern = &base * sensor.prnu_map();
    let mut los_pattern = lens.transmission() * s - &base;
    los_pattern *= &sensor.prnu_map().mapv(|k| 1.0 + k);
    let dark_pattern = sensor.dark_signal(req.temperature, req.integration_time);

    let prnu_power = residue_power(&prnu_pattern, sensor.layout, cfg)?;
    let los_power = if lens.aberration_amp == 0.0 && lens.dust.is_empty() {
        0.0
    } else {
        residue_power(&los_pattern, sensor.layout, cfg)?
    };
    let fpn_power = residue_power(&dark_pattern, sensor.layout, cfg)?;
    let levels = cfg.denoise.wavelet_levels as i32;
    let noise_power = expected_noise_variance(sensor, lens, req) * (1.0 - 4f64.powi(-levels));

    let signal = prnu_power + fpn_power + los_power;
    let z = ((signal + noise_power) * (signal + noise_power / reference_count as f64)).sqrt();
    let (prnu, fpn, los) = if z > 0.0 {
        (prnu_power / z, fpn_power / z, los_power / z)
    } else {
        (0.0, 0.0, 0.0)
    };
    Ok(ExpectedEnergies {
        prnu,
        fpn,
        los,
        spn: prnu + fpn,
        extended_fingerprint: prnu + fpn + los,
        prnu_power,
        fpn_power,
        los_power,
        noise_power,
        reference_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A lens in a scenario; the id [`PINHOLE`] designates the pinhole optic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dust: Vec<DustDisk>,
}

/// Description of a synthetic capture campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub width: usize,
    #[serde(default = "default_dim")]
    pub height: usize,
    #[serde(default)]
    pub cfa_layout: CfaLayout,
    pub frames_per_set: usize,
    #[serde(default)]
    pub darks_per_camera: usize,
    #[serde(default = "default_scene")]
    pub scene_level: f64,
    #[serde(default = "default_temperature")]
    pub temperature_c: f64,
    #[serde(default = "default_integration")]
    pub integration_time_s: f64,
    pub cameras: Vec<CameraEntry>,
    pub lenses: Vec<LensEntry>,
    #[serde(default)]
    pub sensor: SensorParams,
    #[serde(default)]
    pub lens: LensParams,
}

fn default_dim() -> usize {
    256
}
fn default_scene() -> f64 {
    0.6
}
fn default_temperature() -> f64 {
    REFERENCE_TEMPERATURE_C
}
fn default_integration() -> f64 {
    1.0 / 1008.0
}

fn derive_seed(base: u64, tag: &str, id: &str) -> u64 {
    stable_hash(&(base, tag, id))
}

impl Scenario {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.lenses.is_empty() || self.frames_per_set == 0 {
            return Err(Error::Validation(
                "empty scenario: needs cameras, lenses and frames_per_set > 0".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for id in self.cameras.iter().map(|c| &c.id) {
            if id.is_empty() || !seen.insert(("camera", id.as_str())) {
                return Err(Error::Validation(format!("camera id `{id}` empty or repeated")));
            }
        }
        for id in self.lenses.iter().map(|l| &l.id) {
            if id.is_empty() || id == DARK_LENS || !seen.insert(("lens", id.as_str())) {
                return Err(Error::Validation(format!("lens id `{id}` empty, reserved or repeated")));
            }
        }
        if self.cfa_layout.is_mosaic() && (!self.width.is_multiple_of(2) || !self.height.is_multiple_of(2)) {
            return Err(Error::Validation("mosaic frames need even dimensions".into()));
        }
        self.request(0).validate()?;
        self.sensor.validate()?;
        self.lens.validate()
    }

    /// Fills in every omitted camera and lens seed.
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        for c in &mut s.cameras {
            c.seed.get_or_insert_with(|| derive_seed(self.seed, "camera", &c.id));
        }
        for l in &mut s.lenses {
            l.seed.get_or_insert_with(|| derive_seed(self.seed, "lens", &l.id));
        }
        s
    }

    pub fn request(&self, frame_seed: u64) -> CaptureRequest {
        CaptureRequest {
            scene: self.scene_level,
            integration_time: self.integration_time_s,
            temperature: self.temperature_c,
            frame_seed,
        }
    }

    pub fn sensor_profile(&self, camera_id: &str) -> Result<SensorProfile> {
        let c = self
            .cameras
            .iter()
            .find(|c| c.id == camera_id)
            .ok_or_else(|| Error::Validation(format!("unknown camera `{camera_id}`")))?;
        let seed = c.seed.unwrap_or_else(|| derive_seed(self.seed, "camera", &c.id));
        SensorProfile::generate(&c.id, seed, self.width, self.height, self.cfa_layout, &self.sensor)
    }

    pub fn lens_profile(&self, lens_id: &str) -> Result<LensProfile> {
        let l = self
            .lenses
            .iter()
            .find(|l| l.id == lens_id)
            .ok_or_else(|| Error::Validation(format!("unknown lens `{lens_id}`")))?;
        let seed = l.seed.unwrap_or_else(|| derive_seed(self.seed, "lens", &l.id));
        LensProfile::generate(&l.id, seed, self.width, self.height, &self.lens, &l.dust)
    }

    /// Light frames plus dark frames this scenario renders.
    pub fn frame_count(&self) -> usize {
        self.cameras.len() * (self.lenses.len() * self.frames_per_set + self.darks_per_camera)
    }

    /// Frame ids, seeds and profile bindings in rendering order.
    pub fn frame_entries(&self) -> Vec<FrameEntry> {
        let mut out = Vec::with_capacity(self.frame_count());
        for cam in &self.cameras {
            for lens in &self.lenses {
                for i in 0..self.frames_per_set {
                    let id = format!("{}_{}_{i:04}", cam.id, lens.id);
                    out.push(FrameEntry {
                        frame_seed: derive_seed(self.seed, "frame", &id),
                        file: format!("frames/{id}.raw"),
                        id,
                        camera_id: cam.id.clone(),
                        lens_id: lens.id.clone(),
                        kind: FrameKind::Light,
                    });
                }
            }
            for i in 0..self.darks_per_camera {
                let id = format!("{}_{DARK_LENS}_{i:04}", cam.id);
                out.push(FrameEntry {
                    frame_seed: derive_seed(self.seed, "frame", &id),
                    file: format!("frames/{id}.raw"),
                    id,
                    camera_id: cam.id.clone(),
                    lens_id: DARK_LENS.to_string(),
                    kind: FrameKind::Dark,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Light,
    Dark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: String,
    pub camera_id: String,
    pub lens_id: String,
    pub kind: FrameKind,
    pub frame_seed: u64,
}

/// Index of a rendered dataset, binding each file to its generating profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Scenario with every seed resolved.
    pub scenario: Scenario,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Ingestion { path: path.to_path_buf() });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Light frames grouped by (camera, lens).
    pub fn light_sets(&self) -> BTreeMap<(String, String), Vec<&FrameEntry>> {
        let mut m: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for f in self.frames.iter().filter(|f| f.kind == FrameKind::Light) {
            m.entry((f.camera_id.clone(), f.lens_id.clone())).or_default().push(f);
        }
        m
    }

    /// Dark frames grouped by camera.
    pub fn dark_sets(&self) -> BTreeMap<String, Vec<&FrameEntry>> {
        let mut m: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for f in self.frames.iter().filter(|f| f.kind == FrameKind::Dark) {
            m.entry(f.camera_id.clone()).or_default().push(f);
        }
        m
    }
}

/// Renders every frame of `scenario` into `out_dir` and writes `manifest.json` there.
pub fn render_dataset(scenario: &Scenario, out_dir: &Path) -> Result<DatasetManifest> {
    scenario.validate()?;
    let scenario = scenario.resolved();
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let sensors: BTreeMap<String, SensorProfile> = scenario
        .cameras
        .iter()
        .map(|c| Ok((c.id.clone(), scenario.sensor_profile(&c.id)?)))
        .collect::<Result<_>>()?;
    let mut lenses: BTreeMap<String, LensProfile> = scenario
        .lenses
        .iter()
        .map(|l| Ok((l.id.clone(), scenario.lens_profile(&l.id)?)))
        .collect::<Result<_>>()?;
    lenses.insert(DARK_LENS.to_string(), LensProfile::lens_cap(scenario.width, scenario.height));

    let entries = scenario.frame_entries();
    entries.par_iter().try_for_each(|e| {
        let mut req = scenario.request(e.frame_seed);
        if e.kind == FrameKind::Dark {
            req = req.dark();
        }
        let img = render_frame(&sensors[&e.camera_id], &lenses[&e.lens_id], &req)?;
        write_raw(&img, &out_dir.join(&e.file))
    })?;

    let manifest = DatasetManifest {
        scenario,
        frames: entries,
    };
    manifest.write(&out_dir.join(DatasetManifest::FILE_NAME))?;
    log::info!("rendered {} frames into {}", manifest.frames.len(), out_dir.display());
    Ok(manifest)
}

/// Path of a manifest entry's raw file.
pub fn frame_path(manifest_dir: &Path, entry: &FrameEntry) -> PathBuf {
    manifest_dir.join(&entry.file)
}
