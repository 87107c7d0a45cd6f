//! Noise-residue extraction by wavelet coring.
//!
//! Each plane is cut into square blocks laid at half-block stride. Every block
//! is decomposed, its detail coefficients are split into a signal estimate
//! (locally adaptive Wiener shrinkage) and a noise part, and the noise part is
//! synthesised back without the approximation band. Only the central half of
//! each block is kept, except where a block touches the plane border, so the
//! retained regions tile the plane exactly once and wrap-around artefacts from
//! the periodic transform stay out of the interior.

pub mod wavelet;

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{stable_hash, Container, ContainerKind};
use crate::error::{Error, Result};
use crate::raster::{self, CaptureMeta, CfaChannel, CfaStack, CfaLayout};

pub use wavelet::{wavelet_decompose, wavelet_reconstruct, DetailBands, Pyramid};

/// Parameters of the residue filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    /// Square block edge in pixels. Must be divisible by 4.
    pub block_size: usize,
    pub wavelet_levels: usize,
    /// Noise-floor variance in normalised intensity units.
    pub sigma0_sq: f64,
    /// Odd square window edges for the local variance estimate.
    pub variance_windows: Vec<usize>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            block_size: 128,
            wavelet_levels: 4,
            sigma0_sq: (3.0f64 / 255.0).powi(2),
            variance_windows: vec![3, 5, 7, 9],
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || !self.block_size.is_multiple_of(4) {
            return Err(Error::Validation(format!(
                "block size {} must be a positive multiple of 4",
                self.block_size
            )));
        }
        if self.wavelet_levels == 0
            || self.wavelet_levels >= usize::BITS as usize
            || self.block_size < (1 << self.wavelet_levels)
            || !self.block_size.is_multiple_of(1 << self.wavelet_levels)
        {
            return Err(Error::Validation(format!(
                "{} wavelet levels do not fit a {} block",
                self.wavelet_levels, self.block_size
            )));
        }
        if !(self.sigma0_sq >= 0.0) || !self.sigma0_sq.is_finite() {
            return Err(Error::Validation(format!("sigma0_sq {} must be finite and >= 0", self.sigma0_sq)));
        }
        if self.variance_windows.is_empty() || self.variance_windows.iter().any(|w| w % 2 == 0) {
            return Err(Error::Validation(format!(
                "variance windows {:?} must be a non-empty list of odd sizes",
                self.variance_windows
            )));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration, stored in every output file.
    pub fn hash(&self) -> u64 {
        stable_hash(self)
    }

    pub fn stride(&self) -> usize {
        self.block_size / 2
    }
}

/// Noise residue of one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseResidue {
    pub residue: Array2<f64>,
    pub config_hash: u64,
    pub meta: Option<CaptureMeta>,
}

/// Locally adaptive Wiener shrinkage of one detail subband.
///
/// The local signal variance is `max(0, min_w(E_w[d^2]) - sigma0_sq)` where
/// `E_w` averages over a `w x w` window clipped to the subband. The output is
/// `d * var / (var + sigma0_sq)`.
pub fn core_subband(detail: &Array2<f64>, sigma0_sq: f64, windows: &[usize]) -> Array2<f64> {
    let (h, w) = detail.dim();
    // Summed-area table of squared coefficients with a zero border row/column.
    let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut run = 0.0;
        for c in 0..w {
            run += detail[[r, c]] * detail[[r, c]];
            sat[[r + 1, c + 1]] = sat[[r, c + 1]] + run;
        }
    }
    let local_moment = |r: usize, c: usize, win: usize| {
        let half = win / 2;
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(h));
        let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(w));
        let sum = sat[[r1, c1]] - sat[[r0, c1]] - sat[[r1, c0]] + sat[[r0, c0]];
        (sum / ((r1 - r0) * (c1 - c0)) as f64).max(0.0)
    };

    Array2::from_shape_fn((h, w), |(r, c)| {
        let d = detail[[r, c]];
        if d == 0.0 {
            return 0.0;
        }
        let min_moment = windows
            .iter()
            .map(|&win| local_moment(r, c, win))
            .fold(f64::INFINITY, f64::min);
        let var = (min_moment - sigma0_sq).max(0.0);
        let denom = var + sigma0_sq;
        if denom > 0.0 {
            d * var / denom
        } else {
            0.0
        }
    })
}

/// Splits a block into (denoised estimate, noise residue).
///
/// `estimate` keeps the approximation band and the cored details;
/// `residue` is synthesised from the removed detail content alone.
pub fn denoise_block_parts(block: &Array2<f64>, cfg: &DenoiseConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = block.dim();
    if h != cfg.block_size || w != cfg.block_size {
        return Err(Error::Shape(format!(
            "block is {w}x{h}, configured size is {}",
            cfg.block_size
        )));
    }
    let mut signal = wavelet_decompose(block, cfg.wavelet_levels)?;
    let mut noise = signal.clone();
    for (sig_level, noise_level) in signal.details.iter_mut().zip(noise.details.iter_mut()) {
        for (sig, nse) in sig_level.iter_mut().zip(noise_level.iter_mut()) {
            let cored = core_subband(sig, cfg.sigma0_sq, &cfg.variance_windows);
            *nse = &*sig - &cored;
            *sig = cored;
        }
    }
    wavelet::drop_approximation(&mut noise);
    Ok((wavelet_reconstruct(&signal), wavelet_reconstruct(&noise)))
}

/// Noise residue of a single block.
pub fn denoise_block(block: &Array2<f64>, cfg: &DenoiseConfig) -> Result<Array2<f64>> {
    denoise_block_parts(block, cfg).map(|(_, residue)| residue)
}

/// One filtering pass: the block origin and the plane region it contributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPass {
    pub row: usize,
    pub col: usize,
    pub keep_rows: Range<usize>,
    pub keep_cols: Range<usize>,
}

/// `(start, kept range)` along one axis.
fn axis_passes(len: usize, block: usize) -> Vec<(usize, Range<usize>)> {
    let stride = block / 2;
    let quarter = block / 4;
    let last = len - block;
    (0..=last)
        .step_by(stride)
        .map(|start| {
            let lo = if start == 0 { 0 } else { start + quarter };
            let hi = if start == last { len } else { start + block - quarter };
            (start, lo..hi)
        })
        .collect()
}

/// Every block pass for a `height x width` plane, row-major.
pub fn block_schedule(height: usize, width: usize, block: usize) -> Result<Vec<BlockPass>> {
    let stride = block / 2;
    if block == 0 || height < block || width < block || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "plane {width}x{height} does not fit block {block} at stride {stride}"
        )));
    }
    let rows = axis_passes(height, block);
    let cols = axis_passes(width, block);
    Ok(rows
        .iter()
        .flat_map(|(r, kr)| {
            cols.iter().map(move |(c, kc)| BlockPass {
                row: *r,
                col: *c,
                keep_rows: kr.clone(),
                keep_cols: kc.clone(),
            })
        })
        .collect())
}

/// Extracts the noise residue of a (zero-mean) plane using overlapping blocks.
pub fn extract_residue(plane: &Array2<f64>, cfg: &DenoiseConfig) -> Result<NoiseResidue> {
    cfg.validate()?;
    let (h, w) = plane.dim();
    let passes = block_schedule(h, w, cfg.block_size)?;
    let b = cfg.block_size;

    let blocks: Vec<Array2<f64>> = passes
        .par_iter()
        .map(|p| {
            let block = plane.slice(s![p.row..p.row + b, p.col..p.col + b]).to_owned();
            denoise_block(&block, cfg)
        })
        .collect::<Result<_>>()?;

    let mut out = Array2::zeros((h, w));
    for (p, res) in passes.iter().zip(&blocks) {
        let local = s![
            p.keep_rows.start - p.row..p.keep_rows.end - p.row,
            p.keep_cols.start - p.col..p.keep_cols.end - p.col
        ];
        out.slice_mut(s![p.keep_rows.clone(), p.keep_cols.clone()])
            .assign(&res.slice(local));
    }
    Ok(NoiseResidue {
        residue: raster::zero_mean(&out),
        config_hash: cfg.hash(),
        meta: None,
    })
}

/// Residue of every CFA plane of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResidue {
    pub image_id: String,
    pub stack: CfaStack,
    pub config_hash: u64,
    pub meta: CaptureMeta,
}

#[derive(Serialize, Deserialize)]
struct ResidueHeader {
    image_id: String,
    cfa_layout: CfaLayout,
    meta: CaptureMeta,
}

impl FrameResidue {
    pub fn to_container(&self) -> Container {
        let header = ResidueHeader {
            image_id: self.image_id.clone(),
            cfa_layout: self.stack.layout(),
            meta: self.meta.clone(),
        };
        Container {
            kind: ContainerKind::Residue,
            config_hash: self.config_hash,
            meta: serde_json::to_value(header).expect("header serialises"),
            planes: self.stack.planes().to_vec(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind(ContainerKind::Residue)?;
        let header: ResidueHeader =
            serde_json::from_value(c.meta).map_err(|e| Error::Decode(format!("residue header: {e}")))?;
        let planes: [Array2<f64>; 4] = c
            .planes
            .try_into()
            .map_err(|p: Vec<_>| Error::Decode(format!("residue file holds {} planes, expected 4", p.len())))?;
        Ok(FrameResidue {
            image_id: header.image_id,
            stack: CfaStack::new(planes, header.cfa_layout)?,
            config_hash: c.config_hash,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        FrameResidue::from_container(Container::read(path)?)
    }

    pub fn plane(&self, c: CfaChannel) -> &Array2<f64> {
        self.stack.plane(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(seed: u64, h: usize, w: usize, sd: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sd).unwrap();
        Array2::from_shape_fn((h, w), |_| n.sample(&mut rng))
    }

    fn small_cfg() -> DenoiseConfig {
        DenoiseConfig {
            block_size: 32,
            wavelet_levels: 3,
            ..DenoiseConfig::default()
        }
    }

    fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let (ma, mb) = (raster::mean(a), raster::mean(b));
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn config_validation() {
        assert!(DenoiseConfig::default().validate().is_ok());
        let bad = [
            DenoiseConfig { block_size: 30, ..DenoiseConfig::default() },
            DenoiseConfig { wavelet_levels: 0, ..DenoiseConfig::default() },
            DenoiseConfig { block_size: 8, wavelet_levels: 4, ..DenoiseConfig::default() },
            DenoiseConfig { sigma0_sq: -1.0, ..DenoiseConfig::default() },
            DenoiseConfig { variance_windows: vec![3, 4], ..DenoiseConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert_ne!(DenoiseConfig::default().hash(), small_cfg().hash());
        assert_eq!(DenoiseConfig::default().hash(), DenoiseConfig::default().hash());
    }

    #[test]
    fn core_zero_and_large_texture() {
        let z = Array2::zeros((8, 8));
        assert!(core_subband(&z, 0.01, &[3, 5]).iter().all(|&v| v == 0.0));

        let big = Array2::from_shape_fn((16, 16), |(r, c)| if (r + c) % 2 == 0 { 10.0 } else { -10.0 });
        let cored = core_subband(&big, 1e-4, &[3, 5, 7, 9]);
        for (a, b) in big.iter().zip(cored.iter()) {
            assert!((a - b).abs() / a.abs() < 1e-5);
        }
    }

    #[test]
    fn core_scalar_oracle() {
        let s0 = 0.04;
        for d in [0.1f64, 0.3, 1.0, -0.5] {
            let block = Array2::from_elem((3, 3), d);
            let out = core_subband(&block, s0, &[3]);
            let var = (d * d - s0).max(0.0);
            let expect = d * var / (var + s0);
            assert!((out[[1, 1]] - expect).abs() < 1e-15, "d={d}");
        }
    }

    #[test]
    fn constant_block_and_plane_give_zero() {
        let cfg = small_cfg();
        let r = denoise_block(&Array2::from_elem((32, 32), 0.42), &cfg).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        let plane = extract_residue(&Array2::from_elem((64, 96), -0.1), &cfg).unwrap();
        assert!(plane.residue.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimate_plus_residue_is_block() {
        let cfg = small_cfg();
        let block = noise(3, 32, 32, 0.02) + &Array2::from_shape_fn((32, 32), |(r, _)| r as f64 * 0.01);
        let (est, res) = denoise_block_parts(&block, &cfg).unwrap();
        let err = ((&est + &res) - &block).mapv(|v| v * v).sum() / block.len() as f64;
        assert!(err.sqrt() < 1e-9);
    }

    #[test]
    fn residue_tracks_injected_noise() {
        let cfg = DenoiseConfig::default();
        let ramp = Array2::from_shape_fn((128, 128), |(r, c)| (r + c) as f64 / 512.0);
        let injected = noise(9, 128, 128, 3.0 / 255.0);
        let res = denoise_block(&(&ramp + &injected), &cfg).unwrap();
        let r = pearson(&res, &injected);
        assert!(r > 0.5, "corr {r}");
    }

    #[test]
    fn signal_dominated_scaling() {
        // With local variance far above sigma0^2 the estimate is close to the
        // input, so it doubles with the input while the residue
        // d * sigma0^2 / (var + sigma0^2) halves.
        let cfg = DenoiseConfig { sigma0_sq: 1e-8, ..DenoiseConfig::default() };
        let x = noise(4, 128, 128, 0.2);
        let (e1, r1) = denoise_block_parts(&x, &cfg).unwrap();
        let (e2, r2) = denoise_block_parts(&(&x * 2.0), &cfg).unwrap();
        let norm = |a: &Array2<f64>| a.mapv(|v| v * v).sum().sqrt();
        let est_ratio = norm(&e2) / norm(&e1);
        let res_ratio = norm(&r2) / norm(&r1);
        assert!((est_ratio - 2.0).abs() < 0.02, "estimate ratio {est_ratio}");
        assert!((res_ratio - 0.5).abs() < 0.02, "residue ratio {res_ratio}");
    }

    #[test]
    fn schedule_counts_and_coverage() {
        let passes = block_schedule(256, 256, 128).unwrap();
        assert_eq!(passes.len(), 9);
        let passes = block_schedule(192, 320, 64).unwrap();
        assert_eq!(passes.len(), 5 * 9);
        let mut mask = Array2::<u32>::zeros((192, 320));
        for p in &passes {
            mask.slice_mut(s![p.keep_rows.clone(), p.keep_cols.clone()])
                .mapv_inplace(|v| v + 1);
        }
        assert!(mask.iter().all(|&v| v == 1));
        assert_eq!(mask.sum(), 192 * 320);
        assert!(block_schedule(100, 128, 128).is_err());
        assert!(block_schedule(192, 160, 128).is_err());
        assert_eq!(block_schedule(128, 128, 128).unwrap().len(), 1);
    }

    #[test]
    fn seam_band_variance_matches_interior() {
        let cfg = DenoiseConfig::default();
        let plane = noise(21, 512, 512, 3.0 / 255.0);
        let res = extract_residue(&plane, &cfg).unwrap().residue;
        let seams: Vec<usize> = block_schedule(512, 512, cfg.block_size)
            .unwrap()
            .iter()
            .map(|p| p.keep_rows.start)
            .filter(|&r| r > 0)
            .collect();
        let near = |i: usize| seams.iter().any(|&s| i + 2 >= s && i < s + 2);
        let (mut band, mut inner) = (Vec::new(), Vec::new());
        for ((r, c), &v) in res.indexed_iter() {
            if near(r) || near(c) {
                band.push(v);
            } else {
                inner.push(v);
            }
        }
        let var = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
        };
        let ratio = var(&band) / var(&inner);
        assert!((ratio - 1.0).abs() < 0.1, "seam/interior variance ratio {ratio}");
    }

    proptest::proptest! {
        #[test]
        fn coring_never_expands(seed in 0u64..1000, sd in 1e-4f64..0.5, s0 in 1e-6f64..1e-2) {
            let d = noise(seed, 16, 16, sd);
            let cored = core_subband(&d, s0, &[3, 5, 7, 9]);
            for (a, b) in cored.iter().zip(d.iter()) {
                proptest::prop_assert!(a.abs() <= b.abs());
                proptest::prop_assert!(a * b >= 0.0);
            }
        }

        #[test]
        fn block_split_reconstructs(seed in 0u64..1000, sd in 1e-3f64..0.3) {
            let block = noise(seed, 32, 32, sd);
            let (est, res) = denoise_block_parts(&block, &small_cfg()).unwrap();
            let err = ((&est + &res) - &block).mapv(|v| v * v).sum() / block.len() as f64;
            proptest::prop_assert!(err.sqrt() < 1e-9);
        }
    }

    #[test]
    fn residue_file_round_trip() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let planes = std::array::from_fn(|_| Array2::from_shape_fn((4, 6), |_| rng.random::<f64>()));
        let fr = FrameResidue {
            image_id: "cam_a_0001".into(),
            stack: CfaStack::new(planes, CfaLayout::Rggb).unwrap(),
            config_hash: cfg.hash(),
            meta: CaptureMeta::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.res");
        fr.write(&path).unwrap();
        let back = FrameResidue::read(&path).unwrap();
        assert_eq!(back, fr);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_container().to_bytes().unwrap());
    }
}
