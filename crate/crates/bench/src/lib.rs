//! Fixtures shared by the benchmarks.

use spn_core::raster::CfaLayout;
use spn_core::simulator::{render_frame, CaptureRequest, LensParams, LensProfile, SensorParams, SensorProfile};
use spn_core::{frame_residue, FrameResidue, PipelineConfig, RasterImage};

/// Seeded frames of one simulated camera behind one lens.
pub fn frames(size: usize, count: usize) -> Vec<RasterImage> {
    let sensor = SensorProfile::generate("bench", 1, size, size, CfaLayout::Rggb, &SensorParams::default()).expect("sensor");
    let lens = LensProfile::generate("lens", 2, size, size, &LensParams::default(), &[]).expect("lens");
    (0..count)
        .map(|i| render_frame(&sensor, &lens, &CaptureRequest::default().with_seed(i as u64)).expect("frame"))
        .collect()
}

/// Full-frame pipeline with the given block size.
pub fn pipeline(block_size: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig { crop: None, ..PipelineConfig::default() };
    cfg.denoise.block_size = block_size;
    cfg
}

pub fn residues(size: usize, count: usize, cfg: &PipelineConfig) -> Vec<FrameResidue> {
    frames(size, count)
        .iter()
        .enumerate()
        .map(|(i, f)| frame_residue(f, &format!("bench_lens_{i:04}"), cfg).expect("residue"))
        .collect()
}
