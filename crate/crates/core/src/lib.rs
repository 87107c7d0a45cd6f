//! Sensor pattern noise extraction, camera fingerprint matching and
//! correlation-energy decomposition for flat-field raw captures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod darkframe;
pub mod decomposition;
pub mod denoise;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod pipeline;
pub mod raster;
pub mod simulator;
pub mod stats;

pub use darkframe::{build_dark_frame, subtract_dark, DarkFrame};
pub use decomposition::{solve, snp_table, BoxStats, ConditionMeans, EnergyDecomposition, SnpTable};
pub use denoise::{extract_residue, DenoiseConfig, FrameResidue, NoiseResidue};
pub use error::{Error, Result};
pub use fingerprint::{correlate, match_residue, MatchScore, ReferenceBuilder, ReferencePattern, ScoreRow, ScoreTable};
pub use pipeline::{frame_residue, PipelineConfig};
pub use raster::{CaptureMeta, CfaChannel, CfaLayout, CfaStack, RasterImage, PINHOLE};
