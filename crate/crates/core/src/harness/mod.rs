//! Data ingestion, run configuration, evaluation, ablation and the CLI.

pub mod ablation;
pub mod cli;
pub mod coco;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod ppm;
pub mod synth;

pub use coco::{load_coco, CocoDataset, Dataset};
pub use config::{DataSource, RunConfig};
pub use synth::{synth_generate, SynthConfig};
