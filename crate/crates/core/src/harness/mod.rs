//! Experiment plumbing: configuration, synthetic data, metrics, baselines
//! and output files.

pub mod config;
pub mod experiment;
pub mod interp;
pub mod io;
pub mod metrics;
pub mod synth;

pub use config::{ExperimentConfig, Task};
pub use experiment::{run_experiment, run_seed};
pub use io::MetricRecord;
pub use metrics::{eval_ll, psnr, si_sdr};
pub use synth::{gen_synthetic, SynthKind};
