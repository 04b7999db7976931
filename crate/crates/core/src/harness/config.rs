//! Experiment configuration: one JSON document, unknown keys rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthKind;
use crate::armodel::{ConvNetConfig, TrainConfig};
use crate::blocksampler::BlockConfig;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measure::{parse_mask, Covariance, MeasurementModel, Operator};
use crate::sampler::{make_schedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Train,
    Finetune,
    Sample,
    SampleStochastic,
    Separate,
    Superres,
    Inpaint,
    EvalLl,
    Bench,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Finetune => "finetune",
            Task::Sample => "sample",
            Task::SampleStochastic => "sample-stochastic",
            Task::Separate => "separate",
            Task::Superres => "superres",
            Task::Inpaint => "inpaint",
            Task::EvalLl => "eval-ll",
            Task::Bench => "bench",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    Linear { d: usize, lo: f64, hi: f64 },
    MuLaw { d: usize, mu: f64 },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Linear {
            d: 16,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        match *self {
            GridSpec::Linear { d, lo, hi } => Grid::linear(d, lo, hi),
            GridSpec::MuLaw { d, mu } => Grid::mu_law(d, mu),
        }
    }
}

/// Architecture trained by the `train` task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetSpec {
    Convnet { channels: usize, dilations: Vec<usize> },
    /// Count-based table with additive smoothing.
    Tabular { order: usize, alpha: f64 },
}

impl Default for NetSpec {
    fn default() -> Self {
        let c = ConvNetConfig::default();
        NetSpec::Convnet {
            channels: c.channels,
            dilations: c.dilations,
        }
    }
}

/// Geometric noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
    pub delta: f64,
    pub steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.sigma_max, self.sigma_min, self.levels, self.delta, self.steps)
    }
}

/// Synthetic corpus of `count` sequences of the experiment length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: SynthKind,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint sampled by `ar_tabular`.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementSpec {
    Mix {
        weights: Vec<f64>,
    },
    Decimate {
        ratio: usize,
    },
    /// Inline mask or a file with one 0/1 per line.
    Mask {
        #[serde(default)]
        mask: Option<Vec<bool>>,
        #[serde(default)]
        file: Option<PathBuf>,
    },
}

impl MeasurementSpec {
    pub fn build(&self, n: usize) -> Result<MeasurementModel> {
        let op = match self {
            MeasurementSpec::Mix { weights } => Operator::Mix {
                weights: weights.clone(),
            },
            MeasurementSpec::Decimate { ratio } => Operator::Decimate { ratio: *ratio },
            MeasurementSpec::Mask { mask, file } => {
                let mask = match (mask, file) {
                    (Some(m), None) => m.clone(),
                    (None, Some(p)) => parse_mask(&fs::read_to_string(p)?)?,
                    _ => return Err(Error::Config("mask measurement needs exactly one of 'mask' and 'file'".into())),
                };
                if mask.len() != n {
                    return Err(Error::Config(format!("mask has {} entries for n = {n}", mask.len())));
                }
                Operator::Mask { mask }
            }
        };
        MeasurementModel::new(op, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Optional; when present it must match the CLI subcommand.
    pub task: Option<Task>,
    pub seed: u64,
    /// Independent runs (signals) per experiment.
    pub runs: usize,
    /// Length of one source sequence.
    pub n: usize,
    pub out: PathBuf,
    /// Thread pool size for independent runs; all cores when absent.
    pub threads: Option<usize>,
    pub grid: GridSpec,
    pub net: NetSpec,
    pub train: TrainConfig,
    pub data: Option<DataSpec>,
    /// Ground-truth sources for separation, one per stack.
    pub sources: Vec<DataSpec>,
    /// Noiseless model checkpoint (base for fine-tuning, reference for
    /// log-likelihoods, prior for ancestral sampling).
    pub model: Option<PathBuf>,
    /// Noise-level stack files, one per source.
    pub stacks: Vec<PathBuf>,
    pub schedule: Option<ScheduleSpec>,
    pub sampler: String,
    pub measurement: Option<MeasurementSpec>,
    pub covariance: Covariance,
    pub block: BlockConfig,
    /// Worker counts swept by the bench task.
    pub bench_workers: Vec<usize>,
    /// Raw sample file scored by eval-ll.
    pub samples: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: None,
            seed: 0,
            runs: 1,
            n: 64,
            out: PathBuf::from("out"),
            threads: None,
            grid: GridSpec::default(),
            net: NetSpec::default(),
            train: TrainConfig::default(),
            data: None,
            sources: Vec::new(),
            model: None,
            stacks: Vec::new(),
            schedule: None,
            sampler: "pnf".into(),
            measurement: None,
            covariance: Covariance::Gram,
            block: BlockConfig::default(),
            bench_workers: vec![1, 2, 4],
            samples: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the compact JSON serialization, with the output
    /// directory and thread count blanked since they do not affect results.
    pub fn hash(&self) -> String {
        let normalized = ExperimentConfig {
            out: PathBuf::new(),
            threads: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&normalized).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fixes the task, rejecting a conflicting one from the file.
    pub fn with_task(mut self, task: Task) -> Result<Self> {
        match self.task {
            Some(t) if t != task => Err(Error::Config(format!("config is for task '{t}', not '{task}'"))),
            _ => {
                self.task = Some(task);
                Ok(self)
            }
        }
    }

    pub fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| Error::Config("no task given".into()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule
            .as_ref()
            .ok_or_else(|| Error::Config("a schedule is required".into()))?
            .build()
    }

    pub fn data(&self) -> Result<&DataSpec> {
        self.data.as_ref().ok_or_else(|| Error::Config("a data section is required".into()))
    }

    pub fn model_path(&self) -> Result<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| Error::Config("a model checkpoint path is required".into()))
    }

    /// Checks task-specific requirements that need no file access.
    pub fn check(&self) -> Result<()> {
        let task = self.task()?;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("task '{task}' requires {what}")))
            }
        };
        need(self.n > 0, "n > 0")?;
        need(self.runs > 0, "runs > 0")?;
        match task {
            Task::Train => need(self.data.is_some(), "'data'"),
            Task::Finetune => {
                need(self.model.is_some(), "'model'")?;
                need(self.data.is_some(), "'data'")?;
                self.schedule().map(drop)
            }
            Task::Sample | Task::SampleStochastic => {
                need(self.stacks.len() == 1, "exactly one entry in 'stacks'")?;
                self.schedule().map(drop)
            }
            Task::Separate => {
                need(self.stacks.len() >= 2, "two or more entries in 'stacks'")?;
                need(self.sources.len() == self.stacks.len(), "one 'sources' entry per stack")?;
                need(
                    matches!(self.measurement, None | Some(MeasurementSpec::Mix { .. })),
                    "a mix measurement",
                )?;
                self.schedule().map(drop)
            }
            Task::Superres => {
                need(self.stacks.len() == 1, "exactly one entry in 'stacks'")?;
                need(self.data.is_some(), "'data'")?;
                need(
                    matches!(self.measurement, Some(MeasurementSpec::Decimate { .. })),
                    "a decimate measurement",
                )?;
                self.schedule().map(drop)
            }
            Task::Inpaint => {
                need(self.stacks.len() == 1, "exactly one entry in 'stacks'")?;
                need(self.data.is_some(), "'data'")?;
                need(
                    matches!(self.measurement, Some(MeasurementSpec::Mask { .. })),
                    "a mask measurement",
                )?;
                self.schedule().map(drop)
            }
            Task::EvalLl => {
                need(self.model.is_some(), "'model'")?;
                need(self.samples.is_some(), "'samples'")
            }
            Task::Bench => {
                need(self.stacks.len() == 1, "exactly one entry in 'stacks'")?;
                need(self.model.is_some(), "'model'")?;
                need(!self.bench_workers.is_empty(), "non-empty 'bench_workers'")?;
                self.schedule().map(drop)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"n": 8, "sigma": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"block": {"c": 8, "lanes": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"grid": {"kind": "linear", "d": 4, "lo": -1, "hi": 1, "x": 0}}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"n": 8, "task": "eval-ll"}"#).unwrap();
        assert_eq!(c.n, 8);
        assert_eq!(c.task, Some(Task::EvalLl));
    }

    #[test]
    fn task_must_match() {
        let c = ExperimentConfig::from_json(r#"{"task": "superres"}"#).unwrap();
        assert!(c.clone().with_task(Task::Inpaint).is_err());
        assert_eq!(c.with_task(Task::Superres).unwrap().task, Some(Task::Superres));
        let c = ExperimentConfig::default().with_task(Task::SampleStochastic).unwrap();
        assert_eq!(c.task.unwrap().name(), "sample-stochastic");
    }

    #[test]
    fn hash_survives_echo() {
        let mut c = ExperimentConfig::default();
        c.schedule = Some(ScheduleSpec {
            sigma_max: 1.0,
            sigma_min: 0.1,
            levels: 5,
            delta: 0.3,
            steps: 7,
        });
        let echoed = serde_json::to_string_pretty(&c).unwrap();
        let back = ExperimentConfig::from_json(&echoed).unwrap();
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        c.out = PathBuf::from("elsewhere");
        c.threads = Some(3);
        assert_eq!(back.hash(), c.hash());
        c.seed = 1;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn requirements_per_task() {
        let c = ExperimentConfig::default().with_task(Task::Superres).unwrap();
        assert!(c.check().is_err());
        let c = ExperimentConfig::from_json(
            r#"{"task": "superres", "stacks": ["s.pnfs"], "data": {"kind": "sine_mixture", "count": 2},
                "measurement": {"kind": "decimate", "ratio": 4},
                "schedule": {"sigma_max": 1.0, "sigma_min": 0.1, "levels": 4, "delta": 0.1, "steps": 3}}"#,
        )
        .unwrap();
        c.check().unwrap();
    }

    #[test]
    fn mask_measurement() {
        let spec = MeasurementSpec::Mask {
            mask: Some(vec![true, false, true]),
            file: None,
        };
        assert_eq!(spec.build(3).unwrap().n_out(), 2);
        assert!(spec.build(4).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "1\n0\n\n1\n").unwrap();
        let spec = MeasurementSpec::Mask { mask: None, file: Some(p) };
        assert_eq!(spec.build(3).unwrap().n_out(), 2);
    }
}
