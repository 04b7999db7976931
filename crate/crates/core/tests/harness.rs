//! End-to-end runs of the experiment tasks on small tabular models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pnf::armodel::{save_model, TabularMarkovModel};
use pnf::grid::Grid;
use pnf::harness::config::ScheduleSpec;
use pnf::harness::io::{read_metrics, read_samples};
use pnf::harness::{run_experiment, ExperimentConfig, Task};
use pnf::Error;

fn schedule() -> ScheduleSpec {
    ScheduleSpec {
        sigma_max: 1.0,
        sigma_min: 0.1,
        levels: 4,
        delta: 0.002,
        steps: 5,
    }
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Saves an AR(1) table and fine-tunes (shares) it into a stack.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let m = TabularMarkovModel::discretized_ar1(Grid::linear(4, -1.0, 1.0).unwrap(), 0.7, 0.5).unwrap();
        save_model(&dir.path().join("model.pnfm"), &m).unwrap();
        let f = Fixture { dir };
        let cfg = ExperimentConfig {
            task: Some(Task::Finetune),
            n: 16,
            out: f.path("ft"),
            model: Some(f.path("model.pnfm")),
            data: Some(data(3)),
            schedule: Some(schedule()),
            ..ExperimentConfig::default()
        };
        run_experiment(&cfg).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn base(&self, task: Task, out: &str) -> ExperimentConfig {
        ExperimentConfig {
            task: Some(task),
            n: 16,
            runs: 3,
            seed: 11,
            out: self.path(out),
            model: Some(self.path("model.pnfm")),
            stacks: vec![self.path("ft/stack.pnfs")],
            schedule: Some(schedule()),
            data: Some(data(3)),
            ..ExperimentConfig::default()
        }
    }
}

fn data(count: usize) -> pnf::harness::config::DataSpec {
    serde_json::from_value(serde_json::json!({"kind": "sine_mixture", "count": count, "seed": 4})).unwrap()
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn sample_task_is_byte_reproducible() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        run_experiment(&f.base(Task::Sample, out)).unwrap();
    }
    for name in ["samples.f32", "samples.json"] {
        assert_eq!(bytes(&f.path("a").join(name)), bytes(&f.path("b").join(name)), "{name}");
    }
    let samples = read_samples(&f.path("a/samples.f32"), None).unwrap();
    assert_eq!(samples.len(), 3);
    assert!(samples.iter().all(|s| s.len() == 16));
    assert_ne!(samples[0], samples[1]);
}

#[test]
fn records_carry_the_echoed_config_hash() {
    let f = Fixture::new();
    run_experiment(&f.base(Task::Sample, "s")).unwrap();
    let echoed = ExperimentConfig::load(&f.path("s/config.json")).unwrap();
    let rows = read_metrics(&f.path("s/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for (r, row) in rows.iter().enumerate() {
        assert_eq!(row.config_hash, echoed.hash());
        assert_eq!(row.run, r);
        assert_eq!((row.steps, row.levels), (5, 4));
        assert!(row.log_likelihood.unwrap() < 0.0);
    }
}

#[test]
fn schedule_mismatch_fails_before_any_output() {
    let f = Fixture::new();
    let mut cfg = f.base(Task::Sample, "mismatch");
    cfg.schedule.as_mut().unwrap().sigma_min = 0.11;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!f.path("mismatch").exists());
}

#[test]
fn stochastic_sync_is_reproducible_and_async_runs() {
    let f = Fixture::new();
    for out in ["x", "y"] {
        let mut cfg = f.base(Task::SampleStochastic, out);
        cfg.block.c = 4;
        cfg.block.workers = 2;
        cfg.block.mode = pnf::blocksampler::BlockMode::Sync;
        run_experiment(&cfg).unwrap();
    }
    assert_eq!(bytes(&f.path("x/samples.f32")), bytes(&f.path("y/samples.f32")));
    let mut cfg = f.base(Task::SampleStochastic, "z");
    cfg.block.c = 4;
    cfg.block.workers = 2;
    run_experiment(&cfg).unwrap();
    assert!(f.path("z/stats.json").exists());
}

#[test]
fn eval_ll_scores_stored_samples() {
    let f = Fixture::new();
    run_experiment(&f.base(Task::Sample, "s")).unwrap();
    let mut cfg = f.base(Task::EvalLl, "ll");
    cfg.samples = Some(f.path("s/samples.f32"));
    let rows = run_experiment(&cfg).unwrap();
    let sampled = read_metrics(&f.path("s/metrics.csv")).unwrap();
    for (a, b) in rows.iter().zip(&sampled) {
        assert!((a.log_likelihood.unwrap() - b.log_likelihood.unwrap()).abs() < 1e-9);
    }
    assert!(f.path("ll/eval_ll.json").exists());
}

#[test]
fn inverse_tasks_report_metrics() {
    let f = Fixture::new();
    let mut sr = f.base(Task::Superres, "sr");
    sr.measurement = Some(serde_json::from_value(serde_json::json!({"kind": "decimate", "ratio": 2})).unwrap());
    for row in run_experiment(&sr).unwrap() {
        assert!(row.psnr.is_some() && row.baseline_psnr.is_some() && row.constraint_residual.is_some());
    }
    assert_eq!(read_samples(&f.path("sr/truth.f32"), None).unwrap().len(), 3);

    fs::write(f.path("mask.txt"), "1\n0\n".repeat(8)).unwrap();
    let mut ip = f.base(Task::Inpaint, "ip");
    ip.measurement = Some(serde_json::from_value(serde_json::json!({"kind": "mask", "file": f.path("mask.txt")})).unwrap());
    assert_eq!(run_experiment(&ip).unwrap().len(), 3);

    let mut sep = f.base(Task::Separate, "sep");
    sep.stacks = vec![f.path("ft/stack.pnfs"), f.path("ft/stack.pnfs")];
    sep.sources = vec![data(3), serde_json::from_value(serde_json::json!({"kind": "bursty_noise", "count": 3})).unwrap()];
    for row in run_experiment(&sep).unwrap() {
        assert!(row.si_sdr.is_some() && row.baseline_si_sdr.is_some());
    }
    let side: pnf::harness::io::Sidecar = pnf::harness::io::read_json(&f.path("sep/samples.json")).unwrap();
    assert_eq!((side.n, side.sources), (16, 2));
}

#[test]
fn train_and_bench_tasks() {
    let f = Fixture::new();
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "task": "train", "n": 32, "out": f.path("tr"),
        "grid": {"kind": "linear", "d": 4, "lo": -1.0, "hi": 1.0},
        "data": {"kind": "bursty_noise", "count": 6, "seed": 1},
        "net": {"kind": "convnet", "channels": 4, "dilations": [1, 2]},
        "train": {"epochs": 2, "crop_len": 16}
    }))
    .unwrap();
    run_experiment(&cfg).unwrap();
    let ft = ExperimentConfig {
        task: Some(Task::Finetune),
        n: 32,
        out: f.path("trft"),
        model: Some(f.path("tr/model.pnfm")),
        data: Some(data(4)),
        schedule: Some(schedule()),
        train: serde_json::from_value(serde_json::json!({"epochs": 1, "crop_len": 16})).unwrap(),
        ..ExperimentConfig::default()
    };
    run_experiment(&ft).unwrap();
    let mut bench = f.base(Task::Bench, "bench");
    bench.n = 32;
    bench.model = Some(f.path("tr/model.pnfm"));
    bench.stacks = vec![f.path("trft/stack.pnfs")];
    bench.block.c = 4;
    bench.bench_workers = vec![1, 2];
    assert_eq!(run_experiment(&bench).unwrap().len(), 2);
    let text = fs::read_to_string(f.path("bench/bench.csv")).unwrap();
    assert!(text.starts_with("workers,n,c,level,wall_ms,overwrite_fraction,final_ll\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 4);
}

fn cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_pnf"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let f = Fixture::new();
    let mut cfg = f.base(Task::Sample, "cli");
    cfg.task = None;
    let good = f.path("good.json");
    fs::write(&good, serde_json::to_string(&cfg).unwrap()).unwrap();
    let g = good.to_str().unwrap();
    assert_eq!(cli(&["sample", "--config", g, "--seed", "3"]), 0);
    let echoed = ExperimentConfig::load(&f.path("cli/config.json")).unwrap();
    assert_eq!((echoed.seed, echoed.task), (3, Some(Task::Sample)));

    let bad = f.path("bad.json");
    fs::write(&bad, r#"{"n": 16, "stepz": 3}"#).unwrap();
    assert_eq!(cli(&["sample", "--config", bad.to_str().unwrap()]), 2);

    let wrong_task = f.path("wrong.json");
    fs::write(&wrong_task, r#"{"task": "superres"}"#).unwrap();
    assert_eq!(cli(&["sample", "--config", wrong_task.to_str().unwrap()]), 2);

    let mut missing = cfg.clone();
    missing.stacks = vec![f.path("nope.pnfs")];
    let m = f.path("missing.json");
    fs::write(&m, serde_json::to_string(&missing).unwrap()).unwrap();
    assert_eq!(cli(&["sample", "--config", m.to_str().unwrap()]), 4);

    let mut unstable = cfg.clone();
    unstable.schedule.as_mut().unwrap().delta = 1e30;
    let u = f.path("unstable.json");
    fs::write(&u, serde_json::to_string(&unstable).unwrap()).unwrap();
    assert_eq!(cli(&["sample", "--config", u.to_str().unwrap(), "--out", f.path("u").to_str().unwrap()]), 3);
}
