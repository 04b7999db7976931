//! Task runners behind the CLI.
//!
//! Every task writes `config.json` (the effective configuration) into the
//! output directory before doing any work, and all inputs are validated
//! before that. Sampling tasks write `samples.f32`/`samples.json` and
//! `metrics.csv`; see the README for the per-task files.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{DataSpec, ExperimentConfig, MeasurementSpec, NetSpec, Task};
use super::interp::{linear_interpolate, upsample};
use super::io::{
    read_json, read_samples, write_bench, write_json, write_metrics, write_samples, MetricRecord, Provenance, Sidecar,
};
use super::metrics::{psnr, si_sdr};
use super::synth::gen_synthetic;
use crate::armodel::{
    build_stack, load_convnet, load_model, log_likelihood, save_model, train, CausalConvNet, ConditionalModel,
    ConvNetConfig, NoisyModelStack, SharedModel, TabularMarkovModel, TrainReport,
};
use crate::blocksampler::{throughput_bench, BlockMode, RunStats};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measure::{MeasurementModel, Operator};
use crate::sampler::{Condition, NoiseSchedule, SampleRequest, SamplerRegistry};

/// Runs the configured task and returns its metric records.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    cfg.check()?;
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cfg)),
        None => dispatch(cfg),
    }
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    match cfg.task()? {
        Task::Train => run_train(cfg),
        Task::Finetune => run_finetune(cfg),
        Task::Sample | Task::SampleStochastic => run_sample(cfg),
        Task::Separate | Task::Superres | Task::Inpaint => run_inverse(cfg),
        Task::EvalLl => run_eval_ll(cfg),
        Task::Bench => run_bench(cfg),
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    task: Task,
    hash: String,
}

impl<'a> Context<'a> {
    /// Creates the output directory and echoes the configuration.
    fn start(cfg: &'a ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out)?;
        write_json(&cfg.out.join("config.json"), cfg)?;
        Ok(Context {
            cfg,
            task: cfg.task()?,
            hash: cfg.hash(),
        })
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.cfg.out.join(name)
    }

    fn record(&self, run: usize, schedule: Option<&NoiseSchedule>, wall_ms: f64) -> MetricRecord {
        MetricRecord {
            config_hash: self.hash.clone(),
            task: self.task.name().into(),
            run,
            seed: run_seed(self.cfg.seed, run),
            steps: schedule.map_or(0, |s| s.steps_per_level()),
            levels: schedule.map_or(0, |s| s.levels()),
            wall_ms,
            log_likelihood: None,
            si_sdr: None,
            psnr: None,
            constraint_residual: None,
            baseline_si_sdr: None,
            baseline_psnr: None,
        }
    }

    fn sidecar(&self, n: usize, sources: usize, records: usize, grid: &Grid, sampler: Option<&str>) -> Sidecar {
        Sidecar {
            n,
            sources,
            records,
            grid: grid.clone(),
            provenance: Provenance {
                task: self.task.name().into(),
                sampler: sampler.map(str::to_string),
                seed: self.cfg.seed,
                config_hash: self.hash.clone(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
        }
    }

    fn finish(&self, records: Vec<MetricRecord>) -> Result<Vec<MetricRecord>> {
        write_metrics(&self.path("metrics.csv"), &records)?;
        Ok(records)
    }
}

/// Seed of run `run`; run 0 uses the configured seed itself.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_add(run as u64)
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn open_stacks(cfg: &ExperimentConfig, schedule: &NoiseSchedule) -> Result<Vec<NoisyModelStack>> {
    cfg.stacks
        .iter()
        .map(|p| {
            let s = NoisyModelStack::open(p)?;
            if s.sigmas() != schedule.sigmas() {
                return Err(Error::Config(format!(
                    "schedule sigmas {:?} do not match {}'s {:?}",
                    schedule.sigmas(),
                    p.display(),
                    s.sigmas()
                )));
            }
            Ok(s)
        })
        .collect()
}

fn load_optional(path: Option<&Path>) -> Result<Option<Box<dyn ConditionalModel>>> {
    path.map(load_model).transpose()
}

/// Corpus of `data.count` sequences of length `n` as bin indices.
fn corpus(data: &DataSpec, grid: &Grid, n: usize, count: usize) -> Result<(Vec<Vec<usize>>, Grid)> {
    let source = load_optional(data.model.as_deref())?;
    // sequences drawn from a stored model live on that model's grid
    let grid = source.as_ref().map_or_else(|| grid.clone(), |m| m.grid().clone());
    let seqs = gen_synthetic(data.kind, &grid, n, count, data.seed, source.as_deref())?;
    Ok((seqs, grid))
}

fn quantized_ll(model: &dyn ConditionalModel, x: &[f64], n: usize) -> Result<f64> {
    x.chunks(n)
        .map(|s| log_likelihood(model, &model.grid().quantize_all(s)?))
        .sum()
}

fn run_train(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let grid = cfg.grid.build()?;
    let data = cfg.data()?;
    let (seqs, data_grid) = corpus(data, &grid, cfg.n, data.count)?;
    if data_grid.d() != grid.d() {
        return Err(Error::Config("data model grid differs from the configured grid".into()));
    }
    let ctx = Context::start(cfg)?;
    let t = Instant::now();
    let (model, report): (Box<dyn ConditionalModel>, Option<TrainReport>) = match &cfg.net {
        NetSpec::Convnet { channels, dilations } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let net_cfg = ConvNetConfig {
                channels: *channels,
                dilations: dilations.clone(),
            };
            let mut net = CausalConvNet::new(grid, net_cfg, &mut rng)?;
            let report = train(&mut net, &seqs, &cfg.train)?;
            (Box::new(net), Some(report))
        }
        NetSpec::Tabular { order, alpha } => (Box::new(TabularMarkovModel::fit_counts(grid, *order, &seqs, *alpha)?), None),
    };
    let wall = elapsed_ms(t);
    save_model(&ctx.path("model.pnfm"), model.as_ref())?;
    if let Some(r) = &report {
        write_json(&ctx.path("train.json"), r)?;
    }
    let mut rec = ctx.record(0, None, wall);
    let lls = seqs
        .iter()
        .map(|s| log_likelihood(model.as_ref(), s))
        .collect::<Result<Vec<_>>>()?;
    rec.log_likelihood = Some(crate::numeric::median(&lls));
    ctx.finish(vec![rec])
}

fn run_finetune(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let schedule = cfg.schedule()?;
    let base = load_model(cfg.model_path()?)?;
    let data = cfg.data()?;
    let (seqs, _) = corpus(data, base.grid(), cfg.n, data.count)?;
    let ctx = Context::start(cfg)?;
    let t = Instant::now();
    let (stack, reports) = match base.kind() {
        "convnet" => {
            let net = load_convnet(cfg.model_path()?)?;
            build_stack(&net, schedule.sigmas(), &seqs, &cfg.train)?
        }
        // tables are not fine-tuned: every level reuses the clean model
        _ => {
            let shared: SharedModel = Arc::from(base);
            (NoisyModelStack::shared(schedule.sigmas().to_vec(), shared)?, Vec::new())
        }
    };
    let wall = elapsed_ms(t);
    stack.save(&ctx.path("stack.pnfs"))?;
    write_json(&ctx.path("finetune.json"), &reports)?;
    ctx.finish(vec![ctx.record(0, Some(&schedule), wall)])
}

fn sampler_name(cfg: &ExperimentConfig) -> String {
    match (cfg.task, cfg.block.mode) {
        (Some(Task::SampleStochastic), BlockMode::Async) => "pnf-async".into(),
        (Some(Task::SampleStochastic), BlockMode::Sync) => "pnf-sync".into(),
        _ => cfg.sampler.clone(),
    }
}

fn warn_dense(cfg: &ExperimentConfig) {
    if cfg.task == Some(Task::SampleStochastic) && cfg.block.is_dense(cfg.n) {
        eprintln!(
            "warning: {} workers with c = {} on n = {} exceeds n/(4c); block writes will collide",
            cfg.block.workers, cfg.block.c, cfg.n
        );
    }
}

#[derive(Serialize)]
struct RunStatsEntry<'a> {
    run: usize,
    stats: &'a RunStats,
}

fn report_stats(ctx: &Context<'_>, stats: &[(usize, RunStats)]) -> Result<()> {
    if stats.is_empty() {
        return Ok(());
    }
    for (run, s) in stats {
        if s.overwrite_fraction() > 0.0 {
            eprintln!(
                "run {run}: overwrite_fraction = {:.4}, concurrent_write_fraction = {:.4}",
                s.overwrite_fraction(),
                s.concurrent_write_fraction()
            );
        }
    }
    let entries: Vec<RunStatsEntry<'_>> = stats.iter().map(|(run, stats)| RunStatsEntry { run: *run, stats }).collect();
    write_json(&ctx.path("stats.json"), &entries)
}

struct Draw {
    x: Vec<f64>,
    wall_ms: f64,
    stats: Option<RunStats>,
}

/// Runs `runs` independent samplers; stochastic block samplers manage their
/// own threads, so they run one at a time.
fn draw_all(
    cfg: &ExperimentConfig,
    name: &str,
    stacks: &[NoisyModelStack],
    schedule: &NoiseSchedule,
    prior: Option<&dyn ConditionalModel>,
    conditions: Option<&[Condition]>,
) -> Result<Vec<Draw>> {
    let registry = SamplerRegistry::default();
    let sampler = registry.get(name)?;
    let refs: Vec<&NoisyModelStack> = stacks.iter().collect();
    let one = |r: usize| -> Result<Draw> {
        let req = SampleRequest {
            stacks: &refs,
            condition: conditions.map(|c| &c[r]),
            schedule,
            n: cfg.n,
            block: cfg.block.clone(),
            prior,
        };
        let t = Instant::now();
        let out = sampler.sample(&req, run_seed(cfg.seed, r))?;
        Ok(Draw {
            x: out.x,
            wall_ms: elapsed_ms(t),
            stats: out.stats,
        })
    };
    if name.starts_with("pnf-") {
        (0..cfg.runs).map(one).collect()
    } else {
        (0..cfg.runs).into_par_iter().map(one).collect()
    }
}

fn run_sample(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let schedule = cfg.schedule()?;
    let stacks = open_stacks(cfg, &schedule)?;
    let prior = load_optional(cfg.model.as_deref())?;
    let name = sampler_name(cfg);
    SamplerRegistry::default().get(&name)?;
    warn_dense(cfg);
    let ctx = Context::start(cfg)?;
    let draws = draw_all(cfg, &name, &stacks, &schedule, prior.as_deref(), None)?;
    let mut records = Vec::with_capacity(draws.len());
    for (r, d) in draws.iter().enumerate() {
        let mut rec = ctx.record(r, Some(&schedule), d.wall_ms);
        if let Some(p) = &prior {
            rec.log_likelihood = Some(quantized_ll(p.as_ref(), &d.x, cfg.n)?);
        }
        records.push(rec);
    }
    let xs: Vec<Vec<f64>> = draws.iter().map(|d| d.x.clone()).collect();
    let grid = stacks[0].grid();
    write_samples(&cfg.out, "samples", &xs, &ctx.sidecar(cfg.n, 1, xs.len(), grid, Some(&name)))?;
    let stats: Vec<(usize, RunStats)> = draws
        .into_iter()
        .enumerate()
        .filter_map(|(r, d)| d.stats.map(|s| (r, s)))
        .collect();
    report_stats(&ctx, &stats)?;
    ctx.finish(records)
}

/// Ground truth for an inverse problem: one row per run, sources concatenated.
fn ground_truth(cfg: &ExperimentConfig, stacks: &[NoisyModelStack]) -> Result<Vec<Vec<f64>>> {
    let specs: Vec<&DataSpec> = if cfg.task == Some(Task::Separate) {
        cfg.sources.iter().collect()
    } else {
        vec![cfg.data()?]
    };
    let mut truth = vec![Vec::with_capacity(specs.len() * cfg.n); cfg.runs];
    for (spec, stack) in specs.iter().zip(stacks) {
        let (seqs, grid) = corpus(spec, stack.grid(), cfg.n, cfg.runs)?;
        for (row, s) in truth.iter_mut().zip(&seqs) {
            row.extend(grid.dequantize(s));
        }
    }
    Ok(truth)
}

fn measurement(cfg: &ExperimentConfig) -> Result<MeasurementModel> {
    match &cfg.measurement {
        Some(spec) => spec.build(cfg.n),
        None => MeasurementSpec::Mix {
            weights: vec![1.0 / cfg.stacks.len() as f64; cfg.stacks.len()],
        }
        .build(cfg.n),
    }
}

/// In-harness baseline reconstruction from the observation alone.
fn baseline(mm: &MeasurementModel, y: &[f64], n: usize) -> Result<Vec<f64>> {
    match mm.operator() {
        Operator::Decimate { ratio } => upsample(y, *ratio, n, true),
        Operator::Mask { mask } => {
            let xs: Vec<f64> = (0..n).filter(|&t| mask[t]).map(|t| t as f64).collect();
            let at: Vec<f64> = (0..n).map(|t| t as f64).collect();
            linear_interpolate(&xs, y, &at)
        }
        // the mixture stands in for every source
        Operator::Mix { weights } => Ok(y.repeat(weights.len())),
    }
}

fn run_inverse(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let schedule = cfg.schedule()?;
    let stacks = open_stacks(cfg, &schedule)?;
    let prior = load_optional(cfg.model.as_deref())?;
    let mm = measurement(cfg)?;
    if mm.sources() != stacks.len() {
        return Err(Error::Config(format!(
            "measurement has {} sources but {} stacks are given",
            mm.sources(),
            stacks.len()
        )));
    }
    let name = sampler_name(cfg);
    SamplerRegistry::default().get(&name)?;
    let truth = ground_truth(cfg, &stacks)?;
    let conditions = truth
        .iter()
        .map(|x| Ok(Condition::new(mm.clone(), mm.apply(x)?)?.with_covariance(cfg.covariance)))
        .collect::<Result<Vec<_>>>()?;
    let ctx = Context::start(cfg)?;
    let draws = draw_all(cfg, &name, &stacks, &schedule, prior.as_deref(), Some(&conditions))?;
    let n = cfg.n;
    let peak = stacks[0].grid().span();
    let mut records = Vec::with_capacity(draws.len());
    for (r, d) in draws.iter().enumerate() {
        let (x, t, cond) = (&d.x, &truth[r], &conditions[r]);
        let base = baseline(&mm, &cond.y, n)?;
        let mut rec = ctx.record(r, Some(&schedule), d.wall_ms);
        rec.constraint_residual = Some(mm.residual_inf(x, &cond.y)?);
        if let Some(p) = &prior {
            rec.log_likelihood = Some(quantized_ll(p.as_ref(), x, n)?);
        }
        if ctx.task == Task::Separate {
            let mean_sdr = |est: &[f64]| -> Result<f64> {
                let v = est
                    .chunks(n)
                    .zip(t.chunks(n))
                    .map(|(e, s)| si_sdr(e, s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            };
            rec.si_sdr = Some(mean_sdr(x)?);
            rec.baseline_si_sdr = Some(mean_sdr(&base)?);
        } else {
            rec.psnr = Some(psnr(x, t, peak)?);
            rec.baseline_psnr = Some(psnr(&base, t, peak)?);
        }
        records.push(rec);
    }
    let xs: Vec<Vec<f64>> = draws.iter().map(|d| d.x.clone()).collect();
    let grid = stacks[0].grid();
    let sources = stacks.len();
    write_samples(&cfg.out, "samples", &xs, &ctx.sidecar(n, sources, xs.len(), grid, Some(&name)))?;
    write_samples(&cfg.out, "truth", &truth, &ctx.sidecar(n, sources, truth.len(), grid, None))?;
    let stats: Vec<(usize, RunStats)> = draws
        .into_iter()
        .enumerate()
        .filter_map(|(r, d)| d.stats.map(|s| (r, s)))
        .collect();
    report_stats(&ctx, &stats)?;
    ctx.finish(records)
}

#[derive(Serialize)]
struct EvalSummary {
    count: usize,
    median_log_likelihood: f64,
}

fn run_eval_ll(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let model = load_model(cfg.model_path()?)?;
    let path = cfg.samples.as_deref().expect("checked");
    let side = path.with_extension("json");
    let n = if side.exists() { read_json::<Sidecar>(&side)?.n } else { cfg.n };
    let samples = read_samples(path, Some(n))?;
    let ctx = Context::start(cfg)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut lls = Vec::with_capacity(samples.len());
    for (r, s) in samples.iter().enumerate() {
        let t = Instant::now();
        let ll = quantized_ll(model.as_ref(), s, n)?;
        let mut rec = ctx.record(r, None, elapsed_ms(t));
        rec.log_likelihood = Some(ll);
        lls.push(ll);
        records.push(rec);
    }
    if lls.is_empty() {
        return Err(Error::Config(format!("{} holds no samples", path.display())));
    }
    let summary = EvalSummary {
        count: lls.len(),
        median_log_likelihood: crate::numeric::median(&lls),
    };
    println!("median log-likelihood: {:.4} nats over {} samples", summary.median_log_likelihood, summary.count);
    write_json(&ctx.path("eval_ll.json"), &summary)?;
    ctx.finish(records)
}

fn run_bench(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let schedule = cfg.schedule()?;
    let stacks = open_stacks(cfg, &schedule)?;
    let base = load_model(cfg.model_path()?)?;
    let ctx = Context::start(cfg)?;
    let rows = throughput_bench(&stacks[0], base.as_ref(), &schedule, cfg.n, &cfg.block, &cfg.bench_workers, cfg.seed)?;
    write_bench(&ctx.path("bench.csv"), &rows)?;
    let mut records = Vec::new();
    for (i, &workers) in cfg.bench_workers.iter().enumerate() {
        let mine: Vec<_> = rows.iter().filter(|r| r.workers == workers).collect();
        let wall: f64 = mine.iter().map(|r| r.wall_ms).sum();
        let overwrite = mine.iter().map(|r| r.overwrite_fraction).sum::<f64>() / mine.len().max(1) as f64;
        if workers * cfg.block.c > cfg.n || overwrite > 0.0 {
            eprintln!("workers = {workers}: overwrite_fraction = {overwrite:.4}");
        }
        let mut rec = ctx.record(i, Some(&schedule), wall);
        rec.seed = cfg.seed;
        rec.log_likelihood = mine.first().map(|r| r.final_ll);
        records.push(rec);
    }
    ctx.finish(records)
}
