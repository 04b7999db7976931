//! Block-parallel annealed Langevin sampling.
//!
//! A block update on `[j, j + c)` needs the smoothed score restricted to the
//! block. Because every conditional reads at most `w` predecessors, that
//! restriction is computed exactly from the window `[j - w, j + c + w)`.
//!
//! In async mode several workers repeatedly pick a random block, copy its
//! window out of a shared buffer without locking, and write the updated block
//! back element by element. Sync mode sweeps a fixed partition against a
//! frozen snapshot and is deterministic.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::armodel::{log_likelihood, ConditionalModel, NoisyModelStack, SharedModel};
use crate::error::{Error, Result};
use crate::numeric::mix_seed;
use crate::sampler::{divergence, langevin_coord, load_level, validate, Condition, NoiseSchedule};
use crate::smoothing::window_score;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    #[default]
    Async,
    Sync,
}

/// How the per-level step count `T` translates into block updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationBudget {
    /// `T` sweeps' worth of updates (`T * ceil(n / c)`), shared by the workers.
    #[default]
    Sweeps,
    /// `T` block updates for every worker.
    PerWorker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub c: usize,
    pub workers: usize,
    pub mode: BlockMode,
    pub budget: IterationBudget,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            c: 256,
            workers: 1,
            mode: BlockMode::Async,
            budget: IterationBudget::Sweeps,
        }
    }
}

impl BlockConfig {
    /// True when async workers are too many for writes to stay sparse.
    pub fn is_dense(&self, n: usize) -> bool {
        self.mode == BlockMode::Async && self.workers * 4 * self.c > n
    }
}

/// Work done for one block gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockCost {
    /// Sequence entries read.
    pub reads: usize,
    /// Conditionals evaluated.
    pub evaluations: usize,
}

/// Context window read for the block `[j, j + c)` of a length-`n` sequence.
pub fn block_window(n: usize, w: usize, j: usize, c: usize) -> Range<usize> {
    j.saturating_sub(w)..(j + c + w).min(n)
}

/// Block gradient computed from the window slice `xw = x[win]`.
fn block_gradient_in_window(
    model: &dyn ConditionalModel,
    xw: &[f64],
    win_start: usize,
    j: usize,
    c: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let first = j - win_start;
    let ws = window_score(model, xw, first, sigma)?;
    Ok(ws.grad[first..first + c].to_vec())
}

/// Score of `x` restricted to `[j, j + c)`, reading only the block's window.
pub fn block_gradient(model: &dyn ConditionalModel, x: &[f64], j: usize, c: usize, sigma: f64) -> Result<Vec<f64>> {
    Ok(block_gradient_counted(model, x, j, c, sigma)?.0)
}

pub fn block_gradient_counted(
    model: &dyn ConditionalModel,
    x: &[f64],
    j: usize,
    c: usize,
    sigma: f64,
) -> Result<(Vec<f64>, BlockCost)> {
    let n = x.len();
    if c == 0 || j + c > n {
        return Err(Error::invalid(format!("block [{j}, {}) outside 0..{n}", j + c)));
    }
    let win = block_window(n, model.window(), j, c);
    let cost = BlockCost {
        reads: win.len(),
        evaluations: win.end - j,
    };
    let g = block_gradient_in_window(model, &x[win.clone()], win.start, j, c, sigma)?;
    Ok((g, cost))
}

/// Per-level diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub wall_ms: f64,
    pub block_updates: usize,
    /// Fraction of element writes whose block was modified by another
    /// worker between the read and the write (lost updates).
    pub overwrite_fraction: f64,
    /// Fraction of block writes that overlapped another worker's write in
    /// progress.
    pub concurrent_write_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub levels: Vec<LevelStats>,
    pub reads: u64,
    pub evaluations: u64,
}

impl RunStats {
    pub fn wall_ms(&self) -> f64 {
        self.levels.iter().map(|l| l.wall_ms).sum()
    }

    pub fn overwrite_fraction(&self) -> f64 {
        weighted(&self.levels, |l| l.overwrite_fraction)
    }

    pub fn concurrent_write_fraction(&self) -> f64 {
        weighted(&self.levels, |l| l.concurrent_write_fraction)
    }
}

fn weighted(levels: &[LevelStats], f: impl Fn(&LevelStats) -> f64) -> f64 {
    let total: usize = levels.iter().map(|l| l.block_updates).sum();
    if total == 0 {
        return 0.0;
    }
    levels.iter().map(|l| f(l) * l.block_updates as f64).sum::<f64>() / total as f64
}

/// Lock-free buffer of f64 values with per-element write versions.
struct SharedBuffer {
    cells: Vec<AtomicU64>,
    versions: Vec<AtomicU32>,
}

impl SharedBuffer {
    fn new(x: &[f64]) -> Self {
        SharedBuffer {
            cells: x.iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
            versions: x.iter().map(|_| AtomicU32::new(0)).collect(),
        }
    }

    #[inline]
    fn load(&self, k: usize) -> f64 {
        f64::from_bits(self.cells[k].load(Ordering::Relaxed))
    }

    /// Stores `v` and reports whether the element changed since `seen`.
    #[inline]
    fn store(&self, k: usize, v: f64, seen: u32) -> bool {
        self.cells[k].store(v.to_bits(), Ordering::Relaxed);
        self.versions[k].fetch_add(1, Ordering::Relaxed) != seen
    }

    fn to_vec(&self) -> Vec<f64> {
        (0..self.cells.len()).map(|k| self.load(k)).collect()
    }
}

const IDLE: u64 = 0;

fn slot_value(start: usize, end: usize) -> u64 {
    ((start as u64 + 1) << 32) | end as u64
}

fn slot_range(v: u64) -> Range<usize> {
    ((v >> 32) as usize - 1)..(v & 0xFFFF_FFFF) as usize
}

struct Problem<'a> {
    stacks: &'a [&'a NoisyModelStack],
    condition: Option<&'a Condition>,
    schedule: &'a NoiseSchedule,
    n: usize,
    c: usize,
}

/// Stochastic block sampling; returns the final sequence and diagnostics.
pub fn run_stochastic_pnf(
    stacks: &[&NoisyModelStack],
    condition: Option<&Condition>,
    schedule: &NoiseSchedule,
    n: usize,
    config: &BlockConfig,
    seed: u64,
) -> Result<(Vec<f64>, RunStats)> {
    validate(stacks, condition, schedule, n)?;
    if config.c == 0 || config.workers == 0 {
        return Err(Error::Config("block length and worker count must be positive".into()));
    }
    let p = Problem {
        stacks,
        condition,
        schedule,
        n,
        c: config.c.min(n),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 0));
    let x0: Vec<f64> = (0..stacks.len() * n)
        .map(|_| schedule.sigma(0) * init_rng.sample::<f64, _>(StandardNormal))
        .collect();
    match config.mode {
        BlockMode::Sync => run_sync(&p, x0, config.workers, seed),
        BlockMode::Async => run_async(&p, x0, config, seed),
    }
}

fn tag_error(e: Error, level: usize, step: usize, worker: Option<usize>) -> Error {
    match e {
        Error::Divergence { detail, .. } => divergence(level, step, worker, detail),
        Error::InvalidSample(v) => divergence(level, step, worker, format!("iterate became {v}")),
        Error::InvalidArgument(msg) => divergence(level, step, worker, msg),
        other => other,
    }
}

/// Prior plus likelihood gradient on `[j, j + c)` of every source.
/// `window(s)` returns source `s`'s window slice, `get` reads any joint
/// coordinate for the likelihood.
#[allow(clippy::too_many_arguments)]
fn joint_block_grad(
    p: &Problem<'_>,
    models: &[SharedModel],
    windows: &[Vec<f64>],
    win: &Range<usize>,
    get: &dyn Fn(usize) -> f64,
    j: usize,
    c: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(models.len() * c);
    for (s, model) in models.iter().enumerate() {
        let prior = block_gradient_in_window(model.as_ref(), &windows[s], win.start, j, c, sigma)?;
        match p.condition {
            Some(cond) => {
                let base = s * p.n;
                let lik = cond
                    .measurement
                    .block_grad(get, &cond.y, sigma, cond.covariance, base + j..base + j + c)?;
                g.extend(prior.iter().zip(&lik).map(|(a, b)| a + b));
            }
            None => g.extend(prior),
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(divergence(0, 0, None, "non-finite block gradient"));
    }
    Ok(g)
}

fn run_sync(p: &Problem<'_>, mut x: Vec<f64>, workers: usize, seed: u64) -> Result<(Vec<f64>, RunStats)> {
    let (n, c) = (p.n, p.c);
    let blocks: Vec<usize> = (0..n).step_by(c).collect();
    let w = p.stacks[0].window();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, 0));
    let mut stats = RunStats::default();
    let mut grad = vec![0.0; x.len()];
    let workers = workers.clamp(1, blocks.len());
    for level in 0..p.schedule.levels() {
        let started = Instant::now();
        let models = load_level(p.stacks, level)?;
        let sigma = p.schedule.sigma(level);
        let eta = p.schedule.eta(level);
        let scale = (2.0 * eta).sqrt();
        for step in 0..p.schedule.steps_per_level() {
            let noise: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let snapshot = &x;
            let chunk = blocks.len().div_ceil(workers);
            let results: Vec<Result<Vec<(usize, Vec<f64>)>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = blocks
                    .chunks(chunk)
                    .map(|mine| {
                        let models = &models;
                        scope.spawn(move || {
                            let get = |k: usize| snapshot[k];
                            mine.iter()
                                .map(|&j| {
                                    let len = c.min(n - j);
                                    let win = block_window(n, w, j, len);
                                    let windows: Vec<Vec<f64>> = (0..models.len())
                                        .map(|s| snapshot[s * n + win.start..s * n + win.end].to_vec())
                                        .collect();
                                    joint_block_grad(p, models, &windows, &win, &get, j, len, sigma).map(|g| (j, g))
                                })
                                .collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("sync worker panicked")).collect()
            });
            for part in results {
                for (j, g) in part.map_err(|e| tag_error(e, level, step, None))? {
                    let len = g.len() / models.len();
                    for s in 0..models.len() {
                        grad[s * n + j..s * n + j + len].copy_from_slice(&g[s * len..(s + 1) * len]);
                    }
                    stats.reads += (models.len() * block_window(n, w, j, len).len()) as u64;
                    stats.evaluations += (models.len() * (block_window(n, w, j, len).end - j)) as u64;
                }
            }
            for k in 0..x.len() {
                x[k] = langevin_coord(x[k], grad[k], eta, scale, noise[k]);
            }
            if let Some(&v) = x.iter().find(|v| !v.is_finite()) {
                return Err(divergence(level, step, None, format!("iterate became {v}")));
            }
        }
        stats.levels.push(LevelStats {
            level,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            block_updates: p.schedule.steps_per_level() * blocks.len(),
            overwrite_fraction: 0.0,
            concurrent_write_fraction: 0.0,
        });
    }
    Ok((x, stats))
}

#[derive(Default)]
struct WorkerTally {
    updates: usize,
    element_writes: usize,
    overwritten: usize,
    concurrent: usize,
    reads: u64,
    evaluations: u64,
}

struct LevelContext<'a> {
    p: &'a Problem<'a>,
    models: &'a [SharedModel],
    buf: &'a SharedBuffer,
    slots: &'a [AtomicU64],
    abort: &'a AtomicBool,
    failure: &'a Mutex<Option<Error>>,
    completed: &'a AtomicUsize,
    level: usize,
    sigma: f64,
    eta: f64,
    seed: u64,
}

fn worker_loop(ctx: &LevelContext<'_>, worker: usize, updates: usize) -> WorkerTally {
    let p = ctx.p;
    let (n, c) = (p.n, p.c);
    let sources = ctx.models.len();
    let w = p.stacks[0].window();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ctx.seed, ctx.level as u64 + 1, worker as u64 + 1));
    let scale = (2.0 * ctx.eta).sqrt();
    let mut tally = WorkerTally::default();
    let mut seen = vec![0u32; sources * c];
    for step in 0..updates {
        if ctx.abort.load(Ordering::Relaxed) {
            break;
        }
        let j = rng.random_range(0..=n - c);
        let win = block_window(n, w, j, c);
        for s in 0..sources {
            for t in 0..c {
                seen[s * c + t] = ctx.buf.versions[s * n + j + t].load(Ordering::Relaxed);
            }
        }
        let windows: Vec<Vec<f64>> = (0..sources)
            .map(|s| (win.start..win.end).map(|k| ctx.buf.load(s * n + k)).collect())
            .collect();
        let get = |k: usize| ctx.buf.load(k);
        let g = match joint_block_grad(p, ctx.models, &windows, &win, &get, j, c, ctx.sigma) {
            Ok(g) => g,
            Err(e) => {
                ctx.abort.store(true, Ordering::Relaxed);
                let mut slot = ctx.failure.lock().expect("failure lock");
                slot.get_or_insert(tag_error(e, ctx.level, step, Some(worker)));
                break;
            }
        };
        tally.reads += (sources * win.len()) as u64;
        tally.evaluations += (sources * (win.end - j)) as u64;

        let noise: Vec<f64> = (0..sources * c).map(|_| rng.sample(StandardNormal)).collect();
        ctx.slots[worker].store(slot_value(j, j + c), Ordering::SeqCst);
        let clash = ctx.slots.iter().enumerate().any(|(o, s)| {
            let v = s.load(Ordering::SeqCst);
            o != worker && v != IDLE && {
                let r = slot_range(v);
                r.start < j + c && j < r.end
            }
        });
        for s in 0..sources {
            for t in 0..c {
                let k = s * n + j + t;
                let old = windows[s][j + t - win.start];
                let v = langevin_coord(old, g[s * c + t], ctx.eta, scale, noise[s * c + t]);
                if ctx.buf.store(k, v, seen[s * c + t]) {
                    tally.overwritten += 1;
                }
            }
        }
        ctx.slots[worker].store(IDLE, Ordering::SeqCst);
        tally.concurrent += clash as usize;
        tally.element_writes += sources * c;
        tally.updates += 1;
        ctx.completed.fetch_add(1, Ordering::Relaxed);
    }
    tally
}

fn run_async(p: &Problem<'_>, x0: Vec<f64>, config: &BlockConfig, seed: u64) -> Result<(Vec<f64>, RunStats)> {
    let buf = SharedBuffer::new(&x0);
    let workers = config.workers;
    let slots: Vec<AtomicU64> = (0..workers).map(|_| AtomicU64::new(IDLE)).collect();
    let abort = AtomicBool::new(false);
    let failure = Mutex::new(None);
    let mut stats = RunStats::default();
    let sweeps = p.n.div_ceil(p.c);
    for level in 0..p.schedule.levels() {
        let started = Instant::now();
        let models = load_level(p.stacks, level)?;
        let total = match config.budget {
            IterationBudget::Sweeps => p.schedule.steps_per_level() * sweeps,
            IterationBudget::PerWorker => p.schedule.steps_per_level() * workers,
        };
        let completed = AtomicUsize::new(0);
        let ctx = LevelContext {
            p,
            models: &models,
            buf: &buf,
            slots: &slots,
            abort: &abort,
            failure: &failure,
            completed: &completed,
            level,
            sigma: p.schedule.sigma(level),
            eta: p.schedule.eta(level),
            seed,
        };
        // the scope is the level barrier: every worker joins before the next level
        let tallies: Vec<WorkerTally> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|wk| {
                    let share = total / workers + usize::from(wk < total % workers);
                    let ctx = &ctx;
                    scope.spawn(move || worker_loop(ctx, wk, share))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("async worker panicked")).collect()
        });
        if let Some(e) = failure.lock().expect("failure lock").take() {
            return Err(e);
        }
        let done = completed.load(Ordering::SeqCst);
        if done != total {
            return Err(Error::invalid(format!("level {level} finished {done} of {total} block updates")));
        }
        let updates: usize = tallies.iter().map(|t| t.updates).sum();
        let writes: usize = tallies.iter().map(|t| t.element_writes).sum();
        stats.reads += tallies.iter().map(|t| t.reads).sum::<u64>();
        stats.evaluations += tallies.iter().map(|t| t.evaluations).sum::<u64>();
        stats.levels.push(LevelStats {
            level,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            block_updates: updates,
            overwrite_fraction: tallies.iter().map(|t| t.overwritten).sum::<usize>() as f64 / writes.max(1) as f64,
            concurrent_write_fraction: tallies.iter().map(|t| t.concurrent).sum::<usize>() as f64
                / updates.max(1) as f64,
        });
    }
    let x = buf.to_vec();
    if let Some(&v) = x.iter().find(|v| !v.is_finite()) {
        return Err(divergence(p.schedule.levels() - 1, p.schedule.steps_per_level(), None, format!("iterate became {v}")));
    }
    Ok((x, stats))
}

/// One benchmark row per level and worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub workers: usize,
    pub n: usize,
    pub c: usize,
    pub level: usize,
    pub wall_ms: f64,
    pub overwrite_fraction: f64,
    pub final_ll: f64,
}

/// Runs the sampler once per worker count and reports per-level timings and
/// the noiseless log-likelihood of the quantized result under `base`.
pub fn throughput_bench(
    stack: &NoisyModelStack,
    base: &dyn ConditionalModel,
    schedule: &NoiseSchedule,
    n: usize,
    config: &BlockConfig,
    worker_counts: &[usize],
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &workers in worker_counts {
        let cfg = BlockConfig {
            workers,
            ..config.clone()
        };
        let (x, stats) = run_stochastic_pnf(&[stack], None, schedule, n, &cfg, seed)?;
        let final_ll = log_likelihood(base, &base.grid().quantize_all(&x)?)?;
        for l in &stats.levels {
            rows.push(BenchRow {
                workers,
                n,
                c: cfg.c.min(n),
                level: l.level,
                wall_ms: l.wall_ms,
                overwrite_fraction: l.overwrite_fraction,
                final_ll,
            });
        }
    }
    Ok(rows)
}
