//! Samplers selectable by name at runtime.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{run_pnf, Condition, NoiseSchedule};
use crate::armodel::{ancestral_sample, ConditionalModel, NoisyModelStack};
use crate::blocksampler::{run_stochastic_pnf, BlockConfig, BlockMode, RunStats};
use crate::error::{Error, Result};

pub struct SampleRequest<'a> {
    pub stacks: &'a [&'a NoisyModelStack],
    pub condition: Option<&'a Condition>,
    pub schedule: &'a NoiseSchedule,
    pub n: usize,
    pub block: BlockConfig,
    /// Noiseless model, used by samplers that ignore the noise levels.
    pub prior: Option<&'a dyn ConditionalModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub x: Vec<f64>,
    pub stats: Option<RunStats>,
}

pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, req: &SampleRequest<'_>, seed: u64) -> Result<SampleOutput>;
}

struct Annealed;

impl Sampler for Annealed {
    fn name(&self) -> &'static str {
        "pnf"
    }

    fn sample(&self, req: &SampleRequest<'_>, seed: u64) -> Result<SampleOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = run_pnf(req.stacks, req.condition, req.schedule, req.n, &mut rng)?;
        Ok(SampleOutput { x, stats: None })
    }
}

struct Blocked(BlockMode, &'static str);

impl Sampler for Blocked {
    fn name(&self) -> &'static str {
        self.1
    }

    fn sample(&self, req: &SampleRequest<'_>, seed: u64) -> Result<SampleOutput> {
        let cfg = BlockConfig {
            mode: self.0,
            ..req.block.clone()
        };
        let (x, stats) = run_stochastic_pnf(req.stacks, req.condition, req.schedule, req.n, &cfg, seed)?;
        Ok(SampleOutput { x, stats: Some(stats) })
    }
}

struct Ancestral;

impl Sampler for Ancestral {
    fn name(&self) -> &'static str {
        "ancestral"
    }

    fn sample(&self, req: &SampleRequest<'_>, seed: u64) -> Result<SampleOutput> {
        if req.condition.is_some() {
            return Err(Error::Config("ancestral sampling cannot be conditioned".into()));
        }
        let prior = req
            .prior
            .ok_or_else(|| Error::Config("ancestral sampling needs a noiseless prior model".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(req.n * req.stacks.len().max(1));
        for _ in 0..req.stacks.len().max(1) {
            let idx = ancestral_sample(prior, req.n, &mut rng)?;
            x.extend(prior.grid().dequantize(&idx));
        }
        Ok(SampleOutput { x, stats: None })
    }
}

pub struct SamplerRegistry {
    samplers: BTreeMap<&'static str, Box<dyn Sampler>>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = SamplerRegistry {
            samplers: BTreeMap::new(),
        };
        r.register(Box::new(Annealed));
        r.register(Box::new(Blocked(BlockMode::Sync, "pnf-sync")));
        r.register(Box::new(Blocked(BlockMode::Async, "pnf-async")));
        r.register(Box::new(Ancestral));
        r
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, sampler: Box<dyn Sampler>) {
        self.samplers.insert(sampler.name(), sampler);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Sampler> {
        self.samplers
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown sampler '{name}' (known: {})", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.samplers.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::{SharedModel, TabularMarkovModel};
    use crate::grid::Grid;
    use crate::sampler::make_schedule;
    use std::sync::Arc;

    #[test]
    fn lookup_by_name() {
        let r = SamplerRegistry::default();
        assert_eq!(r.names(), vec!["ancestral", "pnf", "pnf-async", "pnf-sync"]);
        assert!(r.get("gibbs").is_err());
    }

    #[test]
    fn samplers_are_deterministic_where_promised() {
        let grid = Grid::linear(3, -1.0, 1.0).unwrap();
        let m: SharedModel = Arc::new(TabularMarkovModel::discretized_ar1(grid, 0.5, 0.5).unwrap());
        let sched = make_schedule(1.0, 0.1, 3, 0.05, 4).unwrap();
        let stack = NoisyModelStack::shared(sched.sigmas().to_vec(), m.clone()).unwrap();
        let stacks = [&stack];
        let req = SampleRequest {
            stacks: &stacks,
            condition: None,
            schedule: &sched,
            n: 12,
            block: BlockConfig {
                c: 4,
                workers: 2,
                ..BlockConfig::default()
            },
            prior: Some(m.as_ref()),
        };
        let r = SamplerRegistry::default();
        for name in ["pnf", "pnf-sync", "ancestral"] {
            let a = r.get(name).unwrap().sample(&req, 9).unwrap();
            let b = r.get(name).unwrap().sample(&req, 9).unwrap();
            assert_eq!(a.x, b.x, "{name}");
            assert_eq!(a.x.len(), 12);
        }
    }
}
