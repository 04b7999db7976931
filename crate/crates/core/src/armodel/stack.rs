//! One fine-tuned model per noise level.
//!
//! Samplers pull levels one at a time through [`NoisyModelStack::level`];
//! the file-backed store decodes a level on demand so only the model in use
//! stays resident.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::checkpoint::{write_model, Header, ModelRegistry};
use super::ConditionalModel;
use crate::error::{Error, Result};
use crate::grid::{read_f64, read_u32, Grid};

pub const STACK_MAGIC: &[u8; 4] = b"PNFS";
pub const STACK_VERSION: u32 = 1;

pub type SharedModel = Arc<dyn ConditionalModel>;

/// Source of per-level models.
pub trait LevelStore: Send + Sync {
    fn levels(&self) -> usize;
    fn load(&self, level: usize) -> Result<SharedModel>;
}

struct MemoryStore {
    models: Vec<SharedModel>,
}

impl LevelStore for MemoryStore {
    fn levels(&self) -> usize {
        self.models.len()
    }

    fn load(&self, level: usize) -> Result<SharedModel> {
        self.models
            .get(level)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("level {level} out of range")))
    }
}

struct FileStore {
    path: PathBuf,
    offsets: Vec<u64>,
}

impl LevelStore for FileStore {
    fn levels(&self) -> usize {
        self.offsets.len()
    }

    fn load(&self, level: usize) -> Result<SharedModel> {
        let off = *self
            .offsets
            .get(level)
            .ok_or_else(|| Error::invalid(format!("level {level} out of range")))?;
        let mut r = BufReader::new(File::open(&self.path)?);
        r.seek(SeekFrom::Start(off))?;
        Ok(Arc::from(ModelRegistry::default().read(&mut r)?))
    }
}

pub struct NoisyModelStack {
    sigmas: Vec<f64>,
    grid: Grid,
    window: usize,
    store: Box<dyn LevelStore>,
}

impl std::fmt::Debug for NoisyModelStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoisyModelStack")
            .field("sigmas", &self.sigmas)
            .field("window", &self.window)
            .finish()
    }
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("noise levels must be positive and finite"));
    }
    if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::invalid("noise levels must be strictly decreasing"));
    }
    Ok(())
}

impl NoisyModelStack {
    pub fn in_memory(sigmas: Vec<f64>, models: Vec<SharedModel>) -> Result<Self> {
        check_sigmas(&sigmas)?;
        if models.len() != sigmas.len() {
            return Err(Error::Dimension {
                expected: sigmas.len(),
                actual: models.len(),
            });
        }
        let grid = models[0].grid().clone();
        let window = models[0].window();
        let kind = models[0].kind();
        if models
            .iter()
            .any(|m| m.grid() != &grid || m.window() != window || m.kind() != kind)
        {
            return Err(Error::invalid("all levels must share architecture and grid"));
        }
        Ok(NoisyModelStack {
            sigmas,
            grid,
            window,
            store: Box::new(MemoryStore { models }),
        })
    }

    /// The same model at every level (no fine-tuning).
    pub fn shared(sigmas: Vec<f64>, model: SharedModel) -> Result<Self> {
        let models = vec![model; sigmas.len()];
        Self::in_memory(sigmas, models)
    }

    pub fn from_store(sigmas: Vec<f64>, store: Box<dyn LevelStore>) -> Result<Self> {
        check_sigmas(&sigmas)?;
        if store.levels() != sigmas.len() {
            return Err(Error::Dimension {
                expected: sigmas.len(),
                actual: store.levels(),
            });
        }
        let first = store.load(0)?;
        Ok(NoisyModelStack {
            grid: first.grid().clone(),
            window: first.window(),
            sigmas,
            store,
        })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn level(&self, i: usize) -> Result<SharedModel> {
        self.store.load(i)
    }

    /// Stack file: magic `PNFS`, version, level count (u32), the sigmas as
    /// f64 LE, then one checkpoint record per level.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(STACK_MAGIC)?;
        w.write_all(&STACK_VERSION.to_le_bytes())?;
        w.write_all(&(self.levels() as u32).to_le_bytes())?;
        for s in &self.sigmas {
            w.write_all(&s.to_le_bytes())?;
        }
        for i in 0..self.levels() {
            write_model(&mut w, self.level(i)?.as_ref())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Opens a stack file, indexing record offsets without decoding parameters.
    pub fn open(path: &Path) -> Result<Self> {
        let registry = ModelRegistry::default();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STACK_MAGIC {
            return Err(Error::Format("bad stack magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != STACK_VERSION {
            return Err(Error::Format(format!("unsupported stack version {version}")));
        }
        let levels = read_u32(&mut r)? as usize;
        if levels == 0 || levels > 10_000 {
            return Err(Error::Format(format!("implausible level count {levels}")));
        }
        let sigmas = (0..levels).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(levels);
        let mut reference: Option<Header> = None;
        for _ in 0..levels {
            offsets.push(r.stream_position()?);
            let h = registry.read_header(&mut r)?;
            let count = registry.param_count(h.tag, &h.dims)?;
            r.seek_relative(4 * count as i64)?;
            match &reference {
                Some(first) if first != &h => {
                    return Err(Error::Format("stack levels disagree on architecture".into()))
                }
                Some(_) => {}
                None => reference = Some(h),
            }
        }
        let end = r.stream_position()?;
        if end > std::fs::metadata(path)?.len() {
            return Err(Error::Format("stack file truncated".into()));
        }
        Self::from_store(
            sigmas,
            Box::new(FileStore {
                path: path.to_path_buf(),
                offsets,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::TabularMarkovModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn file_stack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Grid::linear(3, -1.0, 1.0).unwrap();
        let models: Vec<SharedModel> = (0..3)
            .map(|_| Arc::new(TabularMarkovModel::random(grid.clone(), 1, 1.0, &mut rng).unwrap()) as SharedModel)
            .collect();
        let stack = NoisyModelStack::in_memory(vec![1.0, 0.5, 0.25], models.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pnfs");
        stack.save(&path).unwrap();
        let back = NoisyModelStack::open(&path).unwrap();
        assert_eq!(back.sigmas(), stack.sigmas());
        for (i, m) in models.iter().enumerate() {
            let a = m.logits(&[0.9]).unwrap();
            let b = back.level(i).unwrap().logits(&[0.9]).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn rejects_bad_sigmas() {
        let m: SharedModel = Arc::new(TabularMarkovModel::uniform(Grid::linear(2, 0.0, 1.0).unwrap(), 1).unwrap());
        assert!(NoisyModelStack::shared(vec![0.5, 1.0], m.clone()).is_err());
        assert!(NoisyModelStack::shared(vec![], m.clone()).is_err());
        assert!(NoisyModelStack::in_memory(vec![1.0, 0.5], vec![m]).is_err());
    }

    #[test]
    fn truncated_file_errors() {
        let m: SharedModel = Arc::new(TabularMarkovModel::uniform(Grid::linear(2, 0.0, 1.0).unwrap(), 1).unwrap());
        let stack = NoisyModelStack::shared(vec![1.0, 0.5], m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pnfs");
        stack.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(NoisyModelStack::open(&path).is_err());
    }
}
