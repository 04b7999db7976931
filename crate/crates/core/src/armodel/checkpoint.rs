//! Binary checkpoints for single parameter sets.
//!
//! Layout: magic `PNFM`, version (u32), grid block, descriptor (kind tag,
//! dimension count, dimensions, all u32), then the parameters as f32 LE.
//! Decoders are looked up by kind tag in a [`ModelRegistry`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CausalConvNet, ConditionalModel, ConvNetConfig, TabularMarkovModel};
use crate::error::{Error, Result};
use crate::grid::{read_f32, read_u32, Grid};

pub const MAGIC: &[u8; 4] = b"PNFM";
pub const VERSION: u32 = 1;

pub const TABULAR_TAG: u32 = 0;
pub const CONVNET_TAG: u32 = 1;

pub(crate) fn write_descriptor(w: &mut dyn Write, tag: u32, dims: &[u32]) -> Result<()> {
    w.write_all(&tag.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

/// Parsed checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub grid: Grid,
    pub tag: u32,
    pub dims: Vec<u32>,
}

type Decoder = fn(Grid, &[u32], Vec<f64>) -> Result<Box<dyn ConditionalModel>>;
type Counter = fn(&[u32]) -> Result<usize>;

struct Entry {
    name: &'static str,
    param_count: Counter,
    decode: Decoder,
}

/// Model families known to the checkpoint reader, keyed by descriptor tag.
pub struct ModelRegistry {
    entries: BTreeMap<u32, Entry>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = ModelRegistry::empty();
        r.register(TABULAR_TAG, "tabular", tabular_count, tabular_decode);
        r.register(CONVNET_TAG, "convnet", convnet_count, convnet_decode);
        r
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        ModelRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, tag: u32, name: &'static str, param_count: Counter, decode: Decoder) {
        self.entries.insert(
            tag,
            Entry {
                name,
                param_count,
                decode,
            },
        );
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.values().map(|e| e.name).collect()
    }

    fn entry(&self, tag: u32) -> Result<&Entry> {
        self.entries
            .get(&tag)
            .ok_or_else(|| Error::Format(format!("unknown model kind tag {tag}")))
    }

    pub fn param_count(&self, tag: u32, dims: &[u32]) -> Result<usize> {
        (self.entry(tag)?.param_count)(dims)
    }

    pub fn read_header<R: Read>(&self, r: &mut R) -> Result<Header> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let grid = Grid::read_from(r)?;
        let tag = read_u32(r)?;
        let ndims = read_u32(r)? as usize;
        if ndims > 64 {
            return Err(Error::Format(format!("descriptor with {ndims} dimensions")));
        }
        let dims = (0..ndims).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        self.entry(tag)?;
        Ok(Header { grid, tag, dims })
    }

    pub fn read<R: Read>(&self, r: &mut R) -> Result<Box<dyn ConditionalModel>> {
        let h = self.read_header(r)?;
        let count = self.param_count(h.tag, &h.dims)?;
        let params = (0..count)
            .map(|_| read_f32(r).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        (self.entry(h.tag)?.decode)(h.grid, &h.dims, params)
    }
}

fn tabular_count(dims: &[u32]) -> Result<usize> {
    match dims {
        [order, d] => Ok(*d as usize * (1 + (*d as usize).pow(*order))),
        _ => Err(Error::Format("tabular descriptor needs [order, d]".into())),
    }
}

fn tabular_decode(grid: Grid, dims: &[u32], params: Vec<f64>) -> Result<Box<dyn ConditionalModel>> {
    let d = grid.d();
    if dims[1] as usize != d {
        return Err(Error::Format("tabular descriptor disagrees with grid size".into()));
    }
    let mut init = params;
    let table = init.split_off(d);
    let m = TabularMarkovModel::normalized(grid, dims[0] as usize, init, table)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(Box::new(m))
}

fn convnet_config(dims: &[u32]) -> Result<(ConvNetConfig, usize)> {
    let bad = || Error::Format("convnet descriptor needs [channels, 2, layers, dilations.., d]".into());
    if dims.len() < 4 || dims[1] != 2 {
        return Err(bad());
    }
    let layers = dims[2] as usize;
    if dims.len() != 4 + layers {
        return Err(bad());
    }
    let config = ConvNetConfig {
        channels: dims[0] as usize,
        dilations: dims[3..3 + layers].iter().map(|&v| v as usize).collect(),
    };
    Ok((config, dims[3 + layers] as usize))
}

fn convnet_count(dims: &[u32]) -> Result<usize> {
    let (config, d) = convnet_config(dims)?;
    Ok(CausalConvNet::param_count_for(&config, d))
}

fn convnet_decode(grid: Grid, dims: &[u32], params: Vec<f64>) -> Result<Box<dyn ConditionalModel>> {
    let (config, d) = convnet_config(dims)?;
    if d != grid.d() {
        return Err(Error::Format("convnet descriptor disagrees with grid size".into()));
    }
    Ok(Box::new(CausalConvNet::from_params(grid, config, params)?))
}

/// Serialize one model, header included.
pub fn write_model<W: Write>(w: &mut W, model: &dyn ConditionalModel) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    model.grid().write_to(w)?;
    model.encode(w)
}

pub fn save_model(path: &Path, model: &dyn ConditionalModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Box<dyn ConditionalModel>> {
    let mut r = BufReader::new(File::open(path)?);
    ModelRegistry::default().read(&mut r)
}

/// Loads a checkpoint that must hold a conv net (for further training).
pub fn load_convnet(path: &Path) -> Result<CausalConvNet> {
    let mut r = BufReader::new(File::open(path)?);
    let registry = ModelRegistry::default();
    let h = registry.read_header(&mut r)?;
    if h.tag != CONVNET_TAG {
        return Err(Error::Config(format!("{} does not hold a convnet", path.display())));
    }
    let (config, _) = convnet_config(&h.dims)?;
    let count = registry.param_count(h.tag, &h.dims)?;
    let params = (0..count)
        .map(|_| read_f32(&mut r).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    CausalConvNet::from_params(h.grid, config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tabular_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = TabularMarkovModel::random(Grid::linear(3, -1.0, 1.0).unwrap(), 2, 1.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = ModelRegistry::default().read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.kind(), "tabular");
        assert_eq!(back.window(), 2);
        let ctx = [0.4, -0.8];
        let (a, b) = (m.logits(&ctx).unwrap(), back.logits(&ctx).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn convnet_round_trip_is_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ConvNetConfig {
            channels: 3,
            dilations: vec![1, 2],
        };
        let mut net = CausalConvNet::new(Grid::mu_law(8, 255.0).unwrap(), cfg, &mut rng).unwrap();
        net.randomize_output(0.3, &mut rng);
        let mut buf = Vec::new();
        write_model(&mut buf, &net).unwrap();
        let back = ModelRegistry::default().read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.window(), 4);
        assert_eq!(back.grid(), net.grid());
        // a second round trip is lossless
        let mut again = Vec::new();
        write_model(&mut again, back.as_ref()).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            ModelRegistry::default().read(&mut &b"NOPE...."[..]),
            Err(Error::Format(_))
        ));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Grid::linear(2, 0.0, 1.0).unwrap().write_to(&mut buf).unwrap();
        write_descriptor(&mut buf, 99, &[]).unwrap();
        assert!(ModelRegistry::default().read(&mut buf.as_slice()).is_err());
    }
}
