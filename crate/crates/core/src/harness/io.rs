//! Output files: raw samples with JSON sidecars, metric and benchmark CSVs.
//!
//! Raw sample files are headerless little-endian f32 values. Sequences are
//! stored back to back; the sidecar records how to split them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocksampler::BenchRow;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn write_raw_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_f32(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect())
}

/// Where a sample file came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: String,
    pub sampler: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

/// Description of a raw sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Length of one source sequence.
    pub n: usize,
    /// Sources per record (2 for separation).
    pub sources: usize,
    /// Number of records in the file.
    pub records: usize,
    pub grid: Grid,
    pub provenance: Provenance,
}

impl Sidecar {
    pub fn record_len(&self) -> usize {
        self.n * self.sources
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes samples and their sidecar (`<stem>.f32`, `<stem>.json`).
pub fn write_samples(dir: &Path, stem: &str, records: &[Vec<f64>], sidecar: &Sidecar) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.len() != sidecar.record_len()) {
        return Err(Error::Dimension {
            expected: sidecar.record_len(),
            actual: r.len(),
        });
    }
    let flat: Vec<f64> = records.iter().flatten().copied().collect();
    write_raw_f32(&dir.join(format!("{stem}.f32")), &flat)?;
    write_json(&dir.join(format!("{stem}.json")), sidecar)
}

/// Reads a raw sample file, splitting it per its sidecar when present and
/// into sequences of `n` otherwise.
pub fn read_samples(path: &Path, n: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let side = path.with_extension("json");
    let len = match n {
        Some(n) => n,
        None if side.exists() => read_json::<Sidecar>(&side)?.record_len(),
        None => return Err(Error::Config(format!("{}: no sidecar and no length given", path.display()))),
    };
    let flat = read_raw_f32(path)?;
    if len == 0 || flat.len() % len != 0 {
        return Err(Error::Format(format!(
            "{}: {} values do not split into records of {len}",
            path.display(),
            flat.len()
        )));
    }
    Ok(flat.chunks(len).map(<[f64]>::to_vec).collect())
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub config_hash: String,
    pub task: String,
    pub run: usize,
    pub seed: u64,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub levels: usize,
    pub wall_ms: f64,
    pub log_likelihood: Option<f64>,
    pub si_sdr: Option<f64>,
    pub psnr: Option<f64>,
    pub constraint_residual: Option<f64>,
    /// Same metric for the in-harness baseline (spline, interpolation or
    /// the unseparated mixture).
    pub baseline_si_sdr: Option<f64>,
    pub baseline_psnr: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricRecord]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_csv(path, rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{other:?}")),
        }
    } else {
        Error::Format(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sidecar(n: usize, records: usize) -> Sidecar {
        Sidecar {
            n,
            sources: 1,
            records,
            grid: Grid::linear(4, -1.0, 1.0).unwrap(),
            provenance: Provenance {
                task: "sample".into(),
                sampler: Some("pnf".into()),
                seed: 1,
                config_hash: "ab".into(),
                version: "0".into(),
            },
        }
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![vec![0.25, -0.5, 1.0], vec![0.0, 0.125, -1.0]];
        write_samples(dir.path(), "s", &recs, &sidecar(3, 2)).unwrap();
        let bytes = fs::read(dir.path().join("s.f32")).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], &0.25f32.to_le_bytes());
        assert_eq!(read_samples(&dir.path().join("s.f32"), None).unwrap(), recs);
        let side: Sidecar = read_json(&dir.path().join("s.json")).unwrap();
        assert_eq!(side, sidecar(3, 2));
        assert!(write_samples(dir.path(), "t", &[vec![1.0]], &sidecar(3, 1)).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let row = MetricRecord {
            config_hash: "00ff".into(),
            task: "superres".into(),
            run: 3,
            seed: 7,
            steps: 64,
            levels: 10,
            wall_ms: 12.5,
            log_likelihood: Some(-40.0),
            si_sdr: None,
            psnr: Some(31.0),
            constraint_residual: Some(0.01),
            baseline_si_sdr: None,
            baseline_psnr: Some(28.0),
        };
        let path = dir.path().join("m.csv");
        write_metrics(&path, std::slice::from_ref(&row)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("config_hash,task,run,seed,T,L,wall_ms,log_likelihood,si_sdr,psnr,"));
        assert_eq!(read_metrics(&path).unwrap(), vec![row]);
    }

    #[test]
    fn truncated_raw_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        fs::write(&p, [0u8; 6]).unwrap();
        assert!(read_raw_f32(&p).is_err());
    }
}
