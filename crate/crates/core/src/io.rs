//! Binary logit dumps, label files, CSV/JSON reports and atomic writes.
//!
//! Dump layout (little-endian): `b"GDKD"`, `u32` version, `u64` sample
//! count `n`, `u32` class count `C`, then `n * C` `f32` values row-major.
//! Label files are `n` little-endian `u32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{ClassPredictionProfile, DiscrepancyMatrix};
use crate::error::{Error, Result};
use crate::numeric::LogitVector;
use crate::scalar::Scalar;

pub const DUMP_MAGIC: &[u8; 4] = b"GDKD";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Row-major logits as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDump {
    pub num_classes: usize,
    pub values: Vec<f32>,
}

impl LogitDump {
    pub fn from_rows<S: Scalar>(rows: &[LogitVector<S>]) -> Result<Self> {
        let c = rows.first().map_or(0, LogitVector::len);
        let mut values = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::Shape { expected: c, got: r.len() });
            }
            values.extend(r.as_slice().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        Ok(Self { num_classes: c, values })
    }

    pub fn len(&self) -> usize {
        if self.num_classes == 0 {
            0
        } else {
            self.values.len() / self.num_classes
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Validated logit vectors, widened or kept as `S`.
    pub fn to_logits<S: Scalar>(&self) -> Result<Vec<LogitVector<S>>> {
        (0..self.len())
            .map(|i| {
                LogitVector::new(self.row(i).iter().map(|&v| S::lit(f64::from(v))).collect())
                    .map_err(|e| Error::Format(format!("row {i}: {e}")))
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("dump too short: {} bytes", bytes.len())));
        }
        if &bytes[..4] != DUMP_MAGIC {
            return Err(Error::Format("bad magic, expected GDKD".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let c = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        let expected = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(c))
            .and_then(|m| m.checked_mul(4))
            .ok_or_else(|| Error::Format("dump dimensions overflow".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "dump body is {} bytes, header implies {expected}",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self { num_classes: c, values })
    }
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &y in labels {
        let y = u32::try_from(y).map_err(|_| Error::Format(format!("label {y} exceeds u32")))?;
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("label file length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect())
}

pub fn read_logit_dump(path: &Path) -> Result<LogitDump> {
    LogitDump::decode(&fs::read(path)?)
}

pub fn write_logit_dump(path: &Path, dump: &LogitDump) -> Result<()> {
    atomic_write(path, &dump.encode())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&fs::read(path)?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    atomic_write(path, &encode_labels(labels)?)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, &csv_bytes(rows)?)
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &json_bytes(value)?)
}

/// Lower-case hex SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One point of a sorted profile curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow<S> {
    pub class_id: usize,
    pub rank: usize,
    pub prob: S,
}

/// Profiles flattened to `(class_id, rank, prob)`, ranks starting at 1.
pub fn profile_rows<S: Scalar>(profiles: &[ClassPredictionProfile<S>]) -> Vec<ProfileRow<S>> {
    profiles
        .iter()
        .flat_map(|p| {
            p.sorted_curve()
                .into_iter()
                .enumerate()
                .map(move |(r, prob)| ProfileRow { class_id: p.class_id, rank: r + 1, prob })
        })
        .collect()
}

/// One cell of a discrepancy matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyRow<S> {
    pub true_class: usize,
    pub class: usize,
    pub samples: usize,
    pub logit_diff: S,
    pub prob_diff: S,
    pub masked: bool,
}

/// Matrix cells in row-major order.
pub fn discrepancy_rows<S: Scalar>(m: &DiscrepancyMatrix<S>) -> Vec<DiscrepancyRow<S>> {
    let c = m.num_classes();
    (0..c)
        .flat_map(|y| {
            (0..c).map(move |j| DiscrepancyRow {
                true_class: y,
                class: j,
                samples: m.row_counts[y],
                logit_diff: m.logit_diff[y][j],
                prob_diff: m.prob_diff[y][j],
                masked: m.diagonal_masked && y == j,
            })
        })
        .collect()
}
