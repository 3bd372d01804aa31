//! Dataset file format.
//!
//! Layout, little-endian throughout: magic `ECGD`, version `u32`, then
//! `n_h`, `n_b`, `T` as `u32`, `snr_db` as `f64`, the train, validation and
//! test pair counts as `u32`. Pairs follow in split order, each as
//! `heart_id`, `pacing_site`, `flags` (`u32`; bit 0 marks truncation), the
//! observation noise seed (`u64`), then `x₀` (`n_h×T`) and `y` (`n_b×T`) as
//! row-major `f64`.
//!
//! Transfer operators are not part of the pair file; they travel in a
//! sidecar tensor container at `<path>.operators`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::beat::{BodySurfaceRecord, EpicardialBeat};
use super::dataset::{DatasetSplit, Pair};
use super::geometry::{Point, TransferOperator};
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::numeric::{checkpoint, Tensor};

pub const MAGIC: &[u8; 4] = b"ECGD";
pub const VERSION: u32 = 1;
const FLAG_TRUNCATED: u32 = 1;

pub fn encode(split: &DatasetSplit) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, split.n_h as u32, split.n_b as u32, split.t as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&split.snr_db.to_le_bytes());
    for n in [split.train.len(), split.validation.len(), split.test.len()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for p in split.all_pairs() {
        let flags = if p.beat.truncated { FLAG_TRUNCATED } else { 0 };
        for v in [p.beat.heart_id, p.beat.pacing_site as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.record.noise_seed.to_le_bytes());
        for v in p.beat.potentials.data().iter().chain(p.record.potentials.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_h = r.u32()? as usize;
    let n_b = r.u32()? as usize;
    let t = r.u32()? as usize;
    let snr_db = r.f64()?;
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut read_pairs = |n: usize| -> Result<Vec<Pair>> {
        (0..n)
            .map(|_| {
                let heart_id = r.u32()?;
                let pacing_site = r.u32()? as usize;
                let flags = r.u32()?;
                let noise_seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let x = Tensor::new(vec![n_h, t], r.f64s(n_h * t)?)?;
                let y = Tensor::new(vec![n_b, t], r.f64s(n_b * t)?)?;
                Ok(Pair {
                    beat: EpicardialBeat {
                        potentials: x,
                        pacing_site,
                        heart_id,
                        truncated: flags & FLAG_TRUNCATED != 0,
                    },
                    record: BodySurfaceRecord {
                        potentials: y,
                        snr_db,
                        noise_seed,
                    },
                })
            })
            .collect()
    };
    let train = read_pairs(counts[0])?;
    let validation = read_pairs(counts[1])?;
    let test = read_pairs(counts[2])?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after last pair", r.remaining())));
    }
    Ok(DatasetSplit {
        n_h,
        n_b,
        t,
        snr_db,
        train,
        validation,
        test,
        operators: Vec::new(),
    })
}

pub fn operators_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".operators");
    PathBuf::from(s)
}

fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::from_fn2(points.len(), 3, |i, j| points[i][j])
}

fn tensor_points(t: &Tensor) -> Vec<Point> {
    (0..t.rows()).map(|i| [t.at(i, 0), t.at(i, 1), t.at(i, 2)]).collect()
}

pub fn encode_operators(ops: &[(u32, TransferOperator)]) -> Vec<u8> {
    let mut entries = Vec::with_capacity(3 * ops.len());
    for (id, op) in ops {
        entries.push((format!("heart.{id}.transfer"), op.matrix.clone()));
        entries.push((format!("heart.{id}.heart_positions"), points_tensor(&op.heart_positions)));
        entries.push((format!("heart.{id}.torso_positions"), points_tensor(&op.torso_positions)));
    }
    checkpoint::encode(&entries)
}

pub fn decode_operators(bytes: &[u8]) -> Result<Vec<(u32, TransferOperator)>> {
    let entries = checkpoint::decode(bytes)?;
    let find = |name: String| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("operator sidecar lacks {name}")))
    };
    let mut out = Vec::new();
    for (name, _) in &entries {
        let Some(id) = name.strip_prefix("heart.").and_then(|s| s.strip_suffix(".transfer")) else {
            continue;
        };
        let id: u32 = id
            .parse()
            .map_err(|_| Error::Format(format!("bad operator name {name}")))?;
        out.push((
            id,
            TransferOperator {
                matrix: find(format!("heart.{id}.transfer"))?.clone(),
                heart_positions: tensor_points(find(format!("heart.{id}.heart_positions"))?),
                torso_positions: tensor_points(find(format!("heart.{id}.torso_positions"))?),
            },
        ));
    }
    Ok(out)
}

/// Writes the pair file and, when operators are present, the sidecar.
pub fn save_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(split))?;
    if !split.operators.is_empty() {
        fs::write(operators_path(path), encode_operators(&split.operators))?;
    }
    Ok(())
}

/// Reads the pair file and its sidecar if one exists next to it.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let mut split = decode(&fs::read(path)?)?;
    let sidecar = operators_path(path);
    if sidecar.exists() {
        split.operators = decode_operators(&fs::read(sidecar)?)?;
    }
    Ok(split)
}

/// SHA-256 of the encoded pair file, hex encoded.
pub fn split_checksum(split: &DatasetSplit) -> String {
    Sha256::digest(encode(split))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
