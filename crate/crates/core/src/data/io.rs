//! Dataset file: magic `RCAX`, u32 version, u32 trajectory count, then per
//! trajectory u32 length `T`, u32 observation dimension, `T x dim` f32
//! observations (row-major), `T - 1` action bytes and `T` (row, col) u16
//! state pairs. All integers little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, Trajectory};
use crate::env::{Action, Observation, State};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"RCAX";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for t in &ds.trajectories {
        let dim = t.observations.first().map_or(0, Observation::dim);
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for o in &t.observations {
            for &v in &o.features {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend(t.actions.iter().map(|a| a.id()));
        for s in &t.states {
            out.extend_from_slice(&(s.row as u16).to_le_bytes());
            out.extend_from_slice(&(s.col as u16).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated dataset: missing {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n = r.u32("trajectory count")? as usize;
    let mut trajectories = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32("trajectory length")? as usize;
        let dim = r.u32("observation dimension")? as usize;
        let raw = r.take(
            len.checked_mul(dim)
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| Error::Format("observation block overflows".into()))?,
            "observations",
        )?;
        let observations = raw
            .chunks_exact(4 * dim.max(1))
            .take(len)
            .map(|row| Observation {
                features: row
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect(),
            })
            .collect();
        let actions = r
            .take(len.saturating_sub(1), "actions")?
            .iter()
            .map(|&id| Action::from_id(id))
            .collect::<Result<Vec<_>>>()?;
        let raw_states = r.take(4 * len, "states")?;
        let states = raw_states
            .chunks_exact(4)
            .map(|c| {
                State::new(
                    i32::from(u16::from_le_bytes([c[0], c[1]])),
                    i32::from(u16::from_le_bytes([c[2], c[3]])),
                )
            })
            .collect();
        trajectories.push(Trajectory {
            observations,
            actions,
            states,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(Dataset { trajectories })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
