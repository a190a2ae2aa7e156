//! Binary checkpoint: magic `RCXP`, u32 version, a length-prefixed
//! hyperparameter block (`key=value` lines), then a named-tensor table with
//! little-endian f32 payloads.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::params::ParameterStore;
use super::{BudgetEncoding, ModelConfig, WorldModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCXP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn hyper_block(c: &ModelConfig) -> String {
    format!(
        "obs_dim={}\nlatent_dim={}\nencoder_hidden={}\ndynamics_hidden={}\nhead_hidden={}\ncontext_len={}\nh_max={}\nbudget_encoding={}\n",
        c.obs_dim,
        c.latent_dim,
        c.encoder_hidden,
        c.dynamics_hidden,
        c.head_hidden,
        c.context_len,
        c.h_max,
        c.budget_encoding.name()
    )
}

fn parse_hyper(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(0);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad hyperparameter line '{line}'")))?;
        let num = || {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad value for {k}: '{v}'")))
        };
        match k {
            "obs_dim" => c.obs_dim = num()?,
            "latent_dim" => c.latent_dim = num()?,
            "encoder_hidden" => c.encoder_hidden = num()?,
            "dynamics_hidden" => c.dynamics_hidden = num()?,
            "head_hidden" => c.head_hidden = num()?,
            "context_len" => c.context_len = num()?,
            "h_max" => c.h_max = num()?,
            "budget_encoding" => c.budget_encoding = BudgetEncoding::parse(v)?,
            other => return Err(Error::Format(format!("unknown hyperparameter '{other}'"))),
        }
    }
    Ok(c)
}

pub fn encode_checkpoint(model: &WorldModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let hyper = hyper_block(&model.config);
    out.extend_from_slice(&(hyper.len() as u32).to_le_bytes());
    out.extend_from_slice(hyper.as_bytes());
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn read_exact<const N: usize>(cur: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))?;
    Ok(buf)
}

fn read_vec(cur: &mut Cursor<&[u8]>, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))?;
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<WorldModel> {
    let mut cur = Cursor::new(bytes);
    let magic = read_exact::<4>(&mut cur, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut cur, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hyper_len = u32::from_le_bytes(read_exact(&mut cur, "header length")?) as usize;
    let hyper = String::from_utf8(read_vec(&mut cur, hyper_len, "header")?)
        .map_err(|_| Error::Format("header is not utf-8".into()))?;
    let config = parse_hyper(&hyper)?;
    let n = u32::from_le_bytes(read_exact(&mut cur, "tensor count")?) as usize;
    let mut params = ParameterStore::new();
    for _ in 0..n {
        let name_len = u16::from_le_bytes(read_exact(&mut cur, "name length")?) as usize;
        let name = String::from_utf8(read_vec(&mut cur, name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let ndim = read_exact::<1>(&mut cur, "rank")?[0] as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u32::from_le_bytes(read_exact(&mut cur, "shape")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = read_vec(&mut cur, 4 * len, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        params.add(&name, &shape, data)?;
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    WorldModel::from_parts(config, params)
}

pub fn save_checkpoint(model: &WorldModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<WorldModel> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rounds every parameter to f32, matching what a save/load cycle yields.
pub fn round_to_f32(model: &mut WorldModel) {
    for t in model.params.tensors_mut() {
        for v in &mut t.data {
            *v = f64::from(*v as f32);
        }
    }
}
