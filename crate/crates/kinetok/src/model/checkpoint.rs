//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `KTOKCKPT`, format version u32, the twelve config fields
//! (u64 / f64 bit patterns), `frozen_base` u8, one adapter descriptor per
//! layer (`has_adapter` u8 + rank u64), then every tensor in
//! [`ParamSet::tensors`] order as rows u64, cols u64, and `rows·cols` f64
//! values. f64 values round-trip through their exact bit patterns, so a
//! save/load cycle reproduces the model bit-for-bit.
//!
//! The decoder never panics on malformed input: every read is
//! bounds-checked and structural limits are enforced before any allocation,
//! so arbitrary bytes produce an error, not a crash.

use super::math::Tensor;
use super::{AdapterTensors, ModelConfig, ModelParameters, ParamSet};
use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 8] = b"KTOKCKPT";
const VERSION: u32 = 1;

/// Hard ceilings for decoded structure sizes; anything beyond these is
/// treated as malformed input rather than an allocation request.
const MAX_DIM: u64 = 1 << 20;
const MAX_LAYERS: u64 = 4096;
const MAX_TENSOR_ELEMS: u64 = 1 << 26;

fn perr(msg: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| perr("length overflow"))?;
        if end > self.buf.len() {
            return Err(perr(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rows as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols as u64).to_le_bytes());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader, want_rows: usize, want_cols: usize) -> Result<Tensor> {
    let rows = r.u64()?;
    let cols = r.u64()?;
    if rows > MAX_DIM || cols > MAX_DIM || rows.saturating_mul(cols) > MAX_TENSOR_ELEMS {
        return Err(perr(format!("tensor dimensions {rows}x{cols} out of bounds")));
    }
    if rows as usize != want_rows || cols as usize != want_cols {
        return Err(perr(format!(
            "tensor shape {rows}x{cols} does not match expected {want_rows}x{want_cols}"
        )));
    }
    let n = (rows * cols) as usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    Ok(Tensor {
        rows: rows as usize,
        cols: cols as usize,
        data,
    })
}

/// Serialize a model to its checkpoint byte format.
pub fn checkpoint_to_bytes(params: &ModelParameters) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.layers as u64,
        cfg.heads as u64,
        cfg.d_model as u64,
        cfg.d_ff as u64,
        cfg.context as u64,
        cfg.channels as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&cfg.base_lr.to_le_bytes());
    out.extend_from_slice(&(cfg.epochs as u64).to_le_bytes());
    out.extend_from_slice(&cfg.clip_norm.to_le_bytes());
    out.extend_from_slice(&(cfg.batch_size as u64).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.push(params.frozen_base as u8);
    for l in &params.set.layers {
        match &l.adapter {
            Some(ad) => {
                out.push(1);
                out.extend_from_slice(&(ad.a.rows as u64).to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
        }
    }
    for t in params.set.tensors() {
        push_tensor(&mut out, t);
    }
    out
}

/// Decode a checkpoint. Rejects bad magic, unknown versions, inconsistent
/// shapes, trailing garbage, and non-finite weights.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParameters> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(perr("bad magic: not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(perr(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let layers = r.u64()?;
    let heads = r.u64()?;
    let d_model = r.u64()?;
    let d_ff = r.u64()?;
    let context = r.u64()?;
    let channels = r.u64()?;
    for (name, v) in [
        ("layers", layers),
        ("heads", heads),
        ("d_model", d_model),
        ("d_ff", d_ff),
        ("context", context),
        ("channels", channels),
    ] {
        if v == 0 || v > MAX_DIM.min(MAX_LAYERS) {
            return Err(perr(format!("config field {name} = {v} out of bounds")));
        }
    }
    let dropout = r.f64()?;
    let base_lr = r.f64()?;
    let epochs = r.u64()?;
    let clip_norm = r.f64()?;
    let batch_size = r.u64()?;
    let seed = r.u64()?;
    if epochs == 0 || epochs > MAX_DIM || batch_size == 0 || batch_size > MAX_DIM {
        return Err(perr("config epochs/batch_size out of bounds"));
    }
    let config = ModelConfig {
        layers: layers as usize,
        heads: heads as usize,
        d_model: d_model as usize,
        d_ff: d_ff as usize,
        context: context as usize,
        channels: channels as usize,
        dropout,
        base_lr,
        epochs: epochs as usize,
        clip_norm,
        batch_size: batch_size as usize,
        seed,
    };
    config
        .validate()
        .map_err(|e| perr(format!("invalid checkpoint config: {e}")))?;

    let frozen_base = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(perr(format!("frozen_base flag must be 0 or 1, got {v}"))),
    };
    let mut ranks = Vec::with_capacity(config.layers);
    for li in 0..config.layers {
        let has = r.u8()?;
        let rank = r.u64()?;
        match has {
            0 => {
                if rank != 0 {
                    return Err(perr(format!("layer {li}: absent adapter with rank {rank}")));
                }
                ranks.push(None);
            }
            1 => {
                if rank == 0 || rank > d_model {
                    return Err(perr(format!("layer {li}: adapter rank {rank} out of bounds")));
                }
                ranks.push(Some(rank as usize));
            }
            v => return Err(perr(format!("adapter flag must be 0 or 1, got {v}"))),
        }
    }

    let d = config.d_model;
    let w_emb = read_tensor(&mut r, config.channels, d)?;
    let b_emb = read_tensor(&mut r, 1, d)?;
    let mut layer_tensors = Vec::with_capacity(config.layers);
    for rank in &ranks {
        let ln1_gamma = read_tensor(&mut r, 1, d)?;
        let ln1_beta = read_tensor(&mut r, 1, d)?;
        let wq = read_tensor(&mut r, d, d)?;
        let bq = read_tensor(&mut r, 1, d)?;
        let wk = read_tensor(&mut r, d, d)?;
        let bk = read_tensor(&mut r, 1, d)?;
        let wv = read_tensor(&mut r, d, d)?;
        let bv = read_tensor(&mut r, 1, d)?;
        let wo = read_tensor(&mut r, d, d)?;
        let bo = read_tensor(&mut r, 1, d)?;
        let ln2_gamma = read_tensor(&mut r, 1, d)?;
        let ln2_beta = read_tensor(&mut r, 1, d)?;
        let w1 = read_tensor(&mut r, d, config.d_ff)?;
        let b1 = read_tensor(&mut r, 1, config.d_ff)?;
        let w2 = read_tensor(&mut r, config.d_ff, d)?;
        let b2 = read_tensor(&mut r, 1, d)?;
        let adapter = match rank {
            Some(rk) => Some(AdapterTensors {
                a: read_tensor(&mut r, *rk, d)?,
                b: read_tensor(&mut r, d, *rk)?,
            }),
            None => None,
        };
        layer_tensors.push(super::LayerTensors {
            ln1_gamma,
            ln1_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gamma,
            ln2_beta,
            w1,
            b1,
            w2,
            b2,
            adapter,
        });
    }
    let lnf_gamma = read_tensor(&mut r, 1, d)?;
    let lnf_beta = read_tensor(&mut r, 1, d)?;
    let w_head = read_tensor(&mut r, d, 3)?;
    let b_head = read_tensor(&mut r, 1, 3)?;
    if r.pos != bytes.len() {
        return Err(perr(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParameters {
        config,
        frozen_base,
        set: ParamSet {
            w_emb,
            b_emb,
            layers: layer_tensors,
            lnf_gamma,
            lnf_beta,
            w_head,
            b_head,
        },
    };
    for t in params.set.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(perr("checkpoint contains non-finite weights"));
        }
    }
    Ok(params)
}

/// Write a checkpoint file.
pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params))?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
