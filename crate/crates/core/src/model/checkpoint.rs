//! Binary checkpoint format.
//!
//! ```text
//! "ISOFM1"
//! repeated segment:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank x u64 dims
//!     prod(dims) x f64 values
//! u64 total element count over all segments
//! ```
//!
//! All integers and floats are little-endian. The first segment is
//! `meta.config`, a rank-1 array of six values describing the model
//! (`data_dim, hidden_dim, depth, time_embed_dim, num_classes, activation`
//! with activation 0 = tanh, 1 = SiLU); the remaining segments are the model
//! parameters in [`ModelConfig::segment_shapes`] order.

use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, Segment};
use crate::autodiff::Activation;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ISOFM1";
const META: &str = "meta.config";

fn config_values(c: &ModelConfig) -> Vec<f64> {
    vec![
        c.data_dim as f64,
        c.hidden_dim as f64,
        c.depth as f64,
        c.time_embed_dim as f64,
        c.num_classes as f64,
        match c.activation {
            Activation::Tanh => 0.0,
            Activation::Silu => 1.0,
        },
    ]
}

fn push_segment(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let meta = config_values(config);
    let mut out = Vec::with_capacity(16 + 8 * (params.len() + meta.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_segment(&mut out, META, &[meta.len()], &meta);
    for s in params.segments() {
        push_segment(&mut out, &s.name, &s.shape, &s.values);
    }
    let total = (meta.len() + params.len()) as u64;
    out.extend_from_slice(&total.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut segments = Vec::new();
    let mut total = 0usize;
    while r.remaining() > 8 {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("segment name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(bad("segment rank above 2"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > r.remaining() / 8 {
            return Err(bad("truncated"));
        }
        let values = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        total += n;
        segments.push(Segment { name, shape, values });
    }
    let checksum = r.u64()? as usize;
    if checksum != total {
        return Err(bad("element-count checksum mismatch"));
    }
    if segments.is_empty() || segments[0].name != META || segments[0].values.len() != 6 {
        return Err(bad("missing meta.config segment"));
    }
    let meta = segments.remove(0).values;
    if meta.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(bad("meta.config holds non-integer values"));
    }
    let config = ModelConfig {
        data_dim: meta[0] as usize,
        hidden_dim: meta[1] as usize,
        depth: meta[2] as usize,
        time_embed_dim: meta[3] as usize,
        num_classes: meta[4] as usize,
        activation: match meta[5] as usize {
            0 => Activation::Tanh,
            1 => Activation::Silu,
            _ => return Err(bad("unknown activation code")),
        },
    };
    config.validate()?;
    let params = ModelParams::new(segments);
    if params.len() != config.param_count() || !params.matches(&config) {
        return Err(ModelError::ParamCountMismatch { expected: config.param_count(), found: params.len() });
    }
    Ok((config, params))
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(config, params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}
