//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "ORDCHGCK"
//! version      u32      1
//! topology     u8       0 = plain, 1 = siamese
//! dropout      f64
//! n_encoder    u32
//! n_head       u32
//! dims         (fan_in u32, fan_out u32) per layer, encoder then head
//! params       per layer: fan_out*fan_in f64 weights (row-major), fan_out f64 biases
//! crc32        u32      IEEE CRC-32 of every preceding byte
//! ```

use std::path::Path;

use super::{Dense, ModelParams, Topology};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ORDCHGCK";
const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match params.topology {
        Topology::Plain => 0,
        Topology::Siamese => 1,
    });
    out.extend_from_slice(&params.dropout_rate.to_le_bytes());
    out.extend_from_slice(&(params.encoder.len() as u32).to_le_bytes());
    out.extend_from_slice(&(params.head.len() as u32).to_le_bytes());
    for layer in params.encoder.iter().chain(&params.head) {
        out.extend_from_slice(&(layer.fan_in as u32).to_le_bytes());
        out.extend_from_slice(&(layer.fan_out as u32).to_le_bytes());
    }
    for layer in params.encoder.iter().chain(&params.head) {
        for v in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let topology = match r.take(1)?[0] {
        0 => Topology::Plain,
        1 => Topology::Siamese,
        t => return Err(corrupt(format!("unknown topology tag {t}"))),
    };
    let dropout = r.f64()?;
    let n_encoder = r.u32()? as usize;
    let n_head = r.u32()? as usize;
    let n_layers = n_encoder
        .checked_add(n_head)
        .filter(|&n| n <= body.len() / 8)
        .ok_or_else(|| corrupt("implausible layer count"))?;
    let dims: Vec<(usize, usize)> = (0..n_layers)
        .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for (fan_in, fan_out) in dims {
        let n_weights = fan_in.checked_mul(fan_out).ok_or_else(|| corrupt("layer too large"))?;
        let weights = (0..n_weights).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..fan_out).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(Dense { fan_in, fan_out, weights, bias });
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after parameters"));
    }
    let head = layers.split_off(n_encoder);
    ModelParams::from_layers(topology, layers, head, dropout).map_err(|e| corrupt(e.to_string()))
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode_checkpoint(params))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}
