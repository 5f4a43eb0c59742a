//! Binary checkpoint of a [`TrainState`].
//!
//! Layout (little-endian): magic `DIGF`, version `u32`, dims
//! `(chunk_len, action_dim, feature_dim, width)` as `u32`, seed, step and
//! optimizer counter as `u64`, residual bound `f64` and power iterations `u32`,
//! then length-prefixed `f64` blocks (field w1..b3, E, W, b, then the Adam first
//! and second moments per block), then the first 8 bytes of the SHA-256 of
//! everything before them.

use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::flow::{ActionEncoder, FieldDims, MlpField};
use crate::optim::AdamW;
use crate::residual::ResidualOperator;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"DIGF";
pub const VERSION: u32 = 1;
const PARAM_BLOCKS: usize = 9;

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_block(buf: &mut Vec<u8>, block: &[f64]) {
    put_u64(buf, block.len() as u64);
    for v in block {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize) -> u32 {
    u32::try_from(v).expect("dimension fits in u32")
}

/// Serializes `state` to bytes.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let dims = state.dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    for d in [dims.chunk_len, dims.action_dim, dims.feature_dim, dims.width] {
        put_u32(&mut buf, dim_u32(d));
    }
    put_u64(&mut buf, state.seed);
    put_u64(&mut buf, state.step);
    put_u64(&mut buf, state.adam.t);
    buf.extend_from_slice(&state.residual.bound.to_le_bytes());
    put_u32(&mut buf, dim_u32(state.residual.power_iters));
    for block in state.field.blocks() {
        put_block(&mut buf, block);
    }
    put_block(&mut buf, state.encoder.e.as_slice().expect("standard layout"));
    put_block(&mut buf, state.residual.w.as_slice().expect("standard layout"));
    put_block(&mut buf, state.residual.b.as_slice().expect("standard layout"));
    for block in state.adam.m.iter().chain(&state.adam.v) {
        put_block(&mut buf, block);
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("payload ends at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self, expected: usize, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let len = self.u64()? as usize;
        if len != expected {
            return Err(CheckpointError::Malformed(format!(
                "block {what} has {len} values, dims imply {expected}"
            )));
        }
        (0..len).map(|_| self.f64()).collect()
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() >= 8 {
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: VERSION,
            });
        }
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Checksum);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != trailer {
        return Err(CheckpointError::Checksum);
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let dims = FieldDims {
        chunk_len: r.u32()? as usize,
        action_dim: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        width: r.u32()? as usize,
    };
    let seed = r.u64()?;
    let step = r.u64()?;
    let t = r.u64()?;
    let bound = r.f64()?;
    let power_iters = r.u32()? as usize;

    let malformed = |e: Error| CheckpointError::Malformed(e.to_string());
    let mut field = MlpField::zeros(dims).map_err(malformed)?;
    for (i, dst) in field.blocks_mut().into_iter().enumerate() {
        let src = r.block(dst.len(), &format!("field[{i}]"))?;
        dst.copy_from_slice(&src);
    }
    let (d, da) = (dims.feature_dim, dims.action_dim);
    let e = r.block(d * da, "encoder")?;
    let encoder = ActionEncoder::new(Array2::from_shape_vec((d, da), e).unwrap()).map_err(malformed)?;
    let w = r.block(d * d, "residual W")?;
    let b = r.block(d, "residual b")?;
    let residual = ResidualOperator::new(
        Array2::from_shape_vec((d, d), w).unwrap(),
        Array1::from(b),
        bound,
        power_iters,
    )
    .map_err(malformed)?;

    let mut state = TrainState {
        field,
        encoder,
        residual,
        adam: AdamW::new(&[]),
        step,
        seed,
    };
    let lens = state.block_lens();
    debug_assert_eq!(lens.len(), PARAM_BLOCKS);
    let m = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| r.block(n, &format!("adam m[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let v = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| r.block(n, &format!("adam v[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    state.adam = AdamW { t, m, v };
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}
