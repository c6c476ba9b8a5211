//! Binary checkpoint of a [`TrainState`].
//!
//! Layout, all little-endian:
//!
//! | offset | size  | field                          |
//! |--------|-------|--------------------------------|
//! | 0      | 8     | magic `OFLDSTAT`               |
//! | 8      | 4     | format version (`u32`, = 1)    |
//! | 12     | 8     | element count Ψ (`u64`)        |
//! | 20     | 8     | step count t (`u64`)           |
//! | 28     | 4     | loss scale (`f32`)             |
//! | 32     | 4     | clean-step streak (`u32`)      |
//! | 36     | 4·Ψ   | master weights (`f32`)         |
//! |        | 4·Ψ   | first moments (`f32`)          |
//! |        | 4·Ψ   | second moments (`f32`)         |
//! |        | 2·Ψ   | working weights (binary16 bits)|

use std::path::Path;

use half::f16;

use super::TrainState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OFLDSTAT";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 36;

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let n = state.len();
    let mut out = Vec::with_capacity(HEADER_BYTES + 14 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&state.t.to_le_bytes());
    out.extend_from_slice(&state.loss_scale.to_le_bytes());
    out.extend_from_slice(&state.clean_steps.to_le_bytes());
    for vec in [&state.master, &state.m, &state.v] {
        for x in vec.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for w in &state.working {
        out.extend_from_slice(&w.to_bits().to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: &str| Error::domain(format!("bad checkpoint: {m}"));
    if bytes.len() < HEADER_BYTES || &bytes[..8] != MAGIC {
        return Err(bad("missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(8) != VERSION {
        return Err(bad(&format!("unsupported version {}", u32_at(8))));
    }
    let n = usize::try_from(u64_at(12)).map_err(|_| bad("length overflows"))?;
    let expected = n.checked_mul(14).and_then(|b| b.checked_add(HEADER_BYTES));
    if expected != Some(bytes.len()) {
        return Err(bad("length does not match the element count"));
    }
    let f32s = |start: usize| -> Vec<f32> {
        bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let base = HEADER_BYTES;
    let state = TrainState {
        master: f32s(base),
        m: f32s(base + 4 * n),
        v: f32s(base + 8 * n),
        working: bytes[base + 12 * n..]
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        t: u64_at(20),
        loss_scale: f32::from_bits(u32_at(28)),
        clean_steps: u32_at(32),
    };
    state.check()?;
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
