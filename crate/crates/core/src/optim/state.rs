//! Resumable training state (little-endian):
//!
//! ```text
//! magic        4 bytes  "CATS"
//! version      u16      1
//! train seed   u64
//! epochs_done  u32
//! adam step    u64
//! beta1, beta2, epsilon, learning_rate   4 x f64
//! n            u64      number of parameters
//! m            n x f64
//! v            n x f64
//! model        a complete CARN checkpoint, to the end of the file
//! ```

use std::fs;
use std::path::Path;

use super::{AdamState, TrainState};
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::models::{decode_model, encode_model};

pub const TRAIN_STATE_MAGIC: &[u8; 4] = b"CATS";
pub const TRAIN_STATE_VERSION: u16 = 1;

fn encode(state: &TrainState, seed: u64) -> Vec<u8> {
    let a = &state.adam;
    let mut out = Vec::with_capacity(64 + 16 * a.m.len());
    out.extend_from_slice(TRAIN_STATE_MAGIC);
    out.extend_from_slice(&TRAIN_STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(state.epochs_done as u32).to_le_bytes());
    out.extend_from_slice(&a.step.to_le_bytes());
    for x in [a.beta1, a.beta2, a.epsilon, a.learning_rate] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(a.m.len() as u64).to_le_bytes());
    for x in a.m.iter().chain(&a.v) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&encode_model(&state.model));
    out
}

/// Writes `state` for a run seeded with `seed`.
pub fn save_train_state(state: &TrainState, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(state, seed))?;
    Ok(())
}

/// Reads a state file and returns it with the seed of the run that wrote it.
pub fn load_train_state(path: impl AsRef<Path>) -> Result<(TrainState, u64)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4, "magic")? != TRAIN_STATE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a training state file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != TRAIN_STATE_VERSION {
        return Err(r.fail(format!("unsupported training state version {version}")));
    }
    let seed = r.u64("seed")?;
    let epochs_done = r.u32("epoch count")? as usize;
    let step = r.u64("adam step")?;
    let mut hyper = [0.0; 4];
    r.f64s(&mut hyper, "adam hyperparameters")?;
    let n = r.u64("moment length")? as usize;
    if n > bytes.len() / 16 {
        return Err(r.fail(format!("moment length {n} exceeds the file")));
    }
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    r.f64s(&mut m, "first moments")?;
    r.f64s(&mut v, "second moments")?;
    let model = decode_model(&mut r)?;
    r.finish()?;
    if model.num_params() != n {
        return Err(Error::Format {
            offset: 0,
            message: format!("{n} moments stored for a model with {} parameters", model.num_params()),
        });
    }
    let [beta1, beta2, epsilon, learning_rate] = hyper;
    let adam = AdamState {
        m,
        v,
        step,
        beta1,
        beta2,
        epsilon,
        learning_rate,
    };
    Ok((
        TrainState {
            model,
            adam,
            epochs_done,
        },
        seed,
    ))
}
