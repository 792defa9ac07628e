//! Binary checkpoint format (all integers and reals little-endian):
//!
//! ```text
//! magic               4 bytes  "CARN"
//! version             u16      1
//! kind                u8       0 face-rnn, 1 context-rnn, 2 parallel-rnn,
//!                              3 concatenated-rnn, 4 caca-a, 5 caca-b
//! face_feature_dim    u32
//! context_feature_dim u32
//! encoded_dim         u32
//! hidden_size         u32
//! right_hidden_size   u32
//! left_layers         u32
//! right_layers        u32
//! num_classes         u32
//! seed                u64
//! block_count         u32
//! block_count x { len u64, len x f64 }   parameter blocks in declaration order
//! ```

use std::fs;
use std::path::Path;

use super::{ArchitectureKind, Model, ModelConfig};
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CARN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub(crate) fn encode_model(model: &Model) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 8 * model.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(c.kind.code());
    for v in [
        c.face_feature_dim,
        c.context_feature_dim,
        c.encoded_dim,
        c.hidden_size,
        c.right_hidden_size,
        c.left_layers,
        c.right_layers,
        c.num_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    let mut blocks = Vec::new();
    model.params.visit(&mut |b| blocks.push(b));
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for x in b {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint from `r`, leaving the cursor after the last block.
pub(crate) fn decode_model(r: &mut Reader<'_>) -> Result<Model> {
    let start = r.offset();
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: start,
            message: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let code = r.u8("architecture kind")?;
    let kind = ArchitectureKind::from_code(code)
        .ok_or_else(|| r.fail(format!("unknown architecture code {code}")))?;
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32("config field")? as usize;
    }
    let seed = r.u64("seed")?;
    let config = ModelConfig {
        kind,
        face_feature_dim: dims[0],
        context_feature_dim: dims[1],
        encoded_dim: dims[2],
        hidden_size: dims[3],
        right_hidden_size: dims[4],
        left_layers: dims[5],
        right_layers: dims[6],
        num_classes: dims[7],
        seed,
    };
    let config_end = r.offset();
    let mut model = Model::zeros(&config).map_err(|e| Error::Format {
        offset: config_end,
        message: format!("invalid stored configuration: {e}"),
    })?;
    let mut expected = Vec::new();
    model.params.visit(&mut |b| expected.push(b.len()));
    let count = r.u32("block count")? as usize;
    if count != expected.len() {
        return Err(r.fail(format!(
            "{count} parameter blocks stored, {} expected for {kind}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(model.num_params());
    for (i, &want) in expected.iter().enumerate() {
        let len = r.u64("block length")? as usize;
        if len != want {
            return Err(r.fail(format!("block {i} holds {len} values, expected {want}")));
        }
        let start = values.len();
        values.resize(start + len, 0.0);
        r.f64s(&mut values[start..], "parameter block")?;
    }
    model.params.assign_flat(&values)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let model = decode_model(&mut r)?;
    r.finish()?;
    Ok(model)
}

/// Loads a checkpoint and rejects it unless it holds a `kind` model.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, kind: ArchitectureKind) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.kind() != kind {
        return Err(Error::Config(format!(
            "checkpoint holds a {} model but {} was requested",
            model.kind(),
            kind
        )));
    }
    Ok(model)
}
