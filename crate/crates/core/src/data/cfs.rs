//! `CFS1` clip files. All fields little-endian:
//!
//! ```text
//! magic      4 bytes  "CFS1"
//! T          u32      frames, >= 1
//! D_face     u32      >= 1
//! D_context  u32      >= 1
//! face       T * D_face    f32, row-major (frame by frame)
//! context    T * D_context f32, row-major
//! label      u8       0..=7
//! ```
//!
//! Values are stored as 32-bit reals and widened to 64-bit on read. The clip
//! id is not stored; [`read_clip`] takes it from the file stem.

use std::fs;
use std::path::Path;

use super::{ClipSample, NUM_CLASSES};
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CLIP_MAGIC: &[u8; 4] = b"CFS1";

const HEADER_LEN: usize = 16;

pub fn encode_clip(sample: &ClipSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let (t, df, dc) = (sample.frames(), sample.face.cols(), sample.context.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * (df + dc) + 1);
    out.extend_from_slice(CLIP_MAGIC);
    for v in [t, df, dc] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("dimension {v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in sample.face.as_slice().iter().chain(sample.context.as_slice()) {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out.push(sample.label as u8);
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], clip_id: impl Into<String>) -> Result<ClipSample> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CLIP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {CLIP_MAGIC:?}"),
        });
    }
    let mut dims = [0usize; 3];
    for (d, name) in dims.iter_mut().zip(["frame count", "face dimension", "context dimension"]) {
        let at = r.offset();
        *d = r.u32(name)? as usize;
        if *d == 0 {
            return Err(Error::Format {
                offset: at,
                message: format!("{name} is 0"),
            });
        }
    }
    let [t, df, dc] = dims;
    let face = read_block(&mut r, t, df, "face block")?;
    let context = read_block(&mut r, t, dc, "context block")?;
    let at = r.offset();
    let label = r.u8("label")? as usize;
    if label >= NUM_CLASSES {
        return Err(Error::Format {
            offset: at,
            message: format!("label {label} outside 0..{NUM_CLASSES}"),
        });
    }
    r.finish()?;
    Ok(ClipSample {
        clip_id: clip_id.into(),
        face,
        context,
        label,
    })
}

fn read_block(r: &mut Reader<'_>, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    let start = r.offset();
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| r.fail(format!("{what} size overflows")))?;
    let bytes = r.take(n, what)?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, b) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(b.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::Format {
                offset: start + 4 * i as u64,
                message: format!("non-finite value in {what}"),
            });
        }
        data.push(f64::from(x));
    }
    Matrix::new(rows, cols, data)
}

pub fn write_clip(sample: &ClipSample, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_clip(sample)?)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<ClipSample> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_clip(&bytes, id)
}
