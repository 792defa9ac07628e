//! Clip samples, clip files, dataset manifests, temporal subsampling and the
//! synthetic two-stream tasks.

mod cfs;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use cfs::{decode_clip, encode_clip, read_clip, write_clip, CLIP_MAGIC};
pub use synthetic::{
    decode_nearest_signal, generate_synthetic, synthesize, GeneratedDataset, SignalPatterns, SyntheticData,
    SyntheticTask, SyntheticTaskSpec,
};

pub const NUM_CLASSES: usize = 8;

/// Label order used by every manifest.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["happy", "sad", "angry", "surprise", "disgust", "worried", "anxious", "neutral"];

/// One clip: two frame-aligned feature streams and a label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSample {
    pub clip_id: String,
    /// `T x D_face`
    pub face: Matrix,
    /// `T x D_context`
    pub context: Matrix,
    pub label: usize,
}

impl ClipSample {
    pub fn new(clip_id: impl Into<String>, face: Matrix, context: Matrix, label: usize) -> Result<Self> {
        let s = Self {
            clip_id: clip_id.into(),
            face,
            context,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn frames(&self) -> usize {
        self.face.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.face.rows() != self.context.rows() {
            return Err(Error::Data(format!(
                "clip {}: face has {} frames, context {}",
                self.clip_id,
                self.face.rows(),
                self.context.rows()
            )));
        }
        if self.label >= NUM_CLASSES {
            return Err(Error::Data(format!(
                "clip {}: label {} outside 0..{NUM_CLASSES}",
                self.clip_id, self.label
            )));
        }
        if !self.face.is_finite() || !self.context.is_finite() {
            return Err(Error::Data(format!("clip {}: non-finite feature value", self.clip_id)));
        }
        Ok(())
    }
}

/// Keeps frames `offset, offset + stride, ...` of both streams.
pub fn subsample(sample: &ClipSample, stride: usize, offset: usize) -> Result<ClipSample> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    if offset >= stride {
        return Err(Error::Argument(format!("offset {offset} must be below stride {stride}")));
    }
    if offset >= sample.frames() {
        return Err(Error::Data(format!(
            "clip {}: offset {offset} leaves no frames of {}",
            sample.clip_id,
            sample.frames()
        )));
    }
    if stride == 1 {
        return Ok(sample.clone());
    }
    let idx: Vec<usize> = (offset..sample.frames()).step_by(stride).collect();
    Ok(ClipSample {
        clip_id: sample.clip_id.clone(),
        face: sample.face.select_rows(&idx)?,
        context: sample.context.select_rows(&idx)?,
        label: sample.label,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub frames: usize,
}

/// JSON index of one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            entries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names != CLASS_NAMES {
            return Err(Error::Data(format!(
                "class_names must be {CLASS_NAMES:?} in that order, found {:?}",
                self.class_names
            )));
        }
        for e in &self.entries {
            if e.label >= NUM_CLASSES {
                return Err(Error::Data(format!("entry {}: label {} out of range", e.clip_id, e.label)));
            }
            if e.frames == 0 {
                return Err(Error::Data(format!("entry {}: zero frames", e.clip_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// A loaded split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<ClipSample>,
}

impl Dataset {
    pub fn new(clips: Vec<ClipSample>) -> Result<Self> {
        let d = Self { clips };
        d.feature_dims()?;
        Ok(d)
    }

    /// Reads every clip a manifest lists and checks it against its entry.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let path = root.join(&e.path);
            let mut clip = read_clip(&path).map_err(|err| match err {
                Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
                Error::Format { offset, message } => Error::Format {
                    offset,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            if clip.label != e.label || clip.frames() != e.frames {
                return Err(Error::Data(format!(
                    "{}: file holds label {} and {} frames, manifest says {} and {}",
                    path.display(),
                    clip.label,
                    clip.frames(),
                    e.label,
                    e.frames
                )));
            }
            clip.clip_id = e.clip_id.clone();
            clips.push(clip);
        }
        Self::new(clips)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    /// `(D_face, D_context)` shared by every clip.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let first = self.clips.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let dims = (first.face.cols(), first.context.cols());
        for c in &self.clips {
            c.validate()?;
            if (c.face.cols(), c.context.cols()) != dims {
                return Err(Error::Data(format!(
                    "clip {} has feature dims {:?}, clip {} has {:?}",
                    c.clip_id,
                    (c.face.cols(), c.context.cols()),
                    first.clip_id,
                    dims
                )));
            }
        }
        Ok(dims)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for c in &self.clips {
            h[c.label] += 1;
        }
        h
    }
}
