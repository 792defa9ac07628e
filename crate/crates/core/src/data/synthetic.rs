//! Synthetic two-stream tasks.
//!
//! Every frame of both streams is `N(0, sigma^2)` noise. A stream that carries
//! a bit `b` gets `(2b - 1) * p` added at one uniformly drawn frame, where `p`
//! is a fixed per-stream pattern with entries `+-magnitude`.
//!
//! - `FaceOnly`: label `b_f` (context is pure noise).
//! - `ContextOnly`: label `b_c` (face is pure noise).
//! - `Joint`: label `2 b_f + b_c`, each bit at its own independently drawn frame,
//!   so either stream alone narrows four classes down to two.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_clip, ClipSample, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    FaceOnly,
    ContextOnly,
    Joint,
}

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 3] = [Self::FaceOnly, Self::ContextOnly, Self::Joint];

    pub fn slug(self) -> &'static str {
        match self {
            Self::FaceOnly => "face-only",
            Self::ContextOnly => "context-only",
            Self::Joint => "joint",
        }
    }

    /// Labels in use; always the first classes of the 8-label space.
    pub fn num_labels(self) -> usize {
        match self {
            Self::Joint => 4,
            _ => 2,
        }
    }

    fn face_carries_bit(self) -> bool {
        self != Self::ContextOnly
    }

    fn context_carries_bit(self) -> bool {
        self != Self::FaceOnly
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|t| t.slug() == norm).ok_or_else(|| {
            Error::Argument(format!("unknown task {s:?}; expected face-only, context-only or joint"))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub train_clips: usize,
    pub valid_clips: usize,
    pub test_clips: usize,
    /// Inclusive frame-count range.
    pub min_frames: usize,
    pub max_frames: usize,
    pub face_dim: usize,
    pub context_dim: usize,
    pub magnitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// 2000 / 400 / 400 clips of 8 to 32 frames, 16-dim streams, magnitude 1, sigma 0.25.
    pub fn new(task: SyntheticTask, seed: u64) -> Self {
        Self {
            task,
            train_clips: 2000,
            valid_clips: 400,
            test_clips: 400,
            min_frames: 8,
            max_frames: 32,
            face_dim: 16,
            context_dim: 16,
            magnitude: 1.0,
            noise_sigma: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "frame range {}..={} must be non-empty and start at 1 or more",
                self.min_frames, self.max_frames
            )));
        }
        if self.face_dim == 0 || self.context_dim == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if !(self.magnitude.is_finite() && self.magnitude > 0.0) {
            return Err(Error::Config(format!("magnitude {} must be positive", self.magnitude)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be non-negative", self.noise_sigma)));
        }
        if self.train_clips + self.valid_clips + self.test_clips == 0 {
            return Err(Error::Config("no clips requested".into()));
        }
        Ok(())
    }
}

/// The per-stream signal patterns of a generated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPatterns {
    pub face: Vec<f64>,
    pub context: Vec<f64>,
}

impl SignalPatterns {
    fn draw(spec: &SyntheticTaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut signs = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.random_bool(0.5) { spec.magnitude } else { -spec.magnitude })
                .collect()
        };
        let face = signs(spec.face_dim);
        let context = signs(spec.context_dim);
        Self { face, context }
    }
}

/// Generated splits held in memory. Values are already rounded to 32-bit,
/// so they equal what the clip files hold.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticTaskSpec,
    pub patterns: SignalPatterns,
    pub train: Vec<ClipSample>,
    pub valid: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

impl SyntheticData {
    pub fn splits(&self) -> [(&'static str, &[ClipSample]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }
}

pub fn synthesize(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let patterns = SignalPatterns::draw(spec);
    let split = |name: &str, stream: u64, n: usize| -> Vec<ClipSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        (0..n).map(|i| make_clip(spec, &patterns, &mut rng, format!("{name}-{i:05}"))).collect()
    };
    Ok(SyntheticData {
        train: split("train", 1, spec.train_clips),
        valid: split("valid", 2, spec.valid_clips),
        test: split("test", 3, spec.test_clips),
        patterns,
        spec: spec.clone(),
    })
}

fn make_clip(spec: &SyntheticTaskSpec, patterns: &SignalPatterns, rng: &mut ChaCha8Rng, id: String) -> ClipSample {
    let t = rng.random_range(spec.min_frames..=spec.max_frames);
    let b_face = rng.random_bool(0.5);
    let b_context = rng.random_bool(0.5);
    let t_face = rng.random_range(0..t);
    let t_context = rng.random_range(0..t);
    let mut noise = |d: usize| -> Matrix {
        let data = (0..t * d)
            .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::new(t, d, data).unwrap()
    };
    let mut face = noise(spec.face_dim);
    let mut context = noise(spec.context_dim);
    let label = match spec.task {
        SyntheticTask::FaceOnly => b_face as usize,
        SyntheticTask::ContextOnly => b_context as usize,
        SyntheticTask::Joint => 2 * b_face as usize + b_context as usize,
    };
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    if spec.task.face_carries_bit() {
        add_signal(&mut face, t_face, sign(b_face), &patterns.face);
    }
    if spec.task.context_carries_bit() {
        add_signal(&mut context, t_context, sign(b_context), &patterns.context);
    }
    for x in face.as_mut_slice().iter_mut().chain(context.as_mut_slice()) {
        *x = f64::from(*x as f32);
    }
    ClipSample {
        clip_id: id,
        face,
        context,
        label,
    }
}

fn add_signal(stream: &mut Matrix, frame: usize, sign: f64, pattern: &[f64]) {
    for (x, p) in stream.row_mut(frame).iter_mut().zip(pattern) {
        *x += sign * p;
    }
}

/// Label chosen by matching every frame of each informative stream against
/// both signed patterns and keeping the nearest.
pub fn decode_nearest_signal(sample: &ClipSample, task: SyntheticTask, patterns: &SignalPatterns) -> usize {
    let bit = |stream: &Matrix, pattern: &[f64]| -> usize {
        let mut best = (f64::INFINITY, 0);
        for row in stream.row_iter() {
            for b in [0, 1] {
                let s = if b == 1 { 1.0 } else { -1.0 };
                let d: f64 = row.iter().zip(pattern).map(|(x, p)| (x - s * p).powi(2)).sum();
                if d < best.0 {
                    best = (d, b);
                }
            }
        }
        best.1
    };
    match task {
        SyntheticTask::FaceOnly => bit(&sample.face, &patterns.face),
        SyntheticTask::ContextOnly => bit(&sample.context, &patterns.context),
        SyntheticTask::Joint => 2 * bit(&sample.face, &patterns.face) + bit(&sample.context, &patterns.context),
    }
}

/// What [`generate_synthetic`] wrote.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratedDataset {
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Nearest-signal decoder accuracy over all generated clips.
    pub oracle_accuracy: f64,
    /// Per split, clips per label.
    pub histograms: Vec<(String, [usize; super::NUM_CLASSES])>,
}

/// Writes `{train,valid,test}.json`, `clips/<split>/<id>.cfs` and `task.json`
/// under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedDataset> {
    let out = out_dir.as_ref();
    let data = synthesize(spec)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut histograms = Vec::new();
    for (name, clips) in data.splits() {
        let dir = out.join("clips").join(name);
        fs::create_dir_all(&dir)?;
        let mut entries = Vec::with_capacity(clips.len());
        let mut hist = [0usize; super::NUM_CLASSES];
        for c in clips {
            let rel = format!("clips/{name}/{}.cfs", c.clip_id);
            write_clip(c, out.join(&rel))?;
            entries.push(ManifestEntry {
                clip_id: c.clip_id.clone(),
                path: rel,
                label: c.label,
                frames: c.frames(),
            });
            hist[c.label] += 1;
            correct += (decode_nearest_signal(c, spec.task, &data.patterns) == c.label) as usize;
            total += 1;
        }
        DatasetManifest::new(entries).save(out.join(format!("{name}.json")))?;
        histograms.push((name.to_string(), hist));
    }
    let mut text = serde_json::to_string_pretty(spec)?;
    text.push('\n');
    fs::write(out.join("task.json"), text)?;
    let oracle_accuracy = correct as f64 / total as f64;
    if oracle_accuracy < 0.95 {
        log::warn!("nearest-signal decoder reaches only {:.1}% on this task", 100.0 * oracle_accuracy);
    }
    Ok(GeneratedDataset {
        train_manifest: out.join("train.json"),
        valid_manifest: out.join("valid.json"),
        test_manifest: out.join("test.json"),
        oracle_accuracy,
        histograms,
    })
}
