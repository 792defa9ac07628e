//! Cross-entropy, Adam and the training loop.
//!
//! An epoch shuffles the training clips with a permutation drawn from
//! `(seed, epoch)`, gives every clip a random subsample offset in
//! `[0, stride)`, and walks the permutation in mini-batches. The batch
//! gradient is the mean of per-clip gradients, each computed into its own
//! buffer and summed in batch order, so the result does not depend on how
//! many threads computed the clips.

mod state;

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{subsample, ClipSample, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::{backward_clip_acc, forward_clip, ClipPrediction, Model, Parameters};
use crate::tensor::{Matrix, ParamSet, Vector};

pub use state::{load_train_state, save_train_state, TRAIN_STATE_MAGIC, TRAIN_STATE_VERSION};

/// `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vector)> {
    if label >= logits.len() {
        return Err(Error::Argument(format!("label {label} outside 0..{}", logits.len())));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = grad.iter().sum();
    let loss = sum.ln() + (max - logits[label]);
    for g in &mut grad {
        *g /= sum;
    }
    grad[label] -= 1.0;
    Ok((loss, Vector::new(grad)?))
}

/// Adam moments over a flattened parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Zero moments, beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn apply<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut blocks = Vec::new();
        grads.visit(&mut |b| blocks.push(b));
        let n: usize = blocks.iter().map(|b| b.len()).sum();
        if n != self.m.len() || params.num_params() != n {
            return Err(Error::Contract(format!(
                "adam state holds {} moments; parameters have {}, gradients {n}",
                self.m.len(),
                params.num_params()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let mut block = 0;
        let mut offset = 0;
        let mut mismatch = false;
        params.visit_mut(&mut |p| {
            let g = blocks[block];
            block += 1;
            if g.len() != p.len() {
                mismatch = true;
                return;
            }
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            offset += p.len();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        if mismatch {
            return Err(Error::Contract("parameter and gradient blocks differ in shape".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub subsample_stride: usize,
    pub seed: u64,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    /// lr 1e-4, batch 32, stride 1, 10 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            subsample_stride: 1,
            seed: 0,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.subsample_stride == 0 {
            return Err(Error::Config("subsample_stride must be at least 1".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_grad_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-clip loss over the epoch, each taken before its batch's update.
    pub train_loss: f64,
    /// Fraction of clips classified correctly before their batch's update.
    pub train_acc: f64,
    pub valid_acc: Option<f64>,
    pub valid_map: Option<f64>,
    pub wall_ms: u64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch log serializes")
    }
}

/// Everything needed to continue training where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let adam = AdamState::new(model.num_params(), config.learning_rate);
        Self {
            model,
            adam,
            epochs_done: 0,
        }
    }
}

fn check_dims(model: &Model, data: &Dataset, split: &str) -> Result<()> {
    let (f, c) = data.feature_dims().map_err(|e| Error::Data(format!("{split} split: {e}")))?;
    let cfg = model.config();
    let kind = cfg.kind;
    if (kind.uses_face() && f != cfg.face_feature_dim) || (kind.uses_context() && c != cfg.context_feature_dim) {
        return Err(Error::Data(format!(
            "{split} split has feature dims (face {f}, context {c}); the {kind} model expects (face {}, context {})",
            cfg.face_feature_dim, cfg.context_feature_dim
        )));
    }
    if let Some(bad) = data.clips.iter().find(|c| c.label >= cfg.num_classes) {
        return Err(Error::Data(format!(
            "clip {} has label {} but the model has {} classes",
            bad.clip_id, bad.label, cfg.num_classes
        )));
    }
    Ok(())
}

fn view(clip: &ClipSample, stride: usize, offset: usize) -> Result<Cow<'_, ClipSample>> {
    if stride == 1 {
        Ok(Cow::Borrowed(clip))
    } else {
        subsample(clip, stride, offset).map(Cow::Owned)
    }
}

/// Adds one clip's loss gradient to `grads`; returns its loss and whether it
/// was classified correctly.
fn clip_gradient(model: &Model, clip: &ClipSample, stride: usize, offset: usize, grads: &mut Parameters) -> Result<(f64, bool)> {
    let clip = view(clip, stride, offset)?;
    let (pred, tape) = forward_clip(model, &clip.face, &clip.context)?;
    let (loss, g) = cross_entropy(&pred.logits, clip.label)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss of clip {} is {loss}", clip.clip_id)));
    }
    backward_clip_acc(model, &tape, &g, grads)?;
    Ok((loss, pred.predicted_class == clip.label))
}

/// Mean gradient of `batch` (pairs of clip index and offset) into `grads`.
fn batch_gradient(
    model: &Model,
    data: &Dataset,
    batch: &[(usize, usize)],
    stride: usize,
    grads: &mut Parameters,
    scratch: &mut Parameters,
) -> Result<(f64, usize)> {
    grads.fill_zero();
    let mut loss = 0.0;
    let mut correct = 0;
    if rayon::current_num_threads() > 1 && batch.len() > 1 {
        let per_clip = batch
            .par_iter()
            .map(|&(i, off)| {
                let mut g = model.params.zeros_like();
                clip_gradient(model, &data.clips[i], stride, off, &mut g).map(|r| (r, g))
            })
            .collect::<Result<Vec<_>>>()?;
        for ((l, ok), g) in per_clip {
            loss += l;
            correct += ok as usize;
            grads.add_assign_from(&g);
        }
    } else {
        for &(i, off) in batch {
            scratch.fill_zero();
            let (l, ok) = clip_gradient(model, &data.clips[i], stride, off, scratch)?;
            loss += l;
            correct += ok as usize;
            grads.add_assign_from(scratch);
        }
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((loss, correct))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs epochs `state.epochs_done + 1 ..= config.epochs`, calling `on_epoch`
/// after each one.
pub fn train_epochs<F>(
    state: &mut TrainState,
    train: &Dataset,
    valid: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    check_dims(&state.model, train, "training")?;
    if let Some(v) = valid {
        check_dims(&state.model, v, "validation")?;
    }
    if state.adam.m.len() != state.model.num_params() {
        return Err(Error::Contract("optimizer state does not match the model".into()));
    }
    state.adam.learning_rate = config.learning_rate;
    let stride = config.subsample_stride;
    let mut grads = state.model.params.zeros_like();
    let mut scratch = state.model.params.zeros_like();
    let mut logs = Vec::new();
    while state.epochs_done < config.epochs {
        let start = Instant::now();
        let mut rng = epoch_rng(config.seed, state.epochs_done);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let plan: Vec<(usize, usize)> = order
            .into_iter()
            .map(|i| (i, rng.random_range(0..stride.min(train.clips[i].frames()))))
            .collect();
        let mut loss = 0.0;
        let mut correct = 0;
        for batch in plan.chunks(config.batch_size) {
            let (l, c) = batch_gradient(&state.model, train, batch, stride, &mut grads, &mut scratch)?;
            loss += l;
            correct += c;
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in epoch {}", state.epochs_done + 1)));
            }
            if let Some(max) = config.clip_grad_norm {
                let norm = grads.sum_of_squares().sqrt();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            state.adam.apply(&mut state.model.params, &grads)?;
        }
        let (valid_acc, valid_map) = match valid {
            Some(v) => {
                let r = evaluate(&state.model, v, stride)?;
                (Some(r.accuracy), Some(r.map))
            }
            None => (None, None),
        };
        state.epochs_done += 1;
        let log = EpochLog {
            epoch: state.epochs_done,
            train_loss: loss / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            valid_acc,
            valid_map,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!("{}", log.to_json_line());
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Trains `model` in place from fresh optimizer state.
pub fn train(model: &mut Model, train: &Dataset, config: &TrainConfig, valid: Option<&Dataset>) -> Result<Vec<EpochLog>> {
    let mut state = TrainState::new(model.clone(), config);
    let logs = train_epochs(&mut state, train, valid, config, |_, _| Ok(()))?;
    *model = state.model;
    Ok(logs)
}

/// Predictions for every clip, subsampled from frame 0.
pub fn predict(model: &Model, data: &Dataset, stride: usize) -> Result<Vec<ClipPrediction>> {
    data.clips
        .par_iter()
        .map(|c| {
            let c = view(c, stride, 0)?;
            forward_clip(model, &c.face, &c.context).map(|(p, _)| p)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset, stride: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    check_dims(model, data, "evaluation")?;
    let preds = predict(model, data, stride)?;
    let k = model.config().num_classes;
    let mut probs = Vec::with_capacity(preds.len() * k);
    for p in &preds {
        probs.extend_from_slice(&p.probabilities);
    }
    let probs = Matrix::new(preds.len(), k, probs)?;
    let classes: Vec<usize> = preds.iter().map(|p| p.predicted_class).collect();
    EvalReport::compute(&probs, &classes, &data.labels())
}

#[cfg(test)]
mod tests;
