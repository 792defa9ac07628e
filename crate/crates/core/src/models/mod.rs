//! The six two-stream classifiers and their shared wiring.
//!
//! | kind              | left stack reads | right stack reads | head                         |
//! |-------------------|------------------|-------------------|------------------------------|
//! | `FaceRnn`         | face             | -                 | final top hidden             |
//! | `ContextRnn`      | context          | -                 | final top hidden             |
//! | `ParallelRnn`     | face             | context           | tanh(fusion [h_l; h_r])      |
//! | `ConcatenatedRnn` | [face; context]  | -                 | final top hidden             |
//! | `CacaA`           | context          | face              | attention-combined vector    |
//! | `CacaB`           | face             | context           | attention-combined vector    |
//!
//! Each raw stream first passes through its own linear encoder
//! (`feature_dim -> encoded_dim`). In the cascade kinds the right stack
//! starts from the left stack's final states (layer `k` from layer `k`,
//! zeros for any right layer without a partner) and, at the last step,
//! attends over all of the left stack's top hidden states.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{align, attend, attend_backward, AttentionOutput, AttentionTape};
use crate::error::{dim_err, Error, Result};
use crate::rnn::{lstm_backward_acc, lstm_forward, LstmStack, LstmState, LstmTape};
use crate::tensor::{add_assign, argmax, gemm_acc, softmax, Matrix, Op, ParamSet, Vector};

pub(crate) use checkpoint::{decode_model, encode_model};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// The compared architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    FaceRnn,
    ContextRnn,
    ParallelRnn,
    ConcatenatedRnn,
    CacaA,
    CacaB,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 6] = [
        Self::FaceRnn,
        Self::ContextRnn,
        Self::ParallelRnn,
        Self::ConcatenatedRnn,
        Self::CacaA,
        Self::CacaB,
    ];

    pub const FUSION: [ArchitectureKind; 4] =
        [Self::ParallelRnn, Self::ConcatenatedRnn, Self::CacaA, Self::CacaB];

    /// Command-line / file name.
    pub fn slug(self) -> &'static str {
        match self {
            Self::FaceRnn => "face-rnn",
            Self::ContextRnn => "context-rnn",
            Self::ParallelRnn => "parallel-rnn",
            Self::ConcatenatedRnn => "concatenated-rnn",
            Self::CacaA => "caca-a",
            Self::CacaB => "caca-b",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::FaceRnn => "Face-RNN",
            Self::ContextRnn => "Context-RNN",
            Self::ParallelRnn => "Parallel-RNN",
            Self::ConcatenatedRnn => "Concatenated-RNN",
            Self::CacaA => "CACA-RNN A",
            Self::CacaB => "CACA-RNN B",
        }
    }

    pub fn is_cascade(self) -> bool {
        matches!(self, Self::CacaA | Self::CacaB)
    }

    pub fn has_right_stack(self) -> bool {
        matches!(self, Self::ParallelRnn | Self::CacaA | Self::CacaB)
    }

    pub fn uses_face(self) -> bool {
        self != Self::ContextRnn
    }

    pub fn uses_context(self) -> bool {
        self != Self::FaceRnn
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.slug() == norm)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown architecture {s:?}; expected one of {}",
                    Self::ALL.map(|k| k.slug()).join(", ")
                ))
            })
    }
}

/// Architecture and dimensions.
///
/// `hidden_size` / `left_layers` describe the left (or only) stack and
/// `right_hidden_size` / `right_layers` the right one. The fusion layer of
/// `ParallelRnn` maps to `hidden_size`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ArchitectureKind,
    pub face_feature_dim: usize,
    pub context_feature_dim: usize,
    pub encoded_dim: usize,
    pub hidden_size: usize,
    pub right_hidden_size: usize,
    pub left_layers: usize,
    pub right_layers: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: encoders to 128, hidden 128, two left layers, one right layer, 8 classes.
    pub fn new(kind: ArchitectureKind, face_feature_dim: usize, context_feature_dim: usize) -> Self {
        Self {
            kind,
            face_feature_dim,
            context_feature_dim,
            encoded_dim: 128,
            hidden_size: 128,
            right_hidden_size: 128,
            left_layers: 2,
            right_layers: 1,
            num_classes: 8,
            seed: 0,
        }
    }

    /// Size-matched comparison setup: single-stack kinds use a two-layer
    /// 256-unit LSTM, `ParallelRnn` two two-layer 128-unit LSTMs, the cascade
    /// kinds a two-layer 128-unit left LSTM and a one-layer 128-unit right LSTM.
    pub fn comparison(kind: ArchitectureKind, face_feature_dim: usize, context_feature_dim: usize) -> Self {
        let mut c = Self::new(kind, face_feature_dim, context_feature_dim);
        match kind {
            ArchitectureKind::FaceRnn | ArchitectureKind::ContextRnn | ArchitectureKind::ConcatenatedRnn => {
                c.hidden_size = 256;
                c.right_hidden_size = 256;
            }
            ArchitectureKind::ParallelRnn => c.right_layers = 2,
            ArchitectureKind::CacaA | ArchitectureKind::CacaB => {}
        }
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("face_feature_dim", self.face_feature_dim),
            ("context_feature_dim", self.context_feature_dim),
            ("encoded_dim", self.encoded_dim),
            ("hidden_size", self.hidden_size),
            ("left_layers", self.left_layers),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kind.has_right_stack() && (self.right_layers == 0 || self.right_hidden_size == 0) {
            return Err(Error::Config(format!(
                "{} needs a non-empty right stack",
                self.kind
            )));
        }
        if self.kind.is_cascade() && self.hidden_size != self.right_hidden_size {
            return Err(Error::Config(format!(
                "{} attends with dot scores, so both stacks need the same hidden size (left {}, right {})",
                self.kind, self.hidden_size, self.right_hidden_size
            )));
        }
        Ok(())
    }

    fn classifier_input(&self) -> usize {
        if self.kind.is_cascade() {
            self.right_hidden_size
        } else {
            self.hidden_size
        }
    }

    fn left_input(&self) -> usize {
        match self.kind {
            ArchitectureKind::ConcatenatedRnn => 2 * self.encoded_dim,
            _ => self.encoded_dim,
        }
    }
}

/// Affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vector,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: Vector::zeros(output),
        }
    }

    /// Uniform weights in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(input, output);
        let k = 1.0 / (input as f64).sqrt();
        l.weight
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-k..=k));
        l
    }

    pub fn input_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.to_vec();
        self.weight.mul_vec_acc(x, &mut y);
        y
    }

    /// Applies the map to every row of `x`.
    fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_size());
        for t in 0..x.rows() {
            let row = out.row_mut(t);
            row.copy_from_slice(&self.bias);
            self.weight.mul_vec_acc(x.row(t), row);
        }
        out
    }

    /// Accumulates gradients for `y = W x + b` given `dy`; returns `dx`.
    fn backward_acc(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        grad.weight.add_outer(dy, x);
        add_assign(&mut grad.bias, dy);
        let mut dx = vec![0.0; self.input_size()];
        self.weight.mul_vec_t_acc(dy, &mut dx);
        dx
    }

    /// Row-wise version of [`backward_acc`](Self::backward_acc).
    fn backward_rows_acc(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Result<Matrix> {
        gemm_acc(dy, Op::T, x, Op::N, &mut grad.weight)?;
        for row in dy.row_iter() {
            add_assign(&mut grad.bias, row);
        }
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        gemm_acc(dy, Op::N, &self.weight, Op::N, &mut dx)?;
        Ok(dx)
    }
}

impl ParamSet for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.weight.visit(f);
        self.bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.weight.visit_mut(f);
        self.bias.visit_mut(f);
    }
}

/// Every trainable array of a model. Also used as the gradient buffer.
///
/// Declaration order (and therefore checkpoint and optimizer order):
/// face encoder, context encoder, left stack, right stack, attention
/// combination `W_c`, fusion, classifier. Absent parts are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub face_encoder: Option<Linear>,
    pub context_encoder: Option<Linear>,
    pub left: LstmStack,
    pub right: Option<LstmStack>,
    pub attention: Option<Matrix>,
    pub fusion: Option<Linear>,
    pub classifier: Linear,
}

/// Random (seeded) or all-zero initialization.
struct Initializer<'a>(Option<&'a mut ChaCha8Rng>);

impl Initializer<'_> {
    fn linear(&mut self, input: usize, output: usize) -> Linear {
        match self.0.as_deref_mut() {
            Some(rng) => Linear::init(input, output, rng),
            None => Linear::zeros(input, output),
        }
    }

    fn stack(&mut self, input: usize, hidden: usize, layers: usize) -> Result<LstmStack> {
        match self.0.as_deref_mut() {
            Some(rng) => LstmStack::init(input, hidden, layers, rng),
            None => LstmStack::zeros(input, hidden, layers),
        }
    }
}

impl Parameters {
    /// Parts are initialized in declaration order.
    fn build(c: &ModelConfig, mut init: Initializer<'_>) -> Result<Self> {
        let kind = c.kind;
        let face_encoder = kind
            .uses_face()
            .then(|| init.linear(c.face_feature_dim, c.encoded_dim));
        let context_encoder = kind
            .uses_context()
            .then(|| init.linear(c.context_feature_dim, c.encoded_dim));
        let left = init.stack(c.left_input(), c.hidden_size, c.left_layers)?;
        let right = if kind.has_right_stack() {
            Some(init.stack(c.encoded_dim, c.right_hidden_size, c.right_layers)?)
        } else {
            None
        };
        let attention = kind.is_cascade().then(|| {
            let h = c.right_hidden_size;
            init.linear(2 * h, h).weight
        });
        let fusion = (kind == ArchitectureKind::ParallelRnn)
            .then(|| init.linear(c.hidden_size + c.right_hidden_size, c.hidden_size));
        let classifier = init.linear(c.classifier_input(), c.num_classes);
        Ok(Self {
            face_encoder,
            context_encoder,
            left,
            right,
            attention,
            fusion,
            classifier,
        })
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// One name per visited block, e.g. `left.1.w_hidden` or `classifier.bias`.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let linear = |names: &mut Vec<String>, prefix: &str| {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        };
        let stack = |names: &mut Vec<String>, prefix: &str, s: &LstmStack| {
            for i in 0..s.num_layers() {
                for part in ["w_input", "w_hidden", "bias"] {
                    names.push(format!("{prefix}.{i}.{part}"));
                }
            }
        };
        if self.face_encoder.is_some() {
            linear(&mut names, "face_encoder");
        }
        if self.context_encoder.is_some() {
            linear(&mut names, "context_encoder");
        }
        stack(&mut names, "left", &self.left);
        if let Some(r) = &self.right {
            stack(&mut names, "right", r);
        }
        if self.attention.is_some() {
            names.push("attention.w_c".into());
        }
        if self.fusion.is_some() {
            linear(&mut names, "fusion");
        }
        linear(&mut names, "classifier");
        names
    }
}

impl ParamSet for Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        if let Some(l) = &self.face_encoder {
            l.visit(f);
        }
        if let Some(l) = &self.context_encoder {
            l.visit(f);
        }
        self.left.visit(f);
        if let Some(s) = &self.right {
            s.visit(f);
        }
        if let Some(m) = &self.attention {
            m.visit(f);
        }
        if let Some(l) = &self.fusion {
            l.visit(f);
        }
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        if let Some(l) = &mut self.face_encoder {
            l.visit_mut(f);
        }
        if let Some(l) = &mut self.context_encoder {
            l.visit_mut(f);
        }
        self.left.visit_mut(f);
        if let Some(s) = &mut self.right {
            s.visit_mut(f);
        }
        if let Some(m) = &mut self.attention {
            m.visit_mut(f);
        }
        if let Some(l) = &mut self.fusion {
            l.visit_mut(f);
        }
        self.classifier.visit_mut(f);
    }
}

/// A configured architecture with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub params: Parameters,
}

/// Builds and initializes a model deterministically from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(Model {
        config: config.clone(),
        params: Parameters::build(config, Initializer(Some(&mut rng)))?,
    })
}

/// Number of trainable scalars.
pub fn count_params(model: &Model) -> usize {
    model.params.num_params()
}

impl Model {
    /// A model with every parameter set to zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: Parameters::build(config, Initializer(None))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.config.kind
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

/// Output of [`forward_clip`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub logits: Vector,
    pub probabilities: Vector,
    pub predicted_class: usize,
}

impl ClipPrediction {
    fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let probabilities = softmax(&logits)?;
        let predicted_class = argmax(&logits);
        Ok(Self {
            logits: Vector::new(logits)?,
            probabilities,
            predicted_class,
        })
    }
}

#[derive(Clone, Debug)]
enum Head {
    Plain,
    Fusion { input: Vec<f64>, output: Vec<f64> },
    Attention(AttentionTape),
}

/// Activations of one [`forward_clip`] call.
#[derive(Clone, Debug)]
pub struct ClipTape {
    kind: ArchitectureKind,
    steps: usize,
    face_raw: Option<Matrix>,
    context_raw: Option<Matrix>,
    left: LstmTape,
    left_top: Matrix,
    right: Option<(LstmTape, Matrix)>,
    head: Head,
    features: Vec<f64>,
}

impl ClipTape {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Attention read of the final step (cascade kinds only).
    pub fn final_attention(&self) -> Option<&AttentionOutput> {
        match &self.head {
            Head::Attention(t) => Some(t.output()),
            _ => None,
        }
    }
}

fn check_streams(model: &Model, face: &Matrix, context: &Matrix) -> Result<()> {
    let c = &model.config;
    if face.rows() != context.rows() {
        return Err(Error::Data(format!(
            "face stream has {} frames but context stream has {}",
            face.rows(),
            context.rows()
        )));
    }
    if c.kind.uses_face() && face.cols() != c.face_feature_dim {
        return Err(dim_err!(
            "face features have dimension {}, model expects {}",
            face.cols(),
            c.face_feature_dim
        ));
    }
    if c.kind.uses_context() && context.cols() != c.context_feature_dim {
        return Err(dim_err!(
            "context features have dimension {}, model expects {}",
            context.cols(),
            c.context_feature_dim
        ));
    }
    Ok(())
}

fn concat_rows(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for t in 0..a.rows() {
        let row = out.row_mut(t);
        row[..a.cols()].copy_from_slice(a.row(t));
        row[a.cols()..].copy_from_slice(b.row(t));
    }
    out
}

fn split_cols(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    let mut a = Matrix::zeros(m.rows(), at);
    let mut b = Matrix::zeros(m.rows(), m.cols() - at);
    for t in 0..m.rows() {
        a.row_mut(t).copy_from_slice(&m.row(t)[..at]);
        b.row_mut(t).copy_from_slice(&m.row(t)[at..]);
    }
    (a, b)
}

/// Initial states for the right stack of a cascade: layer-wise copies of the
/// left stack's final states, zeros for unpaired right layers.
fn hand_off(left_final: &[LstmState], right: &LstmStack) -> Vec<LstmState> {
    right
        .layers()
        .iter()
        .enumerate()
        .map(|(k, l)| match left_final.get(k) {
            Some(s) => s.clone(),
            None => LstmState::zeros(l.hidden_size()),
        })
        .collect()
}

struct Encoded {
    face: Option<Matrix>,
    context: Option<Matrix>,
}

fn encode(p: &Parameters, face: &Matrix, context: &Matrix) -> Encoded {
    Encoded {
        face: p.face_encoder.as_ref().map(|e| e.apply_rows(face)),
        context: p.context_encoder.as_ref().map(|e| e.apply_rows(context)),
    }
}

/// Streams read by the (left, right) stacks.
fn route(kind: ArchitectureKind, enc: Encoded) -> (Matrix, Option<Matrix>) {
    use ArchitectureKind::*;
    match (kind, enc.face, enc.context) {
        (FaceRnn, Some(f), _) => (f, None),
        (ContextRnn, _, Some(c)) => (c, None),
        (ConcatenatedRnn, Some(f), Some(c)) => (concat_rows(&f, &c), None),
        (ParallelRnn | CacaB, Some(f), Some(c)) => (f, Some(c)),
        (CacaA, Some(f), Some(c)) => (c, Some(f)),
        _ => unreachable!("encoders always match the kind"),
    }
}

/// Classifies one clip. `face` and `context` are `T x D` feature streams
/// with the same `T`; single-stream kinds ignore the stream they do not use.
///
/// Cascade kinds only evaluate attention at the final right step: without
/// input feeding, earlier attention reads cannot influence the prediction.
/// [`attention_alignments`] produces the per-step rows.
pub fn forward_clip(model: &Model, face: &Matrix, context: &Matrix) -> Result<(ClipPrediction, ClipTape)> {
    check_streams(model, face, context)?;
    let p = &model.params;
    let kind = model.config.kind;
    let steps = face.rows();
    let (left_in, right_in) = route(kind, encode(p, face, context));
    let left = lstm_forward(&p.left, &left_in, &p.left.zero_states())?;
    let last = steps - 1;

    let mut right_tape = None;
    let (head, features) = match (kind, &p.right) {
        (ArchitectureKind::ParallelRnn, Some(rs)) => {
            let right = lstm_forward(rs, right_in.as_ref().unwrap(), &rs.zero_states())?;
            let mut input = left.top_hidden.row(last).to_vec();
            input.extend_from_slice(right.top_hidden.row(last));
            let fusion = p.fusion.as_ref().unwrap();
            let output: Vec<f64> = fusion.apply(&input).into_iter().map(f64::tanh).collect();
            right_tape = Some((right.tape, right.top_hidden));
            (Head::Fusion { input, output: output.clone() }, output)
        }
        (ArchitectureKind::CacaA | ArchitectureKind::CacaB, Some(rs)) => {
            let init = hand_off(&left.final_states, rs);
            let right = lstm_forward(rs, right_in.as_ref().unwrap(), &init)?;
            let (out, tape) = attend(
                right.top_hidden.row(last),
                &left.top_hidden,
                p.attention.as_ref().unwrap(),
            )?;
            right_tape = Some((right.tape, right.top_hidden));
            (Head::Attention(tape), out.combined.to_vec())
        }
        _ => (Head::Plain, left.top_hidden.row(last).to_vec()),
    };
    let prediction = ClipPrediction::from_logits(p.classifier.apply(&features))?;
    let tape = ClipTape {
        kind,
        steps,
        face_raw: kind.uses_face().then(|| face.clone()),
        context_raw: kind.uses_context().then(|| context.clone()),
        left: left.tape,
        left_top: left.top_hidden,
        right: right_tape,
        head,
        features,
    };
    Ok((prediction, tape))
}

/// Alignment rows of a cascade model, one row per right-stack step
/// (`T x T`). `None` for non-cascade kinds.
pub fn attention_alignments(model: &Model, face: &Matrix, context: &Matrix) -> Result<Option<Matrix>> {
    if !model.kind().is_cascade() {
        return Ok(None);
    }
    let (_, tape) = forward_clip(model, face, context)?;
    let (_, right_top) = tape.right.as_ref().unwrap();
    let mut rows = Matrix::zeros(tape.steps, tape.steps);
    for i in 0..tape.steps {
        let (a, _) = align(right_top.row(i), &tape.left_top)?;
        rows.row_mut(i).copy_from_slice(&a);
    }
    Ok(Some(rows))
}

/// Gradients of the raw input streams.
#[derive(Clone, Debug)]
pub struct InputGradients {
    pub face: Option<Matrix>,
    pub context: Option<Matrix>,
}

/// Full parameter gradient of a loss with `d loss / d logits = grad_logits`.
pub fn backward_clip(model: &Model, tape: &ClipTape, grad_logits: &[f64]) -> Result<Parameters> {
    let mut grads = model.params.zeros_like();
    backward_clip_acc(model, tape, grad_logits, &mut grads)?;
    Ok(grads)
}

/// Adds the parameter gradients into `grads` and returns the input gradients.
pub fn backward_clip_acc(
    model: &Model,
    tape: &ClipTape,
    grad_logits: &[f64],
    grads: &mut Parameters,
) -> Result<InputGradients> {
    let p = &model.params;
    let kind = model.config.kind;
    if tape.kind != kind || grad_logits.len() != model.config.num_classes {
        return Err(Error::Contract(format!(
            "tape from {} with {} logit gradients does not match a {} model with {} classes",
            tape.kind,
            grad_logits.len(),
            kind,
            model.config.num_classes
        )));
    }
    let steps = tape.steps;
    let last = steps - 1;
    let d_features = p.classifier.backward_acc(&tape.features, grad_logits, &mut grads.classifier);

    let mut d_left_top = Matrix::zeros(steps, p.left.hidden_size());
    let mut d_left_final = p.left.zero_states();
    let mut d_right_in = None;
    match (&tape.head, &p.right, &tape.right) {
        (Head::Plain, _, _) => d_left_top.row_mut(last).copy_from_slice(&d_features),
        (Head::Fusion { input, output }, Some(rs), Some((rtape, _))) => {
            let du: Vec<f64> = output
                .iter()
                .zip(&d_features)
                .map(|(y, g)| g * (1.0 - y * y))
                .collect();
            let fusion = p.fusion.as_ref().unwrap();
            let d_input = fusion.backward_acc(input, &du, grads.fusion.as_mut().unwrap());
            let hl = p.left.hidden_size();
            d_left_top.row_mut(last).copy_from_slice(&d_input[..hl]);
            let mut d_right_top = Matrix::zeros(steps, rs.hidden_size());
            d_right_top.row_mut(last).copy_from_slice(&d_input[hl..]);
            let (dx, _) = lstm_backward_acc(
                rs,
                rtape,
                &d_right_top,
                &rs.zero_states(),
                grads.right.as_mut().unwrap(),
            )?;
            d_right_in = Some(dx);
        }
        (Head::Attention(atape), Some(rs), Some((rtape, _))) => {
            let w_c = p.attention.as_ref().unwrap();
            let hs = rs.hidden_size();
            let g = AttentionOutput {
                context: Vector::zeros(hs),
                alignment: Vector::zeros(steps),
                combined: Vector::new(d_features)?,
            };
            let ag = attend_backward(atape, w_c, &g)?;
            add_assign(grads.attention.as_mut().unwrap().as_mut_slice(), ag.w_c.as_slice());
            d_left_top = ag.encoders;
            let mut d_right_top = Matrix::zeros(steps, hs);
            d_right_top.row_mut(last).copy_from_slice(&ag.query);
            let (dx, d_init) = lstm_backward_acc(
                rs,
                rtape,
                &d_right_top,
                &rs.zero_states(),
                grads.right.as_mut().unwrap(),
            )?;
            for (k, d) in d_init.into_iter().enumerate() {
                if let Some(slot) = d_left_final.get_mut(k) {
                    *slot = d;
                }
            }
            d_right_in = Some(dx);
        }
        _ => return Err(Error::Contract("tape does not match the model wiring".into())),
    }
    let (d_left_in, _) = lstm_backward_acc(&p.left, &tape.left, &d_left_top, &d_left_final, &mut grads.left)?;

    // Undo the routing.
    use ArchitectureKind::*;
    let (d_face_enc, d_ctx_enc) = match kind {
        FaceRnn => (Some(d_left_in), None),
        ContextRnn => (None, Some(d_left_in)),
        ConcatenatedRnn => {
            let (a, b) = split_cols(&d_left_in, model.config.encoded_dim);
            (Some(a), Some(b))
        }
        ParallelRnn | CacaB => (Some(d_left_in), d_right_in),
        CacaA => (d_right_in, Some(d_left_in)),
    };
    let face = match (&p.face_encoder, d_face_enc, &tape.face_raw) {
        (Some(e), Some(d), Some(x)) => Some(e.backward_rows_acc(x, &d, grads.face_encoder.as_mut().unwrap())?),
        _ => None,
    };
    let context = match (&p.context_encoder, d_ctx_enc, &tape.context_raw) {
        (Some(e), Some(d), Some(x)) => Some(e.backward_rows_acc(x, &d, grads.context_encoder.as_mut().unwrap())?),
        _ => None,
    };
    Ok(InputGradients { face, context })
}

#[cfg(test)]
mod tests;
