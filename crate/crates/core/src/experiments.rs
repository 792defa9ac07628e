//! Whole-model gradient checks and the size-matched architecture comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{backward_clip, build_model, count_params, forward_clip, ArchitectureKind, Model, ModelConfig};
use crate::optim::{cross_entropy, evaluate, train, EpochLog, TrainConfig};
use crate::tensor::{finite_difference_gradcheck, GradCheckReport, Matrix, ParamSet};

/// Scales the analytic gradient of one parameter block of one architecture,
/// to confirm the checker notices a broken backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFault {
    pub kind: ArchitectureKind,
    /// A name from [`crate::models::Parameters::block_names`].
    pub block: String,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSettings {
    pub epsilon: f64,
    pub tolerance: f64,
    pub steps: usize,
    pub seed: u64,
    pub fault: Option<GradFault>,
}

impl Default for GradcheckSettings {
    /// epsilon 1e-5, tolerance 1e-4, 3 steps.
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            steps: 3,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub kind: ArchitectureKind,
    pub num_params: usize,
    pub report: GradCheckReport,
    pub worst_block: String,
    pub worst_offset: usize,
}

/// Feature dims 3, encoded 4, hidden 4, two left layers, one right layer.
pub fn gradcheck_config(kind: ArchitectureKind, seed: u64) -> ModelConfig {
    ModelConfig {
        encoded_dim: 4,
        hidden_size: 4,
        right_hidden_size: 4,
        ..ModelConfig::new(kind, 3, 3).with_seed(seed)
    }
}

fn locate(model: &Model, index: usize) -> (String, usize) {
    let names = model.params.block_names();
    let mut start = 0;
    let mut found = (String::new(), 0);
    let mut block = 0;
    model.params.visit(&mut |b| {
        if index >= start && index < start + b.len() {
            found = (names[block].clone(), index - start);
        }
        start += b.len();
        block += 1;
    });
    found
}

struct Instance {
    model: Model,
    face: Matrix,
    context: Matrix,
    label: usize,
}

impl Instance {
    /// Parameters are drawn from `U(-0.8, 0.8)` rather than the training
    /// initialization: at the small initial weights many gradients are around
    /// 1e-7, below what central differences resolve at epsilon 1e-5.
    fn draw(kind: ArchitectureKind, settings: &GradcheckSettings) -> Result<Self> {
        if settings.steps == 0 {
            return Err(Error::Argument("gradient check needs at least one step".into()));
        }
        let config = gradcheck_config(kind, settings.seed);
        let mut model = build_model(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed);
        model
            .params
            .visit_mut(&mut |b| b.iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8)));
        let mut stream = |d: usize| {
            Matrix::new(settings.steps, d, (0..settings.steps * d).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let face = stream(config.face_feature_dim)?;
        let context = stream(config.context_feature_dim)?;
        let label = rng.random_range(0..config.num_classes);
        Ok(Self {
            model,
            face,
            context,
            label,
        })
    }

    fn loss(&self, model: &Model) -> f64 {
        forward_clip(model, &self.face, &self.context)
            .and_then(|(p, _)| cross_entropy(&p.logits, self.label))
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN)
    }

    fn gradient(&self) -> Result<crate::models::Parameters> {
        let (pred, tape) = forward_clip(&self.model, &self.face, &self.context)?;
        let (_, g) = cross_entropy(&pred.logits, self.label)?;
        backward_clip(&self.model, &tape, &g)
    }
}

/// Cross-entropy gradient of one random clip, analytic against central differences.
pub fn gradcheck_model(kind: ArchitectureKind, settings: &GradcheckSettings) -> Result<GradcheckOutcome> {
    let inst = Instance::draw(kind, settings)?;
    let mut grads = inst.gradient()?;
    if let Some(fault) = settings.fault.as_ref().filter(|f| f.kind == kind) {
        let names = grads.block_names();
        let target = names
            .iter()
            .position(|n| *n == fault.block)
            .ok_or_else(|| Error::Argument(format!("{kind} has no parameter block {:?}", fault.block)))?;
        let mut block = 0;
        grads.visit_mut(&mut |b| {
            if block == target {
                b.iter_mut().for_each(|x| *x *= fault.factor);
            }
            block += 1;
        });
    }

    let point = inst.model.params.flatten();
    let mut probe = inst.model.clone();
    let report = finite_difference_gradcheck(
        |x| {
            probe.params.assign_flat(x).expect("same layout");
            inst.loss(&probe)
        },
        &grads.flatten(),
        &point,
        settings.epsilon,
        settings.tolerance,
    )?;
    let (worst_block, worst_offset) = locate(&inst.model, report.worst_parameter_index);
    Ok(GradcheckOutcome {
        kind,
        num_params: point.len(),
        report,
        worst_block,
        worst_offset,
    })
}

/// [`gradcheck_model`] for every architecture.
pub fn gradcheck_suite(settings: &GradcheckSettings) -> Result<Vec<GradcheckOutcome>> {
    ArchitectureKind::ALL.iter().map(|&k| gradcheck_model(k, settings)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSettings {
    /// Runs per architecture; the reported numbers are medians over runs.
    pub seeds: usize,
    /// Run `i` seeds both initialization and training with `base_seed + i`.
    pub base_seed: u64,
    pub train: TrainConfig,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            seeds: 5,
            base_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// One trained model's validation result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub kind: ArchitectureKind,
    pub seed: u64,
    pub accuracy: f64,
    pub map: f64,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub kind: ArchitectureKind,
    pub num_params: usize,
    pub map: f64,
    pub accuracy: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, kind: ArchitectureKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// Model, #params, mAP (%), ACC (%).
    pub fn render(&self) -> String {
        let mut out = format!("{:<18} {:>9} {:>8} {:>8}\n", "Model", "#params", "mAP (%)", "ACC (%)");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>8.2}M {:>8.2} {:>8.2}\n",
                r.kind.display_name(),
                r.num_params as f64 / 1e6,
                100.0 * r.map,
                100.0 * r.accuracy
            ));
        }
        out
    }
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Trains every architecture in `kinds` with its size-matched configuration
/// `settings.seeds` times and reports median validation mAP and accuracy.
pub fn compare_architectures<F>(
    kinds: &[ArchitectureKind],
    train_split: &Dataset,
    valid: &Dataset,
    settings: &CompareSettings,
    mut on_run: F,
) -> Result<ComparisonTable>
where
    F: FnMut(&RunResult),
{
    if settings.seeds == 0 {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let (face_dim, context_dim) = train_split.feature_dims()?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut runs = Vec::with_capacity(settings.seeds);
        let mut num_params = 0;
        for i in 0..settings.seeds as u64 {
            let seed = settings.base_seed + i;
            let mut model = build_model(&ModelConfig::comparison(kind, face_dim, context_dim).with_seed(seed))?;
            num_params = count_params(&model);
            let config = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let log = train(&mut model, train_split, &config, None)?;
            let report = evaluate(&model, valid, config.subsample_stride)?;
            let run = RunResult {
                kind,
                seed,
                accuracy: report.accuracy,
                map: report.map,
                log,
            };
            on_run(&run);
            runs.push(run);
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let maps: Vec<f64> = runs.iter().map(|r| r.map).collect();
        rows.push(ComparisonRow {
            kind,
            num_params,
            map: median(&maps).unwrap(),
            accuracy: median(&accs).unwrap(),
            runs,
        });
    }
    Ok(ComparisonTable { rows })
}
