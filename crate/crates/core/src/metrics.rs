//! Classification metrics and the rater-disagreement statistic.
//!
//! Per-class average precision is the interpolation-free mean of
//! precision at the rank of every positive. Samples are ranked by
//! descending score with ties broken by ascending sample index, so results
//! are deterministic.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Sample indices ordered by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision of one class.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} relevance flags",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::Argument("average precision is undefined without positives".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, idx) in ranking(scores).into_iter().enumerate() {
        if positives[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// mAP over the classes present in `labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes without any positive sample.
    pub per_class_ap: Vec<Option<f64>>,
}

/// `probabilities` is `N x K`; column `k` scores class `k`.
pub fn mean_average_precision(probabilities: &Matrix, labels: &[usize]) -> Result<MapResult> {
    let (n, k) = probabilities.shape();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} score rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
    }
    let mut per_class_ap = Vec::with_capacity(k);
    let mut column = vec![0.0; n];
    for class in 0..k {
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if !positives.contains(&true) {
            per_class_ap.push(None);
            continue;
        }
        for (i, c) in column.iter_mut().enumerate() {
            *c = probabilities.get(i, class);
        }
        per_class_ap.push(Some(average_precision(&column, &positives)?));
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Argument("no class has a positive sample".into()));
    }
    let skipped = k - present.len();
    if skipped > 0 {
        warn!("{skipped} of {k} classes have no positives and are left out of mAP");
    }
    Ok(MapResult {
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class_ap,
    })
}

/// Counts with rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Argument(format!(
                "class index ({l}, {p}) out of range for {num_classes} classes"
            )));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Row-normalized percentages as an aligned text table. Rows without
    /// samples print dashes.
    pub fn render(&self, class_names: &[&str]) -> String {
        let k = self.counts.len();
        let name = |i: usize| class_names.get(i).copied().unwrap_or("?").to_string();
        let width = (0..k).map(|i| name(i).len()).max().unwrap_or(1).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:>width$} |", "truth");
        for j in 0..k {
            let _ = write!(out, " {:>width$}", name(j));
        }
        out.push('\n');
        out.push_str(&"-".repeat(width + 2 + k * (width + 1)));
        out.push('\n');
        for i in 0..k {
            let row_total: u64 = self.counts[i].iter().sum();
            let _ = write!(out, "{:>width$} |", name(i));
            for j in 0..k {
                if row_total == 0 {
                    let _ = write!(out, " {:>width$}", "-");
                } else {
                    let pct = 100.0 * self.counts[i][j] as f64 / row_total as f64;
                    let _ = write!(out, " {:>width$.1}", pct);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy, per-class AP, mAP and confusion counts for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn compute(probabilities: &Matrix, predictions: &[usize], labels: &[usize]) -> Result<Self> {
        let k = probabilities.cols();
        let map = mean_average_precision(probabilities, labels)?;
        Ok(Self {
            num_samples: labels.len(),
            accuracy: accuracy(predictions, labels)?,
            map: map.map,
            per_class_ap: map.per_class_ap,
            confusion: confusion_matrix(predictions, labels, k)?,
        })
    }
}

/// Integer intensity ratings (0..=5) of several raters.
/// `ratings[emotion][item]` lists every rating that item received.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSet {
    pub emotions: Vec<String>,
    pub ratings: Vec<Vec<Vec<u8>>>,
}

fn population_variance(xs: &[u8]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Per emotion, the mean over items of the population variance of that
/// item's ratings. Items with fewer than two ratings are skipped; an
/// emotion with no usable item yields `None`.
pub fn rater_disagreement(set: &RatingSet) -> Result<Vec<Option<f64>>> {
    if set.emotions.len() != set.ratings.len() {
        return Err(Error::Argument(format!(
            "{} emotion names for {} rating tables",
            set.emotions.len(),
            set.ratings.len()
        )));
    }
    let mut out = Vec::with_capacity(set.ratings.len());
    for (name, items) in set.emotions.iter().zip(&set.ratings) {
        let mut sum = 0.0;
        let mut used = 0usize;
        for (i, r) in items.iter().enumerate() {
            if let Some(bad) = r.iter().find(|&&x| x > 5) {
                return Err(Error::Argument(format!(
                    "{name} item {i}: rating {bad} outside 0..=5"
                )));
            }
            if r.len() < 2 {
                warn!("{name} item {i} has {} rating(s); skipped", r.len());
                continue;
            }
            sum += population_variance(r);
            used += 1;
        }
        out.push((used > 0).then(|| sum / used as f64));
    }
    Ok(out)
}
