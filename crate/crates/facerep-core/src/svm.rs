//! Per-attribute linear classifiers: L2-regularized hinge loss trained
//! by dual coordinate descent, with per-dimension standardization and
//! an unregularized-bias approximation via an appended constant feature.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-dimension `(mean, scale)` fitted on the training set.
/// Zero-variance dimensions get scale 1 (pass-through).
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits per-dimension zero-mean unit-scale statistics.
pub fn standardize_fit(features: &[Vec<f32>]) -> Result<Standardizer> {
    if features.len() < 2 {
        return Err(Error::Argument(format!(
            "standardizer needs >= 2 samples, got {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("inconsistent feature dimensions".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for f in features {
        for ((s, &v), &m) in var.iter_mut().zip(f).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let scale: Vec<f32> = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd as f32
            } else {
                1.0
            }
        })
        .collect();
    Ok(Standardizer { mean: mean.iter().map(|&m| m as f32).collect(), scale })
}

pub fn standardize_apply(std: &Standardizer, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != std.dim() {
        return Err(Error::Argument(format!(
            "standardizer dimension {} does not match input {}",
            std.dim(),
            x.len()
        )));
    }
    Ok(x.iter()
        .zip(&std.mean)
        .zip(&std.scale)
        .map(|((&v, &m), &s)| (v - m) / s)
        .collect())
}

/// Feature matrix and ±1 labels for one attribute.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<i8>,
}

impl LabeledFeatures {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<i8>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(Error::Data("labels must be +1 or -1".into()));
        }
        Ok(LabeledFeatures { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One trained binary classifier, including the statistics needed to
/// reproduce its preprocessing at prediction time.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f32>,
    pub bias: f32,
    pub c: f32,
    pub standardizer: Standardizer,
    pub attribute: String,
    pub representation: String,
    /// Bias handled as an appended constant-1 feature (so it shares the
    /// regularizer); recorded for reproducibility.
    pub bias_as_feature: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub max_epochs: usize,
    /// Stop when the relative decrease of the solver objective over one
    /// epoch falls below this.
    pub tolerance: f64,
    pub seed: u64,
    pub attribute: String,
    pub representation: String,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_epochs: 1000,
            tolerance: 1e-6,
            seed: 0,
            attribute: String::new(),
            representation: String::new(),
        }
    }
}

/// Per-epoch diagnostics of one training run.
#[derive(Clone, Debug)]
pub struct TrainDiagnostics {
    /// Epoch-end solver objective (negated dual); non-increasing.
    pub objective_trace: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
}

/// Trains one L2-regularized hinge-loss classifier by dual coordinate
/// descent on the standardized features:
/// minimize `0.5 ||w||^2 + C * sum max(0, 1 - y_i (w . x_i + b))`.
pub fn train(data: &LabeledFeatures, c: f32, options: &TrainOptions) -> Result<SvmModel> {
    train_diagnostic(data, c, options).map(|(m, _)| m)
}

pub fn train_diagnostic(
    data: &LabeledFeatures,
    c: f32,
    options: &TrainOptions,
) -> Result<(SvmModel, TrainDiagnostics)> {
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let pos = data.labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::DegenerateData(
            "training requires both classes to be present".into(),
        ));
    }
    if data
        .features
        .iter()
        .any(|f| f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Data("non-finite feature value".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Argument(format!("C must be positive and finite, got {c}")));
    }

    let standardizer = standardize_fit(&data.features)?;
    let dim = standardizer.dim();
    // Standardized rows with the constant bias feature appended.
    let rows: Vec<Vec<f64>> = data
        .features
        .iter()
        .map(|f| {
            let mut r: Vec<f64> = standardize_apply(&standardizer, f)
                .expect("dims checked")
                .iter()
                .map(|&v| v as f64)
                .collect();
            r.push(1.0);
            r
        })
        .collect();
    let labels: Vec<f64> = data.labels.iter().map(|&y| y as f64).collect();
    let n = rows.len();
    let c = c as f64;

    let sq_norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; dim + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let objective = |w: &[f64], alpha: &[f64]| -> f64 {
        0.5 * w.iter().map(|v| v * v).sum::<f64>() - alpha.iter().sum::<f64>()
    };

    let mut trace = Vec::new();
    let mut prev = objective(&w, &alpha);
    let mut converged = false;
    let mut epochs_run = 0;
    for _epoch in 0..options.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let q_ii = sq_norms[i];
            if q_ii == 0.0 {
                continue;
            }
            let margin: f64 = labels[i] * rows[i].iter().zip(&w).map(|(x, wv)| x * wv).sum::<f64>();
            let grad = margin - 1.0;
            let new_alpha = (alpha[i] - grad / q_ii).clamp(0.0, c);
            let delta = new_alpha - alpha[i];
            if delta != 0.0 {
                for (wv, x) in w.iter_mut().zip(&rows[i]) {
                    *wv += delta * labels[i] * x;
                }
                alpha[i] = new_alpha;
            }
        }
        epochs_run += 1;
        let obj = objective(&w, &alpha);
        trace.push(obj);
        let denom = prev.abs().max(1.0);
        if (prev - obj) / denom < options.tolerance {
            converged = true;
            break;
        }
        prev = obj;
    }

    let model = SvmModel {
        weights: w[..dim].iter().map(|&v| v as f32).collect(),
        bias: w[dim] as f32,
        c: c as f32,
        standardizer,
        attribute: options.attribute.clone(),
        representation: options.representation.clone(),
        bias_as_feature: true,
    };
    Ok((model, TrainDiagnostics { objective_trace: trace, epochs_run, converged }))
}

/// Primal objective of a model on a data set (diagnostic / certificate).
pub fn primal_objective(model: &SvmModel, data: &LabeledFeatures) -> Result<f64> {
    let mut obj = 0.5
        * (model.weights.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
            + (model.bias as f64) * (model.bias as f64));
    for (f, &y) in data.features.iter().zip(&data.labels) {
        let (score, _) = predict(model, f)?;
        let hinge = (1.0 - y as f64 * score).max(0.0);
        obj += model.c as f64 * hinge;
    }
    Ok(obj)
}

/// Decision score and ±1 label; a score of exactly zero maps to +1.
pub fn predict(model: &SvmModel, x: &[f32]) -> Result<(f64, i8)> {
    if x.len() != model.weights.len() {
        return Err(Error::Argument(format!(
            "model dimension {} does not match input {}",
            model.weights.len(),
            x.len()
        )));
    }
    let std = standardize_apply(&model.standardizer, x)?;
    let score: f64 = model
        .weights
        .iter()
        .zip(&std)
        .map(|(&w, &v)| w as f64 * v as f64)
        .sum::<f64>()
        + model.bias as f64;
    Ok((score, if score >= 0.0 { 1 } else { -1 }))
}

/// Plain accuracy: fraction of correctly predicted labels.
pub fn accuracy(model: &SvmModel, data: &LabeledFeatures) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("accuracy of an empty data set".into()));
    }
    let mut correct = 0usize;
    for (f, &y) in data.features.iter().zip(&data.labels) {
        let (_, label) = predict(model, f)?;
        if label == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Balanced accuracy: mean of the per-class recalls.
pub fn balanced_accuracy(model: &SvmModel, data: &LabeledFeatures) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("accuracy of an empty data set".into()));
    }
    let mut hit = [0usize; 2];
    let mut total = [0usize; 2];
    for (f, &y) in data.features.iter().zip(&data.labels) {
        let cls = usize::from(y == 1);
        total[cls] += 1;
        let (_, label) = predict(model, f)?;
        if label == y {
            hit[cls] += 1;
        }
    }
    if total[0] == 0 || total[1] == 0 {
        return Err(Error::DegenerateData("balanced accuracy needs both classes".into()));
    }
    Ok(0.5 * (hit[0] as f64 / total[0] as f64 + hit[1] as f64 / total[1] as f64))
}
