//! Sparse concept probes on split activations.
//!
//! A probe is an L1-penalized logistic regression from the vectorized
//! activation `vec(Φ1(x))` to a binary concept label. Its nonzero coefficients
//! name the concept units `V_k` that later serve as mediators.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::{self, LassoOptions, Matrix};
use crate::metrics;
use crate::net::Activation;
use crate::units::{Granularity, UnitSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vectorization {
    /// Row-major `w·h·l` vector.
    Flatten,
    /// Per-channel maximum over the spatial plane, length `l`.
    Maxpool,
}

impl Vectorization {
    pub fn granularity(self) -> Granularity {
        match self {
            Vectorization::Flatten => Granularity::Scalar,
            Vectorization::Maxpool => Granularity::Channel,
        }
    }
}

pub fn vectorize(a: &Activation, mode: Vectorization) -> Result<Vec<f64>> {
    match mode {
        Vectorization::Flatten => Ok(a.tensor.data().to_vec()),
        Vectorization::Maxpool => {
            if !a.spatial {
                return Err(Error::Mode(format!(
                    "max-pool vectorization needs a spatial activation; split {} is flat",
                    a.split
                )));
            }
            let c = a.tensor.shape()[2];
            let mut out = vec![f64::NEG_INFINITY; c];
            for (i, v) in a.tensor.data().iter().enumerate() {
                let ch = i % c;
                if *v > out[ch] {
                    out[ch] = *v;
                }
            }
            Ok(out)
        }
    }
}

/// Fitted probe for one concept at one split.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModel {
    pub concept_id: usize,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub mode: Vectorization,
    pub split: usize,
    pub units: UnitSet,
}

impl ConceptModel {
    /// Builds a model and derives its unit set from the nonzero coefficients.
    pub fn new(concept_id: usize, beta: Vec<f64>, intercept: f64, lambda: f64, mode: Vectorization, split: usize) -> Self {
        let units = UnitSet::new(
            beta.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(i, _)| i),
            mode.granularity(),
            split,
        );
        Self {
            concept_id,
            beta,
            intercept,
            lambda,
            mode,
            split,
            units,
        }
    }

    pub fn nonzero_count(&self) -> usize {
        self.units.len()
    }

    pub fn to_file(&self) -> ConceptModelFile {
        ConceptModelFile {
            concept_id: self.concept_id,
            lambda: self.lambda,
            mode: self.mode,
            split: self.split,
            intercept: self.intercept,
            dim: self.beta.len(),
            coefficients: self.units.indices().iter().map(|&i| (i, self.beta[i])).collect(),
        }
    }

    pub fn from_file(f: &ConceptModelFile) -> Result<Self> {
        let mut beta = vec![0.0; f.dim];
        for &(i, v) in &f.coefficients {
            if i >= f.dim {
                return Err(Error::UnitOutOfRange { index: i, count: f.dim });
            }
            beta[i] = v;
        }
        Ok(Self::new(f.concept_id, beta, f.intercept, f.lambda, f.mode, f.split))
    }
}

/// JSON form of a [`ConceptModel`] with sparse `(index, value)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptModelFile {
    pub concept_id: usize,
    pub lambda: f64,
    pub mode: Vectorization,
    pub split: usize,
    pub intercept: f64,
    pub dim: usize,
    pub coefficients: Vec<(usize, f64)>,
}

fn check_labels(labels: &[u8], required: usize) -> Result<()> {
    let positives = labels.iter().filter(|l| **l == 1).count();
    let negatives = labels.len() - positives;
    if positives < required || negatives < required {
        return Err(Error::DegenerateLabels {
            positives,
            negatives,
            required,
        });
    }
    Ok(())
}

fn as_targets(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|l| f64::from(*l)).collect()
}

/// Fits one probe at a fixed λ on already-vectorized activations.
pub fn fit_concept(
    concept_id: usize,
    split: usize,
    mode: Vectorization,
    acts: &[Vec<f64>],
    labels: &[u8],
    lambda: f64,
) -> Result<ConceptModel> {
    if acts.len() != labels.len() {
        return Err(Error::Empty(format!("{} activations but {} labels", acts.len(), labels.len())));
    }
    check_labels(labels, 2)?;
    let x = Matrix::from_rows(acts);
    let f = lasso::fit(&x, &as_targets(labels), lambda, None, LassoOptions::default());
    Ok(ConceptModel::new(concept_id, f.beta, f.intercept, lambda, mode, split))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Folds actually used; lower than requested when a class is scarce.
    pub folds: usize,
    /// Mean validation cross-entropy per distinct grid value, descending λ.
    pub cv_loss: Vec<(f64, f64)>,
}

// validation losses this close are treated as tied
const CV_TIE: f64 = 1e-10;

/// Stratified k-fold selection of λ by mean validation cross-entropy.
///
/// Ties go to the larger λ.
pub fn select_lambda(acts: &[Vec<f64>], labels: &[u8], grid: &[f64], folds: usize, seed: u64) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::config("lambda_grid", "must be nonempty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::config("lambda_grid", format!("invalid value {bad}")));
    }
    check_labels(labels, 2)?;
    let mut lambdas: Vec<f64> = grid.to_vec();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    lambdas.dedup();

    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let folds = folds.clamp(2, pos.len().min(neg.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    for class in [pos, neg] {
        let mut idx = class;
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            assignment[i] = j % folds;
        }
    }

    let x = Matrix::from_rows(acts);
    let y = as_targets(labels);
    let mut loss = vec![0.0; lambdas.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] != fold).collect();
        let valid: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] == fold).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let xv = x.select_rows(&valid);
        let yv: Vec<f64> = valid.iter().map(|&i| y[i]).collect();
        let fits = lasso::fit_path(&xt, &yt, &lambdas, LassoOptions::default());
        for (l, f) in loss.iter_mut().zip(&fits) {
            let z: Vec<f64> = (0..xv.rows())
                .map(|i| f.intercept + xv.row(i).iter().zip(&f.beta).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            *l += lasso::mean_cross_entropy(&z, &yv) / folds as f64;
        }
    }
    let mut best = 0;
    for i in 1..lambdas.len() {
        if loss[i] < loss[best] - CV_TIE {
            best = i;
        }
    }
    Ok(LambdaSelection {
        lambda: lambdas[best],
        folds,
        cv_loss: lambdas.into_iter().zip(loss).collect(),
    })
}

/// Cross-validates λ, then refits on all of the data.
pub fn fit_concept_cv(
    concept_id: usize,
    split: usize,
    mode: Vectorization,
    acts: &[Vec<f64>],
    labels: &[u8],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(ConceptModel, LambdaSelection)> {
    let sel = select_lambda(acts, labels, grid, folds, seed)?;
    let model = fit_concept(concept_id, split, mode, acts, labels, sel.lambda)?;
    Ok((model, sel))
}

/// `10` log-spaced values in `[1e-4, 1e1]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(-4.0 + 5.0 * i as f64 / 9.0)).collect()
}

/// Pre-sigmoid probe output `βᵀ vec(a) + b`.
pub fn concept_logit(m: &ConceptModel, a: &Activation) -> Result<f64> {
    if a.split != m.split {
        return Err(Error::ActivationMismatch(format!(
            "probe fit at split {}, activation from split {}",
            m.split, a.split
        )));
    }
    let v = vectorize(a, m.mode)?;
    logit_of_vector(m, &v)
}

pub fn logit_of_vector(m: &ConceptModel, v: &[f64]) -> Result<f64> {
    if v.len() != m.beta.len() {
        return Err(Error::ActivationMismatch(format!(
            "probe expects {} features, got {}",
            m.beta.len(),
            v.len()
        )));
    }
    Ok(m.intercept
        + m.units
            .indices()
            .iter()
            .map(|&i| m.beta[i] * v[i])
            .sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub auc: f64,
    pub recall: f64,
}

/// ROC-AUC of the probe logits and recall at probability threshold 0.5.
pub fn eval_probe(m: &ConceptModel, acts: &[Vec<f64>], labels: &[u8]) -> Result<ProbeMetrics> {
    let scores = acts.iter().map(|a| logit_of_vector(m, a)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<bool> = labels.iter().map(|l| *l == 1).collect();
    let auc = metrics::roc_auc(&scores, &truth)?;
    let predicted: Vec<bool> = scores.iter().map(|s| lasso::sigmoid(*s) >= 0.5).collect();
    let recall = metrics::recall(&predicted, &truth).ok_or(Error::UndefinedAuc)?;
    Ok(ProbeMetrics { auc, recall })
}

/// Probe training set for concept `k`: every positive plus an equal-size
/// seeded sample of negatives. Missing (`-1`) labels are dropped.
pub fn balanced_indices(concept_labels: &[i8], seed: u64) -> (Vec<usize>, Vec<u8>) {
    let pos: Vec<usize> = (0..concept_labels.len()).filter(|&i| concept_labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..concept_labels.len()).filter(|&i| concept_labels[i] == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    neg.shuffle(&mut rng);
    neg.truncate(pos.len());
    let mut idx: Vec<(usize, u8)> = pos.into_iter().map(|i| (i, 1)).chain(neg.into_iter().map(|i| (i, 0))).collect();
    idx.sort_unstable();
    idx.into_iter().unzip()
}

/// Uniform sample of `size` distinct units out of `count`.
pub fn random_units(size: usize, count: usize, granularity: Granularity, split: usize, seed: u64) -> Result<UnitSet> {
    if size > count {
        return Err(Error::UnitOutOfRange { index: size, count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, count, size);
    Ok(UnitSet::new(picked.into_iter(), granularity, split))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMasks {
    pub threshold: f64,
    /// Plane height and width.
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` mask per activation.
    pub masks: Vec<Vec<bool>>,
}

/// Thresholds one channel at the empirical `quantile` of its activations pooled
/// over every image and position; the mask marks strictly larger cells.
pub fn activation_mask(channel: usize, acts: &[Activation], quantile: f64) -> Result<ActivationMasks> {
    let first = acts.first().ok_or_else(|| Error::Empty("activation set".into()))?;
    if !first.spatial {
        return Err(Error::Mode(format!("activation masks need a spatial split; split {} is flat", first.split)));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::config("quantile", "must lie in [0, 1]"));
    }
    let shape = first.tensor.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if channel >= c {
        return Err(Error::UnitOutOfRange { index: channel, count: c });
    }
    let mut pooled = Vec::with_capacity(acts.len() * h * w);
    for a in acts {
        if a.tensor.shape() != shape.as_slice() {
            return Err(Error::ActivationMismatch("activations differ in shape".into()));
        }
        pooled.extend(a.tensor.data().iter().skip(channel).step_by(c).copied());
    }
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    let masks = pooled.chunks(h * w).map(|plane| plane.iter().map(|v| *v > threshold).collect()).collect();
    Ok(ActivationMasks {
        threshold,
        height: h,
        width: w,
        masks,
    })
}

/// Units shared by a collection of models; handy for reports.
pub fn union_units(models: &[ConceptModel]) -> BTreeSet<usize> {
    models.iter().flat_map(|m| m.units.indices().iter().copied()).collect()
}
