//! Gradient-ascent counterfactuals and the average treatment effect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Csv;
use crate::net::{argmax, LayeredNetwork, Tensor};

/// Probabilities at or below this make the ratio effects undefined.
pub const MIN_FACTUAL_PROB: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    pub step_size: f64,
    pub proximity_weight: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            proximity_weight: 0.01,
            confidence: 0.8,
            max_iters: 500,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

impl CounterfactualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("counterfactual.step_size", "must be > 0"));
        }
        if !(self.proximity_weight >= 0.0 && self.proximity_weight.is_finite()) {
            return Err(Error::config("counterfactual.proximity_weight", "must be >= 0"));
        }
        if !(self.confidence > 0.5 && self.confidence < 1.0) {
            return Err(Error::config("counterfactual.confidence", "must lie in (0.5, 1)"));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::config("counterfactual.clip_max", "must exceed clip_min"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    pub x_prime: Tensor,
    pub success: bool,
    pub target_class: usize,
    pub iterations: usize,
    pub l2_perturbation: f64,
    /// `f_t(x)` and `f_t(x′)` for the target class.
    pub p_target_original: f64,
    pub p_target_counterfactual: f64,
}

/// Second most probable class; ties go to the smaller index.
pub fn runner_up(probs: &[f64]) -> usize {
    let top = argmax(probs);
    let mut best: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        if i == top {
            continue;
        }
        if best.is_none_or(|b| p > probs[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(top)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pushes `x` towards the runner-up class `t` by projected gradient ascent on
/// `log f_t(x′) − γ‖x′ − x‖²` until `argmax f(x′) = t` with `f_t(x′) ≥ τ`.
pub fn generate_counterfactual(net: &LayeredNetwork, x: &Tensor, cfg: &CounterfactualConfig) -> Result<CounterfactualResult> {
    cfg.validate()?;
    let probs = net.forward(x)?;
    let original = argmax(&probs);
    let t = runner_up(&probs);
    let is_success = |p: &[f64]| t != original && argmax(p) == t && p[t] >= cfg.confidence;

    let mut xp = x.clone();
    let mut p = probs.clone();
    let mut iterations = 0;
    let mut success = false;
    while iterations < cfg.max_iters {
        let g = net.input_gradient(&xp, t)?;
        let data: Vec<f64> = xp
            .data()
            .iter()
            .zip(g.data())
            .zip(x.data())
            .map(|((v, gv), v0)| {
                let step = gv - 2.0 * cfg.proximity_weight * (v - v0);
                (v + cfg.step_size * step).clamp(cfg.clip_min, cfg.clip_max)
            })
            .collect();
        xp = Tensor::new(x.shape().to_vec(), data)?;
        iterations += 1;
        p = net.forward(&xp)?;
        if is_success(&p) {
            success = true;
            break;
        }
    }
    Ok(CounterfactualResult {
        l2_perturbation: l2(xp.data(), x.data()),
        x_prime: xp,
        success,
        target_class: t,
        iterations,
        p_target_original: probs[t],
        p_target_counterfactual: p[t],
    })
}

/// Runs the search for every input, in input order.
pub fn run_batch(net: &LayeredNetwork, inputs: &[Tensor], cfg: &CounterfactualConfig) -> Result<Vec<CounterfactualResult>> {
    inputs.iter().map(|x| generate_counterfactual(net, x, cfg)).collect()
}

pub fn results_csv(results: &[CounterfactualResult]) -> Csv {
    let mut csv = Csv::with_header(&["sample_id", "success", "target", "iterations", "l2", "p_target_x", "p_target_x_prime"]);
    for (i, r) in results.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            u8::from(r.success).to_string(),
            r.target_class.to_string(),
            r.iterations.to_string(),
            r.l2_perturbation.to_string(),
            r.p_target_original.to_string(),
            r.p_target_counterfactual.to_string(),
        ]);
    }
    csv
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    /// Mean of `f_t(x′)/f_t(x) − 1`.
    pub ate_ratio: f64,
    /// Mean of `f_t(x′) − f_t(x)`.
    pub ate_diff: f64,
    pub flip_rate: f64,
    pub n_pairs: usize,
    pub excluded: usize,
}

/// A factual/counterfactual pair with its flip target.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub x: Tensor,
    pub x_prime: Tensor,
    pub target: usize,
}

impl Pair {
    pub fn from_result(x: &Tensor, r: &CounterfactualResult) -> Self {
        Self {
            x: x.clone(),
            x_prime: r.x_prime.clone(),
            target: r.target_class,
        }
    }
}

/// Average treatment effect over successful pairs.
///
/// `attempts` is the number of searches the pairs came from; pairs whose
/// factual probability is at most [`MIN_FACTUAL_PROB`] are excluded and counted.
pub fn compute_ate(net: &LayeredNetwork, pairs: &[Pair], attempts: usize) -> Result<AteSummary> {
    if pairs.is_empty() {
        return Err(Error::Empty("counterfactual pairs".into()));
    }
    let mut ratio = 0.0;
    let mut diff = 0.0;
    let mut used = 0usize;
    for pair in pairs {
        let p = net.forward(&pair.x)?[pair.target];
        let q = net.forward(&pair.x_prime)?[pair.target];
        if p <= MIN_FACTUAL_PROB {
            continue;
        }
        ratio += q / p - 1.0;
        diff += q - p;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("every pair was excluded (factual probability ~0)".into()));
    }
    Ok(AteSummary {
        ate_ratio: ratio / used as f64,
        ate_diff: diff / used as f64,
        flip_rate: pairs.len() as f64 / attempts.max(pairs.len()) as f64,
        n_pairs: used,
        excluded: pairs.len() - used,
    })
}
