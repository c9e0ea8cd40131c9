//! Direct and indirect effects of a counterfactual through concept units.
//!
//! For a pair `(x, x′)` with flip target `t` and mediator units `V` at split `s`:
//!
//! * `DE = Φ2(splice(Φ1(x′), Φ1(x), V))_t / f_t(x) − 1` holds `V` at its
//!   factual value while everything else sees the counterfactual;
//! * `IE = Φ2(splice(Φ1(x), Φ1(x′), V))_t / f_t(x) − 1` moves only `V` to its
//!   counterfactual value.
//!
//! With `V = ∅` the indirect effect is exactly zero and the direct effect is
//! the per-pair treatment effect; with `V = all` the roles swap.

use serde::{Deserialize, Serialize};

use crate::counterfactual::{Pair, MIN_FACTUAL_PROB};
use crate::error::{Error, Result};
use crate::io::Csv;
use crate::net::{splice, Activation, LayeredNetwork, Tensor};
use crate::probe::{ConceptModel, Vectorization};
use crate::units::UnitSet;

/// Split activations of one pair, computed once and reused for every mediator.
#[derive(Clone, Debug)]
pub struct PairActivations {
    pub factual: Activation,
    pub counterfactual: Activation,
    pub target: usize,
    pub p_factual: f64,
    pub p_counterfactual: f64,
}

impl PairActivations {
    pub fn new(net: &LayeredNetwork, s: usize, pair: &Pair) -> Result<Self> {
        let factual = net.forward_split(&pair.x, s)?;
        let counterfactual = net.forward_split(&pair.x_prime, s)?;
        let p_factual = net.forward_from(&factual, s)?[pair.target];
        let p_counterfactual = net.forward_from(&counterfactual, s)?[pair.target];
        Ok(Self {
            factual,
            counterfactual,
            target: pair.target,
            p_factual,
            p_counterfactual,
        })
    }

    fn check(&self) -> Result<()> {
        if self.p_factual <= MIN_FACTUAL_PROB {
            return Err(Error::ExcludedPair(self.p_factual));
        }
        Ok(())
    }

    /// Per-pair treatment-effect term `f_t(x′)/f_t(x) − 1`.
    pub fn ate_term(&self) -> Result<f64> {
        self.check()?;
        Ok(self.p_counterfactual / self.p_factual - 1.0)
    }

    pub fn direct(&self, net: &LayeredNetwork, units: &UnitSet) -> Result<f64> {
        self.check()?;
        let hybrid = splice(&self.counterfactual, &self.factual, units)?;
        Ok(net.forward_from(&hybrid, hybrid.split)?[self.target] / self.p_factual - 1.0)
    }

    pub fn indirect(&self, net: &LayeredNetwork, units: &UnitSet) -> Result<f64> {
        self.check()?;
        let hybrid = splice(&self.factual, &self.counterfactual, units)?;
        Ok(net.forward_from(&hybrid, hybrid.split)?[self.target] / self.p_factual - 1.0)
    }
}

fn check_units(s: usize, units: &UnitSet) -> Result<()> {
    if units.split() != s {
        return Err(Error::ActivationMismatch(format!(
            "unit set belongs to split {}, effect requested at split {s}",
            units.split()
        )));
    }
    Ok(())
}

pub fn direct_effect(net: &LayeredNetwork, s: usize, pair: &Pair, units: &UnitSet) -> Result<f64> {
    check_units(s, units)?;
    PairActivations::new(net, s, pair)?.direct(net, units)
}

pub fn indirect_effect(net: &LayeredNetwork, s: usize, pair: &Pair, units: &UnitSet) -> Result<f64> {
    check_units(s, units)?;
    PairActivations::new(net, s, pair)?.indirect(net, units)
}

/// A mediator: a named unit set at one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Mediator {
    pub concept_id: usize,
    pub name: String,
    pub units: UnitSet,
}

impl Mediator {
    pub fn from_model(m: &ConceptModel, name: impl Into<String>) -> Self {
        Self {
            concept_id: m.concept_id,
            name: name.into(),
            units: m.units.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediationRecord {
    pub concept_id: usize,
    pub name: String,
    pub split: usize,
    pub de_mean: f64,
    pub ie_mean: f64,
    pub ie_abs_mean: f64,
    pub n_pairs: usize,
    pub ate_ratio: f64,
}

/// Averages DE, IE and |IE| over every usable pair for every mediator.
///
/// Pairs with a vanishing factual probability are skipped for all mediators,
/// so every record at a split shares the same pair set.
pub fn mediation_sweep(net: &LayeredNetwork, pairs: &[Pair], mediators: &[Mediator]) -> Result<Vec<MediationRecord>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no successful counterfactual pairs".into()));
    }
    let mut splits: Vec<usize> = mediators.iter().map(|m| m.units.split()).collect();
    splits.sort_unstable();
    splits.dedup();
    let mut records = Vec::with_capacity(mediators.len());
    for s in splits {
        let acts: Vec<PairActivations> = pairs
            .iter()
            .map(|p| PairActivations::new(net, s, p))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|a| a.p_factual > MIN_FACTUAL_PROB)
            .collect();
        if acts.is_empty() {
            return Err(Error::Empty(format!("every pair excluded at split {s}")));
        }
        let n = acts.len() as f64;
        let ate_ratio = acts.iter().map(|a| a.ate_term()).sum::<Result<f64>>()? / n;
        for m in mediators.iter().filter(|m| m.units.split() == s) {
            let (mut de, mut ie, mut ie_abs) = (0.0, 0.0, 0.0);
            for a in &acts {
                de += a.direct(net, &m.units)?;
                let v = a.indirect(net, &m.units)?;
                ie += v;
                ie_abs += v.abs();
            }
            records.push(MediationRecord {
                concept_id: m.concept_id,
                name: m.name.clone(),
                split: s,
                de_mean: de / n,
                ie_mean: ie / n,
                ie_abs_mean: ie_abs / n,
                n_pairs: acts.len(),
                ate_ratio,
            });
        }
    }
    Ok(records)
}

pub fn heatmap_csv(records: &[MediationRecord]) -> Csv {
    let mut csv = Csv::with_header(&["concept", "split", "ie_mean", "ie_abs_mean", "de_mean", "n_pairs", "ate_ratio"]);
    for r in records {
        csv.row(&[
            r.name.clone(),
            r.split.to_string(),
            r.ie_mean.to_string(),
            r.ie_abs_mean.to_string(),
            r.de_mean.to_string(),
            r.n_pairs.to_string(),
            r.ate_ratio.to_string(),
        ]);
    }
    csv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub concept_id: usize,
    pub name: String,
    pub score: f64,
}

/// Concepts in descending order of score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRanking {
    pub entries: Vec<RankEntry>,
}

impl ConceptRanking {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.concept_id).collect()
    }

    pub fn position(&self, concept_id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.concept_id == concept_id)
    }

    /// Keeps only the entries accepted by `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e.concept_id)).cloned().collect(),
        }
    }
}

/// Orders concepts by mean |IE|, ties by ascending concept id.
pub fn rank_concepts(records: &[MediationRecord]) -> ConceptRanking {
    rank_by(records.iter().map(|r| (r.concept_id, r.name.clone(), r.ie_abs_mean)))
}

pub fn rank_by(scores: impl IntoIterator<Item = (usize, String, f64)>) -> ConceptRanking {
    let mut entries: Vec<RankEntry> = scores
        .into_iter()
        .map(|(concept_id, name, score)| RankEntry { concept_id, name, score })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.concept_id.cmp(&b.concept_id)));
    ConceptRanking { entries }
}

/// Concept direction in activation space: `β/‖β‖`, with max-pool channel
/// coefficients broadcast over every spatial position.
pub fn concept_direction(m: &ConceptModel, shape: &[usize]) -> Result<Vec<f64>> {
    let norm = m.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedDirection);
    }
    let len: usize = shape.iter().product();
    match m.mode {
        Vectorization::Flatten => {
            if m.beta.len() != len {
                return Err(Error::ActivationMismatch(format!("probe has {} coefficients, activation {len}", m.beta.len())));
            }
            Ok(m.beta.iter().map(|b| b / norm).collect())
        }
        Vectorization::Maxpool => {
            if shape.len() != 3 || shape[2] != m.beta.len() {
                return Err(Error::ActivationMismatch(format!("max-pool probe does not fit activation {shape:?}")));
            }
            let c = shape[2];
            Ok((0..len).map(|i| m.beta[i % c] / norm).collect())
        }
    }
}

/// Fraction of `inputs` whose directional derivative of `log Φ2(·)_t` along
/// the concept direction is strictly positive.
pub fn tcav_score(net: &LayeredNetwork, s: usize, m: &ConceptModel, inputs: &[Tensor], t: usize) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("no samples of the target class".into()));
    }
    let dir = concept_direction(m, net.activation_shape(s)?)?;
    let mut positive = 0usize;
    for x in inputs {
        let a = net.forward_split(x, s)?;
        let g = net.activation_gradient(&a, s, t)?;
        let d: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        if d > 0.0 {
            positive += 1;
        }
    }
    Ok(positive as f64 / inputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, LayerSpec};
    use crate::units::Granularity;

    fn tiny_net() -> LayeredNetwork {
        let w1 = vec![0.5, -0.3, 0.8, 0.1, -0.2, 0.7, 0.4, -0.6, 0.3, 0.9, -0.1, 0.2];
        let w2 = vec![0.6, -0.4, 0.2, 0.3, -0.5, 0.8, -0.7, 0.1];
        LayeredNetwork::from_layers(
            vec![3],
            vec![
                Layer::new(LayerSpec::Dense { inputs: 3, outputs: 4 }, w1, vec![0.1, 0.0, -0.1, 0.2]).unwrap(),
                Layer::parameterless(LayerSpec::Relu),
                Layer::new(LayerSpec::Dense { inputs: 4, outputs: 2 }, w2, vec![0.0, 0.1]).unwrap(),
                Layer::parameterless(LayerSpec::Softmax),
            ],
            vec![2],
            0,
        )
        .unwrap()
    }

    fn pair() -> Pair {
        Pair {
            x: Tensor::vector(vec![0.2, 0.9, 0.4]).unwrap(),
            x_prime: Tensor::vector(vec![0.8, 0.1, 0.5]).unwrap(),
            target: 1,
        }
    }

    #[test]
    fn edge_identities() {
        let net = tiny_net();
        let p = pair();
        let acts = PairActivations::new(&net, 2, &p).unwrap();
        let ate = acts.ate_term().unwrap();
        let none = UnitSet::empty(Granularity::Scalar, 2);
        let all = UnitSet::all(4, Granularity::Scalar, 2);
        assert_eq!(indirect_effect(&net, 2, &p, &none).unwrap(), 0.0);
        assert_eq!(direct_effect(&net, 2, &p, &all).unwrap(), 0.0);
        assert!((direct_effect(&net, 2, &p, &none).unwrap() - ate).abs() < 1e-12);
        assert!((indirect_effect(&net, 2, &p, &all).unwrap() - ate).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_has_no_direct_effect() {
        let net = tiny_net();
        let p = Pair {
            x_prime: pair().x,
            ..pair()
        };
        let units = UnitSet::new([1, 3], Granularity::Scalar, 2);
        assert_eq!(direct_effect(&net, 2, &p, &units).unwrap(), 0.0);
    }

    #[test]
    fn indirect_effect_matches_naive_rebuild() {
        let net = tiny_net();
        let p = pair();
        let units = UnitSet::new([0, 2], Granularity::Scalar, 2);
        let a = net.forward_split(&p.x, 2).unwrap();
        let b = net.forward_split(&p.x_prime, 2).unwrap();
        let mut hybrid = Vec::new();
        for i in 0..4 {
            hybrid.push(if i == 0 || i == 2 { b.tensor.data()[i] } else { a.tensor.data()[i] });
        }
        let h = Activation {
            tensor: Tensor::vector(hybrid).unwrap(),
            split: 2,
            spatial: false,
        };
        let expected = net.forward_from(&h, 2).unwrap()[1] / net.forward(&p.x).unwrap()[1] - 1.0;
        assert!((indirect_effect(&net, 2, &p, &units).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn units_from_other_split_rejected() {
        let net = tiny_net();
        let units = UnitSet::new([0], Granularity::Scalar, 5);
        assert!(indirect_effect(&net, 2, &pair(), &units).is_err());
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = rank_by([(0, "a".into(), 0.1), (1, "b".into(), 0.4)]);
        assert_eq!(r.ids(), vec![1, 0]);
        let t = rank_by([(2, "c".into(), 0.3), (0, "a".into(), 0.3), (1, "b".into(), 0.3)]);
        assert_eq!(t.ids(), vec![0, 1, 2]);
    }

    #[test]
    fn sweep_single_pair_matches_per_pair_ops() {
        let net = tiny_net();
        let p = pair();
        let units = UnitSet::new([1], Granularity::Scalar, 2);
        let m = Mediator {
            concept_id: 0,
            name: "c0".into(),
            units: units.clone(),
        };
        let recs = mediation_sweep(&net, std::slice::from_ref(&p), std::slice::from_ref(&m)).unwrap();
        let ie = indirect_effect(&net, 2, &p, &units).unwrap();
        assert_eq!(recs[0].ie_mean, ie);
        assert_eq!(recs[0].ie_abs_mean, ie.abs());
        assert_eq!(recs[0].de_mean, direct_effect(&net, 2, &p, &units).unwrap());
        let doubled = mediation_sweep(&net, &[p.clone(), p], &[m]).unwrap();
        assert!((doubled[0].ie_mean - ie).abs() < 1e-15);
        assert!(mediation_sweep(&net, &[], &[]).is_err());
    }

    #[test]
    fn tcav_zero_beta_is_error() {
        let net = tiny_net();
        let m = ConceptModel::new(0, vec![0.0; 4], 0.0, 1.0, Vectorization::Flatten, 2);
        let err = tcav_score(&net, 2, &m, &[pair().x], 1).unwrap_err();
        assert!(matches!(err, Error::UndefinedDirection));
    }

    #[test]
    fn csv_header() {
        assert!(heatmap_csv(&[]).into_string().starts_with("concept,split,ie_mean,ie_abs_mean,de_mean"));
    }
}
