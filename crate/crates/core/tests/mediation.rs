use causal_concepts::counterfactual::{self, Pair};
use causal_concepts::mediation::{self, MediationRecord, Mediator, PairActivations};
use causal_concepts::net::{Activation, LayerSpec, LayeredNetwork, Tensor};
use causal_concepts::probe::{ConceptModel, Vectorization};
use causal_concepts::{Granularity, UnitSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_net(seed: u64) -> LayeredNetwork {
    let specs = vec![
        LayerSpec::Conv3x3 { in_channels: 1, out_channels: 2 },
        LayerSpec::Relu,
        LayerSpec::Maxpool2x2,
        LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 12, outputs: 5 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 5, outputs: 2 },
        LayerSpec::Softmax,
    ];
    LayeredNetwork::initialized(vec![4, 4, 1], specs, vec![2, 5, 8], seed).unwrap()
}

fn tiny_net(seed: u64) -> LayeredNetwork {
    let specs = vec![
        LayerSpec::Dense { inputs: 3, outputs: 4 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 4, outputs: 2 },
        LayerSpec::Softmax,
    ];
    LayeredNetwork::initialized(vec![3], specs, vec![2], seed).unwrap()
}

fn random_pair(net: &LayeredNetwork, rng: &mut ChaCha8Rng) -> Pair {
    let shape = net.input_shape().to_vec();
    let n: usize = shape.iter().product();
    let mut draw = || Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    Pair {
        x: draw(),
        x_prime: draw(),
        target: 1,
    }
}

fn unit_count(net: &LayeredNetwork, s: usize, g: Granularity) -> usize {
    let shape = net.activation_shape(s).unwrap();
    match g {
        Granularity::Scalar => shape.iter().product(),
        Granularity::Channel => shape[2],
    }
}

#[test]
fn edge_identities_hold_per_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let net = conv_net(seed);
        let pair = random_pair(&net, &mut rng);
        for &s in net.split_candidates() {
            let grans: &[Granularity] = if s == 8 { &[Granularity::Scalar] } else { &[Granularity::Scalar, Granularity::Channel] };
            for &g in grans {
                let n = unit_count(&net, s, g);
                let pa = PairActivations::new(&net, s, &pair).unwrap();
                let ate = pa.ate_term().unwrap();
                let none = UnitSet::empty(g, s);
                let all = UnitSet::all(n, g, s);
                assert!((mediation::direct_effect(&net, s, &pair, &none).unwrap() - ate).abs() <= 1e-9);
                assert!(mediation::direct_effect(&net, s, &pair, &all).unwrap().abs() <= 1e-9);
                assert!(mediation::indirect_effect(&net, s, &pair, &none).unwrap().abs() <= 1e-9);
                assert!((mediation::indirect_effect(&net, s, &pair, &all).unwrap() - ate).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn identical_pair_has_no_effects() {
    let net = conv_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pair = random_pair(&net, &mut rng);
    pair.x_prime = pair.x.clone();
    let units = UnitSet::new([0, 5, 7], Granularity::Scalar, 5);
    assert_eq!(mediation::direct_effect(&net, 5, &pair, &units).unwrap(), 0.0);
    assert_eq!(mediation::indirect_effect(&net, 5, &pair, &units).unwrap(), 0.0);
}

#[test]
fn indirect_effect_matches_naive_splice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let net = tiny_net(seed);
        let pair = random_pair(&net, &mut rng);
        let ids: Vec<usize> = (0..4).filter(|_| rng.random_bool(0.5)).collect();
        let units = UnitSet::new(ids.clone(), Granularity::Scalar, 2);
        let a = net.forward_split(&pair.x, 2).unwrap();
        let b = net.forward_split(&pair.x_prime, 2).unwrap();
        let mut hybrid = Vec::new();
        for i in 0..4 {
            hybrid.push(if ids.contains(&i) { b.tensor.data()[i] } else { a.tensor.data()[i] });
        }
        let h = Activation {
            tensor: Tensor::vector(hybrid).unwrap(),
            ..a.clone()
        };
        let p = net.forward(&pair.x).unwrap()[1];
        let naive = net.forward_from(&h, 2).unwrap()[1] / p - 1.0;
        let ie = mediation::indirect_effect(&net, 2, &pair, &units).unwrap();
        assert!((ie - naive).abs() <= 1e-12, "{ie} vs {naive}");
    }
}

#[test]
fn mismatched_unit_split_is_rejected() {
    let net = conv_net(0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pair = random_pair(&net, &mut rng);
    let units = UnitSet::new([0], Granularity::Scalar, 2);
    assert!(mediation::indirect_effect(&net, 5, &pair, &units).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn direct_effect_equals_indirect_effect_of_complement(seed in 0u64..1000, mask in prop::collection::vec(any::<bool>(), 64)) {
        let net = conv_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_pair(&net, &mut rng);
        for (s, g) in [(2, Granularity::Scalar), (2, Granularity::Channel), (5, Granularity::Scalar), (8, Granularity::Scalar)] {
            let n = unit_count(&net, s, g);
            let v = UnitSet::new((0..n).filter(|i| mask[i % mask.len()]), g, s);
            let de = mediation::direct_effect(&net, s, &pair, &v).unwrap();
            let ie = mediation::indirect_effect(&net, s, &pair, &v.complement(n)).unwrap();
            prop_assert_eq!(de, ie);
        }
    }

    #[test]
    fn ranking_ignores_common_positive_scale(scores in prop::collection::vec(0.0f64..10.0, 1..8), c in 0.01f64..100.0) {
        let rec = |scale: f64| -> Vec<MediationRecord> {
            scores.iter().enumerate().map(|(i, s)| MediationRecord {
                concept_id: i,
                name: format!("c{i}"),
                split: 5,
                de_mean: 0.0,
                ie_mean: s * scale,
                ie_abs_mean: s * scale,
                n_pairs: 1,
                ate_ratio: 0.0,
            }).collect()
        };
        prop_assert_eq!(mediation::rank_concepts(&rec(1.0)).ids(), mediation::rank_concepts(&rec(c)).ids());
    }
}

fn mediators(net: &LayeredNetwork) -> Vec<Mediator> {
    let _ = net;
    vec![
        Mediator {
            concept_id: 0,
            name: "a".into(),
            units: UnitSet::new([1, 4, 9], Granularity::Scalar, 5),
        },
        Mediator {
            concept_id: 1,
            name: "b".into(),
            units: UnitSet::new([0], Granularity::Channel, 2),
        },
    ]
}

#[test]
fn sweep_is_invariant_to_duplicated_pairs() {
    let net = conv_net(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<Pair> = (0..4).map(|_| random_pair(&net, &mut rng)).collect();
    let twice: Vec<Pair> = pairs.iter().chain(&pairs).cloned().collect();
    let a = mediation::mediation_sweep(&net, &pairs, &mediators(&net)).unwrap();
    let b = mediation::mediation_sweep(&net, &twice, &mediators(&net)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.ie_mean - y.ie_mean).abs() <= 1e-12 * x.ie_mean.abs().max(1.0));
        assert!((x.de_mean - y.de_mean).abs() <= 1e-12 * x.de_mean.abs().max(1.0));
        assert_eq!(y.n_pairs, 2 * x.n_pairs);
    }
}

#[test]
fn single_pair_record_equals_per_pair_effects() {
    let net = conv_net(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pair = random_pair(&net, &mut rng);
    let meds = mediators(&net);
    let recs = mediation::mediation_sweep(&net, std::slice::from_ref(&pair), &meds).unwrap();
    assert_eq!(recs.len(), meds.len());
    for m in &meds {
        let r = recs.iter().find(|r| r.concept_id == m.concept_id).unwrap();
        let s = m.units.split();
        assert_eq!(r.split, s);
        assert_eq!(r.ie_mean, mediation::indirect_effect(&net, s, &pair, &m.units).unwrap());
        assert_eq!(r.de_mean, mediation::direct_effect(&net, s, &pair, &m.units).unwrap());
        let ate = counterfactual::compute_ate(&net, std::slice::from_ref(&pair), 1).unwrap();
        assert_eq!(r.ate_ratio, ate.ate_ratio);
    }
}

#[test]
fn sweep_without_pairs_is_error() {
    let net = conv_net(0);
    assert!(mediation::mediation_sweep(&net, &[], &mediators(&net)).is_err());
}

fn flat_model(beta: Vec<f64>, split: usize) -> ConceptModel {
    ConceptModel::new(0, beta, 0.0, 0.01, Vectorization::Flatten, split)
}

#[test]
fn tcav_gradient_direction_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..10 {
        let net = conv_net(seed);
        let x = random_pair(&net, &mut rng).x;
        let a = net.forward_split(&x, 5).unwrap();
        let g = net.activation_gradient(&a, 5, 1).unwrap();
        if g.data().iter().all(|v| *v == 0.0) {
            continue;
        }
        let m = flat_model(g.data().to_vec(), 5);
        assert_eq!(mediation::tcav_score(&net, 5, &m, &[x], 1).unwrap(), 1.0);
    }
}

#[test]
fn tcav_sign_symmetry_and_scale_invariance() {
    let net = conv_net(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<Tensor> = (0..30).map(|_| random_pair(&net, &mut rng).x).collect();
    let beta: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pos = flat_model(beta.clone(), 5);
    let neg = flat_model(beta.iter().map(|v| -v).collect(), 5);
    let big = flat_model(beta.iter().map(|v| v * 37.5).collect(), 5);
    let zero_frac = inputs
        .iter()
        .filter(|x| {
            let a = net.forward_split(x, 5).unwrap();
            let g = net.activation_gradient(&a, 5, 1).unwrap();
            g.data().iter().zip(&beta).map(|(u, v)| u * v).sum::<f64>() == 0.0
        })
        .count() as f64
        / inputs.len() as f64;
    let sp = mediation::tcav_score(&net, 5, &pos, &inputs, 1).unwrap();
    let sn = mediation::tcav_score(&net, 5, &neg, &inputs, 1).unwrap();
    assert!((sp + sn - (1.0 - zero_frac)).abs() < 1e-12);
    assert_eq!(sp, mediation::tcav_score(&net, 5, &big, &inputs, 1).unwrap());
}

#[test]
fn tcav_channel_direction_broadcasts_over_positions() {
    let net = conv_net(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs: Vec<Tensor> = (0..20).map(|_| random_pair(&net, &mut rng).x).collect();
    let channel = ConceptModel::new(0, vec![0.0, 1.0, 0.0], 0.0, 0.01, Vectorization::Maxpool, 5);
    let mut flat = vec![0.0; 12];
    for pos in 0..4 {
        flat[pos * 3 + 1] = 1.0;
    }
    assert_eq!(
        mediation::tcav_score(&net, 5, &channel, &inputs, 1).unwrap(),
        mediation::tcav_score(&net, 5, &flat_model(flat, 5), &inputs, 1).unwrap()
    );
}

#[test]
fn tcav_zero_direction_is_undefined() {
    let net = conv_net(0);
    let err = mediation::tcav_score(&net, 5, &flat_model(vec![0.0; 12], 5), &[Tensor::zeros(vec![4, 4, 1])], 1).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn ranking_ties_go_to_smaller_id() {
    let r = mediation::rank_by([(3, "d".to_string(), 0.5), (1, "b".into(), 0.5), (2, "c".into(), 0.9)]);
    assert_eq!(r.ids(), vec![2, 1, 3]);
}
