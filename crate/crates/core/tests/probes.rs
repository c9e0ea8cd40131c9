use causal_concepts::lasso::{self, LassoOptions, Matrix};
use causal_concepts::net::{Activation, Layer, LayerSpec, LayeredNetwork, Tensor};
use causal_concepts::probe::{self, Vectorization};
use causal_concepts::synth::{self, SynthConfig, MOTIF_SIZE};
use causal_concepts::Granularity;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logistic_data(seed: u64, n: usize, d: usize, signal: &[f64]) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels = rows
        .iter()
        .map(|r| {
            let z: f64 = r.iter().zip(signal).map(|(a, b)| a * b).sum();
            u8::from(rng.random_bool(lasso::sigmoid(z)))
        })
        .collect();
    (rows, labels)
}

/// Unregularized logistic regression by plain full-batch gradient descent.
fn gradient_descent_oracle(rows: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..200_000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, t) in rows.iter().zip(y) {
            let z = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - t;
            for (g, a) in gw.iter_mut().zip(r) {
                *g += e * a / n;
            }
            gb += e / n;
        }
        let norm = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 2.0 * g;
        }
        b -= 2.0 * gb;
        if norm < 1e-22 {
            break;
        }
    }
    (w, b)
}

#[test]
fn zero_lambda_matches_gradient_descent_oracle() {
    let (rows, labels) = logistic_data(11, 300, 4, &[1.0, -2.0, 0.5, 0.0]);
    let y: Vec<f64> = labels.iter().map(|l| f64::from(*l)).collect();
    let fit = lasso::fit(&Matrix::from_rows(&rows), &y, 0.0, None, LassoOptions::default());
    let (w, b) = gradient_descent_oracle(&rows, &y);
    let dist = fit
        .beta
        .iter()
        .zip(&w)
        .map(|(a, c)| (a - c).abs())
        .fold((fit.intercept - b).abs(), f64::max);
    assert!(dist <= 1e-3, "ℓ∞ distance {dist}");
}

#[test]
fn lambda_at_or_above_max_gives_prevalence_null_model() {
    let (rows, labels) = logistic_data(12, 200, 6, &[1.5, 1.5, 0.0, 0.0, 0.0, 0.0]);
    let y: Vec<f64> = labels.iter().map(|l| f64::from(*l)).collect();
    let x = Matrix::from_rows(&rows);
    let lm = lasso::lambda_max(&x, &y);
    let p = y.iter().sum::<f64>() / y.len() as f64;
    for scale in [1.0, 1.5, 10.0] {
        let m = probe::fit_concept(0, 2, Vectorization::Flatten, &rows, &labels, lm * scale).unwrap();
        assert!(m.beta.iter().all(|v| *v == 0.0));
        assert!(m.units.is_empty());
        assert!((m.intercept - (p / (1.0 - p)).ln()).abs() < 1e-8);
    }
}

#[test]
fn one_dimensional_separable_data() {
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i) / 39.0 * 2.0 - 1.0]).collect();
    let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[0] > 0.0)).collect();
    let m = probe::fit_concept(0, 2, Vectorization::Flatten, &rows, &labels, 0.01).unwrap();
    assert!(m.beta[0] > 0.0);
    let correct = rows
        .iter()
        .zip(&labels)
        .filter(|(r, l)| (probe::logit_of_vector(&m, r).unwrap() > 0.0) == (**l == 1))
        .count();
    assert_eq!(correct, rows.len());
}

#[test]
fn single_class_labels_are_degenerate() {
    let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
    let err = probe::fit_concept(0, 2, Vectorization::Flatten, &rows, &[1, 1, 1], 0.1).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn pure_noise_selects_largest_lambda() {
    let grid = probe::default_lambda_grid();
    let top = grid.iter().cloned().fold(f64::MIN, f64::max);
    let mut hits = 0;
    for seed in 0..10 {
        let (rows, _) = logistic_data(100 + seed, 300, 10, &[0.0; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let labels: Vec<u8> = (0..rows.len()).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let sel = probe::select_lambda(&rows, &labels, &grid, 10, seed).unwrap();
        hits += usize::from(sel.lambda == top);
    }
    assert!(hits >= 8, "grid maximum chosen in {hits}/10 seeds");
}

#[test]
fn single_and_duplicate_grids() {
    let (rows, labels) = logistic_data(13, 80, 3, &[2.0, 0.0, 0.0]);
    assert_eq!(probe::select_lambda(&rows, &labels, &[0.3], 5, 0).unwrap().lambda, 0.3);
    let grid = [0.001, 0.01, 0.1];
    let dup = [0.1, 0.01, 0.01, 0.001, 0.1];
    assert_eq!(
        probe::select_lambda(&rows, &labels, &grid, 5, 0).unwrap().lambda,
        probe::select_lambda(&rows, &labels, &dup, 5, 0).unwrap().lambda
    );
    assert!(probe::select_lambda(&rows, &labels, &[], 5, 0).is_err());
}

#[test]
fn scarce_class_lowers_fold_count() {
    let (rows, _) = logistic_data(14, 30, 2, &[0.0, 0.0]);
    let labels: Vec<u8> = (0..30).map(|i| u8::from(i < 4)).collect();
    let sel = probe::select_lambda(&rows, &labels, &[0.01, 0.1], 10, 0).unwrap();
    assert_eq!(sel.folds, 4);
}

#[test]
fn probe_fit_is_deterministic() {
    let (rows, labels) = logistic_data(15, 150, 8, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let a = probe::fit_concept_cv(0, 2, Vectorization::Flatten, &rows, &labels, &probe::default_lambda_grid(), 10, 3).unwrap();
    let b = probe::fit_concept_cv(0, 2, Vectorization::Flatten, &rows, &labels, &probe::default_lambda_grid(), 10, 3).unwrap();
    assert_eq!(a.0, b.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparsity_is_monotone_in_lambda(seed in 0u64..10_000) {
        let (rows, labels) = logistic_data(seed, 100, 12, &[2.0, -1.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let y: Vec<f64> = labels.iter().map(|l| f64::from(*l)).collect();
        let mut grid = probe::default_lambda_grid();
        grid.sort_by(f64::total_cmp);
        let fits = lasso::fit_path(&Matrix::from_rows(&rows), &y, &grid, LassoOptions::default());
        let nnz: Vec<usize> = fits.iter().map(|f| f.beta.iter().filter(|v| **v != 0.0).count()).collect();
        for w in nnz.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", nnz);
        }
    }

    #[test]
    fn units_match_nonzero_pattern(seed in 0u64..10_000, lambda in 0.001f64..0.2) {
        let (rows, labels) = logistic_data(seed, 80, 6, &[2.0, 0.0, -2.0, 0.0, 0.0, 0.0]);
        prop_assume!(labels.iter().filter(|l| **l == 1).count() >= 2 && labels.iter().filter(|l| **l == 0).count() >= 2);
        let m = probe::fit_concept(0, 2, Vectorization::Flatten, &rows, &labels, lambda).unwrap();
        let nz: Vec<usize> = (0..6).filter(|&j| m.beta[j] != 0.0).collect();
        prop_assert_eq!(m.units.indices(), nz.as_slice());
        prop_assert_eq!(m.units.granularity(), Granularity::Scalar);
    }
}

fn spatial(shape: Vec<usize>, data: Vec<f64>) -> Activation {
    Activation {
        tensor: Tensor::new(shape, data).unwrap(),
        split: 2,
        spatial: true,
    }
}

#[test]
fn maxpool_vectorization_of_flat_activation_is_mode_error() {
    let a = Activation {
        tensor: Tensor::vector(vec![1.0, 2.0]).unwrap(),
        split: 8,
        spatial: false,
    };
    assert!(probe::vectorize(&a, Vectorization::Maxpool).is_err());
    assert!(probe::activation_mask(0, &[a], 0.99).is_err());
}

#[test]
fn quantile_mask_marks_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let acts: Vec<Activation> = (0..50)
        .map(|_| spatial(vec![8, 8, 2], (0..128).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let m = probe::activation_mask(1, &acts, 0.99).unwrap();
    let above: usize = m.masks.iter().map(|v| v.iter().filter(|b| **b).count()).sum();
    let expected = (0.01 * 50.0 * 64.0) as usize;
    assert!(above.abs_diff(expected) <= 1, "{above} vs {expected}");
}

#[test]
fn constant_channel_has_empty_masks() {
    let acts = vec![spatial(vec![2, 2, 1], vec![0.5; 4]); 3];
    let m = probe::activation_mask(0, &acts, 0.99).unwrap();
    assert!(m.masks.iter().flatten().all(|b| !b));
}

/// With an identity first layer the split activation is the image itself, so
/// the top-quantile mask must fall on planted motifs.
#[test]
fn masks_of_identity_features_land_on_motifs() {
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let net = LayeredNetwork::from_layers(
        vec![16, 16, 1],
        vec![
            Layer::new(LayerSpec::Conv3x3 { in_channels: 1, out_channels: 1 }, kernel, vec![0.0]).unwrap(),
            Layer::parameterless(LayerSpec::Relu),
            Layer::parameterless(LayerSpec::Flatten),
            Layer::new(LayerSpec::Dense { inputs: 256, outputs: 2 }, vec![0.0; 512], vec![0.0; 2]).unwrap(),
            Layer::parameterless(LayerSpec::Softmax),
        ],
        vec![2],
        0,
    )
    .unwrap();
    let cfg = SynthConfig {
        num_samples: 200,
        ..Default::default()
    };
    let ds = synth::generate(&cfg).unwrap();
    let origins = cfg.motif_origins().unwrap();
    let acts: Vec<Activation> = ds.train.iter().map(|s| net.forward_split(&s.x, 2).unwrap()).collect();
    // raw pixels clip at exactly 1.0 on more than 1% of the grid, so use a
    // quantile whose threshold falls below the clip value
    let m = probe::activation_mask(0, &acts, 0.9).unwrap();
    let mut marked = 0;
    for (mask, s) in m.masks.iter().zip(&ds.train) {
        for (p, on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            marked += 1;
            let (r, c) = (p / 16, p % 16);
            let inside = origins.iter().enumerate().any(|(k, (r0, c0))| {
                s.c_true[k] == 1 && (*r0..r0 + MOTIF_SIZE).contains(&r) && (*c0..c0 + MOTIF_SIZE).contains(&c)
            });
            assert!(inside, "masked pixel ({r}, {c}) outside every present motif");
        }
    }
    assert!(marked > 0);
}

#[test]
fn random_units_edges() {
    let all = probe::random_units(10, 10, Granularity::Scalar, 2, 1).unwrap();
    assert_eq!(all.len(), 10);
    assert!(probe::random_units(0, 10, Granularity::Scalar, 2, 1).unwrap().is_empty());
    assert!(probe::random_units(11, 10, Granularity::Scalar, 2, 1).is_err());
    assert_eq!(
        probe::random_units(4, 100, Granularity::Channel, 5, 9).unwrap(),
        probe::random_units(4, 100, Granularity::Channel, 5, 9).unwrap()
    );
}
