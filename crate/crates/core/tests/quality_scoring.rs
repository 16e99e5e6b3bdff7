use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsqlora::model::DenseLayer;
use tsqlora::quality::{
    draw_minibatch, refresh_scores, sampling_distribution, score_pool, DataSubset, QualityConfig,
};
use tsqlora::{gen_gaussian_mixture, Dataset, LoraAdapter, ModelSpec, ModelState, Tensor};

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ce(z: &[f64], y: usize) -> f64 {
    -softmax(z)[y].ln()
}

/// One linear layer `z = x·(W + B·A)ᵀ`, with `B = 0` so only `B` has gradient.
fn linear_pool() -> (ModelState, Dataset, Tensor, Tensor) {
    let spec = ModelSpec::mlp(vec![2, 3]);
    let w = Tensor::matrix(3, 2, vec![0.5, -1.0, 0.25, 0.75, -0.5, 0.0]).unwrap();
    let a = Tensor::matrix(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
    let layer = DenseLayer {
        weight: w.clone(),
        bias: Tensor::zeros(&[1, 3]),
    };
    let adapter = LoraAdapter::from_factors(a.clone(), Tensor::zeros(&[3, 2]), 2).unwrap();
    let state = ModelState::from_parts(&spec, vec![layer], vec![Some(adapter)]).unwrap();
    let x = Tensor::matrix(3, 2, vec![1.0, 0.0, -0.5, 1.5, 2.0, -1.0]).unwrap();
    let data = Dataset::new(x.clone(), vec![0, 2, 1], vec![10, 11, 12], vec![false; 3], 3).unwrap();
    (state, data, w, a)
}

#[test]
fn linear_pool_matches_closed_form() {
    let (state, data, w, a) = linear_pool();
    let eta = 0.3;
    let cfg = QualityConfig {
        alpha: [1.0, 1.0, 0.0],
        probe_lr: eta,
        z_normalize: false,
        ..Default::default()
    };
    let records = score_pool(&state, &data, &cfg, None, 2).unwrap();
    assert_eq!(records.iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![10, 11, 12]);
    for (i, rec) in records.iter().enumerate() {
        let x = data.features().row(i);
        let y = data.labels()[i];
        let z: Vec<f64> = (0..3).map(|k| w.row(k).iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let h: Vec<f64> = (0..2).map(|r| a.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let h2: f64 = h.iter().map(|v| v * v).sum();
        let mut err = softmax(&z);
        err[y] -= 1.0;
        let e2: f64 = err.iter().map(|v| v * v).sum();
        // dℓ/dB = errᵀ·h, so one step moves the logits by −η·‖h‖²·err.
        let moved: Vec<f64> = z.iter().zip(&err).map(|(z, e)| z - eta * h2 * e).collect();
        let dl = ce(&z, y) - ce(&moved, y);
        assert!((rec.grad_norm - (e2 * h2).sqrt()).abs() < 1e-12, "{i}");
        assert!((rec.loss_reduction - dl).abs() < 1e-12, "{i}");
        assert_eq!(rec.convergence_contrib, 0.0);
        assert!((rec.q - rec.grad_norm - rec.loss_reduction).abs() < 1e-15);
    }
}

#[test]
fn z_normalized_scores_are_standardized() {
    let data = gen_gaussian_mixture(0, 120, 4, 3, 0.1).unwrap();
    let state = ModelState::init(&ModelSpec::mlp(vec![4, 6, 3]), 2, 4, 1).unwrap();
    for alpha in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
        let cfg = QualityConfig {
            alpha,
            ..Default::default()
        };
        let q: Vec<f64> = score_pool(&state, &data, &cfg, None, 1)
            .unwrap()
            .iter()
            .map(|r| r.q)
            .collect();
        let n = q.len() as f64;
        let mean = q.iter().sum::<f64>() / n;
        let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identical_samples_score_identically() {
    let x = Tensor::from_fn(5, 3, |_, j| j as f64 - 1.0);
    let data = Dataset::new(x, vec![1; 5], (0..5).collect(), vec![false; 5], 2).unwrap();
    let state = ModelState::init(&ModelSpec::mlp(vec![3, 4, 2]), 1, 2, 0).unwrap();
    let records = score_pool(&state, &data, &QualityConfig::default(), None, 3).unwrap();
    for r in &records[1..] {
        assert_eq!(
            (r.grad_norm, r.loss_reduction, r.q),
            (records[0].grad_norm, records[0].loss_reduction, records[0].q)
        );
    }
}

#[test]
fn threads_do_not_change_scores() {
    let data = gen_gaussian_mixture(4, 64, 5, 3, 0.2).unwrap();
    let state = ModelState::init(&ModelSpec::mlp(vec![5, 4, 3]), 2, 4, 3).unwrap();
    let cfg = QualityConfig::default();
    let one = score_pool(&state, &data, &cfg, None, 1).unwrap();
    let many = score_pool(&state, &data, &cfg, None, 5).unwrap();
    assert_eq!(one, many);
}

#[test]
fn scoring_is_non_destructive() {
    let data = gen_gaussian_mixture(1, 30, 4, 2, 0.0).unwrap();
    let state = ModelState::init(&ModelSpec::mlp(vec![4, 3, 2]), 1, 2, 0).unwrap();
    let before = state.checksum();
    score_pool(&state, &data, &QualityConfig::default(), None, 2).unwrap();
    assert_eq!(state.checksum(), before);
}

#[test]
fn refresh_cases() {
    let data = gen_gaussian_mixture(2, 4, 3, 2, 0.0).unwrap();
    let state = ModelState::init(&ModelSpec::mlp(vec![3, 4, 2]), 2, 2, 5).unwrap();
    let cfg = QualityConfig::default();
    let records = score_pool(&state, &data, &cfg, None, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let full = refresh_scores(&state, &data, &records, &cfg, None, 1.0, &mut rng, 1).unwrap();
    assert_eq!(full.records, records);
    assert_eq!(full.subset, sampling_distribution(&records, cfg.tau).unwrap());

    let half = refresh_scores(&state, &data, &records, &cfg, None, 0.5, &mut rng, 1).unwrap();
    assert_eq!(half.rescored.len(), 2);
    assert_eq!(half.records, records);

    assert!(refresh_scores(&state, &data, &records, &cfg, None, 0.0, &mut rng, 1).is_err());
}

#[test]
fn draw_frequencies_follow_probabilities() {
    let subset = DataSubset {
        ids: vec![0, 1, 2],
        probs: vec![0.5, 0.3, 0.2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut counts = [0usize; 3];
    let draws = 100_000;
    for _ in 0..draws {
        counts[draw_minibatch(&subset, 1, &mut rng).unwrap()[0] as usize] += 1;
    }
    for (c, p) in counts.iter().zip(&subset.probs) {
        assert!((*c as f64 / draws as f64 - p).abs() < 0.01);
    }
}
