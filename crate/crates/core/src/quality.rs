//! Per-sample quality scores and the temperature-softmax sampling
//! distribution built from them.
//!
//! A sample's quality combines three terms:
//!
//! * the ℓ₂ norm of its gradient over the trainable parameters,
//! * the loss reduction from one probe SGD step on that sample alone,
//!   `ℓ(θ) − ℓ(θ − η∇ℓ)`, evaluated on a copy of the model,
//! * its alignment with recent training: cosine similarity between its
//!   gradient and an exponential moving average of minibatch gradients.
//!
//! The terms are optionally z-scored across the pool and then mixed with the
//! weights `alpha`. Minibatches are drawn without replacement from
//! `softmax(q / τ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdapterGrads, Batch, ModelState};
use crate::parallel::par_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    /// Weights of gradient norm, loss reduction and convergence alignment.
    pub alpha: [f64; 3],
    /// Step size of the loss-reduction probe.
    pub probe_lr: f64,
    pub tau: f64,
    pub z_normalize: bool,
    /// Decay of the gradient EMA used for the alignment term.
    pub ema_decay: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            alpha: [1.0 / 3.0; 3],
            probe_lr: 0.1,
            tau: 0.7,
            z_normalize: true,
            ema_decay: 0.9,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("alpha weights must be finite".into()));
        }
        if !(self.probe_lr >= 0.0 && self.probe_lr.is_finite()) {
            return Err(Error::Config("probe_lr must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub sample_id: u64,
    pub grad_norm: f64,
    pub loss_reduction: f64,
    pub convergence_contrib: f64,
    pub q: f64,
}

impl QualityRecord {
    fn terms(&self) -> [f64; 3] {
        [self.grad_norm, self.loss_reduction, self.convergence_contrib]
    }
}

/// Sampling weights over the training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSubset {
    pub ids: Vec<u64>,
    pub probs: Vec<f64>,
}

impl DataSubset {
    pub fn uniform(ids: Vec<u64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("subset needs at least one sample".into()));
        }
        let p = 1.0 / ids.len() as f64;
        let probs = vec![p; ids.len()];
        Ok(DataSubset { ids, probs })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Exponential moving average of flattened minibatch gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientEma {
    decay: f64,
    value: Option<Vec<f64>>,
}

impl GradientEma {
    pub fn new(decay: f64) -> Self {
        GradientEma { decay, value: None }
    }

    pub fn update(&mut self, grad: &[f64]) {
        match &mut self.value {
            Some(v) if v.len() == grad.len() => {
                for (e, g) in v.iter_mut().zip(grad) {
                    *e = self.decay * *e + (1.0 - self.decay) * g;
                }
            }
            slot => *slot = Some(grad.to_vec()),
        }
    }

    pub fn value(&self) -> Option<&[f64]> {
        self.value.as_deref()
    }
}

/// Something that can report its loss and gradient and evaluate the loss
/// after a hypothetical SGD step, without being modified.
pub trait ProbeObjective {
    fn loss_and_grad(&self) -> Result<(f64, Vec<f64>)>;
    fn loss_after_step(&self, grad: &[f64], eta: f64) -> Result<f64>;
}

/// One sample against a model, with the trainable adapters as parameters.
pub struct ModelProbe<'a> {
    pub state: &'a ModelState,
    pub sample: &'a Batch,
}

impl ProbeObjective for ModelProbe<'_> {
    fn loss_and_grad(&self) -> Result<(f64, Vec<f64>)> {
        let (loss, g) = self.state.per_sample_gradient(self.sample, false)?;
        Ok((loss, g.flatten()))
    }

    fn loss_after_step(&self, grad: &[f64], eta: f64) -> Result<f64> {
        let mut probe = self.state.clone();
        let grads = unflatten(self.state, grad)?;
        probe.sgd_step(&grads, eta)?;
        probe.loss(self.sample)
    }
}

fn unflatten(state: &ModelState, flat: &[f64]) -> Result<AdapterGrads> {
    let mut grads = AdapterGrads::zeros_like(state);
    let mut offset = 0;
    for g in &mut grads.layers {
        for t in [&mut g.a, &mut g.b] {
            let n = t.len();
            let src = flat
                .get(offset..offset + n)
                .ok_or_else(|| Error::Contract("flat gradient too short".into()))?;
            t.data_mut().copy_from_slice(src);
            offset += n;
        }
    }
    if offset != flat.len() {
        return Err(Error::Contract("flat gradient too long".into()));
    }
    Ok(grads)
}

/// The three raw quality terms for one objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityTerms {
    pub grad_norm: f64,
    pub loss_reduction: f64,
    pub convergence_contrib: f64,
}

pub fn probe_terms(obj: &impl ProbeObjective, ema: Option<&[f64]>, eta: f64) -> Result<QualityTerms> {
    let (loss, grad) = obj.loss_and_grad()?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let after = obj.loss_after_step(&grad, eta)?;
    let convergence_contrib = match ema {
        Some(e) => cosine(&grad, e),
        None => 0.0,
    };
    Ok(QualityTerms {
        grad_norm,
        loss_reduction: loss - after,
        convergence_contrib,
    })
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn weighted(alpha: &[f64; 3], terms: [f64; 3]) -> f64 {
    alpha.iter().zip(terms).map(|(a, t)| a * t).sum()
}

/// Scores one sample with raw (un-normalized) terms.
pub fn score_sample(
    state: &ModelState,
    sample: &Batch,
    cfg: &QualityConfig,
    ema: Option<&[f64]>,
) -> Result<QualityRecord> {
    let id = *sample
        .ids
        .first()
        .ok_or_else(|| Error::Input("empty sample".into()))?;
    if sample.len() != 1 {
        return Err(Error::Input(format!(
            "score_sample needs one sample, got {}",
            sample.len()
        )));
    }
    let t = probe_terms(&ModelProbe { state, sample }, ema, cfg.probe_lr)?;
    let terms = [t.grad_norm, t.loss_reduction, t.convergence_contrib];
    if terms.iter().any(|v| !v.is_finite()) {
        return Err(Error::Scoring {
            id,
            detail: format!("terms {terms:?}"),
        });
    }
    Ok(QualityRecord {
        sample_id: id,
        grad_norm: t.grad_norm,
        loss_reduction: t.loss_reduction,
        convergence_contrib: t.convergence_contrib,
        q: weighted(&cfg.alpha, terms),
    })
}

fn score_rows(
    state: &ModelState,
    dataset: &Dataset,
    rows: &[usize],
    cfg: &QualityConfig,
    ema: Option<&[f64]>,
    threads: usize,
) -> Result<Vec<QualityRecord>> {
    par_map(rows, threads, |&i| score_sample(state, &dataset.sample(i), cfg, ema))
        .into_iter()
        .collect()
}

/// Scores every sample, ascending by id, then combines terms into `q`.
pub fn score_pool(
    state: &ModelState,
    dataset: &Dataset,
    cfg: &QualityConfig,
    ema: Option<&[f64]>,
    threads: usize,
) -> Result<Vec<QualityRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows: Vec<usize> = (0..dataset.len()).collect();
    rows.sort_by_key(|&i| dataset.ids()[i]);
    let mut records = score_rows(state, dataset, &rows, cfg, ema, threads)?;
    combine(&mut records, cfg);
    Ok(records)
}

/// Recomputes `q` from the stored raw terms, z-scoring each term across the
/// pool when configured. Zero-variance terms contribute 0.
pub fn combine(records: &mut [QualityRecord], cfg: &QualityConfig) {
    if records.is_empty() {
        return;
    }
    if !cfg.z_normalize {
        for r in records.iter_mut() {
            r.q = weighted(&cfg.alpha, r.terms());
        }
        return;
    }
    let n = records.len() as f64;
    let mut stats = [(0.0, 0.0); 3];
    for (k, stat) in stats.iter_mut().enumerate() {
        let mean = records.iter().map(|r| r.terms()[k]).sum::<f64>() / n;
        let var = records
            .iter()
            .map(|r| (r.terms()[k] - mean).powi(2))
            .sum::<f64>()
            / n;
        *stat = (mean, var.sqrt());
    }
    for r in records.iter_mut() {
        let t = r.terms();
        let mut z = [0.0; 3];
        for k in 0..3 {
            let (mean, sd) = stats[k];
            if sd > 1e-12 * mean.abs().max(f64::MIN_POSITIVE) {
                z[k] = (t[k] - mean) / sd;
            }
        }
        r.q = weighted(&cfg.alpha, z);
    }
}

/// `p_i = exp(q_i/τ) / Σ_j exp(q_j/τ)`, max-subtracted. Entries are kept
/// strictly positive.
pub fn sampling_distribution(records: &[QualityRecord], tau: f64) -> Result<DataSubset> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    if records.is_empty() {
        return Err(Error::Input("no records to build a distribution from".into()));
    }
    let max = records.iter().map(|r| r.q).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = records
        .iter()
        .map(|r| ((r.q - max) / tau).exp().max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(DataSubset {
        ids: records.iter().map(|r| r.sample_id).collect(),
        probs,
    })
}

/// Weighted draw without replacement by sequential renormalized draws.
pub fn draw_minibatch(subset: &DataSubset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<u64>> {
    if batch_size > subset.len() {
        return Err(Error::Input(format!(
            "batch size {batch_size} exceeds pool size {}",
            subset.len()
        )));
    }
    let mut weights = subset.probs.clone();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let total: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        let i = pick.expect("remaining weight is positive");
        weights[i] = 0.0;
        out.push(subset.ids[i]);
    }
    Ok(out)
}

/// Result of a partial re-scoring pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Refresh {
    pub records: Vec<QualityRecord>,
    pub subset: DataSubset,
    pub rescored: Vec<u64>,
}

/// Re-scores `round(fraction·n)` uniformly chosen samples (at least one),
/// keeps stale terms for the rest, and rebuilds the distribution.
#[allow(clippy::too_many_arguments)]
pub fn refresh_scores(
    state: &ModelState,
    dataset: &Dataset,
    records: &[QualityRecord],
    cfg: &QualityConfig,
    ema: Option<&[f64]>,
    fraction: f64,
    rng: &mut impl Rng,
    threads: usize,
) -> Result<Refresh> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "refresh fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = records.len();
    let count = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut picked = rand::seq::index::sample(rng, n, count).into_vec();
    picked.sort_unstable();
    let index = dataset.id_index();
    let rows = picked
        .iter()
        .map(|&k| {
            index
                .get(&records[k].sample_id)
                .copied()
                .ok_or_else(|| Error::Input(format!("sample {} not in dataset", records[k].sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let fresh = score_rows(state, dataset, &rows, cfg, ema, threads)?;
    let mut updated = records.to_vec();
    let mut rescored = Vec::with_capacity(count);
    for (&k, rec) in picked.iter().zip(fresh) {
        rescored.push(rec.sample_id);
        updated[k] = rec;
    }
    combine(&mut updated, cfg);
    let subset = sampling_distribution(&updated, cfg.tau)?;
    Ok(Refresh {
        records: updated,
        subset,
        rescored,
    })
}

/// Expected min-max-normalized quality of a draw from `subset`, in [0, 1].
/// A pool with no spread maps to the midpoint.
pub fn mean_normalized_quality(records: &[QualityRecord], subset: &DataSubset) -> f64 {
    let lo = records.iter().map(|r| r.q).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.q).fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return 0.5;
    }
    let m: f64 = records
        .iter()
        .zip(&subset.probs)
        .map(|(r, p)| p * (r.q - lo) / (hi - lo))
        .sum();
    m.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        theta: f64,
    }

    impl ProbeObjective for Quadratic {
        fn loss_and_grad(&self) -> Result<(f64, Vec<f64>)> {
            Ok((self.theta * self.theta, vec![2.0 * self.theta]))
        }
        fn loss_after_step(&self, grad: &[f64], eta: f64) -> Result<f64> {
            let t = self.theta - eta * grad[0];
            Ok(t * t)
        }
    }

    fn rec(id: u64, q: f64) -> QualityRecord {
        QualityRecord {
            sample_id: id,
            grad_norm: 0.0,
            loss_reduction: 0.0,
            convergence_contrib: 0.0,
            q,
        }
    }

    #[test]
    fn quadratic_probe_matches_closed_form() {
        let t = probe_terms(&Quadratic { theta: 1.0 }, None, 0.1).unwrap();
        assert_eq!(t.grad_norm, 2.0);
        assert!((t.loss_reduction - (1.0 - 0.8f64.powi(2))).abs() < 1e-15);
        assert_eq!(t.convergence_contrib, 0.0);
    }

    #[test]
    fn zero_gradient_gives_zero_terms() {
        let t = probe_terms(&Quadratic { theta: 0.0 }, None, 0.5).unwrap();
        assert_eq!((t.grad_norm, t.loss_reduction, t.convergence_contrib), (0.0, 0.0, 0.0));
        let t = probe_terms(&Quadratic { theta: 0.0 }, Some(&[1.0]), 0.5).unwrap();
        assert_eq!(t.convergence_contrib, 0.0);
    }

    #[test]
    fn alignment_uses_ema_direction() {
        let t = probe_terms(&Quadratic { theta: 1.0 }, Some(&[-3.0]), 0.1).unwrap();
        assert_eq!(t.convergence_contrib, -1.0);
    }

    #[test]
    fn two_point_softmax() {
        // exp(1/0.7) / (exp(1/0.7) + 1), evaluated directly.
        let s = sampling_distribution(&[rec(0, 1.0), rec(1, 0.0)], 0.7).unwrap();
        let e = (1.0f64 / 0.7).exp();
        assert!((s.probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.probs[0] - 0.8067).abs() < 5e-5);
        assert!((s.probs[1] - 0.1933).abs() < 5e-5);
    }

    #[test]
    fn equal_scores_are_uniform_and_hot_limit() {
        let recs: Vec<_> = (0..5).map(|i| rec(i, 2.5)).collect();
        let s = sampling_distribution(&recs, 0.7).unwrap();
        assert!(s.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let recs: Vec<_> = (0..5).map(|i| rec(i, i as f64 * 10.0 - 20.0)).collect();
        let s = sampling_distribution(&recs, 1e6).unwrap();
        assert!(s.probs.iter().all(|&p| (p - 0.2).abs() < 1e-3));
        assert!(matches!(sampling_distribution(&recs, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn draw_full_pool_and_errors() {
        let s = DataSubset {
            ids: vec![4, 8, 15, 16],
            probs: vec![0.1, 0.2, 0.3, 0.4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut got = draw_minibatch(&s, 4, &mut rng).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![4, 8, 15, 16]);
        assert!(matches!(draw_minibatch(&s, 5, &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn near_certain_sample_comes_first() {
        let s = DataSubset {
            ids: vec![0, 1, 2],
            probs: vec![5e-16, 1.0 - 1e-15, 5e-16],
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(draw_minibatch(&s, 2, &mut rng).unwrap()[0], 1);
        }
    }

    #[test]
    fn draws_are_seeded() {
        let s = DataSubset::uniform((0..50).collect()).unwrap();
        let a = draw_minibatch(&s, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = draw_minibatch(&s, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn combine_with_zero_alpha_is_zero() {
        let mut recs = vec![
            QualityRecord {
                sample_id: 0,
                grad_norm: 1.0,
                loss_reduction: 2.0,
                convergence_contrib: 0.3,
                q: 0.0,
            },
            QualityRecord {
                sample_id: 1,
                grad_norm: 4.0,
                loss_reduction: -1.0,
                convergence_contrib: 0.9,
                q: 0.0,
            },
        ];
        let cfg = QualityConfig {
            alpha: [0.0; 3],
            ..Default::default()
        };
        combine(&mut recs, &cfg);
        assert!(recs.iter().all(|r| r.q == 0.0));
        let raw = QualityConfig {
            alpha: [1.0, 2.0, 3.0],
            z_normalize: false,
            ..Default::default()
        };
        combine(&mut recs, &raw);
        assert!((recs[0].q - (1.0 + 4.0 + 0.9)).abs() < 1e-15);
    }

    #[test]
    fn mean_quality_range() {
        let recs = vec![rec(0, -1.0), rec(1, 3.0)];
        let s = DataSubset::uniform(vec![0, 1]).unwrap();
        assert_eq!(mean_normalized_quality(&recs, &s), 0.5);
        let s = DataSubset {
            ids: vec![0, 1],
            probs: vec![0.0, 1.0],
        };
        assert_eq!(mean_normalized_quality(&recs, &s), 1.0);
        let flat = vec![rec(0, 2.0), rec(1, 2.0)];
        assert_eq!(mean_normalized_quality(&flat, &s), 0.5);
    }
}
