//! Per-layer sensitivity of the frozen base weights.
//!
//! Two scalar summaries per adapted layer, both computed from per-sample
//! gradients w.r.t. the frozen `W`:
//!
//! * grad-weight: mean over samples of the mean over entries of `|W ⊙ ∇W ℓ|`;
//! * Fisher trace: mean over samples of `‖∇W ℓ‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelState};
use crate::numerics::Tensor;

/// Margin used when mapping normalized scores into the open unit interval.
pub const NORMALIZE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    GradWeight,
    Fisher,
}

/// `E_samples[ mean_entries |W ⊙ g| ]`.
pub fn grad_weight_score(weight: &Tensor, sample_grads: &[Tensor]) -> Result<f64> {
    if sample_grads.is_empty() {
        return Err(Error::Input("sensitivity needs at least one sample".into()));
    }
    let mut total = 0.0;
    for g in sample_grads {
        if g.shape() != weight.shape() {
            return Err(Error::dim("grad_weight_score", weight.shape(), g.shape()));
        }
        let s: f64 = weight
            .data()
            .iter()
            .zip(g.data())
            .map(|(w, g)| (w * g).abs())
            .sum();
        total += s / weight.len() as f64;
    }
    Ok(total / sample_grads.len() as f64)
}

/// `E_samples[ ‖g‖² ]`, the trace of the empirical Fisher.
pub fn fisher_score(sample_grads: &[Tensor]) -> Result<f64> {
    if sample_grads.is_empty() {
        return Err(Error::Input("sensitivity needs at least one sample".into()));
    }
    Ok(sample_grads.iter().map(Tensor::sq_norm).sum::<f64>() / sample_grads.len() as f64)
}

/// Both estimators for every adapted layer, from one set of probe passes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layers: Vec<usize>,
    pub grad_weight: Vec<f64>,
    pub fisher: Vec<f64>,
    pub samples: usize,
}

impl LayerScores {
    pub fn select(&self, estimator: Estimator) -> &[f64] {
        match estimator {
            Estimator::GradWeight => &self.grad_weight,
            Estimator::Fisher => &self.fisher,
        }
    }
}

/// Runs one probe backward pass per sample and reduces per layer.
pub fn probe_layers(state: &ModelState, batch: &Batch) -> Result<LayerScores> {
    if batch.is_empty() {
        return Err(Error::Input("sensitivity needs at least one sample".into()));
    }
    let layers = state.adapted_layers();
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::with_capacity(batch.len()); layers.len()];
    for i in 0..batch.len() {
        let (_, g) = state.per_sample_gradient(&batch.sample(i), true)?;
        for (slot, lg) in per_layer.iter_mut().zip(g.layers) {
            slot.push(lg.weight.expect("probe pass fills weight gradients"));
        }
    }
    let mut grad_weight = Vec::with_capacity(layers.len());
    let mut fisher = Vec::with_capacity(layers.len());
    for (&l, grads) in layers.iter().zip(&per_layer) {
        grad_weight.push(grad_weight_score(&state.layers()[l].weight, grads)?);
        fisher.push(fisher_score(grads)?);
    }
    Ok(LayerScores {
        layers,
        grad_weight,
        fisher,
        samples: batch.len(),
    })
}

pub fn grad_weight_sensitivity(state: &ModelState, batch: &Batch) -> Result<Vec<f64>> {
    Ok(probe_layers(state, batch)?.grad_weight)
}

pub fn fisher_sensitivity(state: &ModelState, batch: &Batch) -> Result<Vec<f64>> {
    Ok(probe_layers(state, batch)?.fisher)
}

/// Min-max normalization affinely mapped into `[eps, 1 − eps]`. A set with
/// no spread maps to 0.5 everywhere.
pub fn normalize(raw: &[f64], eps: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Contract("normalize needs at least one layer".into()));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite sensitivity {v}")));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(vec![0.5; raw.len()]);
    }
    Ok(raw
        .iter()
        .map(|v| (eps + (1.0 - 2.0 * eps) * (v - lo) / (hi - lo)).clamp(eps, 1.0 - eps))
        .collect())
}

/// Running per-layer sensitivity state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityStats {
    pub layers: Vec<usize>,
    /// Latest grad-weight scores.
    pub raw: Vec<f64>,
    /// Latest Fisher traces.
    pub fisher: Vec<f64>,
    /// Normalized smoothed scores as of the last adjustment event.
    pub normalized: Vec<f64>,
    /// EMA of the selected estimator; empty until the first update.
    pub smoothed: Vec<f64>,
    pub samples_seen: usize,
    pub beta: f64,
    pub estimator: Estimator,
}

impl SensitivityStats {
    pub fn new(layers: Vec<usize>, beta: f64, estimator: Estimator) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("EMA decay must be in [0, 1), got {beta}")));
        }
        let n = layers.len();
        Ok(SensitivityStats {
            layers,
            raw: vec![0.0; n],
            fisher: vec![0.0; n],
            normalized: vec![0.5; n],
            smoothed: Vec::new(),
            samples_seen: 0,
            beta,
            estimator,
        })
    }

    /// `smoothed ← β·smoothed + (1 − β)·new`; the first update copies.
    pub fn ema_update(&mut self, new: &[f64]) -> Result<()> {
        if new.len() != self.layers.len() {
            return Err(Error::dim("ema_update", &[self.layers.len()], &[new.len()]));
        }
        if self.smoothed.is_empty() {
            self.smoothed = new.to_vec();
        } else {
            for (s, &v) in self.smoothed.iter_mut().zip(new) {
                *s = self.beta * *s + (1.0 - self.beta) * v;
            }
        }
        Ok(())
    }

    /// Folds one set of probe scores into the running state.
    pub fn observe(&mut self, scores: &LayerScores) -> Result<()> {
        if scores.layers != self.layers {
            return Err(Error::Contract("layer sets differ".into()));
        }
        self.raw = scores.grad_weight.clone();
        self.fisher = scores.fisher.clone();
        self.samples_seen += scores.samples;
        self.ema_update(scores.select(self.estimator))
    }

    /// Normalizes the smoothed scores (or the latest raw ones before any
    /// update) and stores the result.
    pub fn renormalize(&mut self) -> Result<&[f64]> {
        let src = if self.smoothed.is_empty() {
            self.raw.clone()
        } else {
            self.smoothed.clone()
        };
        self.normalized = normalize(&src, NORMALIZE_EPS)?;
        Ok(&self.normalized)
    }
}
