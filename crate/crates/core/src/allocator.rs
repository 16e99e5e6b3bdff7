//! Sensitivity-proportional integer rank allocation.
//!
//! Continuous targets are `s_ℓ / Σ_j s_j · φ · R₀`. The integer plan spends
//! exactly `round(φ·R₀)` ranks whenever that total is reachable within the
//! per-layer bounds: bounded layers are pinned by water-filling, the rest
//! share the remainder proportionally, and the result is integerized by
//! largest remainders.

use serde::{Deserialize, Serialize};

use crate::adapters::RankChange;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    pub r_init: usize,
    pub r_min: usize,
    /// Adapter capacity; `4·r_init` when unset.
    pub r_max: Option<usize>,
    pub phi_lo: f64,
    pub phi_hi: f64,
    /// Slope of φ in the mean normalized quality.
    pub kappa: f64,
    /// EMA decay for per-layer sensitivities.
    pub sensitivity_beta: f64,
    /// Total base budget `R₀`; `L·r_init` when unset.
    pub budget: Option<usize>,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            r_init: 2,
            r_min: 1,
            r_max: None,
            phi_lo: 0.5,
            phi_hi: 1.5,
            kappa: 1.0,
            sensitivity_beta: 0.9,
            budget: None,
        }
    }
}

impl AllocatorConfig {
    pub fn capacity(&self) -> usize {
        self.r_max.unwrap_or(4 * self.r_init)
    }

    /// Returns a copy with `r_max` filled in.
    pub fn resolved(&self) -> Self {
        AllocatorConfig {
            r_max: Some(self.capacity()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r_max = self.capacity();
        if !(self.r_min <= self.r_init && self.r_init <= r_max) {
            return Err(Error::Config(format!(
                "need r_min ≤ r_init ≤ r_max, got {} / {} / {r_max}",
                self.r_min, self.r_init
            )));
        }
        if r_max == 0 {
            return Err(Error::Config("adapter capacity must be positive".into()));
        }
        if !(self.phi_lo > 0.0 && self.phi_lo <= self.phi_hi && self.phi_hi.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < phi_lo ≤ phi_hi, got [{}, {}]",
                self.phi_lo, self.phi_hi
            )));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.sensitivity_beta) {
            return Err(Error::Config("sensitivity_beta must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Quality scaling `φ = clamp(1 + κ·(m − 0.5), φ_lo, φ_hi)`.
pub fn phi(mean_quality: f64, cfg: &AllocatorConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&mean_quality) {
        return Err(Error::Contract(format!(
            "mean quality must be in [0, 1], got {mean_quality}"
        )));
    }
    Ok((1.0 + cfg.kappa * (mean_quality - 0.5)).clamp(cfg.phi_lo, cfg.phi_hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub layers: Vec<usize>,
    pub sensitivity: Vec<f64>,
    /// Unbounded continuous targets.
    pub targets: Vec<f64>,
    pub assigned: Vec<usize>,
    /// `R₀`, by default `L·r_init`.
    pub budget: usize,
    pub phi: f64,
    /// Ranks actually spent.
    pub total: usize,
    pub r_min: usize,
    pub r_max: usize,
    /// True when `round(φ·R₀)` was outside `[L·r_min, L·r_max]` and had to be
    /// clamped.
    pub binding: bool,
}

/// Continuous bounded shares: `clamp(λ·s, lo, hi)` with `λ` chosen so the
/// shares sum to `total`. Requires `L·lo ≤ total ≤ L·hi`.
fn water_fill(s: &[f64], total: f64, lo: f64, hi: f64) -> Vec<f64> {
    #[derive(Clone, Copy, PartialEq)]
    enum Pin {
        Free,
        Low,
        High,
    }
    let n = s.len();
    let mut pins = vec![Pin::Free; n];
    loop {
        let fixed: f64 = pins
            .iter()
            .map(|p| match p {
                Pin::Low => lo,
                Pin::High => hi,
                Pin::Free => 0.0,
            })
            .sum();
        let free: Vec<usize> = (0..n).filter(|&i| pins[i] == Pin::Free).collect();
        if free.is_empty() {
            break;
        }
        let remaining = total - fixed;
        let mass: f64 = free.iter().map(|&i| s[i]).sum();
        if mass <= 0.0 {
            // Only zero-sensitivity layers left; share what remains evenly.
            let each = (remaining / free.len() as f64).clamp(lo, hi);
            return (0..n)
                .map(|i| match pins[i] {
                    Pin::Low => lo,
                    Pin::High => hi,
                    Pin::Free => each,
                })
                .collect();
        }
        let lambda = remaining / mass;
        let (mut deficit, mut excess) = (0.0, 0.0);
        for &i in &free {
            let c = lambda * s[i];
            if c < lo {
                deficit += lo - c;
            } else if c > hi {
                excess += c - hi;
            }
        }
        if deficit == 0.0 && excess == 0.0 {
            break;
        }
        // Pin only the side with the larger violation; the other side may
        // resolve once λ moves.
        let pin_low = deficit > excess;
        for &i in &free {
            let c = lambda * s[i];
            if pin_low && c < lo {
                pins[i] = Pin::Low;
            } else if !pin_low && c > hi {
                pins[i] = Pin::High;
            }
        }
    }
    let fixed: f64 = pins
        .iter()
        .map(|p| match p {
            Pin::Low => lo,
            Pin::High => hi,
            Pin::Free => 0.0,
        })
        .sum();
    let mass: f64 = (0..n).filter(|&i| pins[i] == Pin::Free).map(|i| s[i]).sum();
    let lambda = if mass > 0.0 { (total - fixed) / mass } else { 0.0 };
    (0..n)
        .map(|i| match pins[i] {
            Pin::Low => lo,
            Pin::High => hi,
            Pin::Free => (lambda * s[i]).clamp(lo, hi),
        })
        .collect()
}

/// Largest-remainder integerization of bounded shares summing to `total`.
fn largest_remainder(shares: &[f64], s: &[f64], total: usize, lo: usize, hi: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shares
        .iter()
        .map(|&c| (c.floor() as usize).clamp(lo, hi))
        .collect();
    let frac: Vec<f64> = shares.iter().zip(&out).map(|(&c, &f)| c - f as f64).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        frac[b]
            .total_cmp(&frac[a])
            .then(s[b].total_cmp(&s[a]))
            .then(a.cmp(&b))
    });
    let mut spent: usize = out.iter().sum();
    while spent < total {
        let Some(&i) = order.iter().find(|&&i| out[i] < hi && (out[i] as f64) < shares[i].ceil()) else {
            // Rounding noise only: fall back to any layer with headroom.
            let Some(&i) = order.iter().find(|&&i| out[i] < hi) else { break };
            out[i] += 1;
            spent += 1;
            continue;
        };
        out[i] += 1;
        spent += 1;
    }
    while spent > total {
        let Some(&i) = order.iter().rev().find(|&&i| out[i] > lo) else { break };
        out[i] -= 1;
        spent -= 1;
    }
    out
}

/// Integer ranks for each layer from normalized sensitivities and φ.
pub fn allocate(layers: &[usize], sensitivity: &[f64], phi: f64, cfg: &AllocatorConfig) -> Result<RankPlan> {
    cfg.validate()?;
    if layers.len() != sensitivity.len() || layers.is_empty() {
        return Err(Error::dim("allocate", &[layers.len()], &[sensitivity.len()]));
    }
    if let Some(v) = sensitivity.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!("invalid sensitivity {v}")));
    }
    let mass: f64 = sensitivity.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Contract("all sensitivities are zero".into()));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Contract(format!("phi must be positive, got {phi}")));
    }
    let l = layers.len();
    let r_max = cfg.capacity();
    let budget = cfg.budget.unwrap_or(l * cfg.r_init);
    let scaled = phi * budget as f64;
    let targets: Vec<f64> = sensitivity.iter().map(|s| s / mass * scaled).collect();
    let wanted = scaled.round() as usize;
    let total = wanted.clamp(l * cfg.r_min, l * r_max);
    let shares = water_fill(sensitivity, total as f64, cfg.r_min as f64, r_max as f64);
    let assigned = largest_remainder(&shares, sensitivity, total, cfg.r_min, r_max);
    Ok(RankPlan {
        layers: layers.to_vec(),
        sensitivity: sensitivity.to_vec(),
        targets,
        total: assigned.iter().sum(),
        assigned,
        budget,
        phi,
        r_min: cfg.r_min,
        r_max,
        binding: total != wanted,
    })
}

/// One change per layer whose assigned rank differs from its current rank.
/// Dropped/revived indices are filled in when the change is applied.
pub fn plan_to_changes(plan: &RankPlan, current: &[(usize, usize)]) -> Result<Vec<RankChange>> {
    let mut out = Vec::new();
    for (&layer, &new_rank) in plan.layers.iter().zip(&plan.assigned) {
        let old_rank = current
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|&(_, r)| r)
            .ok_or_else(|| Error::Contract(format!("no current rank for layer {layer}")))?;
        if old_rank != new_rank {
            out.push(RankChange {
                layer,
                old_rank,
                new_rank,
                dropped: Vec::new(),
                revived: Vec::new(),
            });
        }
    }
    Ok(out)
}
