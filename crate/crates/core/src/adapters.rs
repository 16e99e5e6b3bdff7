//! Low-rank adapter factors with a fixed capacity and a maskable active rank.
//!
//! Factors are stored at full capacity `r_max`: `A` is `r_max×d_in` and `B` is
//! `d_out×r_max`, so `ΔW = B A` is `d_out×d_in`. Shrinking masks rank-1
//! components rather than discarding them, and expanding revives them with
//! their stored values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard deviation of the Gaussian used for `A` at init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    a: Tensor,
    b: Tensor,
    mask: Vec<bool>,
    // Shrink event at which each component was last masked; 0 means never.
    parked_at: Vec<u64>,
    shrink_events: u64,
}

/// What a rank adjustment did to one adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankChange {
    pub layer: usize,
    pub old_rank: usize,
    pub new_rank: usize,
    pub dropped: Vec<usize>,
    pub revived: Vec<usize>,
}

impl RankChange {
    pub fn is_noop(&self) -> bool {
        self.old_rank == self.new_rank
    }
}

impl LoraAdapter {
    /// Gaussian `A`, zero `B`: the adapter starts as an exact no-op.
    pub fn init(d_in: usize, d_out: usize, r_init: usize, r_max: usize, seed: u64) -> Result<Self> {
        if r_init > r_max {
            return Err(Error::Config(format!(
                "initial rank {r_init} exceeds capacity {r_max}"
            )));
        }
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let a = Tensor::from_fn(r_max, d_in, |_, _| normal.sample(&mut rng));
        let b = Tensor::zeros(&[d_out, r_max]);
        let mask = (0..r_max).map(|i| i < r_init).collect();
        Ok(LoraAdapter {
            a,
            b,
            mask,
            parked_at: vec![0; r_max],
            shrink_events: 0,
        })
    }

    /// Wraps explicit factors; the first `active_rank` components start active.
    pub fn from_factors(a: Tensor, b: Tensor, active_rank: usize) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.cols() {
            return Err(Error::dim("lora factors", a.shape(), b.shape()));
        }
        let r_max = a.rows();
        if active_rank > r_max {
            return Err(Error::Capacity {
                requested: active_rank,
                capacity: r_max,
            });
        }
        Ok(LoraAdapter {
            a,
            b,
            mask: (0..r_max).map(|i| i < active_rank).collect(),
            parked_at: vec![0; r_max],
            shrink_events: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn capacity(&self) -> usize {
        self.mask.len()
    }

    pub fn active_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    /// Active component indices, ascending.
    pub fn active_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Rows of `A` for the active components (`r×d_in`).
    pub fn active_a(&self) -> Tensor {
        self.a
            .select_rows(&self.active_indices())
            .expect("active indices are in range")
    }

    /// Columns of `B` for the active components (`d_out×r`).
    pub fn active_b(&self) -> Tensor {
        self.b
            .select_cols(&self.active_indices())
            .expect("active indices are in range")
    }

    /// `ΔW = B[:, mask] × A[mask, :]`, unscaled.
    pub fn delta_weight(&self) -> Tensor {
        if self.active_rank() == 0 {
            return Tensor::zeros(&[self.d_out(), self.d_in()]);
        }
        self.active_b()
            .matmul(&self.active_a())
            .expect("factor shapes agree")
    }

    /// Magnitude of rank-1 component `i`: `‖B[:,i]‖ · ‖A[i,:]‖`.
    pub fn importance(&self, i: usize) -> f64 {
        let a_norm = self.a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let b_norm = (0..self.d_out())
            .map(|r| self.b.get(r, i).powi(2))
            .sum::<f64>()
            .sqrt();
        a_norm * b_norm
    }

    /// Trainable scalars contributed by the active components.
    pub fn trainable_params(&self) -> usize {
        self.active_rank() * (self.d_in() + self.d_out())
    }

    /// Masks or revives components until `new_rank` are active.
    ///
    /// Shrinking masks the least important active components (lower index
    /// first on ties). Expanding revives the most recently masked components
    /// first, most important first within one shrink event; components never
    /// masked before come last. The returned change has `layer == 0`; callers
    /// that own a layer index fill it in.
    pub fn set_active_rank(&mut self, new_rank: usize) -> Result<RankChange> {
        if new_rank > self.capacity() {
            return Err(Error::Capacity {
                requested: new_rank,
                capacity: self.capacity(),
            });
        }
        let old_rank = self.active_rank();
        let mut change = RankChange {
            layer: 0,
            old_rank,
            new_rank,
            dropped: Vec::new(),
            revived: Vec::new(),
        };
        if new_rank < old_rank {
            let mut active: Vec<(f64, usize)> = self
                .active_indices()
                .into_iter()
                .map(|i| (self.importance(i), i))
                .collect();
            active.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            self.shrink_events += 1;
            for &(_, i) in active.iter().take(old_rank - new_rank) {
                self.mask[i] = false;
                self.parked_at[i] = self.shrink_events;
                change.dropped.push(i);
            }
        } else if new_rank > old_rank {
            let mut masked: Vec<(u64, f64, usize)> = (0..self.capacity())
                .filter(|&i| !self.mask[i])
                .map(|i| (self.parked_at[i], self.importance(i), i))
                .collect();
            masked.sort_by(|x, y| {
                y.0.cmp(&x.0)
                    .then(y.1.total_cmp(&x.1))
                    .then(x.2.cmp(&y.2))
            });
            for &(_, _, i) in masked.iter().take(new_rank - old_rank) {
                self.mask[i] = true;
                change.revived.push(i);
            }
        }
        Ok(change)
    }

    /// Subtracts `lr · grad` from active entries of both factors. Gradients
    /// are in full-capacity layout; masked entries are ignored.
    pub fn apply_update(&mut self, grad_a: &Tensor, grad_b: &Tensor, lr: f64) -> Result<()> {
        if grad_a.shape() != self.a.shape() {
            return Err(Error::dim("apply_update", self.a.shape(), grad_a.shape()));
        }
        if grad_b.shape() != self.b.shape() {
            return Err(Error::dim("apply_update", self.b.shape(), grad_b.shape()));
        }
        let d_in = self.d_in();
        let r_max = self.capacity();
        for i in self.active_indices() {
            let row = &mut self.a.data_mut()[i * d_in..(i + 1) * d_in];
            for (w, g) in row.iter_mut().zip(grad_a.row(i)) {
                *w -= lr * g;
            }
            for r in 0..self.b.rows() {
                let idx = r * r_max + i;
                self.b.data_mut()[idx] -= lr * grad_b.data()[idx];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_noop_and_deterministic() {
        let a = LoraAdapter::init(5, 3, 2, 4, 9).unwrap();
        assert!(a.delta_weight().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.delta_weight().shape(), &[3, 5]);
        assert_eq!(a, LoraAdapter::init(5, 3, 2, 4, 9).unwrap());
        assert_ne!(a.a(), LoraAdapter::init(5, 3, 2, 4, 10).unwrap().a());
        assert_eq!(a.active_rank(), 2);
        assert!(matches!(
            LoraAdapter::init(5, 3, 5, 4, 9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_rank_delta_is_zero() {
        let a = Tensor::from_fn(2, 3, |i, j| (i + j) as f64 + 1.0);
        let b = Tensor::from_fn(2, 2, |i, j| (i * 2 + j) as f64 + 1.0);
        let ad = LoraAdapter::from_factors(a, b, 0).unwrap();
        assert_eq!(ad.delta_weight(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn full_rank_delta_is_product() {
        let a = Tensor::from_fn(2, 3, |i, j| (i + j) as f64 - 0.5);
        let b = Tensor::from_fn(4, 2, |i, j| (i * 2 + j) as f64 * 0.3);
        let ad = LoraAdapter::from_factors(a.clone(), b.clone(), 2).unwrap();
        assert_eq!(ad.delta_weight(), b.matmul(&a).unwrap());
    }

    #[test]
    fn rank_one_delta_is_outer_product() {
        // a = (1, 2, 3), b = (4, -1): ΔW = b aᵀ computed by hand.
        let a = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![4.0, -1.0]).unwrap();
        let ad = LoraAdapter::from_factors(a, b, 1).unwrap();
        assert_eq!(
            ad.delta_weight().data(),
            &[4.0, 8.0, 12.0, -1.0, -2.0, -3.0]
        );
    }

    #[test]
    fn same_rank_is_identity() {
        let mut ad = LoraAdapter::init(3, 3, 2, 4, 1).unwrap();
        let before = ad.clone();
        let ch = ad.set_active_rank(2).unwrap();
        assert!(ch.is_noop() && ch.dropped.is_empty() && ch.revived.is_empty());
        assert_eq!(ad, before);
    }

    #[test]
    fn shrink_drops_least_important_component() {
        // Importances 5, 1, 3 by construction: unit A rows, B columns scaled.
        let a = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 3, vec![5.0, 1.0, 3.0]).unwrap();
        let mut ad = LoraAdapter::from_factors(a, b, 3).unwrap();
        let imps: Vec<f64> = (0..3).map(|i| ad.importance(i)).collect();
        assert_eq!(imps, vec![5.0, 1.0, 3.0]);
        let argmin = imps
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        let ch = ad.set_active_rank(2).unwrap();
        assert_eq!(ch.dropped, vec![argmin]);
        assert_eq!(ad.mask(), &[true, false, true]);
    }

    #[test]
    fn ties_drop_lower_index_first() {
        let a = Tensor::filled(&[3, 2], 1.0);
        let b = Tensor::filled(&[2, 3], 1.0);
        let mut ad = LoraAdapter::from_factors(a, b, 3).unwrap();
        assert_eq!(ad.set_active_rank(1).unwrap().dropped, vec![0, 1]);
    }

    #[test]
    fn shrink_expand_round_trip_is_bit_exact() {
        let a = Tensor::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
        let b = Tensor::from_fn(2, 4, |i, j| ((i * 4 + j) as f64 + 0.5).cos());
        let mut ad = LoraAdapter::from_factors(a, b, 4).unwrap();
        let before = ad.delta_weight();
        ad.set_active_rank(1).unwrap();
        ad.set_active_rank(3).unwrap();
        ad.set_active_rank(4).unwrap();
        assert_eq!(ad.delta_weight(), before);
    }

    #[test]
    fn capacity_error() {
        let mut ad = LoraAdapter::init(2, 2, 1, 2, 0).unwrap();
        assert!(matches!(
            ad.set_active_rank(3),
            Err(Error::Capacity { requested: 3, capacity: 2 })
        ));
    }

    #[test]
    fn zeroing_a_column_removes_its_term() {
        let a = Tensor::from_fn(3, 2, |i, j| (i + 2 * j) as f64 + 1.0);
        let b = Tensor::from_fn(2, 3, |i, j| (3 * i + j) as f64 - 2.0);
        let full = LoraAdapter::from_factors(a.clone(), b.clone(), 3).unwrap();
        let mut zeroed = b.clone();
        for r in 0..2 {
            zeroed.set(r, 1, 0.0);
        }
        let without = LoraAdapter::from_factors(a.clone(), zeroed, 3).unwrap();
        let term = b
            .select_cols(&[1])
            .unwrap()
            .matmul(&a.select_rows(&[1]).unwrap())
            .unwrap();
        let diff = full.delta_weight().sub(&without.delta_weight()).unwrap();
        for (d, t) in diff.data().iter().zip(term.data()) {
            assert!((d - t).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_tracks_active_rank() {
        let mut ad = LoraAdapter::init(7, 5, 3, 6, 0).unwrap();
        assert_eq!(ad.trainable_params(), 3 * 12);
        ad.set_active_rank(6).unwrap();
        assert_eq!(ad.trainable_params(), 6 * 12);
    }

    #[test]
    fn update_touches_only_active_entries() {
        let mut ad = LoraAdapter::init(2, 2, 1, 2, 3).unwrap();
        let before = ad.clone();
        let ga = Tensor::filled(&[2, 2], 1.0);
        let gb = Tensor::filled(&[2, 2], 1.0);
        ad.apply_update(&ga, &gb, 0.5).unwrap();
        assert_eq!(ad.a().row(1), before.a().row(1));
        assert_eq!(ad.b().get(0, 1), 0.0);
        assert_eq!(ad.b().get(0, 0), -0.5);
    }
}
