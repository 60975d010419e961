//! Low-rank online adapters over the flow head's two hidden layers.
//!
//! Effective weight per adapted layer:
//! `W_base + delta_offline + B_online * A_online`. The offline column basis
//! (orthonormal left-singular vectors of `delta_offline`) feeds the
//! orthogonality penalty that keeps online updates out of already-consolidated
//! directions.

use super::nn::{gaussian, matmul_acc};
use super::{LayerId, LearnError, ModelConfig, ModelWeights};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

/// Singular values at or below this threshold do not contribute basis columns.
pub const BASIS_SINGULAR_TOL: f64 = 1e-6;

/// Scale of the online `A` factor at (re-)initialization.
pub const ONLINE_A_INIT_STD: f64 = 0.01;

/// The two adapted layers, in fixed order.
pub const ADAPTED_LAYERS: [LayerId; 2] = [LayerId::Flow1, LayerId::Flow2];

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayerState {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Dense consolidated residual (rows x cols).
    pub delta_offline: Vec<f64>,
    /// Online factors: B is rows x rank, A is rank x cols.
    pub b_online: Vec<f64>,
    pub a_online: Vec<f64>,
    /// Orthonormal column basis of `delta_offline` (rows x basis_k).
    pub basis: Vec<f64>,
    pub basis_k: usize,
}

impl AdapterLayerState {
    fn new(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self {
            rows,
            cols,
            rank,
            delta_offline: vec![0.0; rows * cols],
            b_online: vec![0.0; rows * rank],
            a_online: vec![0.0; rank * cols],
            basis: Vec::new(),
            basis_k: 0,
        };
        layer.reinit_online(rng);
        layer
    }

    /// B to zero, A to small Gaussian noise: the online update starts at
    /// exactly zero but has a usable gradient direction.
    pub fn reinit_online(&mut self, rng: &mut ChaCha8Rng) {
        self.b_online.fill(0.0);
        for a in self.a_online.iter_mut() {
            *a = ONLINE_A_INIT_STD * gaussian(rng);
        }
    }

    /// B * A, materialized densely with a fixed summation order.
    pub fn online_product(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        matmul_acc(
            &mut out,
            &self.b_online,
            &self.a_online,
            self.rows,
            self.rank,
            self.cols,
        );
        out
    }

    /// w += delta_offline + B * A.
    pub fn add_effective(&self, w: &mut [f64]) {
        debug_assert_eq!(w.len(), self.rows * self.cols);
        for (wi, di) in w.iter_mut().zip(self.delta_offline.iter()) {
            *wi += di;
        }
        matmul_acc(
            w,
            &self.b_online,
            &self.a_online,
            self.rows,
            self.rank,
            self.cols,
        );
    }

    /// Recompute the orthonormal column basis from `delta_offline`.
    pub fn recompute_basis(&mut self) {
        let m = DMatrix::from_row_slice(self.rows, self.cols, &self.delta_offline);
        let svd = m.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let keep: Vec<usize> = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > BASIS_SINGULAR_TOL)
            .map(|(i, _)| i)
            .collect();
        self.basis_k = keep.len();
        self.basis = vec![0.0; self.rows * self.basis_k];
        for (out_col, &src_col) in keep.iter().enumerate() {
            for r in 0..self.rows {
                self.basis[r * self.basis_k + out_col] = u[(r, src_col)];
            }
        }
    }

    /// Max deviation of basis^T basis from the identity.
    pub fn basis_orthonormality_error(&self) -> f64 {
        let k = self.basis_k;
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let mut dot = 0.0;
                for r in 0..self.rows {
                    dot += self.basis[r * k + i] * self.basis[r * k + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// basis^T * B (basis_k x rank), the overlap matrix of the ortho penalty.
    pub fn overlap(&self) -> Vec<f64> {
        let k = self.basis_k;
        let mut m = vec![0.0; k * self.rank];
        for i in 0..k {
            for j in 0..self.rank {
                let mut acc = 0.0;
                for r in 0..self.rows {
                    acc += self.basis[r * k + i] * self.b_online[r * self.rank + j];
                }
                m[i * self.rank + j] = acc;
            }
        }
        m
    }
}

/// Adapter state over the two flow hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub layers: Vec<AdapterLayerState>,
}

impl AdapterState {
    /// Fresh adapters with zero offline residual (empty basis).
    pub fn zeros(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = crate::util::rng(crate::util::derive(seed, crate::util::stream::ADAPTER));
        let layers = ADAPTED_LAYERS
            .iter()
            .map(|&id| {
                let (rows, cols) = adapted_shape(cfg, id);
                AdapterLayerState::new(rows, cols, cfg.rank, &mut rng)
            })
            .collect();
        let mut state = Self { layers };
        for layer in &mut state.layers {
            layer.recompute_basis();
        }
        state
    }

    /// Adapters whose offline residual is the delta the pretraining run
    /// learned on the adapted layers: `delta = trained - init`. The trained
    /// weights' adapted layers are rolled back to the init snapshot so that
    /// `W_base + delta_offline` reproduces the trained model exactly.
    pub fn split_from_pretrain(
        init: &ModelWeights,
        trained: &mut ModelWeights,
        seed: u64,
    ) -> Result<Self, LearnError> {
        if init.layout != trained.layout {
            return Err(LearnError::InvalidAdapter(
                "init and trained layouts differ".into(),
            ));
        }
        let mut state = Self::zeros(&trained.cfg, seed);
        for (slot, &id) in ADAPTED_LAYERS.iter().enumerate() {
            let def = trained.layout.get(id).clone();
            let n = def.rows * def.cols;
            let layer = &mut state.layers[slot];
            for i in 0..n {
                let trained_v = trained.data[def.w_offset + i];
                let init_v = init.data[def.w_offset + i];
                layer.delta_offline[i] = trained_v - init_v;
                trained.data[def.w_offset + i] = init_v;
            }
            layer.recompute_basis();
        }
        Ok(state)
    }

    /// Effective weight matrix of an adapted layer.
    pub fn effective_w(&self, weights: &ModelWeights, id: LayerId) -> Vec<f64> {
        let slot = ADAPTED_LAYERS
            .iter()
            .position(|&l| l == id)
            .expect("layer is adapted");
        let mut w = weights.w(id).to_vec();
        self.layers[slot].add_effective(&mut w);
        w
    }

    pub fn reinit_online(&mut self, rng: &mut ChaCha8Rng) {
        for layer in &mut self.layers {
            layer.reinit_online(rng);
        }
    }

    pub fn recompute_bases(&mut self) {
        for layer in &mut self.layers {
            layer.recompute_basis();
        }
    }
}

pub fn adapted_shape(cfg: &ModelConfig, id: LayerId) -> (usize, usize) {
    match id {
        LayerId::Flow1 => (cfg.hidden, cfg.flow_input_dim()),
        LayerId::Flow2 => (cfg.hidden, cfg.hidden),
        _ => panic!("layer is not adapted"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::TokenVocab;
    use crate::world::TaskSet;

    fn cfg() -> ModelConfig {
        let tasks = TaskSet::builtin();
        let vocab = TokenVocab::from_tasks(&tasks);
        ModelConfig::for_tasks(&tasks, &vocab)
    }

    #[test]
    fn zero_delta_has_empty_basis_and_zero_product() {
        let state = AdapterState::zeros(&cfg(), 3);
        for layer in &state.layers {
            assert_eq!(layer.basis_k, 0);
            assert!(layer.online_product().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn basis_is_orthonormal_for_random_delta() {
        let mut state = AdapterState::zeros(&cfg(), 4);
        let mut rng = crate::util::rng(11);
        for layer in &mut state.layers {
            for v in layer.delta_offline.iter_mut() {
                *v = 0.1 * gaussian(&mut rng);
            }
            layer.recompute_basis();
            assert!(layer.basis_k > 0);
            assert!(
                layer.basis_orthonormality_error() < 1e-8,
                "orthonormality error {}",
                layer.basis_orthonormality_error()
            );
        }
    }

    #[test]
    fn rank_one_delta_gives_rank_one_basis() {
        let mut state = AdapterState::zeros(&cfg(), 5);
        let layer = &mut state.layers[1];
        // delta = u v^T with |u| = |v| = 1 scaled well above tolerance.
        for r in 0..layer.rows {
            for c in 0..layer.cols {
                layer.delta_offline[r * layer.cols + c] =
                    0.5 * ((r as f64 + 1.0).sin()) * ((c as f64 + 1.0).cos());
            }
        }
        layer.recompute_basis();
        assert_eq!(layer.basis_k, 1);
    }

    #[test]
    fn split_from_pretrain_preserves_effective_weights() {
        let cfg = cfg();
        let init = ModelWeights::init(cfg, 7);
        let mut trained = init.clone();
        // Pretend training moved the adapted layers.
        let mut rng = crate::util::rng(8);
        for &id in &ADAPTED_LAYERS {
            let def = trained.layout.get(id).clone();
            for i in 0..def.rows * def.cols {
                trained.data[def.w_offset + i] += 0.05 * gaussian(&mut rng);
            }
        }
        let reference = trained.clone();
        let state = AdapterState::split_from_pretrain(&init, &mut trained, 9).unwrap();
        for &id in &ADAPTED_LAYERS {
            let eff = state.effective_w(&trained, id);
            let want = reference.w(id);
            for (a, b) in eff.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for layer in &state.layers {
            assert!(layer.basis_k > 0);
            assert!(layer.basis_orthonormality_error() < 1e-8);
        }
    }

    #[test]
    fn reinit_online_zeroes_the_product() {
        let mut state = AdapterState::zeros(&cfg(), 12);
        let mut rng = crate::util::rng(13);
        for layer in &mut state.layers {
            for v in layer.b_online.iter_mut() {
                *v = gaussian(&mut rng);
            }
        }
        assert!(state.layers[0].online_product().iter().any(|&v| v != 0.0));
        state.reinit_online(&mut rng);
        for layer in &state.layers {
            assert!(layer.online_product().iter().all(|&v| v == 0.0));
            assert!(layer.b_online.iter().all(|&v| v == 0.0));
            assert!(layer.a_online.iter().any(|&v| v != 0.0));
        }
    }
}
