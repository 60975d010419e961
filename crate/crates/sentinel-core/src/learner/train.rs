//! Minibatch gradient descent with momentum. Deterministic given the seed:
//! epoch shuffles and per-step flow draws come from derived streams, and all
//! accumulation orders are fixed.

use super::adapter::AdapterState;
use super::batch::{FlowDraws, TrainingSet};
use super::losses::{total_loss, LossBreakdown, LossMode};
use super::{LearnError, ModelWeights};
use crate::util::{derive_n, rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Update every model parameter (pretraining).
    Full,
    /// Update only the online adapter factors (continual learning).
    AdaptersOnly,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub lambda: f64,
    pub beta: f64,
    pub mode: LossMode,
    pub scope: TrainScope,
    /// Extend loss masking to the thought and monitor terms.
    pub mask_aux: bool,
}

impl TrainConfig {
    pub fn pretrain(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip: 10.0,
            seed,
            lambda: 0.1,
            beta: 0.5,
            mode: LossMode::Pretrain,
            scope: TrainScope::Full,
            mask_aux: false,
        }
    }

    pub fn online(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            lr: 3e-4,
            momentum: 0.9,
            grad_clip: 10.0,
            seed,
            lambda: 0.1,
            beta: 0.5,
            mode: LossMode::Secl,
            scope: TrainScope::AdaptersOnly,
            mask_aux: false,
        }
    }
}

/// One row of the training-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

impl LossRow {
    pub const CSV_HEADER: &'static str =
        "step,l_flow,l_thought,l_monitor,l_ortho,total,masked_count";

    pub fn to_csv(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, b.l_flow, b.l_thought, b.l_monitor, b.l_ortho, b.total, b.masked_count
        )
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(derive_n(seed, &[stream::SHUFFLE, epoch]));
    order.shuffle(&mut r);
    order
}

/// Train in place, returning the per-step loss curve.
pub fn train(
    weights: &mut ModelWeights,
    mut adapters: Option<&mut AdapterState>,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<Vec<LossRow>, LearnError> {
    if data.is_empty() {
        return Err(LearnError::InvalidLabel("training set is empty".into()));
    }
    if cfg.scope == TrainScope::AdaptersOnly && adapters.is_none() {
        return Err(LearnError::InvalidAdapter(
            "adapter-only training requires adapter state".into(),
        ));
    }
    let chunk_dim = weights.cfg.chunk_dim();
    let mut vel_model = vec![0.0; weights.layout.total];
    let mut vel_b: Vec<Vec<f64>> = Vec::new();
    let mut vel_a: Vec<Vec<f64>> = Vec::new();
    if let Some(a) = adapters.as_deref() {
        vel_b = a.layers.iter().map(|l| vec![0.0; l.b_online.len()]).collect();
        vel_a = a.layers.iter().map(|l| vec![0.0; l.a_online.len()]).collect();
    }

    let mut curve = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let batch_size = cfg.batch_size.max(1).min(data.len());

    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            order = shuffled_indices(data.len(), cfg.seed, epoch);
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<super::batch::TrainSample> = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| data.samples[i].clone())
            .collect();
        cursor += batch_size;

        // An all-masked batch carries no action target; skip it rather than
        // failing the run.
        if batch.iter().all(|s| s.masked) {
            continue;
        }

        let mut draw_rng = rng(derive_n(cfg.seed, &[stream::TRAIN_NOISE, step as u64]));
        let draws = FlowDraws::sample(&mut draw_rng, batch.len(), chunk_dim);
        let (breakdown, mut grads) = total_loss(
            weights,
            adapters.as_deref(),
            &batch,
            &draws,
            cfg.mode,
            cfg.lambda,
            cfg.beta,
            cfg.mask_aux,
        )?;
        if !breakdown.total.is_finite() {
            return Err(LearnError::TrainingDiverged { step });
        }

        // Global gradient-norm clip over the trainable parameters.
        let mut sq = 0.0;
        match cfg.scope {
            TrainScope::Full => {
                for g in &grads.model {
                    sq += g * g;
                }
            }
            TrainScope::AdaptersOnly => {
                if let Some(a) = grads.adapter.as_ref() {
                    for v in a.d_b.iter().chain(a.d_a.iter()) {
                        for g in v {
                            sq += g * g;
                        }
                    }
                }
            }
        }
        let norm = sq.sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            match cfg.scope {
                TrainScope::Full => {
                    for g in grads.model.iter_mut() {
                        *g *= s;
                    }
                }
                TrainScope::AdaptersOnly => {
                    if let Some(a) = grads.adapter.as_mut() {
                        for v in a.d_b.iter_mut().chain(a.d_a.iter_mut()) {
                            for g in v.iter_mut() {
                                *g *= s;
                            }
                        }
                    }
                }
            }
        }

        match cfg.scope {
            TrainScope::Full => {
                for i in 0..weights.data.len() {
                    vel_model[i] = cfg.momentum * vel_model[i] + grads.model[i];
                    weights.data[i] -= cfg.lr * vel_model[i];
                }
            }
            TrainScope::AdaptersOnly => {
                let a = adapters.as_deref_mut().expect("checked above");
                let g = grads.adapter.as_ref().expect("adapter grads present");
                for slot in 0..a.layers.len() {
                    for i in 0..a.layers[slot].b_online.len() {
                        vel_b[slot][i] = cfg.momentum * vel_b[slot][i] + g.d_b[slot][i];
                        a.layers[slot].b_online[i] -= cfg.lr * vel_b[slot][i];
                    }
                    for i in 0..a.layers[slot].a_online.len() {
                        vel_a[slot][i] = cfg.momentum * vel_a[slot][i] + g.d_a[slot][i];
                        a.layers[slot].a_online[i] -= cfg.lr * vel_a[slot][i];
                    }
                }
            }
        }
        curve.push(LossRow { step, breakdown });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecgen::{generate_dataset, ErrorMix, GenerateConfig};
    use crate::learner::{build_training_set, ModelConfig, TokenVocab};
    use crate::world::{TaskSet, WorldParams};

    fn tiny_setup(n_episodes: usize, seed: u64) -> (ModelWeights, TrainingSet) {
        let params = WorldParams::default();
        let tasks = TaskSet::builtin();
        let ds = generate_dataset(
            &params,
            &tasks,
            &GenerateConfig {
                n_episodes,
                mix: ErrorMix::uniform(0.2),
                seed,
                config_hash: None,
            },
        )
        .unwrap();
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let weights = ModelWeights::init(cfg, seed);
        let set = build_training_set(&ds, &vocab, &cfg).unwrap();
        (weights, set)
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bitwise_unchanged() {
        let (mut weights, data) = tiny_setup(3, 40);
        let before = weights.data.clone();
        let mut cfg = TrainConfig::pretrain(5, 1);
        cfg.lr = 0.0;
        cfg.batch_size = 16;
        train(&mut weights, None, &data, &cfg).unwrap();
        assert_eq!(weights.data, before);
    }

    #[test]
    fn same_seed_trains_to_identical_weights() {
        let (weights0, data) = tiny_setup(3, 41);
        let mut cfg = TrainConfig::pretrain(8, 2);
        cfg.batch_size = 16;
        let mut w1 = weights0.clone();
        let c1 = train(&mut w1, None, &data, &cfg).unwrap();
        let mut w2 = weights0.clone();
        let c2 = train(&mut w2, None, &data, &cfg).unwrap();
        assert_eq!(w1.data, w2.data);
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert_eq!(a.breakdown.total.to_bits(), b.breakdown.total.to_bits());
        }
    }

    #[test]
    fn loss_descends_on_small_dataset() {
        let (mut weights, data) = tiny_setup(8, 42);
        let mut cfg = TrainConfig::pretrain(300, 3);
        cfg.batch_size = 32;
        let curve = train(&mut weights, None, &data, &cfg).unwrap();
        let first = curve.first().unwrap().breakdown.total;
        let last = curve.last().unwrap().breakdown.total;
        assert!(
            last < first,
            "loss should descend: first {} last {}",
            first,
            last
        );
    }

    #[test]
    fn adapter_scope_freezes_base_weights() {
        let (mut weights, data) = tiny_setup(3, 43);
        let mut adapters = crate::learner::AdapterState::zeros(&weights.cfg, 44);
        // Give the ortho penalty something to push against.
        for layer in &mut adapters.layers {
            for (i, v) in layer.delta_offline.iter_mut().enumerate() {
                *v = ((i % 13) as f64 - 6.0) * 0.004;
            }
            layer.recompute_basis();
        }
        let base_before = weights.data.clone();
        let online_before: Vec<Vec<f64>> = adapters
            .layers
            .iter()
            .map(|l| l.b_online.clone())
            .collect();
        let mut cfg = TrainConfig::online(20, 4);
        cfg.batch_size = 16;
        train(&mut weights, Some(&mut adapters), &data, &cfg).unwrap();
        assert_eq!(weights.data, base_before, "base weights stay frozen");
        let changed = adapters
            .layers
            .iter()
            .zip(&online_before)
            .any(|(l, before)| &l.b_online != before);
        assert!(changed, "online factors must move");
    }
}
