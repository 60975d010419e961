//! The combined training objective and its hand-derived gradients.
//!
//! Flow matching over action chunks (masked samples contribute exactly zero),
//! cross-entropy thought supervision on non-Normal steps, cross-entropy
//! status supervision on all steps, and the adapter orthogonality penalty.

use super::adapter::AdapterState;
use super::batch::{FlowDraws, TrainSample};
use super::nn::{cross_entropy, matvec, matvec_t, outer_acc, tanh_backprop, tanh_inplace};
use super::{grad_b, grad_w, LayerId, LearnError, ModelWeights};
use crate::runtime::TriggerStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Pretrain,
    Secl,
}

/// Per-batch loss components. `total` always satisfies the Eq-composition
/// checked by `combine_total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_flow: f64,
    pub l_thought: f64,
    pub l_monitor: f64,
    pub l_ortho: f64,
    pub total: f64,
    pub masked_count: usize,
}

/// Total-objective composition: the action loss plus lambda-weighted thought
/// and monitor terms, plus the beta-weighted orthogonality penalty in
/// continual-learning mode.
pub fn combine_total(
    l_flow: f64,
    l_thought: f64,
    l_monitor: f64,
    l_ortho: f64,
    lambda: f64,
    beta: f64,
    mode: LossMode,
) -> f64 {
    let base = l_flow + lambda * (l_thought + l_monitor);
    match mode {
        LossMode::Pretrain => base,
        LossMode::Secl => base + beta * l_ortho,
    }
}

/// Gradients with respect to the online adapter factors, one entry per
/// adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub d_b: Vec<Vec<f64>>,
    pub d_a: Vec<Vec<f64>>,
}

impl AdapterGrads {
    pub fn zeros(adapters: &AdapterState) -> Self {
        Self {
            d_b: adapters
                .layers
                .iter()
                .map(|l| vec![0.0; l.b_online.len()])
                .collect(),
            d_a: adapters
                .layers
                .iter()
                .map(|l| vec![0.0; l.a_online.len()])
                .collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.d_b.iter_mut().chain(self.d_a.iter_mut()) {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Gradient buffer mirroring the model layout, plus adapter-factor gradients
/// when adapters participate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuf {
    pub model: Vec<f64>,
    pub adapter: Option<AdapterGrads>,
}

impl GradBuf {
    pub fn zeros(weights: &ModelWeights, adapters: Option<&AdapterState>) -> Self {
        Self {
            model: weights.zeros_like(),
            adapter: adapters.map(AdapterGrads::zeros),
        }
    }
}

pub(crate) struct TrunkCache {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

pub(crate) fn trunk_forward(weights: &ModelWeights, obs: &[f64]) -> TrunkCache {
    let cfg = &weights.cfg;
    let mut h1 = vec![0.0; cfg.hidden];
    matvec(weights.w(LayerId::Trunk1), cfg.hidden, cfg.obs_dim, obs, &mut h1);
    for (v, b) in h1.iter_mut().zip(weights.b(LayerId::Trunk1)) {
        *v += b;
    }
    tanh_inplace(&mut h1);
    let mut h2 = vec![0.0; cfg.hidden];
    matvec(weights.w(LayerId::Trunk2), cfg.hidden, cfg.hidden, &h1, &mut h2);
    for (v, b) in h2.iter_mut().zip(weights.b(LayerId::Trunk2)) {
        *v += b;
    }
    tanh_inplace(&mut h2);
    TrunkCache { h1, h2 }
}

fn trunk_backward(
    weights: &ModelWeights,
    obs: &[f64],
    cache: &TrunkCache,
    mut dh2: Vec<f64>,
    model: &mut [f64],
) {
    let cfg = weights.cfg;
    let layout = weights.layout.clone();
    tanh_backprop(&mut dh2, &cache.h2);
    outer_acc(
        grad_w(&layout, model, LayerId::Trunk2),
        cfg.hidden,
        cfg.hidden,
        &dh2,
        &cache.h1,
    );
    for (g, d) in grad_b(&layout, model, LayerId::Trunk2).iter_mut().zip(&dh2) {
        *g += d;
    }
    let mut dh1 = vec![0.0; cfg.hidden];
    matvec_t(weights.w(LayerId::Trunk2), cfg.hidden, cfg.hidden, &dh2, &mut dh1);
    tanh_backprop(&mut dh1, &cache.h1);
    outer_acc(
        grad_w(&layout, model, LayerId::Trunk1),
        cfg.hidden,
        cfg.obs_dim,
        &dh1,
        obs,
    );
    for (g, d) in grad_b(&layout, model, LayerId::Trunk1).iter_mut().zip(&dh1) {
        *g += d;
    }
}

fn scale_buf(buf: &mut [f64], s: f64) {
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// Flow-matching loss over action chunks.
///
/// Per unmasked sample with frozen draws `(t, x0)` and target chunk `x1`:
/// `x_t = (1 - t) x0 + t x1`, target velocity `x1 - x0`, loss
/// `|f(x_t, t, ctx) - (x1 - x0)|^2`, averaged over unmasked samples. Masked
/// samples are skipped entirely, contributing exactly zero to the loss and
/// every gradient entry.
pub fn flow_loss(
    weights: &ModelWeights,
    adapters: Option<&AdapterState>,
    samples: &[TrainSample],
    draws: &FlowDraws,
) -> Result<(f64, GradBuf), LearnError> {
    let cfg = weights.cfg;
    let n_unmasked = samples.iter().filter(|s| !s.masked).count();
    if n_unmasked == 0 {
        return Err(LearnError::EmptyEffectiveBatch);
    }
    debug_assert_eq!(draws.t.len(), samples.len());

    let flow_in = cfg.flow_input_dim();
    let hidden = cfg.hidden;
    let chunk_dim = cfg.chunk_dim();

    // Effective weights of the adapted layers.
    let (w1, w2): (Vec<f64>, Vec<f64>) = match adapters {
        Some(a) => (
            a.effective_w(weights, LayerId::Flow1),
            a.effective_w(weights, LayerId::Flow2),
        ),
        None => (
            weights.w(LayerId::Flow1).to_vec(),
            weights.w(LayerId::Flow2).to_vec(),
        ),
    };
    let w3 = weights.w(LayerId::Flow3);
    let (b1, b2, b3) = (
        weights.b(LayerId::Flow1),
        weights.b(LayerId::Flow2),
        weights.b(LayerId::Flow3),
    );

    let mut grads = GradBuf::zeros(weights, adapters);
    let mut d_w1_eff = vec![0.0; w1.len()];
    let mut d_w2_eff = vec![0.0; w2.len()];
    let mut loss_sum = 0.0;

    for (i, sample) in samples.iter().enumerate() {
        if sample.masked {
            continue;
        }
        let trunk = trunk_forward(weights, &sample.obs);
        let t = draws.t[i];
        let x0 = &draws.x0[i];
        let x1 = &sample.chunk;

        let mut z = Vec::with_capacity(flow_in);
        z.extend_from_slice(&trunk.h2);
        z.extend_from_slice(&sample.status.one_hot());
        z.extend_from_slice(&sample.memory);
        for d in 0..chunk_dim {
            z.push((1.0 - t) * x0[d] + t * x1[d]);
        }
        z.push(t);

        let mut f1 = vec![0.0; hidden];
        matvec(&w1, hidden, flow_in, &z, &mut f1);
        for (v, b) in f1.iter_mut().zip(b1) {
            *v += b;
        }
        tanh_inplace(&mut f1);
        let mut f2 = vec![0.0; hidden];
        matvec(&w2, hidden, hidden, &f1, &mut f2);
        for (v, b) in f2.iter_mut().zip(b2) {
            *v += b;
        }
        tanh_inplace(&mut f2);
        let mut v = vec![0.0; chunk_dim];
        matvec(w3, chunk_dim, hidden, &f2, &mut v);
        for (vi, b) in v.iter_mut().zip(b3) {
            *vi += b;
        }

        let mut dv = vec![0.0; chunk_dim];
        for d in 0..chunk_dim {
            let r = v[d] - (x1[d] - x0[d]);
            loss_sum += r * r;
            dv[d] = 2.0 * r;
        }

        let layout = weights.layout.clone();
        outer_acc(
            grad_w(&layout, &mut grads.model, LayerId::Flow3),
            chunk_dim,
            hidden,
            &dv,
            &f2,
        );
        for (g, d) in grad_b(&layout, &mut grads.model, LayerId::Flow3)
            .iter_mut()
            .zip(&dv)
        {
            *g += d;
        }
        let mut df2 = vec![0.0; hidden];
        matvec_t(w3, chunk_dim, hidden, &dv, &mut df2);
        tanh_backprop(&mut df2, &f2);
        outer_acc(&mut d_w2_eff, hidden, hidden, &df2, &f1);
        for (g, d) in grad_b(&layout, &mut grads.model, LayerId::Flow2)
            .iter_mut()
            .zip(&df2)
        {
            *g += d;
        }
        let mut df1 = vec![0.0; hidden];
        matvec_t(&w2, hidden, hidden, &df2, &mut df1);
        tanh_backprop(&mut df1, &f1);
        outer_acc(&mut d_w1_eff, hidden, flow_in, &df1, &z);
        for (g, d) in grad_b(&layout, &mut grads.model, LayerId::Flow1)
            .iter_mut()
            .zip(&df1)
        {
            *g += d;
        }
        let mut dz = vec![0.0; flow_in];
        matvec_t(&w1, hidden, flow_in, &df1, &mut dz);
        trunk_backward(weights, &sample.obs, &trunk, dz[..hidden].to_vec(), &mut grads.model);
    }

    let scale = 1.0 / n_unmasked as f64;
    loss_sum *= scale;
    scale_buf(&mut grads.model, scale);
    scale_buf(&mut d_w1_eff, scale);
    scale_buf(&mut d_w2_eff, scale);

    // The effective weight is base + delta + B*A, so the base gradient equals
    // the effective gradient, and the factor gradients chain through the
    // product.
    let layout = weights.layout.clone();
    for (g, d) in grad_w(&layout, &mut grads.model, LayerId::Flow1)
        .iter_mut()
        .zip(&d_w1_eff)
    {
        *g += d;
    }
    for (g, d) in grad_w(&layout, &mut grads.model, LayerId::Flow2)
        .iter_mut()
        .zip(&d_w2_eff)
    {
        *g += d;
    }
    if let (Some(adapters), Some(agrads)) = (adapters, grads.adapter.as_mut()) {
        for (slot, d_eff) in [&d_w1_eff, &d_w2_eff].into_iter().enumerate() {
            let layer = &adapters.layers[slot];
            let (rows, cols, rank) = (layer.rows, layer.cols, layer.rank);
            // dB = dW_eff * A^T
            for r in 0..rows {
                for k in 0..rank {
                    let mut acc = 0.0;
                    for c in 0..cols {
                        acc += d_eff[r * cols + c] * layer.a_online[k * cols + c];
                    }
                    agrads.d_b[slot][r * rank + k] += acc;
                }
            }
            // dA = B^T * dW_eff
            for k in 0..rank {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for r in 0..rows {
                        acc += layer.b_online[r * rank + k] * d_eff[r * cols + c];
                    }
                    agrads.d_a[slot][k * cols + c] += acc;
                }
            }
        }
    }
    Ok((loss_sum, grads))
}

/// Mean cross-entropy over plan-slot, recovery-token, and template-id heads
/// for steps whose status label is non-Normal. Normal steps carry no thought
/// target and are excluded.
pub fn thought_loss(
    weights: &ModelWeights,
    samples: &[TrainSample],
) -> Result<(f64, GradBuf), LearnError> {
    let cfg = weights.cfg;
    let mut grads = GradBuf::zeros(weights, None);
    let supervised: Vec<&TrainSample> = samples
        .iter()
        .filter(|s| s.status != TriggerStatus::Normal)
        .collect();
    if supervised.is_empty() {
        return Ok((0.0, grads));
    }
    for s in &supervised {
        for &t in &s.plan_targets {
            if t as usize >= cfg.vocab_size {
                return Err(LearnError::InvalidLabel(format!(
                    "plan token id {} outside vocabulary of {}",
                    t, cfg.vocab_size
                )));
            }
        }
        if s.recovery_target as usize >= cfg.vocab_size {
            return Err(LearnError::InvalidLabel(format!(
                "recovery token id {} outside vocabulary of {}",
                s.recovery_target, cfg.vocab_size
            )));
        }
        if s.template_target as usize >= cfg.template_vocab() {
            return Err(LearnError::InvalidLabel(format!(
                "template id {} outside template vocabulary of {}",
                s.template_target,
                cfg.template_vocab()
            )));
        }
    }

    let heads_per_step = cfg.plan_slots + 2;
    let count = (supervised.len() * heads_per_step) as f64;
    let mut loss_sum = 0.0;
    let layout = weights.layout.clone();

    for sample in supervised {
        let trunk = trunk_forward(weights, &sample.obs);
        let mut dh2 = vec![0.0; cfg.hidden];

        let run_head = |head: LayerId, target: usize, dh2: &mut Vec<f64>, model: &mut [f64]| {
            let def = layout.get(head);
            let mut logits = vec![0.0; def.rows];
            matvec(weights.w(head), def.rows, def.cols, &trunk.h2, &mut logits);
            for (v, b) in logits.iter_mut().zip(weights.b(head)) {
                *v += b;
            }
            let mut dlogits = vec![0.0; def.rows];
            let ce = cross_entropy(&logits, target, &mut dlogits);
            outer_acc(grad_w(&layout, model, head), def.rows, def.cols, &dlogits, &trunk.h2);
            for (g, d) in grad_b(&layout, model, head).iter_mut().zip(&dlogits) {
                *g += d;
            }
            let mut back = vec![0.0; cfg.hidden];
            matvec_t(weights.w(head), def.rows, def.cols, &dlogits, &mut back);
            for (a, b) in dh2.iter_mut().zip(&back) {
                *a += b;
            }
            ce
        };

        for slot in 0..cfg.plan_slots {
            loss_sum += run_head(
                LayerId::Plan(slot),
                sample.plan_targets[slot] as usize,
                &mut dh2,
                &mut grads.model,
            );
        }
        loss_sum += run_head(
            LayerId::Recovery,
            sample.recovery_target as usize,
            &mut dh2,
            &mut grads.model,
        );
        loss_sum += run_head(
            LayerId::Template,
            sample.template_target as usize,
            &mut dh2,
            &mut grads.model,
        );

        trunk_backward(weights, &sample.obs, &trunk, dh2, &mut grads.model);
    }

    let scale = 1.0 / count;
    scale_buf(&mut grads.model, scale);
    Ok((loss_sum * scale, grads))
}

/// Four-class cross-entropy of the monitor head over all steps, masked
/// transitions included.
pub fn monitor_loss(
    weights: &ModelWeights,
    samples: &[TrainSample],
) -> Result<(f64, GradBuf), LearnError> {
    let cfg = weights.cfg;
    let mut grads = GradBuf::zeros(weights, None);
    if samples.is_empty() {
        return Ok((0.0, grads));
    }
    let layout = weights.layout.clone();
    let def = layout.get(LayerId::Monitor).clone();
    let mut loss_sum = 0.0;
    for sample in samples {
        let trunk = trunk_forward(weights, &sample.obs);
        let mut logits = vec![0.0; def.rows];
        matvec(
            weights.w(LayerId::Monitor),
            def.rows,
            def.cols,
            &trunk.h2,
            &mut logits,
        );
        for (v, b) in logits.iter_mut().zip(weights.b(LayerId::Monitor)) {
            *v += b;
        }
        let mut dlogits = vec![0.0; def.rows];
        loss_sum += cross_entropy(&logits, sample.status.index(), &mut dlogits);
        outer_acc(
            grad_w(&layout, &mut grads.model, LayerId::Monitor),
            def.rows,
            def.cols,
            &dlogits,
            &trunk.h2,
        );
        for (g, d) in grad_b(&layout, &mut grads.model, LayerId::Monitor)
            .iter_mut()
            .zip(&dlogits)
        {
            *g += d;
        }
        let mut dh2 = vec![0.0; cfg.hidden];
        matvec_t(
            weights.w(LayerId::Monitor),
            def.rows,
            def.cols,
            &dlogits,
            &mut dh2,
        );
        trunk_backward(weights, &sample.obs, &trunk, dh2, &mut grads.model);
    }
    let scale = 1.0 / samples.len() as f64;
    scale_buf(&mut grads.model, scale);
    Ok((loss_sum * scale, grads))
}

/// Squared Frobenius norm of `basis^T B_online`, summed over adapted layers,
/// with gradients with respect to `B_online`.
pub fn ortho_loss(adapters: &AdapterState) -> Result<(f64, AdapterGrads), LearnError> {
    let mut grads = AdapterGrads::zeros(adapters);
    let mut loss = 0.0;
    for (slot, layer) in adapters.layers.iter().enumerate() {
        if layer.basis.len() != layer.rows * layer.basis_k
            || layer.b_online.len() != layer.rows * layer.rank
        {
            return Err(LearnError::InvalidAdapter(format!(
                "layer {} basis/online shapes are inconsistent",
                slot
            )));
        }
        let k = layer.basis_k;
        if k == 0 {
            continue;
        }
        let m = layer.overlap();
        for v in &m {
            loss += v * v;
        }
        // dB = 2 * basis * M
        for r in 0..layer.rows {
            for j in 0..layer.rank {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += layer.basis[r * k + i] * m[i * layer.rank + j];
                }
                grads.d_b[slot][r * layer.rank + j] += 2.0 * acc;
            }
        }
    }
    Ok((loss, grads))
}

/// Full objective over one batch. Pretrain mode composes flow + lambda *
/// (thought + monitor); continual-learning mode adds beta * ortho and
/// requires adapters.
///
/// `mask_aux` extends loss masking to the thought and monitor terms; by
/// default masked transitions still supervise them (only the action loss is
/// masked).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    weights: &ModelWeights,
    adapters: Option<&AdapterState>,
    samples: &[TrainSample],
    draws: &FlowDraws,
    mode: LossMode,
    lambda: f64,
    beta: f64,
    mask_aux: bool,
) -> Result<(LossBreakdown, GradBuf), LearnError> {
    if mode == LossMode::Secl && adapters.is_none() {
        return Err(LearnError::InvalidAdapter(
            "continual-learning mode requires adapter state".into(),
        ));
    }
    let (l_flow, flow_grads) = flow_loss(weights, adapters, samples, draws)?;
    let filtered: Vec<TrainSample>;
    let aux_samples: &[TrainSample] = if mask_aux {
        filtered = samples.iter().filter(|s| !s.masked).cloned().collect();
        &filtered
    } else {
        samples
    };
    let (l_thought, thought_grads) = thought_loss(weights, aux_samples)?;
    let (l_monitor, monitor_grads) = monitor_loss(weights, aux_samples)?;
    let (l_ortho, ortho_grads) = match (mode, adapters) {
        (LossMode::Secl, Some(a)) => {
            let (l, g) = ortho_loss(a)?;
            (l, Some(g))
        }
        _ => (0.0, None),
    };

    let mut grads = flow_grads;
    for i in 0..grads.model.len() {
        grads.model[i] += lambda * (thought_grads.model[i] + monitor_grads.model[i]);
    }
    if let (Some(agrads), Some(mut ortho)) = (grads.adapter.as_mut(), ortho_grads) {
        ortho.scale(beta);
        for slot in 0..agrads.d_b.len() {
            for (g, o) in agrads.d_b[slot].iter_mut().zip(&ortho.d_b[slot]) {
                *g += o;
            }
        }
    }

    let total = combine_total(l_flow, l_thought, l_monitor, l_ortho, lambda, beta, mode);
    Ok((
        LossBreakdown {
            l_flow,
            l_thought,
            l_monitor,
            l_ortho,
            total,
            masked_count: samples.iter().filter(|s| s.masked).count(),
        },
        grads,
    ))
}

/// Monitor head probabilities for one observation (softmax over 4 logits).
pub fn monitor_probabilities(weights: &ModelWeights, obs: &[f64]) -> [f64; 4] {
    let trunk = trunk_forward(weights, obs);
    head_probabilities(weights, LayerId::Monitor, &trunk.h2)
        .try_into()
        .expect("monitor head has 4 classes")
}

pub(crate) fn head_logits(weights: &ModelWeights, head: LayerId, h2: &[f64]) -> Vec<f64> {
    let def = weights.layout.get(head);
    let mut logits = vec![0.0; def.rows];
    matvec(weights.w(head), def.rows, def.cols, h2, &mut logits);
    for (v, b) in logits.iter_mut().zip(weights.b(head)) {
        *v += b;
    }
    logits
}

pub(crate) fn head_probabilities(weights: &ModelWeights, head: LayerId, h2: &[f64]) -> Vec<f64> {
    super::nn::softmax(&head_logits(weights, head, h2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::gradcheck::{fd_adapter_b_gradient, fd_model_gradient, rel_error};
    use crate::learner::{ModelConfig, TokenVocab};
    use crate::world::TaskSet;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        let tasks = TaskSet::builtin();
        let vocab = TokenVocab::from_tasks(&tasks);
        ModelConfig::for_tasks(&tasks, &vocab)
    }

    fn random_sample(
        cfg: &ModelConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
        status: TriggerStatus,
        masked: bool,
    ) -> TrainSample {
        let obs: Vec<f64> = (0..cfg.obs_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let memory: Vec<f64> = (0..cfg.memory_dim())
            .map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 })
            .collect();
        let chunk: Vec<f64> = (0..cfg.chunk_dim()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        TrainSample {
            obs,
            status,
            plan_targets: (0..cfg.plan_slots)
                .map(|_| rng.gen_range(0..cfg.vocab_size as u16))
                .collect(),
            recovery_target: rng.gen_range(0..cfg.vocab_size as u16),
            template_target: rng.gen_range(0..cfg.template_vocab() as u16),
            memory,
            chunk,
            masked,
        }
    }

    fn random_batch(cfg: &ModelConfig, seed: u64, n: usize) -> Vec<TrainSample> {
        let mut rng = crate::util::rng(seed);
        (0..n)
            .map(|i| {
                let status = TriggerStatus::ALL[i % 4];
                random_sample(cfg, &mut rng, status, false)
            })
            .collect()
    }

    #[test]
    fn zero_predictor_unit_target_gives_loss_one() {
        let cfg = cfg();
        let mut weights = ModelWeights::init(cfg, 1);
        // Zero the output layer: the predictor is identically zero.
        let def = weights.layout.get(LayerId::Flow3).clone();
        for v in weights.data[def.w_offset..def.b_offset + def.rows].iter_mut() {
            *v = 0.0;
        }
        let mut rng = crate::util::rng(2);
        let mut sample = random_sample(&cfg, &mut rng, TriggerStatus::Normal, false);
        sample.chunk = vec![0.0; cfg.chunk_dim()];
        sample.chunk[5] = 1.0; // unit target chunk
        let draws = FlowDraws::fixed(0.37, vec![0.0; cfg.chunk_dim()], 1);
        let (loss, _) = flow_loss(&weights, None, &[sample], &draws).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn all_masked_batch_is_an_error() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 1);
        let mut rng = crate::util::rng(3);
        let samples: Vec<TrainSample> = (0..4)
            .map(|_| random_sample(&cfg, &mut rng, TriggerStatus::Normal, true))
            .collect();
        let draws = FlowDraws::sample(&mut rng, samples.len(), cfg.chunk_dim());
        assert!(matches!(
            flow_loss(&weights, None, &samples, &draws),
            Err(LearnError::EmptyEffectiveBatch)
        ));
    }

    #[test]
    fn masked_sample_is_bitwise_neutral() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 4);
        let mut rng = crate::util::rng(5);
        let mut samples = random_batch(&cfg, 6, 6);
        samples[2].masked = true;
        let draws = FlowDraws::sample(&mut rng, samples.len(), cfg.chunk_dim());
        let (loss_a, grads_a) = flow_loss(&weights, None, &samples, &draws).unwrap();
        // Perturb the masked sample's action target arbitrarily.
        samples[2].chunk.iter_mut().for_each(|v| *v += 123.456);
        let (loss_b, grads_b) = flow_loss(&weights, None, &samples, &draws).unwrap();
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert_eq!(grads_a.model, grads_b.model);
    }

    #[test]
    fn thought_loss_uniform_logits_is_ln_vocab() {
        let cfg = cfg();
        let mut weights = ModelWeights::init(cfg, 7);
        // Zero all thought heads.
        for slot in 0..cfg.plan_slots {
            let def = weights.layout.get(LayerId::Plan(slot)).clone();
            weights.data[def.w_offset..def.b_offset + def.rows].fill(0.0);
        }
        for head in [LayerId::Recovery, LayerId::Template] {
            let def = weights.layout.get(head).clone();
            weights.data[def.w_offset..def.b_offset + def.rows].fill(0.0);
        }
        let samples = random_batch(&cfg, 8, 4);
        let (loss, _) = thought_loss(&weights, &samples).unwrap();
        let expected = ((cfg.plan_slots + 1) as f64 * (cfg.vocab_size as f64).ln()
            + (cfg.template_vocab() as f64).ln())
            / (cfg.plan_slots + 2) as f64;
        assert!((loss - expected).abs() < 1e-12, "{} vs {}", loss, expected);
    }

    #[test]
    fn thought_loss_skips_normal_steps() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 9);
        let mut rng = crate::util::rng(10);
        let normal_only: Vec<TrainSample> = (0..5)
            .map(|_| random_sample(&cfg, &mut rng, TriggerStatus::Normal, false))
            .collect();
        let (loss, grads) = thought_loss(&weights, &normal_only).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.model.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn thought_loss_rejects_out_of_vocab_label() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 11);
        let mut batch = random_batch(&cfg, 12, 2);
        batch[0].plan_targets[0] = cfg.vocab_size as u16 + 3;
        assert!(matches!(
            thought_loss(&weights, &batch),
            Err(LearnError::InvalidLabel(_))
        ));
    }

    #[test]
    fn monitor_loss_uniform_is_ln4_and_saturated_is_tiny() {
        let cfg = cfg();
        let mut weights = ModelWeights::init(cfg, 13);
        let def = weights.layout.get(LayerId::Monitor).clone();
        weights.data[def.w_offset..def.b_offset + def.rows].fill(0.0);
        let samples = random_batch(&cfg, 14, 8);
        let (loss, _) = monitor_loss(&weights, &samples).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        // Saturate toward Normal and feed Normal-only samples.
        let mut rng = crate::util::rng(15);
        let normal: Vec<TrainSample> = (0..4)
            .map(|_| random_sample(&cfg, &mut rng, TriggerStatus::Normal, false))
            .collect();
        weights.data[def.b_offset + TriggerStatus::Normal.index()] = 25.0;
        let (loss, _) = monitor_loss(&weights, &normal).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn ortho_loss_matches_hand_examples() {
        let cfg = cfg();
        let mut adapters = crate::learner::AdapterState::zeros(&cfg, 1);
        // Single basis column e0; single online column e1 -> zero overlap.
        let layer = &mut adapters.layers[0];
        layer.basis_k = 1;
        layer.basis = vec![0.0; layer.rows];
        layer.basis[0] = 1.0;
        layer.b_online.fill(0.0);
        layer.b_online[1 * layer.rank] = 1.0; // row 1, col 0
        let (loss, _) = ortho_loss(&adapters).unwrap();
        assert_eq!(loss, 0.0);

        // Aligned columns -> squared overlap of 1.
        let layer = &mut adapters.layers[0];
        layer.b_online.fill(0.0);
        layer.b_online[0] = 1.0; // row 0, col 0 aligned with basis e0
        let (loss, grads) = ortho_loss(&adapters).unwrap();
        assert_eq!(loss, 1.0);
        // dB = 2 * basis * M: gradient 2 at the aligned entry.
        assert_eq!(grads.d_b[0][0], 2.0);
    }

    #[test]
    fn total_loss_composes_and_masks_count() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 16);
        let mut samples = random_batch(&cfg, 17, 6);
        samples[4].masked = true;
        let mut rng = crate::util::rng(18);
        let draws = FlowDraws::sample(&mut rng, samples.len(), cfg.chunk_dim());
        let (breakdown, _) = total_loss(
            &weights,
            None,
            &samples,
            &draws,
            LossMode::Pretrain,
            0.1,
            0.5,
            false,
        )
        .unwrap();
        let expected = combine_total(
            breakdown.l_flow,
            breakdown.l_thought,
            breakdown.l_monitor,
            breakdown.l_ortho,
            0.1,
            0.5,
            LossMode::Pretrain,
        );
        assert_eq!(breakdown.total, expected);
        assert_eq!(breakdown.masked_count, 1);
    }

    #[test]
    fn combine_total_reproduces_reference_arithmetic() {
        // Pretrain: 2.0 + 0.1 * (1.0 + 1.0) lands exactly on the 2.2 literal.
        assert_eq!(
            combine_total(2.0, 1.0, 1.0, 0.0, 0.1, 0.5, LossMode::Pretrain),
            2.2
        );
        // Continual-learning composition is bitwise the written-out
        // expression and within one ulp of the real-arithmetic 2.4.
        let secl = combine_total(2.0, 1.0, 1.0, 0.4, 0.1, 0.5, LossMode::Secl);
        assert_eq!(secl.to_bits(), (2.0 + 0.1 * (1.0 + 1.0) + 0.5 * 0.4f64).to_bits());
        assert!((secl - 2.4).abs() <= f64::EPSILON * 2.4);
        // Zero ortho term reduces to the pretrain total exactly.
        assert_eq!(
            combine_total(2.0, 1.0, 1.0, 0.0, 0.1, 0.5, LossMode::Secl),
            2.2
        );
    }

    #[test]
    fn flow_gradient_matches_finite_differences_on_subset() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 19);
        let samples = random_batch(&cfg, 20, 4);
        let mut rng = crate::util::rng(21);
        let draws = FlowDraws::sample(&mut rng, samples.len(), cfg.chunk_dim());
        let (_, grads) = flow_loss(&weights, None, &samples, &draws).unwrap();

        let mut idx_rng = crate::util::rng(22);
        let indices: Vec<usize> = (0..400)
            .map(|_| idx_rng.gen_range(0..weights.layout.total))
            .collect();
        let fd = fd_model_gradient(&weights, &indices, 1e-5, |w| {
            flow_loss(w, None, &samples, &draws).unwrap().0
        });
        for (i, &p) in indices.iter().enumerate() {
            let err = rel_error(grads.model[p], fd[i]);
            assert!(err < 1e-4, "param {} rel err {}", p, err);
        }
    }

    #[test]
    fn thought_and_monitor_gradients_match_finite_differences() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 23);
        let samples = random_batch(&cfg, 24, 4);
        let mut idx_rng = crate::util::rng(25);
        let indices: Vec<usize> = (0..300)
            .map(|_| idx_rng.gen_range(0..weights.layout.total))
            .collect();

        let (_, tg) = thought_loss(&weights, &samples).unwrap();
        let fd = fd_model_gradient(&weights, &indices, 1e-5, |w| {
            thought_loss(w, &samples).unwrap().0
        });
        for (i, &p) in indices.iter().enumerate() {
            assert!(rel_error(tg.model[p], fd[i]) < 1e-4, "thought param {}", p);
        }

        let (_, mg) = monitor_loss(&weights, &samples).unwrap();
        let fd = fd_model_gradient(&weights, &indices, 1e-5, |w| {
            monitor_loss(w, &samples).unwrap().0
        });
        for (i, &p) in indices.iter().enumerate() {
            assert!(rel_error(mg.model[p], fd[i]) < 1e-4, "monitor param {}", p);
        }
    }

    #[test]
    fn flow_gradient_through_adapters_matches_finite_differences() {
        let cfg = cfg();
        let weights = ModelWeights::init(cfg, 26);
        let mut adapters = crate::learner::AdapterState::zeros(&cfg, 27);
        let mut grng = crate::util::rng(28);
        for layer in &mut adapters.layers {
            for v in layer.delta_offline.iter_mut() {
                *v = 0.02 * crate::learner::nn::gaussian(&mut grng);
            }
            for v in layer.b_online.iter_mut() {
                *v = 0.1 * crate::learner::nn::gaussian(&mut grng);
            }
            layer.recompute_basis();
        }
        let samples = random_batch(&cfg, 29, 3);
        let mut rng = crate::util::rng(30);
        let draws = FlowDraws::sample(&mut rng, samples.len(), cfg.chunk_dim());
        let (_, grads) = flow_loss(&weights, Some(&adapters), &samples, &draws).unwrap();
        let agrads = grads.adapter.unwrap();

        for slot in 0..2 {
            let n_b = adapters.layers[slot].b_online.len();
            let indices: Vec<usize> = (0..n_b).step_by(7).collect();
            let fd = fd_adapter_b_gradient(&adapters, slot, &indices, 1e-5, |a| {
                flow_loss(&weights, Some(a), &samples, &draws).unwrap().0
            });
            for (i, &p) in indices.iter().enumerate() {
                let err = rel_error(agrads.d_b[slot][p], fd[i]);
                assert!(err < 1e-4, "layer {} b[{}] rel err {}", slot, p, err);
            }
        }
    }

    #[test]
    fn ortho_gradient_matches_finite_differences_tightly() {
        let cfg = cfg();
        let mut adapters = crate::learner::AdapterState::zeros(&cfg, 31);
        let mut grng = crate::util::rng(32);
        for layer in &mut adapters.layers {
            for v in layer.delta_offline.iter_mut() {
                *v = 0.05 * crate::learner::nn::gaussian(&mut grng);
            }
            for v in layer.b_online.iter_mut() {
                *v = 0.3 * crate::learner::nn::gaussian(&mut grng);
            }
            layer.recompute_basis();
        }
        let (_, grads) = ortho_loss(&adapters).unwrap();
        for slot in 0..2 {
            let n_b = adapters.layers[slot].b_online.len();
            let indices: Vec<usize> = (0..n_b).step_by(5).collect();
            let fd = fd_adapter_b_gradient(&adapters, slot, &indices, 1e-5, |a| {
                ortho_loss(a).unwrap().0
            });
            for (i, &p) in indices.iter().enumerate() {
                let err = rel_error(grads.d_b[slot][p], fd[i]);
                assert!(err < 1e-6, "layer {} b[{}] rel err {}", slot, p, err);
            }
        }
    }
}
