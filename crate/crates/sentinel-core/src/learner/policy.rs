//! The learned policy bundle: one weight set serving the status monitor, the
//! thought reasoner, and the flow-matching actor.

use super::adapter::AdapterState;
use super::losses::{head_logits, head_probabilities, trunk_forward};
use super::nn::{gaussian, matvec, softmax, tanh_inplace};
use super::{LayerId, ModelWeights, TokenVocab};
use crate::runtime::{
    Actor, MemoryEncoder, PlanThought, Reasoner, RecoveryState, RuntimeError, StatusMonitor,
    TemplateId, ThoughtMemory, TokenId, TriggerStatus,
};
use rand_chacha::ChaCha8Rng;

/// Euler integration steps used when sampling the flow head.
pub const EULER_STEPS: usize = 10;

pub struct LearnedPolicy {
    pub weights: ModelWeights,
    pub adapters: Option<AdapterState>,
    pub vocab: TokenVocab,
    eff_flow1: Vec<f64>,
    eff_flow2: Vec<f64>,
}

impl LearnedPolicy {
    pub fn new(weights: ModelWeights, adapters: Option<AdapterState>, vocab: TokenVocab) -> Self {
        let mut policy = Self {
            weights,
            adapters,
            vocab,
            eff_flow1: Vec::new(),
            eff_flow2: Vec::new(),
        };
        policy.refresh();
        policy
    }

    /// Recompute the cached effective flow weights after any weight or
    /// adapter change.
    pub fn refresh(&mut self) {
        match &self.adapters {
            Some(a) => {
                self.eff_flow1 = a.effective_w(&self.weights, LayerId::Flow1);
                self.eff_flow2 = a.effective_w(&self.weights, LayerId::Flow2);
            }
            None => {
                self.eff_flow1 = self.weights.w(LayerId::Flow1).to_vec();
                self.eff_flow2 = self.weights.w(LayerId::Flow2).to_vec();
            }
        }
    }

    pub fn encoder(&self) -> MemoryEncoder {
        self.weights.cfg.encoder()
    }

    fn check_features(&self, features: &[f64]) -> Result<(), RuntimeError> {
        if features.len() != self.weights.cfg.obs_dim {
            return Err(RuntimeError::InvalidFeatures {
                expected: self.weights.cfg.obs_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Velocity field of the flow head for one state of the sampler.
    fn flow_velocity(&self, h2: &[f64], status: TriggerStatus, memory: &[f64], x: &[f64], t: f64) -> Vec<f64> {
        let cfg = &self.weights.cfg;
        let mut z = Vec::with_capacity(cfg.flow_input_dim());
        z.extend_from_slice(h2);
        z.extend_from_slice(&status.one_hot());
        z.extend_from_slice(memory);
        z.extend_from_slice(x);
        z.push(t);
        let mut f1 = vec![0.0; cfg.hidden];
        matvec(&self.eff_flow1, cfg.hidden, cfg.flow_input_dim(), &z, &mut f1);
        for (v, b) in f1.iter_mut().zip(self.weights.b(LayerId::Flow1)) {
            *v += b;
        }
        tanh_inplace(&mut f1);
        let mut f2 = vec![0.0; cfg.hidden];
        matvec(&self.eff_flow2, cfg.hidden, cfg.hidden, &f1, &mut f2);
        for (v, b) in f2.iter_mut().zip(self.weights.b(LayerId::Flow2)) {
            *v += b;
        }
        tanh_inplace(&mut f2);
        let mut v = vec![0.0; cfg.chunk_dim()];
        matvec(
            self.weights.w(LayerId::Flow3),
            cfg.chunk_dim(),
            cfg.hidden,
            &f2,
            &mut v,
        );
        for (vi, b) in v.iter_mut().zip(self.weights.b(LayerId::Flow3)) {
            *vi += b;
        }
        v
    }

    /// Sample a full action chunk with the Euler sampler.
    pub fn sample_chunk(
        &self,
        features: &[f64],
        status: TriggerStatus,
        memory_encoding: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let cfg = &self.weights.cfg;
        let trunk = trunk_forward(&self.weights, features);
        let mut x: Vec<f64> = (0..cfg.chunk_dim()).map(|_| gaussian(rng)).collect();
        let dt = 1.0 / EULER_STEPS as f64;
        for k in 0..EULER_STEPS {
            let t = k as f64 * dt;
            let v = self.flow_velocity(&trunk.h2, status, memory_encoding, &x, t);
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi += dt * vi;
            }
        }
        x
    }
}

impl StatusMonitor for LearnedPolicy {
    fn probabilities(&self, _t: usize, features: &[f64]) -> Result<[f64; 4], RuntimeError> {
        self.check_features(features)?;
        let trunk = trunk_forward(&self.weights, features);
        let logits = head_logits(&self.weights, LayerId::Monitor, &trunk.h2);
        let probs = softmax(&logits);
        Ok([probs[0], probs[1], probs[2], probs[3]])
    }
}

impl Reasoner for LearnedPolicy {
    fn plan(&self, features: &[f64]) -> PlanThought {
        let cfg = &self.weights.cfg;
        let trunk = trunk_forward(&self.weights, features);
        let mut plan = Vec::new();
        for slot in 0..cfg.plan_slots {
            let probs = head_probabilities(&self.weights, LayerId::Plan(slot), &trunk.h2);
            let token = argmax(&probs) as u16;
            if token == TokenVocab::PAD {
                break;
            }
            plan.push(TokenId(token));
        }
        if plan.is_empty() {
            plan.push(TokenId(TokenVocab::NONE));
        }
        PlanThought { plan }
    }

    fn recover(&self, memory: &ThoughtMemory, features: &[f64]) -> RecoveryState {
        let cfg = &self.weights.cfg;
        let trunk = trunk_forward(&self.weights, features);
        let rec_probs = head_probabilities(&self.weights, LayerId::Recovery, &trunk.h2);
        let mut token = argmax(&rec_probs) as u16;
        if token == TokenVocab::NONE || token == TokenVocab::PAD {
            // Fall back to redoing the current subtask.
            token = memory
                .current_token()
                .map(|t| t.0)
                .unwrap_or(TokenVocab::NONE);
        }
        let tmpl_probs = head_probabilities(&self.weights, LayerId::Template, &trunk.h2);
        let mut template = argmax(&tmpl_probs) as u8;
        if template as usize >= cfg.template_count {
            template = 0; // "none" predicted: fall back to the first template
        }
        RecoveryState {
            plan: vec![TokenId(token)],
            index: 0,
            template: TemplateId(template),
        }
    }
}

impl Actor for LearnedPolicy {
    fn act(
        &self,
        _t: usize,
        features: &[f64],
        status: TriggerStatus,
        memory_encoding: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> [f64; 4] {
        let chunk = self.sample_chunk(features, status, memory_encoding, rng);
        // Execute the first action of the chunk; the next step re-plans.
        [chunk[0], chunk[1], chunk[2], chunk[3]]
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}
