//! Conversion of annotated episodes into training samples.
//!
//! A sample anchors at one transition: its observation, status label, thought
//! targets, the flattened chunk of upcoming actions, and the memory encoding
//! the runtime would hold at that step. A sample is masked when any
//! transition inside its chunk window is masked, so perturbing a masked
//! action can never leak into the action loss.

use super::nn::gaussian;
use super::{LearnError, ModelConfig, TokenVocab};
use crate::ecgen::{AnnotatedDataset, AnnotatedEpisode};
use crate::runtime::{TemplateId, TokenId, TriggerStatus};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub obs: Vec<f64>,
    pub status: TriggerStatus,
    /// Plan-slot targets, padded with the PAD token.
    pub plan_targets: Vec<u16>,
    /// Token to return to while recovering; NONE on steps without an error.
    pub recovery_target: u16,
    /// Template-head target; the trailing "none" id when no reflection
    /// applies at this step.
    pub template_target: u16,
    /// Memory encoding the runtime would hold at this step.
    pub memory: Vec<f64>,
    /// Flattened chunk of the next `chunk_len` actions (row-major step x dim).
    pub chunk: Vec<f64>,
    pub masked: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub cfg: ModelConfig,
    pub samples: Vec<TrainSample>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Frozen flow-matching draws for one batch: interpolation times and source
/// noise, sampled once so the loss is a deterministic function of weights.
#[derive(Debug, Clone)]
pub struct FlowDraws {
    pub t: Vec<f64>,
    pub x0: Vec<Vec<f64>>,
}

impl FlowDraws {
    pub fn sample(rng: &mut ChaCha8Rng, n_samples: usize, chunk_dim: usize) -> Self {
        use rand::Rng;
        let mut t = Vec::with_capacity(n_samples);
        let mut x0 = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            t.push(rng.gen::<f64>());
            x0.push((0..chunk_dim).map(|_| gaussian(rng)).collect());
        }
        Self { t, x0 }
    }

    /// Fixed draws, used by arithmetic-oracle tests.
    pub fn fixed(t: f64, x0: Vec<f64>, n_samples: usize) -> Self {
        Self {
            t: vec![t; n_samples],
            x0: vec![x0; n_samples],
        }
    }
}

/// Derive per-step recovery context for one episode: while an injected error
/// is being recovered (from its first Error-labeled step to the end of the
/// erroneous subtask), the runtime memory holds the redo token plus the
/// reflection template.
fn recovery_windows(episode: &AnnotatedEpisode) -> Option<(std::ops::Range<usize>, u8)> {
    let reflection = episode.reflection.as_ref()?;
    let first_error = episode
        .transitions
        .iter()
        .position(|t| t.status == TriggerStatus::Error)?;
    let spans = episode.subtask_spans();
    let span = spans
        .iter()
        .find(|(_, r)| r.contains(&first_error))
        .map(|(_, r)| r.clone())?;
    Some((first_error..span.end, reflection.template_index()))
}

/// Build the training set for a dataset. Fails when a token or template is
/// absent from the model vocabulary.
pub fn build_training_set(
    dataset: &AnnotatedDataset,
    vocab: &TokenVocab,
    cfg: &ModelConfig,
) -> Result<TrainingSet, LearnError> {
    let encoder = cfg.encoder();
    let mut samples = Vec::new();
    for episode in &dataset.episodes {
        if episode.plan.len() > cfg.plan_slots {
            return Err(LearnError::InvalidLabel(format!(
                "plan of length {} exceeds {} slots",
                episode.plan.len(),
                cfg.plan_slots
            )));
        }
        let mut plan_targets = vec![TokenVocab::PAD; cfg.plan_slots];
        for (slot, token) in episode.plan.iter().enumerate() {
            plan_targets[slot] = vocab
                .id(token)
                .ok_or_else(|| LearnError::InvalidLabel(format!("unknown token `{}`", token)))?;
        }
        let recovery = recovery_windows(episode);
        let n = episode.transitions.len();
        for (k, tr) in episode.transitions.iter().enumerate() {
            let token_id = vocab.id(&tr.subtask_token).ok_or_else(|| {
                LearnError::InvalidLabel(format!("unknown token `{}`", tr.subtask_token))
            })?;
            let (recovering, template_mem) = match &recovery {
                Some((window, template)) if window.contains(&k) => (true, Some(*template)),
                _ => (false, None),
            };
            let recovery_target = if recovering { token_id } else { TokenVocab::NONE };
            let template_target = template_mem
                .map(|t| t as u16)
                .unwrap_or_else(|| cfg.template_none_id());
            let memory = encoder.encode_parts(
                Some(TokenId(token_id)),
                recovering,
                template_mem.map(TemplateId),
            );

            let mut chunk = Vec::with_capacity(cfg.chunk_dim());
            let mut masked = false;
            for step in 0..cfg.chunk_len {
                let idx = (k + step).min(n - 1);
                let t = &episode.transitions[idx];
                chunk.extend_from_slice(&t.action);
                masked |= t.mask;
            }

            if tr.obs.len() != cfg.obs_dim {
                return Err(LearnError::InvalidFeatures {
                    expected: cfg.obs_dim,
                    got: tr.obs.len(),
                });
            }
            samples.push(TrainSample {
                obs: tr.obs.clone(),
                status: tr.status,
                plan_targets: plan_targets.clone(),
                recovery_target,
                template_target,
                memory,
                chunk,
                masked,
            });
        }
    }
    Ok(TrainingSet {
        cfg: *cfg,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecgen::{generate_dataset, ErrorMix, GenerateConfig};
    use crate::world::{TaskSet, WorldParams};

    fn small_dataset(mix: ErrorMix, seed: u64, n: usize) -> (AnnotatedDataset, TaskSet) {
        let params = WorldParams::default();
        let tasks = TaskSet::builtin();
        let ds = generate_dataset(
            &params,
            &tasks,
            &GenerateConfig {
                n_episodes: n,
                mix,
                seed,
                config_hash: None,
            },
        )
        .unwrap();
        (ds, tasks)
    }

    #[test]
    fn builds_samples_for_every_transition() {
        let (ds, tasks) = small_dataset(ErrorMix::uniform(1.0 / 3.0), 1, 6);
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let set = build_training_set(&ds, &vocab, &cfg).unwrap();
        let total: usize = ds.episodes.iter().map(|e| e.transitions.len()).sum();
        assert_eq!(set.len(), total);
        for s in &set.samples {
            assert_eq!(s.obs.len(), cfg.obs_dim);
            assert_eq!(s.chunk.len(), cfg.chunk_dim());
            assert_eq!(s.memory.len(), cfg.memory_dim());
            assert_eq!(s.plan_targets.len(), cfg.plan_slots);
        }
    }

    #[test]
    fn chunk_masking_covers_lookahead() {
        let (ds, tasks) = small_dataset(ErrorMix::only(crate::ecgen::ErrorModality::Pose), 5, 3);
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let set = build_training_set(&ds, &vocab, &cfg).unwrap();

        let mut cursor = 0;
        for episode in &ds.episodes {
            let n = episode.transitions.len();
            let block = &episode.masked_blocks()[0];
            for k in 0..n {
                let sample = &set.samples[cursor + k];
                // A sample is masked iff its chunk window touches the block.
                let window_end = (k + cfg.chunk_len - 1).min(n - 1);
                let touches = k < block.end && window_end >= block.start;
                assert_eq!(sample.masked, touches, "episode step {}", k);
            }
            cursor += n;
        }
    }

    #[test]
    fn recovery_context_spans_error_to_subtask_end() {
        let (ds, tasks) =
            small_dataset(ErrorMix::only(crate::ecgen::ErrorModality::Gripper), 9, 4);
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let set = build_training_set(&ds, &vocab, &cfg).unwrap();

        let mut cursor = 0;
        for episode in &ds.episodes {
            let n = episode.transitions.len();
            let first_error = episode
                .transitions
                .iter()
                .position(|t| t.status == TriggerStatus::Error)
                .unwrap();
            let spans = episode.subtask_spans();
            let err_span = spans
                .iter()
                .find(|(_, r)| r.contains(&first_error))
                .map(|(_, r)| r.clone())
                .unwrap();
            for k in 0..n {
                let sample = &set.samples[cursor + k];
                let recovering = k >= first_error && k < err_span.end;
                let flag = sample.memory[cfg.vocab_size];
                assert_eq!(flag == 1.0, recovering, "step {}", k);
                if recovering {
                    assert_ne!(sample.recovery_target, TokenVocab::NONE);
                    assert_ne!(sample.template_target, cfg.template_none_id());
                } else {
                    assert_eq!(sample.recovery_target, TokenVocab::NONE);
                    assert_eq!(sample.template_target, cfg.template_none_id());
                }
            }
            cursor += n;
        }
    }

    #[test]
    fn clean_dataset_has_no_masked_samples() {
        let (ds, tasks) = small_dataset(ErrorMix::clean(), 2, 4);
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let set = build_training_set(&ds, &vocab, &cfg).unwrap();
        assert!(set.samples.iter().all(|s| !s.masked));
    }

    #[test]
    fn unknown_token_is_rejected() {
        let (mut ds, tasks) = small_dataset(ErrorMix::clean(), 3, 1);
        ds.episodes[0].transitions[0].subtask_token = "bogus".into();
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        assert!(matches!(
            build_training_set(&ds, &vocab, &cfg),
            Err(LearnError::InvalidLabel(_))
        ));
    }

    #[test]
    fn flow_draws_are_deterministic() {
        let mut a = crate::util::rng(4);
        let mut b = crate::util::rng(4);
        let da = FlowDraws::sample(&mut a, 5, 32);
        let db = FlowDraws::sample(&mut b, 5, 32);
        assert_eq!(da.t, db.t);
        assert_eq!(da.x0, db.x0);
    }
}
