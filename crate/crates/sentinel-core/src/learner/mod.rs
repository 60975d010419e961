//! Small differentiable models and the full training objective: a shared
//! feature trunk with monitor, thought, and flow-matching heads, loss masking,
//! low-rank adapters, and hand-derived gradients verified against finite
//! differences.

pub mod adapter;
pub mod batch;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod nn;
pub mod policy;
pub mod train;

pub use adapter::{AdapterLayerState, AdapterState};
pub use batch::{build_training_set, FlowDraws, TrainSample, TrainingSet};
pub use io::{read_weights, write_weights, WeightsFile};
pub use losses::{
    combine_total, flow_loss, monitor_loss, ortho_loss, thought_loss, total_loss, GradBuf,
    LossBreakdown, LossMode,
};
pub use policy::LearnedPolicy;
pub use train::{train, LossRow, TrainConfig, TrainScope};

use crate::ecgen::TEMPLATE_COUNT;
use crate::util::sha256_hex;
use crate::world::{TaskSet, MAX_PLAN_SLOTS};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("every sample in the batch is masked")]
    EmptyEffectiveBatch,
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("feature vector has dimension {got}, model expects {expected}")]
    InvalidFeatures { expected: usize, got: usize },
    #[error("malformed weights document: {0}")]
    Parse(String),
}

/// Subtask-token vocabulary: two specials followed by every task's plan
/// tokens in task-file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
}

impl TokenVocab {
    pub const PAD: u16 = 0;
    pub const NONE: u16 = 1;

    pub fn from_tasks(tasks: &TaskSet) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<none>".to_string()];
        for task in tasks.tasks() {
            tokens.extend(task.plan_tokens());
        }
        Self { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn id(&self, token: &str) -> Option<u16> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u16)
    }

    pub fn token(&self, id: u16) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Model dimensions. Everything downstream (layout, batch shapes, the memory
/// encoding) derives from this struct.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub vocab_size: usize,
    pub template_count: usize,
    pub plan_slots: usize,
    pub chunk_len: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub rank: usize,
}

impl ModelConfig {
    pub fn for_tasks(tasks: &TaskSet, vocab: &TokenVocab) -> Self {
        Self {
            obs_dim: tasks.obs_dim(),
            vocab_size: vocab.len(),
            template_count: TEMPLATE_COUNT,
            plan_slots: MAX_PLAN_SLOTS,
            chunk_len: 8,
            action_dim: 4,
            hidden: 64,
            rank: 4,
        }
    }

    pub const STATUS_COUNT: usize = 4;

    /// Template head vocabulary: the real templates plus a trailing "none".
    pub fn template_vocab(&self) -> usize {
        self.template_count + 1
    }

    pub fn template_none_id(&self) -> u16 {
        self.template_count as u16
    }

    pub fn memory_dim(&self) -> usize {
        self.vocab_size + 1 + self.template_count
    }

    pub fn chunk_dim(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    pub fn flow_input_dim(&self) -> usize {
        self.hidden + Self::STATUS_COUNT + self.memory_dim() + self.chunk_dim() + 1
    }

    pub fn encoder(&self) -> crate::runtime::MemoryEncoder {
        crate::runtime::MemoryEncoder {
            vocab_size: self.vocab_size,
            template_count: self.template_count,
        }
    }

    /// Hash tying weights to the model shape, token vocabulary (through the
    /// task set), and template table.
    pub fn model_hash(&self, tasks_hash: &str) -> String {
        sha256_hex(
            format!(
                "obs={};vocab={};templates={};slots={};chunk={};act={};hidden={};rank={};tasks={};template_version={}",
                self.obs_dim,
                self.vocab_size,
                self.template_count,
                self.plan_slots,
                self.chunk_len,
                self.action_dim,
                self.hidden,
                self.rank,
                tasks_hash,
                crate::ecgen::TEMPLATE_VERSION
            )
            .as_bytes(),
        )
    }
}

/// Identifies one dense layer of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerId {
    Trunk1,
    Trunk2,
    Monitor,
    Plan(usize),
    Recovery,
    Template,
    Flow1,
    Flow2,
    Flow3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub id: LayerId,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

/// Fixed enumeration of layers and their offsets into the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub layers: Vec<LayerDef>,
    pub total: usize,
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(LayerId, String, usize, usize)> = vec![
            (LayerId::Trunk1, "trunk1".into(), cfg.hidden, cfg.obs_dim),
            (LayerId::Trunk2, "trunk2".into(), cfg.hidden, cfg.hidden),
            (
                LayerId::Monitor,
                "monitor".into(),
                ModelConfig::STATUS_COUNT,
                cfg.hidden,
            ),
        ];
        for slot in 0..cfg.plan_slots {
            specs.push((
                LayerId::Plan(slot),
                format!("plan_{}", slot),
                cfg.vocab_size,
                cfg.hidden,
            ));
        }
        specs.push((
            LayerId::Recovery,
            "recovery".into(),
            cfg.vocab_size,
            cfg.hidden,
        ));
        specs.push((
            LayerId::Template,
            "template".into(),
            cfg.template_vocab(),
            cfg.hidden,
        ));
        specs.push((
            LayerId::Flow1,
            "flow1".into(),
            cfg.hidden,
            cfg.flow_input_dim(),
        ));
        specs.push((LayerId::Flow2, "flow2".into(), cfg.hidden, cfg.hidden));
        specs.push((LayerId::Flow3, "flow3".into(), cfg.chunk_dim(), cfg.hidden));

        let mut layers = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (id, name, rows, cols) in specs {
            let w_offset = offset;
            offset += rows * cols;
            let b_offset = offset;
            offset += rows;
            layers.push(LayerDef {
                id,
                name,
                rows,
                cols,
                w_offset,
                b_offset,
            });
        }
        Self {
            layers,
            total: offset,
        }
    }

    pub fn get(&self, id: LayerId) -> &LayerDef {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .expect("layer exists in layout")
    }
}

/// All model parameters in one flat 64-bit buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl ModelWeights {
    /// Scaled-uniform initialization, deterministic in the seed.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let layout = Layout::for_config(&cfg);
        let mut data = vec![0.0; layout.total];
        let mut rng = crate::util::rng(crate::util::derive(seed, crate::util::stream::INIT));
        for layer in &layout.layers {
            let scale = 1.0 / (layer.cols as f64).sqrt();
            for i in 0..layer.rows * layer.cols {
                data[layer.w_offset + i] = rng.gen_range(-scale..scale);
            }
            // Biases start at zero.
        }
        Self { cfg, layout, data }
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    pub fn w(&self, id: LayerId) -> &[f64] {
        let l = self.layout.get(id);
        &self.data[l.w_offset..l.w_offset + l.rows * l.cols]
    }

    pub fn b(&self, id: LayerId) -> &[f64] {
        let l = self.layout.get(id);
        &self.data[l.b_offset..l.b_offset + l.rows]
    }

    pub fn finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Slice helpers for gradient buffers laid out like the model.
pub fn grad_w<'a>(layout: &Layout, data: &'a mut [f64], id: LayerId) -> &'a mut [f64] {
    let l = layout.get(id);
    &mut data[l.w_offset..l.w_offset + l.rows * l.cols]
}

pub fn grad_b<'a>(layout: &Layout, data: &'a mut [f64], id: LayerId) -> &'a mut [f64] {
    let l = layout.get(id);
    &mut data[l.b_offset..l.b_offset + l.rows]
}
