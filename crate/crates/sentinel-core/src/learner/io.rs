//! Weights container: a self-describing JSON document with exact float
//! round-tripping, so a written-then-loaded model is bitwise the model that
//! was trained.

use super::adapter::{adapted_shape, AdapterState, ADAPTED_LAYERS};
use super::{Layout, LearnError, ModelConfig, ModelWeights, TokenVocab};
use crate::util::{json_escape, json_f64_array};
use serde::Deserialize;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// A complete serialized model: weights, optional adapter state, vocabulary,
/// and provenance hashes.
#[derive(Debug, Clone)]
pub struct WeightsFile {
    pub weights: ModelWeights,
    pub adapters: Option<AdapterState>,
    pub vocab: TokenVocab,
    pub model_hash: String,
    pub config_hash: Option<String>,
    pub seed: u64,
}

pub fn write_weights(file: &WeightsFile) -> String {
    let cfg = &file.weights.cfg;
    let mut out = String::with_capacity(1 << 20);
    out.push_str(&format!(
        "{{\"format_version\":{},\"model_hash\":\"{}\",\"config_hash\":{},\"seed\":{},",
        WEIGHTS_FORMAT_VERSION,
        json_escape(&file.model_hash),
        match &file.config_hash {
            Some(h) => format!("\"{}\"", json_escape(h)),
            None => "null".into(),
        },
        file.seed
    ));
    out.push_str(&format!(
        "\"config\":{{\"obs_dim\":{},\"vocab_size\":{},\"template_count\":{},\"plan_slots\":{},\"chunk_len\":{},\"action_dim\":{},\"hidden\":{},\"rank\":{}}},",
        cfg.obs_dim,
        cfg.vocab_size,
        cfg.template_count,
        cfg.plan_slots,
        cfg.chunk_len,
        cfg.action_dim,
        cfg.hidden,
        cfg.rank
    ));
    let vocab: Vec<String> = file
        .vocab
        .tokens()
        .iter()
        .map(|t| format!("\"{}\"", json_escape(t)))
        .collect();
    out.push_str(&format!("\"vocab\":[{}],", vocab.join(",")));

    out.push_str("\"layers\":[");
    for (i, layer) in file.weights.layout.layers.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let w = &file.weights.data[layer.w_offset..layer.w_offset + layer.rows * layer.cols];
        let b = &file.weights.data[layer.b_offset..layer.b_offset + layer.rows];
        out.push_str(&format!(
            "{{\"name\":\"{}\",\"rows\":{},\"cols\":{},\"w\":{},\"b\":{}}}",
            layer.name,
            layer.rows,
            layer.cols,
            json_f64_array(w),
            json_f64_array(b)
        ));
    }
    out.push_str("],");

    match &file.adapters {
        None => out.push_str("\"adapters\":null}"),
        Some(adapters) => {
            out.push_str("\"adapters\":{\"layers\":[");
            for (slot, layer) in adapters.layers.iter().enumerate() {
                if slot > 0 {
                    out.push(',');
                }
                let def = file.weights.layout.get(ADAPTED_LAYERS[slot]);
                out.push_str(&format!(
                    "{{\"name\":\"{}\",\"rows\":{},\"cols\":{},\"rank\":{},\"delta_offline\":{},\"b_online\":{},\"a_online\":{}}}",
                    def.name,
                    layer.rows,
                    layer.cols,
                    layer.rank,
                    json_f64_array(&layer.delta_offline),
                    json_f64_array(&layer.b_online),
                    json_f64_array(&layer.a_online)
                ));
            }
            out.push_str("]}}");
        }
    }
    out
}

#[derive(Deserialize)]
struct RawConfig {
    obs_dim: usize,
    vocab_size: usize,
    template_count: usize,
    plan_slots: usize,
    chunk_len: usize,
    action_dim: usize,
    hidden: usize,
    rank: usize,
}

#[derive(Deserialize)]
struct RawLayer {
    name: String,
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Deserialize)]
struct RawAdapterLayer {
    name: String,
    rows: usize,
    cols: usize,
    rank: usize,
    delta_offline: Vec<f64>,
    b_online: Vec<f64>,
    a_online: Vec<f64>,
}

#[derive(Deserialize)]
struct RawAdapters {
    layers: Vec<RawAdapterLayer>,
}

#[derive(Deserialize)]
struct RawWeights {
    format_version: u32,
    model_hash: String,
    config_hash: Option<String>,
    seed: u64,
    config: RawConfig,
    vocab: Vec<String>,
    layers: Vec<RawLayer>,
    adapters: Option<RawAdapters>,
}

pub fn read_weights(text: &str) -> Result<WeightsFile, LearnError> {
    let raw: RawWeights =
        serde_json::from_str(text).map_err(|e| LearnError::Parse(e.to_string()))?;
    if raw.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(LearnError::Parse(format!(
            "unsupported weights format version {}",
            raw.format_version
        )));
    }
    let cfg = ModelConfig {
        obs_dim: raw.config.obs_dim,
        vocab_size: raw.config.vocab_size,
        template_count: raw.config.template_count,
        plan_slots: raw.config.plan_slots,
        chunk_len: raw.config.chunk_len,
        action_dim: raw.config.action_dim,
        hidden: raw.config.hidden,
        rank: raw.config.rank,
    };
    let layout = Layout::for_config(&cfg);
    let mut data = vec![0.0; layout.total];
    if raw.layers.len() != layout.layers.len() {
        return Err(LearnError::Parse(format!(
            "expected {} layers, found {}",
            layout.layers.len(),
            raw.layers.len()
        )));
    }
    for (def, raw_layer) in layout.layers.iter().zip(raw.layers.iter()) {
        if def.name != raw_layer.name
            || def.rows != raw_layer.rows
            || def.cols != raw_layer.cols
            || raw_layer.w.len() != def.rows * def.cols
            || raw_layer.b.len() != def.rows
        {
            return Err(LearnError::Parse(format!(
                "layer `{}` has unexpected shape",
                raw_layer.name
            )));
        }
        data[def.w_offset..def.w_offset + def.rows * def.cols].copy_from_slice(&raw_layer.w);
        data[def.b_offset..def.b_offset + def.rows].copy_from_slice(&raw_layer.b);
    }
    let weights = ModelWeights { cfg, layout, data };

    let adapters = match raw.adapters {
        None => None,
        Some(raw_adapters) => {
            if raw_adapters.layers.len() != ADAPTED_LAYERS.len() {
                return Err(LearnError::Parse(format!(
                    "expected {} adapter layers, found {}",
                    ADAPTED_LAYERS.len(),
                    raw_adapters.layers.len()
                )));
            }
            let mut state = AdapterState::zeros(&cfg, raw.seed);
            for (slot, raw_layer) in raw_adapters.layers.iter().enumerate() {
                let (rows, cols) = adapted_shape(&cfg, ADAPTED_LAYERS[slot]);
                let expected_name = &weights.layout.get(ADAPTED_LAYERS[slot]).name;
                if &raw_layer.name != expected_name
                    || raw_layer.rows != rows
                    || raw_layer.cols != cols
                    || raw_layer.rank != cfg.rank
                    || raw_layer.delta_offline.len() != rows * cols
                    || raw_layer.b_online.len() != rows * cfg.rank
                    || raw_layer.a_online.len() != cfg.rank * cols
                {
                    return Err(LearnError::Parse(format!(
                        "adapter layer `{}` has unexpected shape",
                        raw_layer.name
                    )));
                }
                let layer = &mut state.layers[slot];
                layer.delta_offline.copy_from_slice(&raw_layer.delta_offline);
                layer.b_online.copy_from_slice(&raw_layer.b_online);
                layer.a_online.copy_from_slice(&raw_layer.a_online);
            }
            // The basis is derived state; recompute rather than trust input.
            state.recompute_bases();
            Some(state)
        }
    };

    Ok(WeightsFile {
        weights,
        adapters,
        vocab: TokenVocab::from_tokens(raw.vocab),
        model_hash: raw.model_hash,
        config_hash: raw.config_hash,
        seed: raw.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::TaskSet;

    #[test]
    fn weights_round_trip_bitwise() {
        let tasks = TaskSet::builtin();
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let weights = ModelWeights::init(cfg, 7);
        let mut adapters = AdapterState::zeros(&cfg, 8);
        for layer in &mut adapters.layers {
            for (i, v) in layer.delta_offline.iter_mut().enumerate() {
                *v = (i as f64).sin() * 0.01;
            }
        }
        adapters.recompute_bases();
        let file = WeightsFile {
            weights: weights.clone(),
            adapters: Some(adapters.clone()),
            vocab: vocab.clone(),
            model_hash: cfg.model_hash(tasks.hash()),
            config_hash: Some("cfg123".into()),
            seed: 7,
        };
        let text = write_weights(&file);
        let back = read_weights(&text).unwrap();
        assert_eq!(back.weights.data, weights.data);
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.model_hash, file.model_hash);
        assert_eq!(back.config_hash.as_deref(), Some("cfg123"));
        let loaded = back.adapters.as_ref().unwrap();
        for (a, b) in loaded.layers.iter().zip(adapters.layers.iter()) {
            assert_eq!(a.delta_offline, b.delta_offline);
            assert_eq!(a.b_online, b.b_online);
            assert_eq!(a.a_online, b.a_online);
            assert_eq!(a.basis_k, b.basis_k);
        }
        // Serialization is stable.
        let text2 = write_weights(&back);
        assert_eq!(text, text2);
    }

    #[test]
    fn read_rejects_shape_mismatch() {
        let tasks = TaskSet::builtin();
        let vocab = TokenVocab::from_tasks(&tasks);
        let cfg = ModelConfig::for_tasks(&tasks, &vocab);
        let weights = ModelWeights::init(cfg, 1);
        let file = WeightsFile {
            weights,
            adapters: None,
            vocab,
            model_hash: "h".into(),
            config_hash: None,
            seed: 1,
        };
        let text = write_weights(&file);
        let tampered = text.replace("\"hidden\":64", "\"hidden\":32");
        assert!(read_weights(&tampered).is_err());
    }
}
