//! Top-k token retention per head and GQA head unfolding.

use serde::{Deserialize, Serialize};

use crate::allocator::retained_count;
use crate::error::{config_err, Error, Result};
use crate::model::{LayerCache, ModelConfig};
use crate::scoring::{AccumulatedScores, ScoreVariant};

/// How eviction treats query heads that share a KV head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GqaMode {
    /// Repeat each KV head per query head, then evict each copy on its own
    /// query head's scores.
    #[default]
    PerHeadUnfolded,
    /// Keep KV heads folded and evict on the group-averaged score.
    GroupAveraged,
}

/// Retained context indices per head. Every index `>= window_start` is
/// kept implicitly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionSet {
    pub per_head: Vec<Vec<usize>>,
    pub window_start: usize,
}

/// Indices of the `floor(ratio * len)` highest scores, ascending. Equal
/// scores prefer the lower index.
pub fn select_retained(scores: &[f64], ratio: f64) -> Vec<usize> {
    let k = retained_count(ratio, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Repeats every KV head `heads_per_group` times so query head `j` owns
/// a private copy of KV head `j / heads_per_group`.
pub fn unfold_gqa(layer: &LayerCache, config: &ModelConfig) -> Result<LayerCache> {
    if layer.unfolded {
        return Err(Error::AlreadyUnfolded(layer.layer_index));
    }
    if layer.heads.len() != config.num_kv_heads {
        return Err(Error::CountMismatch(format!(
            "layer {} has {} heads, expected {} kv heads",
            layer.layer_index,
            layer.heads.len(),
            config.num_kv_heads
        )));
    }
    let heads = (0..config.num_q_heads)
        .map(|j| layer.heads[j / config.heads_per_group].clone())
        .collect();
    Ok(LayerCache { layer_index: layer.layer_index, heads, unfolded: true })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvictionParams {
    pub ratio: f64,
    pub window_len: usize,
    pub mode: GqaMode,
}

/// Drops low-score context tokens from every head. The output keeps the
/// retained context tokens followed by the whole observation window, with
/// original positions.
pub fn evict_layer(
    layer: &LayerCache,
    scores: &AccumulatedScores,
    params: &EvictionParams,
    config: &ModelConfig,
) -> Result<(LayerCache, RetentionSet)> {
    let lc = scores.context_len();
    let n_scores = scores.per_head.len();
    if n_scores == 0 || layer.heads.is_empty() {
        return Err(Error::EmptyContext);
    }
    let share = match params.mode {
        GqaMode::PerHeadUnfolded => {
            if scores.variant != ScoreVariant::PerHead {
                return Err(config_err("per-head eviction needs per-head scores"));
            }
            if config.is_gqa() && !layer.unfolded {
                return Err(config_err("per-head eviction on a GQA layer needs unfold_gqa first"));
            }
            if n_scores != layer.heads.len() {
                return Err(Error::CountMismatch(format!(
                    "{n_scores} score heads for {} cache heads",
                    layer.heads.len()
                )));
            }
            1
        }
        GqaMode::GroupAveraged => {
            if scores.variant != ScoreVariant::GqaAveraged {
                return Err(config_err("group-averaged eviction needs averaged scores"));
            }
            if layer.heads.len() % n_scores != 0 {
                return Err(Error::CountMismatch(format!(
                    "{n_scores} score groups do not divide {} cache heads",
                    layer.heads.len()
                )));
            }
            layer.heads.len() / n_scores
        }
    };
    if scores.per_head.iter().any(|s| s.len() != lc) {
        return Err(config_err("score heads differ in length"));
    }

    let selections: Vec<Vec<usize>> = scores
        .per_head
        .iter()
        .map(|s| select_retained(s, params.ratio))
        .collect();

    let mut heads = Vec::with_capacity(layer.heads.len());
    let mut per_head = Vec::with_capacity(layer.heads.len());
    for (j, head) in layer.heads.iter().enumerate() {
        let expected = head.len().saturating_sub(params.window_len);
        if head.len() < params.window_len || expected != lc {
            return Err(Error::ScoreLength { expected, got: lc });
        }
        let eta = &selections[j / share];
        let keep: Vec<usize> = eta.iter().copied().chain(lc..head.len()).collect();
        heads.push(head.select(&keep));
        per_head.push(eta.clone());
    }
    Ok((
        LayerCache { layer_index: layer.layer_index, heads, unfolded: layer.unfolded },
        RetentionSet { per_head, window_start: lc },
    ))
}
