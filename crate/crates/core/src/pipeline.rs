//! End-to-end compression of a dump: score, allocate, unfold, evict,
//! codebook, account. Also the inverse path and the diagnostics census.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{BudgetOptions, BudgetPlan};
use crate::codebook::{compress_layer, CompressedLayer};
use crate::error::{config_err, Error, Result};
use crate::eviction::{evict_layer, unfold_gqa, EvictionParams, GqaMode, RetentionSet};
use crate::format::{archive_fixed_header_bytes, layer_header_bytes};
use crate::metrics::{
    aggregate_ratio, layer_ratios, original_bits, payload_bits, CompressionReport, ExactBits,
    LayerRatios,
};
use crate::model::{attention_weights, DumpLayer, KvDump, LayerCache, ModelConfig, QueryWindow};
use crate::scoring::{
    accumulated_scores, gqa_accumulated_scores, similarity_census, sparsity_profile,
    AccumulatedScores,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionOptions {
    pub ratio: f64,
    pub window_len: usize,
    pub key_threshold: f64,
    pub value_threshold: f64,
    pub budget: BudgetOptions,
    pub mode: GqaMode,
}

impl Default for CompressionOptions {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            window_len: crate::allocator::DEFAULT_WINDOW,
            key_threshold: crate::codebook::DEFAULT_KEY_THRESHOLD,
            value_threshold: crate::codebook::DEFAULT_VALUE_THRESHOLD,
            budget: BudgetOptions::default(),
            mode: GqaMode::PerHeadUnfolded,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveLayer {
    /// Tokens in the original (folded) layer, summed over KV heads.
    pub original_tokens: usize,
    pub compressed: CompressedLayer,
}

/// A compressed multi-layer cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub config: ModelConfig,
    pub plan: BudgetPlan,
    pub key_threshold: f64,
    pub value_threshold: f64,
    pub mode: GqaMode,
    pub layers: Vec<ArchiveLayer>,
}

impl Archive {
    /// Exact bits per layer; the fixed archive header is charged to layer 0.
    pub fn layer_bits(&self) -> Vec<ExactBits> {
        let fixed = archive_fixed_header_bytes(self.layers.len());
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let header = layer_header_bytes(l.compressed.heads.len()) + if i == 0 { fixed } else { 0 };
                ExactBits {
                    original: original_bits(l.original_tokens, &self.config),
                    payload: payload_bits(&l.compressed, &self.config),
                    header: header as u64 * 8,
                }
            })
            .collect()
    }

    /// Totals over all layers; `payload + header` is the encoded size in bits.
    pub fn exact_bits(&self) -> ExactBits {
        self.layer_bits()
            .into_iter()
            .fold(ExactBits::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone)]
pub struct CompressionOutput {
    pub archive: Archive,
    pub report: CompressionReport,
    /// Retention sets per layer; `None` where nothing was evicted.
    pub retention: Vec<Option<RetentionSet>>,
}

/// Accumulated scores for the working cache of one layer.
pub fn layer_scores(
    working: &LayerCache,
    original: &LayerCache,
    windows: &[QueryWindow],
    window_len: usize,
    mode: GqaMode,
    config: &ModelConfig,
) -> Result<AccumulatedScores> {
    if windows.len() != config.num_q_heads {
        return Err(Error::CountMismatch(format!(
            "{} query windows for {} query heads",
            windows.len(),
            config.num_q_heads
        )));
    }
    if windows.iter().any(|w| w.len() < window_len) {
        return Err(config_err(format!(
            "query windows are shorter than the observation window {window_len}"
        )));
    }
    let tail = |j: usize| windows[j].tail(window_len);
    let parts = match mode {
        GqaMode::PerHeadUnfolded => working
            .heads
            .iter()
            .enumerate()
            .map(|(j, head)| accumulated_scores(&attention_weights(&tail(j), head, config)?))
            .collect::<Result<Vec<_>>>()?,
        GqaMode::GroupAveraged => (0..config.num_kv_heads)
            .map(|g| {
                let per_q = (0..config.heads_per_group)
                    .map(|i| attention_weights(&tail(g * config.heads_per_group + i), &original.heads[g], config))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = crate::model::AttentionScores::stack(per_q)?;
                gqa_accumulated_scores(&stacked, config.heads_per_group)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    AccumulatedScores::stack(parts)
}

/// Token count of the folded cache; unfolded copies count once.
fn folded_tokens(layer: &LayerCache, config: &ModelConfig) -> usize {
    let total: usize = layer.heads.iter().map(|h| h.len()).sum();
    if layer.unfolded {
        total / config.heads_per_group
    } else {
        total
    }
}

struct LayerOutcome {
    archived: ArchiveLayer,
    ratios: LayerRatios,
    retained: usize,
    retention: Option<RetentionSet>,
}

fn compress_one(
    layer: &DumpLayer,
    plan: &BudgetPlan,
    opts: &CompressionOptions,
    config: &ModelConfig,
) -> Result<LayerOutcome> {
    let original = &layer.cache;
    let lambda = original.layer_index;
    let unfold = opts.mode == GqaMode::PerHeadUnfolded && config.is_gqa() && !original.unfolded;
    let working = if unfold { unfold_gqa(original, config)? } else { original.clone() };

    let lc = plan.context_len();
    let keep = plan.retained_context(lambda);
    let (evicted, retention) = if keep >= lc {
        (working.clone(), None)
    } else {
        let windows = layer.windows.as_deref().ok_or(Error::MissingQueries(lambda))?;
        let scores = layer_scores(&working, original, windows, opts.window_len, opts.mode, config)?;
        let params = EvictionParams {
            ratio: plan.per_layer[lambda],
            window_len: opts.window_len,
            mode: opts.mode,
        };
        let (cache, set) = evict_layer(&working, &scores, &params, config)?;
        (cache, Some(set))
    };

    let compressed = compress_layer(&evicted, opts.key_threshold, opts.value_threshold)?;
    let orig_counts: Vec<usize> = working.heads.iter().map(|h| h.len()).collect();
    let kept_counts: Vec<usize> = evicted.heads.iter().map(|h| h.len()).collect();
    let ratios = layer_ratios(
        lambda,
        &orig_counts,
        &kept_counts,
        compressed.codebook_size(),
        config,
        working.unfolded,
    )?;
    Ok(LayerOutcome {
        archived: ArchiveLayer {
            original_tokens: folded_tokens(original, config),
            compressed,
        },
        ratios,
        retained: kept_counts.iter().sum(),
        retention,
    })
}

/// Compresses every layer of `dump`. Layers run in parallel; output order
/// and bytes do not depend on the worker count.
pub fn compress(dump: &KvDump, opts: &CompressionOptions) -> Result<CompressionOutput> {
    dump.validate()?;
    if dump.keys_rotated {
        return Err(config_err("dump holds rotated keys; compression works on pre-rotation keys"));
    }
    let config = &dump.config;
    for (i, l) in dump.layers.iter().enumerate() {
        if l.cache.layer_index != i {
            return Err(Error::CountMismatch(format!(
                "layer slot {i} holds layer index {}",
                l.cache.layer_index
            )));
        }
    }
    let seq_len = dump.layers[0]
        .cache
        .uniform_len()
        .ok_or_else(|| config_err("heads of layer 0 differ in token count"))?;
    if dump.layers.iter().any(|l| l.cache.uniform_len() != Some(seq_len)) {
        return Err(config_err("all layers and heads must hold the same token count"));
    }
    let plan = BudgetPlan::new(opts.ratio, seq_len, opts.window_len, config.num_layers, &opts.budget)?;

    let outcomes = dump
        .layers
        .par_iter()
        .map(|layer| compress_one(layer, &plan, opts, config))
        .collect::<Result<Vec<_>>>()?;

    let mut per_layer = Vec::with_capacity(outcomes.len());
    let mut layers = Vec::with_capacity(outcomes.len());
    let mut retention = Vec::with_capacity(outcomes.len());
    let mut retained_tokens = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        per_layer.push(o.ratios);
        layers.push(o.archived);
        retention.push(o.retention);
        retained_tokens.push(o.retained);
    }
    let archive = Archive {
        config: config.clone(),
        plan: plan.clone(),
        key_threshold: opts.key_threshold,
        value_threshold: opts.value_threshold,
        mode: opts.mode,
        layers,
    };
    let report = build_report(&archive, per_layer, retained_tokens)?;
    Ok(CompressionOutput { archive, report, retention })
}

fn build_report(
    archive: &Archive,
    per_layer: Vec<LayerRatios>,
    retained_tokens: Vec<usize>,
) -> Result<CompressionReport> {
    let totals = archive.exact_bits();
    let r = aggregate_ratio(&per_layer)?;
    let r_conjectured =
        per_layer.iter().map(|l| l.r_layer_conjectured).sum::<f64>() / per_layer.len() as f64;
    Ok(CompressionReport {
        per_layer_bits: archive.layer_bits(),
        per_layer,
        r,
        r_conjectured,
        exact_bits_original: totals.original,
        exact_bits_compressed: totals.payload,
        header_bits: totals.header,
        exact_ratio: totals.ratio(),
        key_codebook_sizes: archive.layers.iter().map(|l| l.compressed.keys.len()).collect(),
        value_codebook_sizes: archive.layers.iter().map(|l| l.compressed.values.len()).collect(),
        retained_tokens,
        budget_plan: archive.plan.clone(),
        config: archive.config.clone(),
        key_threshold: archive.key_threshold,
        value_threshold: archive.value_threshold,
    })
}

/// Rebuilds a dump from an archive. Keys are rotated at their positions
/// when `apply_rotary` is set, and the dump is flagged accordingly.
pub fn reconstruct_dump(archive: &Archive, apply_rotary: bool) -> Result<KvDump> {
    let layers = archive
        .layers
        .iter()
        .map(|l| {
            Ok(DumpLayer {
                cache: l.compressed.decompress(&archive.config, apply_rotary)?,
                windows: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KvDump { config: archive.config.clone(), keys_rotated: apply_rotary, layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub layer: usize,
    pub head: usize,
    pub tokens: usize,
    pub key_threshold: f64,
    pub value_threshold: f64,
    pub key_pairs: usize,
    pub value_pairs: usize,
    pub total_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Census {
    pub pairs: Vec<CensusRow>,
    pub profile: Vec<ProfileRow>,
}

/// Per-head similar-pair counts and, when the dump carries query windows,
/// the per-layer ascending score profile.
pub fn census(
    dump: &KvDump,
    key_threshold: f64,
    value_threshold: f64,
    window_len: usize,
) -> Result<Census> {
    dump.validate()?;
    let config = &dump.config;
    let per_layer = dump
        .layers
        .par_iter()
        .map(|layer| {
            let cache = &layer.cache;
            let mut pairs = Vec::new();
            for (j, head) in cache.heads.iter().enumerate() {
                let n = head.len();
                pairs.push(CensusRow {
                    layer: cache.layer_index,
                    head: j,
                    tokens: n,
                    key_threshold,
                    value_threshold,
                    key_pairs: similarity_census(&head.keys, key_threshold)?,
                    value_pairs: similarity_census(&head.values, value_threshold)?,
                    total_pairs: n * n.saturating_sub(1) / 2,
                });
            }
            let mut profile = Vec::new();
            if let Some(windows) = &layer.windows {
                let working = if config.is_gqa() && !cache.unfolded {
                    unfold_gqa(cache, config)?
                } else {
                    cache.clone()
                };
                let scores =
                    layer_scores(&working, cache, windows, window_len, GqaMode::PerHeadUnfolded, config)?;
                profile = sparsity_profile(&scores)
                    .into_iter()
                    .enumerate()
                    .map(|(rank, score)| ProfileRow { layer: cache.layer_index, rank, score })
                    .collect();
            }
            Ok((pairs, profile))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Census::default();
    for (p, s) in per_layer {
        out.pairs.extend(p);
        out.profile.extend(s);
    }
    Ok(out)
}
