//! Reserve-ratio accounting.
//!
//! Two views are reported side by side. The ratio view multiplies the
//! eviction ratio `r1`, the codebook ratio `r2` and a fixed storage factor
//! `r3`; the bit view counts exactly what the archive stores.

use serde::{Deserialize, Serialize};

use crate::allocator::BudgetPlan;
use crate::codebook::CompressedLayer;
use crate::error::{config_err, Result};
use crate::model::ModelConfig;

/// `r3` in its published form: `(d_h + int_bits / (key_bits + 1)) / d_h`.
pub fn r3_printed(config: &ModelConfig) -> f64 {
    let d = config.head_dim as f64;
    (d + f64::from(config.index_bits) / (f64::from(config.key_bits) + 1.0)) / d
}

/// `r3` read as one index plus one magnitude per stored vector, in units of
/// stored scalars: `(d_h + int_bits / key_bits + 1) / d_h`.
pub fn r3_conjectured(config: &ModelConfig) -> f64 {
    let d = config.head_dim as f64;
    (d + f64::from(config.index_bits) / f64::from(config.key_bits) + 1.0) / d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatios {
    pub layer: usize,
    /// Retained vectors over original vectors.
    pub r1: f64,
    /// Codebook entries over retained vectors.
    pub r2: f64,
    pub r3: f64,
    pub r_layer: f64,
    pub r3_conjectured: f64,
    pub r_layer_conjectured: f64,
}

impl LayerRatios {
    /// Replaces `r3` and recomputes the layer ratio.
    pub fn with_r3(mut self, r3: f64) -> Self {
        self.r3 = r3;
        self.r_layer = self.r1 * self.r2 * r3;
        self
    }
}

/// Ratios for one layer from per-head token counts. With `unfolded`, the
/// counts cover every query head; otherwise every KV head.
pub fn layer_ratios(
    layer: usize,
    original_counts: &[usize],
    retained_counts: &[usize],
    codebook_size: usize,
    config: &ModelConfig,
    unfolded: bool,
) -> Result<LayerRatios> {
    let heads = if unfolded { config.num_q_heads } else { config.num_kv_heads };
    if original_counts.len() != heads || retained_counts.len() != heads {
        return Err(config_err(format!(
            "expected counts for {heads} heads, got {} and {}",
            original_counts.len(),
            retained_counts.len()
        )));
    }
    // |K| + |V| per head
    let original: usize = original_counts.iter().map(|n| 2 * n).sum();
    let retained: usize = retained_counts.iter().map(|n| 2 * n).sum();
    if original == 0 || retained == 0 {
        return Err(config_err("ratio accounting needs non-zero token counts"));
    }
    let r1 = retained as f64 / original as f64;
    let r2 = codebook_size as f64 / retained as f64;
    let r3 = r3_printed(config);
    let r3c = r3_conjectured(config);
    Ok(LayerRatios {
        layer,
        r1,
        r2,
        r3,
        r_layer: r1 * r2 * r3,
        r3_conjectured: r3c,
        r_layer_conjectured: r1 * r2 * r3c,
    })
}

pub fn aggregate_ratio(per_layer: &[LayerRatios]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(config_err("no layers to aggregate"));
    }
    Ok(per_layer.iter().map(|l| l.r_layer).sum::<f64>() / per_layer.len() as f64)
}

/// Exact storage in bits. `payload` excludes structural header fields,
/// which are counted in `header`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExactBits {
    pub original: u64,
    pub payload: u64,
    pub header: u64,
}

impl ExactBits {
    pub fn ratio(&self) -> f64 {
        self.payload as f64 / self.original as f64
    }
}

impl std::ops::Add for ExactBits {
    type Output = ExactBits;

    fn add(self, o: ExactBits) -> ExactBits {
        ExactBits {
            original: self.original + o.original,
            payload: self.payload + o.payload,
            header: self.header + o.header,
        }
    }
}

/// Bits of an uncompressed cache holding `tokens` key and value vectors.
pub fn original_bits(tokens: usize, config: &ModelConfig) -> u64 {
    tokens as u64 * 2 * config.head_dim as u64 * u64::from(config.key_bits)
}

/// Payload bits of a compressed layer: codebook entries, one
/// `(ref, magnitude)` pair each for key and value, and one position per
/// record.
pub fn payload_bits(layer: &CompressedLayer, config: &ModelConfig) -> u64 {
    let d = config.head_dim as u64;
    let kb = u64::from(config.key_bits);
    let ib = u64::from(config.index_bits);
    let entries = layer.codebook_size() as u64;
    let records = layer.token_count() as u64;
    entries * d * kb + records * 2 * (ib + kb) + records * ib
}

/// Whole-run report: per-layer ratios, their mean and exact bit counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub per_layer: Vec<LayerRatios>,
    pub per_layer_bits: Vec<ExactBits>,
    pub r: f64,
    pub r_conjectured: f64,
    pub exact_bits_original: u64,
    pub exact_bits_compressed: u64,
    pub header_bits: u64,
    pub exact_ratio: f64,
    pub key_codebook_sizes: Vec<usize>,
    pub value_codebook_sizes: Vec<usize>,
    pub retained_tokens: Vec<usize>,
    pub budget_plan: BudgetPlan,
    pub config: ModelConfig,
    pub key_threshold: f64,
    pub value_threshold: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{compress_layer, TokenRecord};
    use crate::model::{HeadCache, LayerCache};

    #[test]
    fn published_r3_hand_value() {
        let cfg = ModelConfig::new(128, 1, 1, 1).unwrap();
        let r3 = r3_printed(&cfg);
        assert!((r3 - 1.014_705_882_352_941_1).abs() < 1e-12);
        assert!((0.5 * 0.2 * r3 - 0.101_470_588_235_294_1).abs() < 1e-12);
        assert!((r3_conjectured(&cfg) - 131.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn hand_counts_give_expected_layer_ratio() {
        let cfg = ModelConfig::new(128, 2, 2, 1).unwrap();
        // 2 heads x 100 tokens, 50 retained each, 40 entries over 200 vectors
        let l = layer_ratios(0, &[100, 100], &[50, 50], 40, &cfg, false).unwrap();
        assert_eq!((l.r1, l.r2), (0.5, 0.2));
        assert!((l.r_layer - 0.101_47).abs() < 1e-5);
    }

    #[test]
    fn identity_compression_ratio() {
        let cfg = ModelConfig::new(8, 1, 1, 1).unwrap();
        let l = layer_ratios(0, &[10], &[10], 20, &cfg, false).unwrap().with_r3(1.0);
        assert_eq!(l.r_layer, 1.0);
    }

    #[test]
    fn unfolding_keeps_r1() {
        let cfg = ModelConfig::new(8, 4, 2, 1).unwrap();
        let folded = layer_ratios(0, &[64, 64], &[20, 20], 10, &cfg, false).unwrap();
        let unfolded = layer_ratios(0, &[64; 4], &[20; 4], 10, &cfg, true).unwrap();
        assert_eq!(folded.r1, unfolded.r1);
        assert!(layer_ratios(0, &[64; 4], &[20; 4], 10, &cfg, false).is_err());
    }

    #[test]
    fn zero_originals_rejected() {
        let cfg = ModelConfig::new(8, 1, 1, 1).unwrap();
        assert!(layer_ratios(0, &[0], &[0], 0, &cfg, false).is_err());
    }

    #[test]
    fn aggregate_is_mean() {
        let mk = |r| LayerRatios {
            layer: 0,
            r1: 1.0,
            r2: 1.0,
            r3: 1.0,
            r_layer: r,
            r3_conjectured: 1.0,
            r_layer_conjectured: r,
        };
        assert!((aggregate_ratio(&[mk(0.2), mk(0.4)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(aggregate_ratio(&vec![mk(0.7); 5]).unwrap(), 0.7);
        assert!(aggregate_ratio(&[]).is_err());
    }

    #[test]
    fn one_token_bit_count() {
        let cfg = ModelConfig::new(4, 1, 1, 1).unwrap();
        let head = HeadCache::new(vec![0], vec![vec![1.0, 2.0, 3.0, 4.0]], vec![vec![4.0, 3.0, 2.0, 1.0]]).unwrap();
        let c = compress_layer(&LayerCache::new(0, vec![head]), 0.98, 0.95).unwrap();
        assert_eq!(original_bits(1, &cfg), 128);
        assert_eq!(payload_bits(&c, &cfg), 256);
    }

    #[test]
    fn empty_layer_has_no_payload() {
        let cfg = ModelConfig::new(4, 1, 1, 1).unwrap();
        let c = CompressedLayer {
            layer_index: 0,
            unfolded: false,
            keys: crate::codebook::Codebook::new(crate::CacheKind::Key, 0.9).unwrap(),
            values: crate::codebook::Codebook::new(crate::CacheKind::Value, 0.9).unwrap(),
            heads: vec![Vec::<TokenRecord>::new()],
        };
        assert_eq!(original_bits(0, &cfg), 0);
        assert_eq!(payload_bits(&c, &cfg), 0);
    }
}
