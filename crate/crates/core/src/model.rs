//! Model configuration, cache containers, rotary embedding and single-layer
//! attention.
//!
//! Everything here works in `f64`. Storage widths (`key_bits`, `index_bits`)
//! only matter for accounting and archive encoding.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;
pub const DEFAULT_KEY_BITS: u32 = 16;
pub const DEFAULT_INDEX_BITS: u32 = 32;

/// Dimensions and head layout of the attention stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub heads_per_group: usize,
    pub num_layers: usize,
    pub rope_base: f64,
    /// Storage width of one stored float (keys, values, magnitudes).
    pub key_bits: u32,
    /// Storage width of one stored index (codebook refs, positions).
    pub index_bits: u32,
}

impl ModelConfig {
    /// Builds a config from the head layout; `hidden_dim` and
    /// `heads_per_group` are derived.
    pub fn new(
        head_dim: usize,
        num_q_heads: usize,
        num_kv_heads: usize,
        num_layers: usize,
    ) -> Result<Self> {
        if num_kv_heads == 0 || num_q_heads % num_kv_heads != 0 {
            return Err(config_err(format!(
                "{num_q_heads} query heads cannot be grouped over {num_kv_heads} kv heads"
            )));
        }
        let cfg = Self {
            hidden_dim: head_dim * num_q_heads,
            head_dim,
            num_q_heads,
            num_kv_heads,
            heads_per_group: num_q_heads / num_kv_heads,
            num_layers,
            rope_base: DEFAULT_ROPE_BASE,
            key_bits: DEFAULT_KEY_BITS,
            index_bits: DEFAULT_INDEX_BITS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_rope_base(mut self, base: f64) -> Self {
        self.rope_base = base;
        self
    }

    pub fn with_storage_bits(mut self, key_bits: u32, index_bits: u32) -> Self {
        self.key_bits = key_bits;
        self.index_bits = index_bits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("heads_per_group", self.heads_per_group),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.num_q_heads != self.num_kv_heads * self.heads_per_group {
            return Err(config_err(format!(
                "num_q_heads ({}) != num_kv_heads ({}) * heads_per_group ({})",
                self.num_q_heads, self.num_kv_heads, self.heads_per_group
            )));
        }
        if self.hidden_dim != self.num_q_heads * self.head_dim {
            return Err(config_err(format!(
                "hidden_dim ({}) != num_q_heads ({}) * head_dim ({})",
                self.hidden_dim, self.num_q_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(config_err("head_dim must be even for rotary pairing"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(config_err("rope_base must be a positive real"));
        }
        if self.key_bits == 0 || self.index_bits == 0 {
            return Err(config_err("storage widths must be positive"));
        }
        Ok(())
    }

    pub fn is_gqa(&self) -> bool {
        self.heads_per_group > 1
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Rotates `vec` by the interleaved-pair rotary embedding at `position`.
///
/// Pair `(2j, 2j+1)` turns by `position * base^(-2j/d_h)`.
pub fn apply_rope(vec: &[f64], position: u32, config: &ModelConfig) -> Result<Vec<f64>> {
    rotate(vec, f64::from(position), config)
}

/// Rotary rotation at a real-valued (possibly negative) offset.
pub fn rotate(vec: &[f64], offset: f64, config: &ModelConfig) -> Result<Vec<f64>> {
    let d = config.head_dim;
    if vec.len() != d {
        return Err(config_err(format!(
            "vector has length {}, head_dim is {d}",
            vec.len()
        )));
    }
    if d % 2 != 0 {
        return Err(config_err("head_dim must be even for rotary pairing"));
    }
    let mut out = vec![0.0; d];
    let pos = offset;
    for j in 0..d / 2 {
        let freq = config.rope_base.powf(-((2 * j) as f64) / d as f64);
        let (sin, cos) = (pos * freq).sin_cos();
        let (x, y) = (vec[2 * j], vec[2 * j + 1]);
        out[2 * j] = x * cos - y * sin;
        out[2 * j + 1] = x * sin + y * cos;
    }
    Ok(out)
}

/// Cached tokens of one KV head. Keys are stored before rotation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadCache {
    pub positions: Vec<u32>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl HeadCache {
    pub fn new(positions: Vec<u32>, keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Result<Self> {
        let head = Self { positions, keys, values };
        head.check(None)?;
        Ok(head)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub(crate) fn check(&self, head_dim: Option<usize>) -> Result<()> {
        if self.keys.len() != self.positions.len() || self.values.len() != self.positions.len() {
            return Err(Error::CountMismatch(format!(
                "head has {} positions, {} keys, {} values",
                self.positions.len(),
                self.keys.len(),
                self.values.len()
            )));
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("positions must be strictly increasing"));
        }
        if let Some(d) = head_dim {
            if self.keys.iter().chain(&self.values).any(|v| v.len() != d) {
                return Err(config_err(format!("cached vector length differs from head_dim {d}")));
            }
        }
        Ok(())
    }

    /// Keeps the tokens at the given (ascending) indices.
    pub fn select(&self, indices: &[usize]) -> HeadCache {
        HeadCache {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            keys: indices.iter().map(|&i| self.keys[i].clone()).collect(),
            values: indices.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }

    /// Appends one decoded token.
    pub fn push(&mut self, position: u32, key: Vec<f64>, value: Vec<f64>) -> Result<()> {
        if let Some(&last) = self.positions.last() {
            if position <= last {
                return Err(config_err(format!(
                    "appended position {position} does not follow {last}"
                )));
            }
        }
        self.positions.push(position);
        self.keys.push(key);
        self.values.push(value);
        Ok(())
    }

    pub fn rotated_keys(&self, config: &ModelConfig) -> Result<Vec<Vec<f64>>> {
        self.keys
            .iter()
            .zip(&self.positions)
            .map(|(k, &p)| apply_rope(k, p, config))
            .collect()
    }
}

/// All KV heads of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub layer_index: usize,
    pub heads: Vec<HeadCache>,
    /// True once GQA heads were repeated to one head per query head.
    pub unfolded: bool,
}

impl LayerCache {
    pub fn new(layer_index: usize, heads: Vec<HeadCache>) -> Self {
        Self { layer_index, heads, unfolded: false }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let expected = if self.unfolded { config.num_q_heads } else { config.num_kv_heads };
        if self.heads.len() != expected {
            return Err(Error::CountMismatch(format!(
                "layer {} has {} heads, expected {expected}",
                self.layer_index,
                self.heads.len()
            )));
        }
        for head in &self.heads {
            head.check(Some(config.head_dim))?;
        }
        Ok(())
    }

    /// Token count shared by all heads, if they agree.
    pub fn uniform_len(&self) -> Option<usize> {
        let first = self.heads.first()?.len();
        self.heads.iter().all(|h| h.len() == first).then_some(first)
    }
}

/// Trailing query vectors of one query head, pre-rotation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryWindow {
    pub positions: Vec<u32>,
    pub queries: Vec<Vec<f64>>,
}

impl QueryWindow {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps only the last `n` queries.
    pub fn tail(&self, n: usize) -> QueryWindow {
        let start = self.len().saturating_sub(n);
        QueryWindow {
            positions: self.positions[start..].to_vec(),
            queries: self.queries[start..].to_vec(),
        }
    }
}

/// One layer of a dump: the cache plus optional per-query-head windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpLayer {
    pub cache: LayerCache,
    pub windows: Option<Vec<QueryWindow>>,
}

/// A full multi-layer KV dump.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDump {
    pub config: ModelConfig,
    /// Set when keys were stored after rotation (reconstruct with RoPE).
    pub keys_rotated: bool,
    pub layers: Vec<DumpLayer>,
}

impl KvDump {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers {
            return Err(Error::CountMismatch(format!(
                "dump has {} layers, config declares {}",
                self.layers.len(),
                self.config.num_layers
            )));
        }
        for layer in &self.layers {
            layer.cache.validate(&self.config)?;
            if let Some(windows) = &layer.windows {
                if windows.len() != self.config.num_q_heads {
                    return Err(Error::CountMismatch(format!(
                        "layer {} has {} query windows, expected {}",
                        layer.cache.layer_index,
                        windows.len(),
                        self.config.num_q_heads
                    )));
                }
                for w in windows {
                    if w.queries.len() != w.positions.len()
                        || w.queries.iter().any(|q| q.len() != self.config.head_dim)
                    {
                        return Err(Error::CountMismatch("malformed query window".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-softmaxed attention of a trailing query window over a head's keys.
///
/// `per_head[i][row][col]`: `row` indexes the `window_len` trailing queries,
/// `col` the `seq_len` cached keys. Masked entries are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub per_head: Vec<Vec<Vec<f64>>>,
    pub window_len: usize,
    pub seq_len: usize,
}

impl AttentionScores {
    /// Wraps full `l x l` matrices, keeping their last `window_len` rows.
    pub fn from_full(matrices: Vec<Vec<Vec<f64>>>, window_len: usize) -> Result<Self> {
        let seq_len = matrices.first().map_or(0, Vec::len);
        let mut per_head = Vec::with_capacity(matrices.len());
        for m in matrices {
            if m.len() != seq_len || m.iter().any(|row| row.len() != seq_len) {
                return Err(config_err("attention matrices must be square and equal-sized"));
            }
            if window_len > seq_len {
                return Err(Error::WindowCoversSequence { seq_len, window_len });
            }
            per_head.push(m[seq_len - window_len..].to_vec());
        }
        Ok(Self { per_head, window_len, seq_len })
    }

    /// Concatenates single-head score sets that share one shape.
    pub fn stack(parts: Vec<AttentionScores>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut first = iter.next().ok_or(Error::EmptyContext)?;
        for p in iter {
            if p.window_len != first.window_len || p.seq_len != first.seq_len {
                return Err(config_err("cannot stack attention scores of different shapes"));
            }
            first.per_head.extend(p.per_head);
        }
        Ok(first)
    }
}

/// Softmax of one rotated query over rotated keys, masking keys whose
/// position exceeds `query_position`.
pub fn attention_row(
    query_rotated: &[f64],
    query_position: u32,
    keys_rotated: &[Vec<f64>],
    key_positions: &[u32],
    head_dim: usize,
) -> Result<Vec<f64>> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let logits: Vec<Option<f64>> = keys_rotated
        .iter()
        .zip(key_positions)
        .map(|(k, &p)| (p <= query_position).then(|| dot(query_rotated, k) * scale))
        .collect();
    let max = logits
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyContext);
    }
    let mut row: Vec<f64> = logits
        .iter()
        .map(|l| l.map_or(0.0, |x| (x - max).exp()))
        .collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= total);
    Ok(row)
}

/// Causal attention of `window` over `head`, rotating both sides at their
/// stored positions.
pub fn attention_weights(
    window: &QueryWindow,
    head: &HeadCache,
    config: &ModelConfig,
) -> Result<AttentionScores> {
    if head.is_empty() {
        return Err(Error::EmptyContext);
    }
    let keys = head.rotated_keys(config)?;
    let rows = window
        .queries
        .iter()
        .zip(&window.positions)
        .map(|(q, &p)| {
            let q = apply_rope(q, p, config)?;
            attention_row(&q, p, &keys, &head.positions, config.head_dim)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionScores {
        per_head: vec![rows],
        window_len: window.len(),
        seq_len: head.len(),
    })
}

/// Context vector `sum_b a_b * v_b`.
pub fn weighted_sum(weights: &[f64], values: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig::new(d, 1, 1, 1).unwrap()
    }

    #[test]
    fn config_rejects_bad_layouts() {
        assert!(ModelConfig::new(3, 1, 1, 1).is_err());
        assert!(ModelConfig::new(4, 6, 4, 1).is_err());
        let c = ModelConfig::new(4, 8, 2, 3).unwrap();
        assert_eq!(c.heads_per_group, 4);
        assert_eq!(c.hidden_dim, 32);
        let mut bad = c.clone();
        bad.hidden_dim = 31;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let c = cfg(6);
        let v = vec![0.3, -1.2, 4.0, 0.5, -0.7, 2.2];
        assert_eq!(apply_rope(&v, 0, &c).unwrap(), v);
    }

    #[test]
    fn rope_two_dim_hand_value() {
        let out = apply_rope(&[1.0, 0.0], 1, &cfg(2)).unwrap();
        assert!((out[0] - 0.540_302_305_868_139_8).abs() < 1e-12);
        assert!((out[1] - 0.841_470_984_807_896_5).abs() < 1e-12);
    }

    #[test]
    fn rope_dimension_mismatch() {
        assert!(matches!(apply_rope(&[1.0; 3], 1, &cfg(4)), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = cfg(2);
        let head = HeadCache::new(vec![0], vec![vec![0.2, 0.1]], vec![vec![1.0, 1.0]]).unwrap();
        let w = QueryWindow { positions: vec![0], queries: vec![vec![1.0, -3.0]] };
        let a = attention_weights(&w, &head, &c).unwrap();
        assert_eq!(a.per_head[0], vec![vec![1.0]]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let c = cfg(2);
        // second key is pre-rotated by -1 rad so both land on k0 after RoPE
        let k0 = vec![1.0, 2.0];
        let back = {
            let (s, co) = (-1.0f64).sin_cos();
            vec![k0[0] * co - k0[1] * s, k0[0] * s + k0[1] * co]
        };
        let head = HeadCache::new(vec![0, 1], vec![k0, back], vec![vec![0.0; 2]; 2]).unwrap();
        let w = QueryWindow { positions: vec![1], queries: vec![vec![0.4, 0.9]] };
        let a = attention_weights(&w, &head, &c).unwrap();
        assert!((a.per_head[0][0][0] - 0.5).abs() < 1e-12);
        assert!((a.per_head[0][0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_token_table_matches_hand_softmax() {
        // Independent evaluation (rotate, dot, scale by 1/sqrt(2), softmax)
        // for keys (1,0),(0,1),(1,1) at positions 0..3 and queries
        // (1,2)@1, (2,-1)@2.
        let c = cfg(2);
        let head = HeadCache::new(
            vec![0, 1, 2],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![vec![0.0; 2]; 3],
        )
        .unwrap();
        let w = QueryWindow {
            positions: vec![1, 2],
            queries: vec![vec![1.0, 2.0], vec![2.0, -1.0]],
        };
        let a = attention_weights(&w, &head, &c).unwrap();
        let expected = [
            [0.097_776_164_173_935_6, 0.902_223_835_826_064_4, 0.0],
            [0.198_212_183_682_863_06, 0.421_094_161_382_161_5, 0.380_693_654_934_975_4],
        ];
        for (row, exp) in a.per_head[0].iter().zip(expected) {
            for (x, e) in row.iter().zip(exp) {
                assert!((x - e).abs() < 1e-12, "{x} vs {e}");
            }
        }
    }

    #[test]
    fn empty_context_is_an_error() {
        let w = QueryWindow { positions: vec![0], queries: vec![vec![1.0, 0.0]] };
        let err = attention_weights(&w, &HeadCache::default(), &cfg(2)).unwrap_err();
        assert_eq!(err.to_string(), "empty context");
    }

    #[test]
    fn head_rejects_unsorted_positions() {
        assert!(HeadCache::new(vec![2, 1], vec![vec![1.0]; 2], vec![vec![1.0]; 2]).is_err());
    }
}
