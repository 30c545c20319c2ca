//! Similarity codebooks for cached keys and values.
//!
//! Each vector is split into a magnitude and a unit direction. Directions
//! whose cosine similarity exceeds the threshold are linked in a merge
//! graph; the codebook is built by repeatedly taking the vertex with the
//! highest remaining degree as a new entry and removing its closed
//! neighbourhood. Every token then stores `(entry index, magnitude)` and
//! reconstructs as `magnitude * entry`.
//!
//! Keys are codebooked before rotation, so reconstruction re-applies RoPE
//! at the token's stored position.

use fixedbitset::FixedBitSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{apply_rope, dot, HeadCache, LayerCache, ModelConfig};

pub const DEFAULT_KEY_THRESHOLD: f64 = 0.98;
pub const DEFAULT_VALUE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheKind {
    Key,
    Value,
}

/// Unit-norm entries for one (layer, key-or-value) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub kind: CacheKind,
    pub entries: Vec<Vec<f64>>,
    pub threshold: f64,
}

impl Codebook {
    pub fn new(kind: CacheKind, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        Ok(Self { kind, entries: Vec::new(), threshold })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the most similar entry above the threshold, if any.
    pub fn best_match(&self, unit: &[f64]) -> Option<u32> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = dot(unit, e);
            if s > self.threshold && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i as u32)
    }

    /// Returns the matching entry or appends `unit` as a new one.
    fn match_or_push(&mut self, unit: Vec<f64>) -> u32 {
        self.best_match(&unit).unwrap_or_else(|| {
            self.entries.push(unit);
            (self.entries.len() - 1) as u32
        })
    }
}

/// Per-token codebook references and magnitudes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenRefs {
    pub refs: Vec<u32>,
    pub magnitudes: Vec<f64>,
}

impl TokenRefs {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(config_err(format!("similarity threshold {threshold} outside (0, 1)")))
    }
}

/// Splits vectors into unit directions and L2 magnitudes.
pub fn normalize(vectors: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(vectors.len());
    let mut mags = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        let m = dot(v, v).sqrt();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::DegenerateVector { index });
        }
        units.push(v.iter().map(|x| x / m).collect());
        mags.push(m);
    }
    Ok((units, mags))
}

/// Thresholded similarity graph over unit vectors, with self-loops.
struct MergeGraph {
    rows: Vec<FixedBitSet>,
    degrees: Vec<usize>,
}

impl MergeGraph {
    fn build(units: &[Vec<f64>], threshold: f64) -> Self {
        let n = units.len();
        let upper: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|a| {
                (a + 1..n)
                    .filter(|&b| dot(&units[a], &units[b]) > threshold)
                    .collect()
            })
            .collect();
        let mut rows = vec![FixedBitSet::with_capacity(n); n];
        for (a, nbrs) in upper.iter().enumerate() {
            rows[a].insert(a);
            for &b in nbrs {
                rows[a].insert(b);
                rows[b].insert(a);
            }
        }
        let degrees = rows.iter().map(|r| r.count_ones(..)).collect();
        Self { rows, degrees }
    }
}

/// Greedy codebook over `vectors`.
///
/// Each round picks the live vertex of highest degree (lowest index on
/// ties), makes its direction a new entry, points every live neighbour
/// (itself included) at that entry and deletes them from the graph. Runs at
/// most `n` rounds; every token ends with a valid reference.
pub fn build_codebook(
    vectors: &[Vec<f64>],
    kind: CacheKind,
    threshold: f64,
) -> Result<(Codebook, TokenRefs)> {
    check_threshold(threshold)?;
    let (units, magnitudes) = normalize(vectors)?;
    let n = units.len();
    let MergeGraph { rows, mut degrees } = MergeGraph::build(&units, threshold);

    let mut alive = FixedBitSet::with_capacity(n);
    alive.insert_range(..);
    let mut refs = vec![u32::MAX; n];
    let mut entries = Vec::new();
    let mut removed = Vec::new();

    while alive.count_ones(..) > 0 {
        let mut pick = usize::MAX;
        let mut best = 0;
        for v in alive.ones() {
            if degrees[v] > best {
                best = degrees[v];
                pick = v;
            }
        }
        let entry = entries.len() as u32;
        entries.push(units[pick].clone());

        removed.clear();
        removed.extend(rows[pick].intersection(&alive));
        for &v in &removed {
            refs[v] = entry;
            alive.set(v, false);
        }
        for &v in &removed {
            for w in rows[v].intersection(&alive) {
                degrees[w] -= 1;
            }
        }
    }
    debug_assert!(refs.iter().all(|&r| (r as usize) < entries.len()));

    // Entries are numbered in order of first use.
    let mut order = vec![u32::MAX; entries.len()];
    let mut next = 0u32;
    for r in refs.iter_mut() {
        let slot = &mut order[*r as usize];
        if *slot == u32::MAX {
            *slot = next;
            next += 1;
        }
        *r = *slot;
    }
    let mut sorted = vec![Vec::new(); entries.len()];
    for (old, e) in entries.into_iter().enumerate() {
        sorted[order[old] as usize] = e;
    }
    let entries = sorted;

    Ok((
        Codebook { kind, entries, threshold },
        TokenRefs { refs, magnitudes },
    ))
}

/// Decode-time insertion: reference the most similar qualifying entry, or
/// extend the codebook with this token's direction.
pub fn assign_or_extend(vec: &[f64], book: &mut Codebook, refs: &mut TokenRefs) -> Result<u32> {
    let (mut units, mags) = normalize(std::slice::from_ref(&vec.to_vec()))?;
    let r = book.match_or_push(units.pop().expect("one vector"));
    refs.refs.push(r);
    refs.magnitudes.push(mags[0]);
    Ok(r)
}

/// How a batch of new decode tokens that do not match any entry is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtendStrategy {
    /// One token at a time through [`assign_or_extend`].
    #[default]
    Incremental,
    /// Merge what matches, then run a fresh greedy build over the rest.
    BatchRebuild,
}

/// Adds a batch of decoded vectors, returning their references.
pub fn extend_codebook(
    vectors: &[Vec<f64>],
    book: &mut Codebook,
    refs: &mut TokenRefs,
    strategy: ExtendStrategy,
) -> Result<Vec<u32>> {
    match strategy {
        ExtendStrategy::Incremental => vectors
            .iter()
            .map(|v| assign_or_extend(v, book, refs))
            .collect(),
        ExtendStrategy::BatchRebuild => {
            let (units, mags) = normalize(vectors)?;
            let mut out: Vec<Option<u32>> = units.iter().map(|u| book.best_match(u)).collect();
            let leftover: Vec<usize> = (0..units.len()).filter(|&i| out[i].is_none()).collect();
            if !leftover.is_empty() {
                let rest: Vec<Vec<f64>> = leftover.iter().map(|&i| units[i].clone()).collect();
                let (sub, sub_refs) = build_codebook(&rest, book.kind, book.threshold)?;
                let offset = book.entries.len() as u32;
                book.entries.extend(sub.entries);
                for (&i, &r) in leftover.iter().zip(&sub_refs.refs) {
                    out[i] = Some(offset + r);
                }
            }
            let out: Vec<u32> = out.into_iter().map(|r| r.expect("assigned")).collect();
            refs.refs.extend(&out);
            refs.magnitudes.extend(mags);
            Ok(out)
        }
    }
}

/// Rebuilds `magnitude * entry` per token, rotating at `positions` when
/// `apply_rotary` is set (keys only).
pub fn reconstruct(
    book: &Codebook,
    refs: &TokenRefs,
    positions: Option<&[u32]>,
    apply_rotary: bool,
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    let positions = match (apply_rotary, positions) {
        (true, Some(p)) if p.len() == refs.len() => Some(p),
        (true, _) => return Err(config_err("rotary reconstruction needs one position per token")),
        (false, _) => None,
    };
    refs.refs
        .iter()
        .zip(&refs.magnitudes)
        .enumerate()
        .map(|(t, (&r, &m))| {
            let v = scaled_entry(book, r, m)?;
            match positions {
                Some(p) => apply_rope(&v, p[t], config),
                None => Ok(v),
            }
        })
        .collect()
}

fn scaled_entry(book: &Codebook, reference: u32, magnitude: f64) -> Result<Vec<f64>> {
    let entry = book
        .entries
        .get(reference as usize)
        .ok_or(Error::RefOutOfRange { reference, len: book.len() })?;
    Ok(entry.iter().map(|x| x * magnitude).collect())
}

/// One retained token: its position plus key and value `(ref, magnitude)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    pub position: u32,
    pub key_ref: u32,
    pub key_magnitude: f64,
    pub value_ref: u32,
    pub value_magnitude: f64,
}

/// A layer after replacement: one key codebook and one value codebook
/// shared by all heads, plus per-head token records.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub layer_index: usize,
    pub unfolded: bool,
    pub keys: Codebook,
    pub values: Codebook,
    pub heads: Vec<Vec<TokenRecord>>,
}

impl CompressedLayer {
    pub fn token_count(&self) -> usize {
        self.heads.iter().map(Vec::len).sum()
    }

    /// `|C_K| + |C_V|`.
    pub fn codebook_size(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        for rec in self.heads.iter().flatten() {
            if rec.key_ref as usize >= self.keys.len() {
                return Err(Error::RefOutOfRange { reference: rec.key_ref, len: self.keys.len() });
            }
            if rec.value_ref as usize >= self.values.len() {
                return Err(Error::RefOutOfRange {
                    reference: rec.value_ref,
                    len: self.values.len(),
                });
            }
            if !(rec.key_magnitude > 0.0 && rec.value_magnitude > 0.0) {
                return Err(Error::CorruptArchive("non-positive magnitude".into()));
            }
        }
        for head in &self.heads {
            if head.windows(2).any(|w| w[0].position >= w[1].position) {
                return Err(Error::CorruptArchive("positions not strictly increasing".into()));
            }
        }
        Ok(())
    }

    /// Reconstructs the layer. Keys come back pre-rotation unless
    /// `apply_rotary` is set.
    pub fn decompress(&self, config: &ModelConfig, apply_rotary: bool) -> Result<LayerCache> {
        let heads = self
            .heads
            .iter()
            .map(|records| {
                let mut head = HeadCache::default();
                for rec in records {
                    let mut k = scaled_entry(&self.keys, rec.key_ref, rec.key_magnitude)?;
                    if apply_rotary {
                        k = apply_rope(&k, rec.position, config)?;
                    }
                    head.positions.push(rec.position);
                    head.keys.push(k);
                    head.values.push(scaled_entry(&self.values, rec.value_ref, rec.value_magnitude)?);
                }
                Ok(head)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerCache { layer_index: self.layer_index, heads, unfolded: self.unfolded })
    }

    /// Appends a decoded token to `head`, merging into existing entries
    /// where possible.
    pub fn append(&mut self, head: usize, position: u32, key: &[f64], value: &[f64]) -> Result<()> {
        let records = self
            .heads
            .get(head)
            .ok_or_else(|| config_err(format!("no head {head} in layer {}", self.layer_index)))?;
        if records.last().is_some_and(|r| r.position >= position) {
            return Err(config_err(format!("appended position {position} is not the newest")));
        }
        let (mut ku, km) = normalize(&[key.to_vec()])?;
        let (mut vu, vm) = normalize(&[value.to_vec()])?;
        let key_ref = self.keys.match_or_push(ku.pop().expect("one key"));
        let value_ref = self.values.match_or_push(vu.pop().expect("one value"));
        self.heads[head].push(TokenRecord {
            position,
            key_ref,
            key_magnitude: km[0],
            value_ref,
            value_magnitude: vm[0],
        });
        Ok(())
    }
}

/// Pools every head's keys (and separately values) into one greedy build
/// per layer.
pub fn compress_layer(
    layer: &LayerCache,
    key_threshold: f64,
    value_threshold: f64,
) -> Result<CompressedLayer> {
    let keys: Vec<Vec<f64>> = layer.heads.iter().flat_map(|h| h.keys.iter().cloned()).collect();
    let values: Vec<Vec<f64>> = layer.heads.iter().flat_map(|h| h.values.iter().cloned()).collect();
    let (key_build, value_build) = rayon::join(
        || build_codebook(&keys, CacheKind::Key, key_threshold),
        || build_codebook(&values, CacheKind::Value, value_threshold),
    );
    let (kbook, krefs) = key_build?;
    let (vbook, vrefs) = value_build?;

    let mut offset = 0;
    let heads = layer
        .heads
        .iter()
        .map(|h| {
            let recs = (0..h.len())
                .map(|t| {
                    let i = offset + t;
                    TokenRecord {
                        position: h.positions[t],
                        key_ref: krefs.refs[i],
                        key_magnitude: krefs.magnitudes[i],
                        value_ref: vrefs.refs[i],
                        value_magnitude: vrefs.magnitudes[i],
                    }
                })
                .collect();
            offset += h.len();
            recs
        })
        .collect();
    Ok(CompressedLayer {
        layer_index: layer.layer_index,
        unfolded: layer.unfolded,
        keys: kbook,
        values: vbook,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig::new(d, 1, 1, 1).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let (u, m) = normalize(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(u[0], vec![0.6, 0.8]);
        assert_eq!(m, vec![5.0, 1.0]);
        assert_eq!(u[1], vec![0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_zero() {
        let err = normalize(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { index: 1 }));
    }

    #[test]
    fn copies_collapse_to_one_entry() {
        let vs = vec![vec![0.3, -0.2, 0.9]; 7];
        let (book, refs) = build_codebook(&vs, CacheKind::Key, 0.98).unwrap();
        assert_eq!(book.len(), 1);
        assert!(refs.refs.iter().all(|&r| r == 0));
    }

    #[test]
    fn orthogonal_basis_is_edgeless() {
        let vs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]];
        let (book, refs) = build_codebook(&vs, CacheKind::Value, 0.5).unwrap();
        assert_eq!(book.len(), 3);
        assert_eq!(refs.refs, vec![0, 1, 2]);
    }

    #[test]
    fn three_vertex_trace() {
        let vs = vec![vec![1.0, 0.0], vec![0.9806, 0.1961], vec![0.0, 1.0]];
        let (book, refs) = build_codebook(&vs, CacheKind::Key, 0.95).unwrap();
        assert_eq!(book.len(), 2);
        assert_eq!(refs.refs, vec![0, 0, 1]);
        assert_eq!(book.entries[0], vec![1.0, 0.0]);
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(build_codebook(&[vec![1.0]], CacheKind::Key, 1.0).is_err());
        assert!(build_codebook(&[vec![1.0]], CacheKind::Key, 0.0).is_err());
    }

    #[test]
    fn assign_exact_hit_and_extension() {
        let (mut book, mut refs) =
            build_codebook(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], CacheKind::Key, 0.9).unwrap();
        assert_eq!(assign_or_extend(&[5.0, 0.0, 0.0], &mut book, &mut refs).unwrap(), 0);
        assert_eq!(book.len(), 2);
        assert_eq!(assign_or_extend(&[0.0, 0.0, 2.0], &mut book, &mut refs).unwrap(), 2);
        assert_eq!(book.len(), 3);
        assert_eq!(refs.magnitudes[2..], [5.0, 2.0]);
        assert!(assign_or_extend(&[0.0; 3], &mut book, &mut refs).is_err());
    }

    #[test]
    fn assign_prefers_most_similar_entry() {
        // entries at cos 0.96 and 0.99 from the probe direction (1, 0)
        let e = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let mut book = Codebook {
            kind: CacheKind::Value,
            entries: vec![e(0.96), vec![0.0, -1.0], e(0.99)],
            threshold: 0.95,
        };
        let scan: Vec<f64> = book.entries.iter().map(|x| dot(x, &[1.0, 0.0])).collect();
        let exhaustive = (0..3).filter(|&i| scan[i] > 0.95).max_by(|&a, &b| scan[a].total_cmp(&scan[b]));
        let mut refs = TokenRefs::default();
        let r = assign_or_extend(&[2.0, 0.0], &mut book, &mut refs).unwrap();
        assert_eq!(Some(r as usize), exhaustive);
        assert_eq!(r, 2);
    }

    #[test]
    fn self_entry_round_trip_exact() {
        let vs = vec![vec![1.5, -2.0, 0.25, 4.0]];
        let (book, refs) = build_codebook(&vs, CacheKind::Value, 0.9).unwrap();
        let out = reconstruct(&book, &refs, None, false, &cfg(4)).unwrap();
        for (a, b) in out[0].iter().zip(&vs[0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn merged_token_error_law_of_cosines() {
        let c: f64 = 0.97;
        let a = vec![2.0, 0.0];
        let b = vec![3.0 * c, 3.0 * (1.0 - c * c).sqrt()];
        let (book, refs) = build_codebook(&[a, b.clone()], CacheKind::Value, 0.95).unwrap();
        assert_eq!(book.len(), 1);
        let out = reconstruct(&book, &refs, None, false, &cfg(2)).unwrap();
        let err = ((out[1][0] - b[0]).powi(2) + (out[1][1] - b[1]).powi(2)).sqrt();
        assert!((err - 3.0 * (2.0 - 2.0 * c).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rotary_reconstruction_rotates_and_keeps_norm() {
        let c = cfg(4);
        let vs = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let (book, refs) = build_codebook(&vs, CacheKind::Key, 0.9).unwrap();
        let plain = reconstruct(&book, &refs, None, false, &c).unwrap();
        let rot = reconstruct(&book, &refs, Some(&[7]), true, &c).unwrap();
        assert_eq!(rot[0], apply_rope(&plain[0], 7, &c).unwrap());
        assert!((crate::model::l2_norm(&rot[0]) - refs.magnitudes[0]).abs() < 1e-9);
        assert!(reconstruct(&book, &refs, None, true, &c).is_err());
    }

    #[test]
    fn out_of_range_ref_is_corruption() {
        let book = Codebook { kind: CacheKind::Key, entries: vec![vec![1.0, 0.0]], threshold: 0.9 };
        let refs = TokenRefs { refs: vec![1], magnitudes: vec![1.0] };
        let err = reconstruct(&book, &refs, None, false, &cfg(2)).unwrap_err();
        assert!(err.to_string().starts_with("corrupt archive: reference out of range"));
    }

    #[test]
    fn identical_tokens_give_single_entries() {
        let head = HeadCache::new((0..5).collect(), vec![vec![1.0, 1.0]; 5], vec![vec![-2.0, 0.5]; 5]).unwrap();
        let layer = LayerCache::new(0, vec![head]);
        let c = compress_layer(&layer, 0.98, 0.95).unwrap();
        assert_eq!((c.keys.len(), c.values.len()), (1, 1));
        assert_eq!(c.token_count(), 5);
    }

    #[test]
    fn batch_rebuild_groups_leftovers() {
        let (mut book, mut refs) = build_codebook(&[vec![1.0, 0.0, 0.0]], CacheKind::Key, 0.9).unwrap();
        let batch = vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.01], vec![2.0, 0.0, 0.0]];
        let mut inc_book = book.clone();
        let mut inc_refs = refs.clone();
        let r = extend_codebook(&batch, &mut book, &mut refs, ExtendStrategy::BatchRebuild).unwrap();
        assert_eq!(r, vec![1, 1, 0]);
        let r2 = extend_codebook(&batch, &mut inc_book, &mut inc_refs, ExtendStrategy::Incremental).unwrap();
        assert_eq!(r2, r);
        assert_eq!(book.len(), 2);
    }

    #[test]
    fn append_merges_or_extends() {
        let head = HeadCache::new(vec![0, 1], vec![vec![1.0, 0.0]; 2], vec![vec![0.0, 1.0]; 2]).unwrap();
        let mut c = compress_layer(&LayerCache::new(0, vec![head]), 0.9, 0.9).unwrap();
        c.append(0, 2, &[3.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!((c.keys.len(), c.values.len()), (1, 2));
        assert!(c.append(0, 2, &[1.0, 0.0], &[1.0, 0.0]).is_err());
        let dec = c.decompress(&cfg(2), false).unwrap();
        assert_eq!(dec.heads[0].keys[2], vec![3.0, 0.0]);
    }
}
