//! Accumulated attention scores, cosine-similarity matrices and the two
//! per-layer diagnostics (score sparsity and similar-pair census).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::normalize;
use crate::error::{config_err, Error, Result};
use crate::model::{dot, AttentionScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreVariant {
    PerHead,
    GqaAveraged,
}

/// Per-head importance of each context token (window tokens excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatedScores {
    pub per_head: Vec<Vec<f64>>,
    pub variant: ScoreVariant,
}

impl AccumulatedScores {
    pub fn context_len(&self) -> usize {
        self.per_head.first().map_or(0, Vec::len)
    }

    pub fn stack(parts: Vec<AccumulatedScores>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut first = iter.next().ok_or(Error::EmptyContext)?;
        for p in iter {
            if p.variant != first.variant {
                return Err(config_err("cannot stack scores of different variants"));
            }
            first.per_head.extend(p.per_head);
        }
        Ok(first)
    }
}

/// Sums the window rows onto each context key and divides by `l - a`,
/// the number of queries that can causally see key `a`.
pub fn accumulated_scores(scores: &AttentionScores) -> Result<AccumulatedScores> {
    let (l, lw) = (scores.seq_len, scores.window_len);
    if lw == 0 {
        return Err(config_err("observation window must hold at least one query"));
    }
    if l < lw {
        return Err(Error::WindowCoversSequence { seq_len: l, window_len: lw });
    }
    let lc = l - lw;
    let per_head = scores
        .per_head
        .iter()
        .map(|rows| {
            (0..lc)
                .map(|a| {
                    let mass: f64 = rows.iter().map(|row| row[a]).sum();
                    mass / (l - a) as f64
                })
                .collect()
        })
        .collect();
    Ok(AccumulatedScores { per_head, variant: ScoreVariant::PerHead })
}

/// Averages the accumulated scores of the `heads_per_group` query heads
/// that share one KV head.
pub fn gqa_accumulated_scores(
    group: &AttentionScores,
    heads_per_group: usize,
) -> Result<AccumulatedScores> {
    if group.per_head.len() != heads_per_group {
        return Err(config_err(format!(
            "group has {} query heads, expected {heads_per_group}",
            group.per_head.len()
        )));
    }
    let each = accumulated_scores(group)?;
    let lc = each.context_len();
    let mut mean = vec![0.0; lc];
    for head in &each.per_head {
        for (m, x) in mean.iter_mut().zip(head) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= heads_per_group as f64);
    Ok(AccumulatedScores { per_head: vec![mean], variant: ScoreVariant::GqaAveraged })
}

/// Symmetric matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a][b]
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).clamp(-1.0, 1.0)
}

pub fn cosine_similarity_matrix(vectors: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let (units, _) = normalize(vectors)?;
    let n = units.len();
    let mut entries = vec![vec![0.0; n]; n];
    for a in 0..n {
        entries[a][a] = 1.0;
        for b in a + 1..n {
            let s = dot(&units[a], &units[b]).clamp(-1.0, 1.0);
            entries[a][b] = s;
            entries[b][a] = s;
        }
    }
    Ok(SimilarityMatrix { entries })
}

/// All heads' scores concatenated and sorted ascending.
pub fn sparsity_profile(scores: &AccumulatedScores) -> Vec<f64> {
    let mut all: Vec<f64> = scores.per_head.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    all
}

/// Number of unordered pairs `a < b` whose cosine similarity exceeds
/// `threshold`.
pub fn similarity_census(vectors: &[Vec<f64>], threshold: f64) -> Result<usize> {
    if vectors.len() < 2 {
        return Ok(0);
    }
    let (units, _) = normalize(vectors)?;
    Ok((0..units.len())
        .into_par_iter()
        .map(|a| {
            units[a + 1..]
                .iter()
                .filter(|u| dot(&units[a], u) > threshold)
                .count()
        })
        .sum())
}
