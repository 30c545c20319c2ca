//! Synthetic cache generation and decode-time fidelity measurement.
//!
//! [`generate_synthetic`] builds dumps with a known similarity structure.
//! [`simulate_decode`] compresses a dump, then decodes a few tokens against
//! both the full cache and the compressed one and records how far the
//! per-head context vectors drift apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::CompressedLayer;
use crate::error::{config_err, Error, Result};
use crate::metrics::CompressionReport;
use crate::model::{
    apply_rope, attention_row, dot, l2_norm, rotate, weighted_sum, DumpLayer, HeadCache, KvDump,
    LayerCache, ModelConfig, QueryWindow,
};
use crate::pipeline::{compress, CompressionOptions};

const MAX_ATTEMPTS: u64 = 32;
const CENTER_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Structure {
    /// Tokens are dealt round-robin over `num_clusters` clusters, so cluster
    /// `c` holds `ceil((l - c) / k)` tokens per head. Keys and values get
    /// independent centers, shared by every head of a layer.
    Clusters {
        num_clusters: usize,
        within_min_cos: f64,
        cross_max_cos: f64,
    },
    /// Independent standard normal entries.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub structure: Structure,
    /// Clustered vectors get a norm drawn uniformly from this range.
    pub magnitude_min: f64,
    pub magnitude_max: f64,
    /// Logit of a query against its target key.
    pub query_temperature: f64,
    /// Queries per query head, at the last positions of the sequence.
    pub query_window: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn clusters(num_clusters: usize, within_min_cos: f64, cross_max_cos: f64) -> Self {
        Self {
            structure: Structure::Clusters { num_clusters, within_min_cos, cross_max_cos },
            ..Self::gaussian()
        }
    }

    pub fn gaussian() -> Self {
        Self {
            structure: Structure::Gaussian,
            magnitude_min: 0.5,
            magnitude_max: 2.0,
            query_temperature: 6.0,
            query_window: crate::allocator::DEFAULT_WINDOW,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self, seq_len: usize) -> Result<()> {
        if let Structure::Clusters { num_clusters, within_min_cos, cross_max_cos } = self.structure {
            if num_clusters == 0 {
                return Err(config_err("need at least one cluster"));
            }
            if !(within_min_cos > 0.0 && within_min_cos < 1.0) {
                return Err(config_err(format!("within-cluster cosine {within_min_cos} outside (0, 1)")));
            }
            if !(within_min_cos > cross_max_cos) {
                return Err(config_err(format!(
                    "infeasible cosine bounds: within {within_min_cos} <= cross {cross_max_cos}"
                )));
            }
        }
        if !(self.magnitude_min > 0.0 && self.magnitude_min <= self.magnitude_max && self.magnitude_max.is_finite()) {
            return Err(config_err("magnitude range must satisfy 0 < min <= max"));
        }
        if !self.query_temperature.is_finite() {
            return Err(config_err("query temperature must be finite"));
        }
        if seq_len == 0 {
            return Err(Error::EmptyContext);
        }
        if self.query_window == 0 || self.query_window > seq_len {
            return Err(config_err(format!(
                "query window {} must lie in 1..={seq_len}",
                self.query_window
            )));
        }
        Ok(())
    }
}

fn layer_rng(seed: u64, layer: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 16) | attempt);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = l2_norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Unit centers with pairwise angle above `min_angle`.
fn centers(rng: &mut ChaCha8Rng, k: usize, d: usize, min_angle: f64) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_angle.cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let c = (0..CENTER_DRAWS)
            .map(|_| unit_vec(rng, d))
            .find(|c| out.iter().all(|o| dot(o, c) < max_cos))
            .ok_or_else(|| {
                config_err(format!(
                    "cannot place {k} clusters {:.1} degrees apart in {d} dimensions",
                    min_angle.to_degrees()
                ))
            })?;
        out.push(c);
    }
    Ok(out)
}

/// A vector within angle `spread` of `center`.
fn member(rng: &mut ChaCha8Rng, center: &[f64], spread: f64, magnitude: f64) -> Vec<f64> {
    let g = gaussian_vec(rng, center.len());
    let along = dot(&g, center);
    let mut u: Vec<f64> = g.iter().zip(center).map(|(x, c)| x - along * c).collect();
    let n = l2_norm(&u).max(1e-300);
    u.iter_mut().for_each(|x| *x /= n);
    let t = rng.random::<f64>() * spread;
    let (s, c) = t.sin_cos();
    center
        .iter()
        .zip(&u)
        .map(|(a, b)| magnitude * (c * a + s * b))
        .collect()
}

fn cluster_bounds_hold(vectors: &[Vec<f64>], labels: &[usize], within: f64, cross: f64) -> bool {
    let units: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let n = l2_norm(v);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    (0..units.len()).into_par_iter().all(|i| {
        (i + 1..units.len()).all(|j| {
            let c = dot(&units[i], &units[j]);
            if labels[i] == labels[j] {
                c > within
            } else {
                c < cross
            }
        })
    })
}

fn synthetic_layer(
    spec: &SyntheticSpec,
    config: &ModelConfig,
    seq_len: usize,
    layer: usize,
) -> Result<DumpLayer> {
    let d = config.head_dim;
    let positions: Vec<u32> = (0..seq_len as u32).collect();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = layer_rng(spec.seed, layer, attempt);
        let heads: Vec<HeadCache> = match spec.structure {
            Structure::Gaussian => (0..config.num_kv_heads)
                .map(|_| HeadCache {
                    positions: positions.clone(),
                    keys: (0..seq_len).map(|_| to_f32(gaussian_vec(&mut rng, d))).collect(),
                    values: (0..seq_len).map(|_| to_f32(gaussian_vec(&mut rng, d))).collect(),
                })
                .collect(),
            Structure::Clusters { num_clusters, within_min_cos, cross_max_cos } => {
                let spread = 0.999 * within_min_cos.acos() / 2.0;
                let min_angle = cross_max_cos.clamp(-1.0, 1.0).acos() + 2.0 * spread;
                if min_angle >= std::f64::consts::PI && num_clusters > 1 {
                    return Err(config_err("infeasible cosine bounds for more than one cluster"));
                }
                let kc = centers(&mut rng, num_clusters, d, min_angle)?;
                let vc = centers(&mut rng, num_clusters, d, min_angle)?;
                let draw = |rng: &mut ChaCha8Rng, c: &[f64]| {
                    let m = rng.random_range(spec.magnitude_min..=spec.magnitude_max);
                    to_f32(member(rng, c, spread, m))
                };
                let heads: Vec<HeadCache> = (0..config.num_kv_heads)
                    .map(|_| {
                        let mut h = HeadCache { positions: positions.clone(), ..Default::default() };
                        for t in 0..seq_len {
                            h.keys.push(draw(&mut rng, &kc[t % num_clusters]));
                            h.values.push(draw(&mut rng, &vc[t % num_clusters]));
                        }
                        h
                    })
                    .collect();
                let labels: Vec<usize> =
                    (0..config.num_kv_heads).flat_map(|_| (0..seq_len).map(|t| t % num_clusters)).collect();
                let keys: Vec<Vec<f64>> = heads.iter().flat_map(|h| h.keys.clone()).collect();
                let values: Vec<Vec<f64>> = heads.iter().flat_map(|h| h.values.clone()).collect();
                if !cluster_bounds_hold(&keys, &labels, within_min_cos, cross_max_cos)
                    || !cluster_bounds_hold(&values, &labels, within_min_cos, cross_max_cos)
                {
                    continue;
                }
                heads
            }
        };
        let windows = synthetic_queries(spec, config, &heads, seq_len, &mut rng)?;
        return Ok(DumpLayer { cache: LayerCache::new(layer, heads), windows: Some(windows) });
    }
    Err(config_err(format!(
        "layer {layer}: cluster bounds still violated after {MAX_ATTEMPTS} attempts"
    )))
}

/// Each query points at one "heavy" context token of its KV head, so its
/// logit against that key is `query_temperature`.
fn synthetic_queries(
    spec: &SyntheticSpec,
    config: &ModelConfig,
    heads: &[HeadCache],
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QueryWindow>> {
    let d = config.head_dim;
    let w = spec.query_window;
    let context = if seq_len > w { seq_len - w } else { seq_len };
    let heavy: Vec<Vec<usize>> = heads
        .iter()
        .map(|_| (0..(context / 8).max(1)).map(|_| rng.random_range(0..context)).collect())
        .collect();
    (0..config.num_q_heads)
        .map(|j| {
            let g = j / config.heads_per_group;
            let head = &heads[g];
            let mut window = QueryWindow::default();
            for p in (seq_len - w)..seq_len {
                let candidates: Vec<usize> = heavy[g].iter().copied().filter(|&t| t <= p).collect();
                let t = candidates[rng.random_range(0..candidates.len())];
                let k = &head.keys[t];
                let scale = spec.query_temperature * (d as f64).sqrt() / dot(k, k);
                let aimed: Vec<f64> = rotate(k, t as f64 - p as f64, config)?
                    .into_iter()
                    .map(|x| x * scale)
                    .collect();
                let jitter = 0.1 * l2_norm(&aimed) / (d as f64).sqrt();
                let q: Vec<f64> = aimed
                    .iter()
                    .map(|x| x + jitter * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                window.positions.push(p as u32);
                window.queries.push(to_f32(q));
            }
            Ok(window)
        })
        .collect()
}

/// Builds a dump of `seq_len` tokens per head with query windows on every
/// layer. Output depends only on the spec, the config and `seq_len`.
pub fn generate_synthetic(spec: &SyntheticSpec, config: &ModelConfig, seq_len: usize) -> Result<KvDump> {
    config.validate()?;
    spec.validate(seq_len)?;
    let layers = (0..config.num_layers)
        .into_par_iter()
        .map(|layer| synthetic_layer(spec, config, seq_len, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(KvDump { config: config.clone(), keys_rotated: false, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    /// Decoded tokens appended after the initial step.
    pub steps: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Relative noise added to the copied key/value of each new token.
    pub append_noise: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self { steps: 16, tolerance: 1e-4, seed: 0, append_noise: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub position: u32,
    pub full_len: usize,
    pub compressed_len: usize,
    pub evicted_mass: f64,
    pub max_abs: f64,
    pub rms: f64,
    pub l2: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFidelity {
    pub layer: usize,
    pub head: usize,
    pub max_abs: f64,
    pub rms: f64,
    pub max_l2: f64,
    pub max_bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    pub per_head: Vec<HeadFidelity>,
    pub steps: Vec<StepRecord>,
    pub max_abs: f64,
    pub rms: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub bound_holds: bool,
    /// Codebook sizes after the last decode step.
    pub key_codebook_sizes: Vec<usize>,
    pub value_codebook_sizes: Vec<usize>,
    pub report: CompressionReport,
}

/// Rotated keys and values of one head, with the largest magnitudes seen.
#[derive(Default)]
struct HeadState {
    positions: Vec<u32>,
    raw_keys: Vec<Vec<f64>>,
    rotated: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    key_max: f64,
    value_max: f64,
}

impl HeadState {
    fn push(&mut self, position: u32, key: Vec<f64>, value: Vec<f64>, config: &ModelConfig) -> Result<()> {
        self.key_max = self.key_max.max(l2_norm(&key));
        self.value_max = self.value_max.max(l2_norm(&value));
        self.rotated.push(apply_rope(&key, position, config)?);
        self.positions.push(position);
        self.raw_keys.push(key);
        self.values.push(value);
        Ok(())
    }

    fn from_cache(head: &HeadCache, config: &ModelConfig) -> Result<Self> {
        let mut s = HeadState::default();
        for t in 0..head.len() {
            s.push(head.positions[t], head.keys[t].clone(), head.values[t].clone(), config)?;
        }
        Ok(s)
    }

    fn context(&self, q_rot: &[f64], position: u32, config: &ModelConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = attention_row(q_rot, position, &self.rotated, &self.positions, config.head_dim)?;
        let ctx = weighted_sum(&a, &self.values, config.head_dim);
        Ok((a, ctx))
    }
}

/// Attention mass of `full` on positions absent from `kept` (both ascending).
fn evicted_mass(weights: &[f64], full: &[u32], kept: &[u32]) -> f64 {
    let mut j = 0;
    let mut mass = 0.0;
    for (w, &p) in weights.iter().zip(full) {
        while j < kept.len() && kept[j] < p {
            j += 1;
        }
        if j >= kept.len() || kept[j] != p {
            mass += w;
        }
    }
    mass
}

fn noisy(rng: &mut ChaCha8Rng, v: &[f64], rel: f64) -> Vec<f64> {
    let sigma = rel * l2_norm(v) / (v.len() as f64).sqrt();
    v.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn simulate_layer(
    layer: &DumpLayer,
    compressed: &CompressedLayer,
    opts: &CompressionOptions,
    sim: &SimulationOptions,
    config: &ModelConfig,
) -> Result<(Vec<StepRecord>, usize, usize)> {
    let lambda = layer.cache.layer_index;
    let windows = layer.windows.as_ref().ok_or(Error::MissingQueries(lambda))?;
    if windows.iter().any(QueryWindow::is_empty) {
        return Err(Error::MissingQueries(lambda));
    }
    let hn = config.heads_per_group;
    let comp_index = |j: usize| if compressed.unfolded { j } else { j / hn };

    let mut full = layer
        .cache
        .heads
        .iter()
        .map(|h| HeadState::from_cache(h, config))
        .collect::<Result<Vec<_>>>()?;
    let mut comp = compressed.clone();
    let mut recon = comp
        .decompress(config, false)?
        .heads
        .iter()
        .map(|h| HeadState::from_cache(h, config))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(lambda as u64);
    let mut next = full.iter().filter_map(|h| h.positions.last()).max().map_or(0, |p| p + 1);
    let key_slack = (2.0 * (1.0 - opts.key_threshold)).max(0.0).sqrt();
    let value_slack = (2.0 * (1.0 - opts.value_threshold)).max(0.0).sqrt();
    let d = config.head_dim;

    let mut records = Vec::new();
    for step in 0..=sim.steps {
        if step > 0 {
            let position = next;
            next += 1;
            for (g, state) in full.iter_mut().enumerate() {
                let src = rng.random_range(0..state.positions.len());
                let key = noisy(&mut rng, &state.raw_keys[src], sim.append_noise);
                let value = noisy(&mut rng, &state.values[src], sim.append_noise);
                state.push(position, key.clone(), value.clone(), config)?;
                let targets = if comp.unfolded { g * hn..(g + 1) * hn } else { g..g + 1 };
                for c in targets {
                    comp.append(c, position, &key, &value)?;
                    let rec = *comp.heads[c].last().expect("just appended");
                    let k: Vec<f64> = comp.keys.entries[rec.key_ref as usize]
                        .iter()
                        .map(|x| x * rec.key_magnitude)
                        .collect();
                    let v: Vec<f64> = comp.values.entries[rec.value_ref as usize]
                        .iter()
                        .map(|x| x * rec.value_magnitude)
                        .collect();
                    recon[c].push(position, k, v, config)?;
                }
            }
        }
        for (j, window) in windows.iter().enumerate() {
            let (query, position) = if step == 0 {
                let last = window.len() - 1;
                (window.queries[last].clone(), window.positions[last])
            } else {
                // keep the query's window-time alignment at the new position
                let i = rng.random_range(0..window.len());
                let position = next - 1;
                let offset = f64::from(window.positions[i]) - f64::from(position);
                (rotate(&window.queries[i], offset, config)?, position)
            };
            let query = &query;
            let q_rot = apply_rope(query, position, config)?;
            let f = &full[j / hn];
            let r = &recon[comp_index(j)];
            let (a_full, ctx_full) = f.context(&q_rot, position, config)?;
            let (_, ctx_comp) = r.context(&q_rot, position, config)?;
            let diff: Vec<f64> = ctx_full.iter().zip(&ctx_comp).map(|(x, y)| x - y).collect();
            let max_abs = diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let l2 = l2_norm(&diff);
            let e = evicted_mass(&a_full, &f.positions, &r.positions);
            let delta = l2_norm(query) * r.key_max * key_slack / (d as f64).sqrt();
            let bound = r.value_max * (2.0 * e + (2.0 * delta).exp_m1() + value_slack) + 1e-9;
            records.push(StepRecord {
                layer: lambda,
                head: j,
                step,
                position,
                full_len: f.positions.len(),
                compressed_len: r.positions.len(),
                evicted_mass: e,
                max_abs,
                rms: l2 / (d as f64).sqrt(),
                l2,
                bound,
            });
        }
    }
    Ok((records, comp.keys.len(), comp.values.len()))
}

/// Compresses `dump`, then decodes `sim.steps` tokens against the full and
/// the compressed cache. Step 0 uses each head's last window query; later
/// steps append one token per KV head (to every query head of the group
/// on the compressed side) and replay a random window query at the new
/// position, counter-rotated so it attends as it did in the window.
pub fn simulate_decode(
    dump: &KvDump,
    opts: &CompressionOptions,
    sim: &SimulationOptions,
) -> Result<FidelityResult> {
    let out = compress(dump, opts)?;
    let config = &dump.config;
    let per_layer = dump
        .layers
        .par_iter()
        .zip(&out.archive.layers)
        .map(|(layer, archived)| simulate_layer(layer, &archived.compressed, opts, sim, config))
        .collect::<Result<Vec<_>>>()?;

    let mut steps = Vec::new();
    let mut key_codebook_sizes = Vec::new();
    let mut value_codebook_sizes = Vec::new();
    for (records, k, v) in per_layer {
        steps.extend(records);
        key_codebook_sizes.push(k);
        value_codebook_sizes.push(v);
    }

    let mut per_head: Vec<HeadFidelity> = Vec::new();
    let mut sq_sums: Vec<(f64, usize)> = Vec::new();
    for s in &steps {
        let idx = per_head.iter().position(|h| h.layer == s.layer && h.head == s.head);
        let i = idx.unwrap_or_else(|| {
            per_head.push(HeadFidelity {
                layer: s.layer,
                head: s.head,
                max_abs: 0.0,
                rms: 0.0,
                max_l2: 0.0,
                max_bound: 0.0,
                within_bound: true,
            });
            sq_sums.push((0.0, 0));
            per_head.len() - 1
        });
        let h = &mut per_head[i];
        h.max_abs = h.max_abs.max(s.max_abs);
        h.max_l2 = h.max_l2.max(s.l2);
        h.max_bound = h.max_bound.max(s.bound);
        h.within_bound &= s.l2 <= s.bound;
        sq_sums[i].0 += s.rms * s.rms;
        sq_sums[i].1 += 1;
    }
    for (h, (sum, n)) in per_head.iter_mut().zip(&sq_sums) {
        h.rms = (sum / *n as f64).sqrt();
    }
    let max_abs = per_head.iter().fold(0.0f64, |m, h| m.max(h.max_abs));
    let rms = if steps.is_empty() {
        0.0
    } else {
        (steps.iter().map(|s| s.rms * s.rms).sum::<f64>() / steps.len() as f64).sqrt()
    };
    Ok(FidelityResult {
        passed: max_abs <= sim.tolerance,
        bound_holds: per_head.iter().all(|h| h.within_bound),
        per_head,
        steps,
        max_abs,
        rms,
        tolerance: sim.tolerance,
        key_codebook_sizes,
        value_codebook_sizes,
        report: out.report,
    })
}
