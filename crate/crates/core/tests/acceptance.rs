//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spindlekv::allocator::{endpoint_ratios, BudgetOptions, BudgetPlan};
use spindlekv::format::{archive_header_bytes, decode_archive, decode_dump, encode_archive, encode_dump};
use spindlekv::metrics::{layer_ratios, r3_printed};
use spindlekv::pipeline::{reconstruct_dump, CompressionOptions};
use spindlekv::simulator::{generate_synthetic, simulate_decode, SimulationOptions, SyntheticSpec};
use spindlekv::{build_codebook, compress, CacheKind, GqaMode, KvDump, ModelConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dotp(a, a).sqrt()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dotp(a, b) / (norm(a) * norm(b))
}

fn rope(v: &[f64], pos: f64, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for j in 0..d / 2 {
        let angle = pos / base.powf(2.0 * j as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s;
        out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c;
    }
    out
}

/// Softmax over the unmasked logits; masked entries get weight zero.
fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(x, &k)| if k { (x - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Causal attention of one query over keys at positions `0..n`.
fn oracle_attention(q: &[f64], qpos: u32, keys: &[Vec<f64>], kpos: &[u32], keep: &[bool], base: f64) -> Vec<f64> {
    let d = q.len() as f64;
    let qr = rope(q, f64::from(qpos), base);
    let logits: Vec<f64> = keys
        .iter()
        .zip(kpos)
        .map(|(k, &p)| dotp(&qr, &rope(k, f64::from(p), base)) / d.sqrt())
        .collect();
    let mask: Vec<bool> = kpos.iter().zip(keep).map(|(&p, &k)| k && p <= qpos).collect();
    masked_softmax(&logits, &mask)
}

fn context(weights: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let n = r.random_range(1..=256);
        let d = [8, 64, 128][r.random_range(0..3)];
        let theta = [0.90, 0.95, 0.98][r.random_range(0..3)];
        let k = r.random_range(1..=12);
        let sigma = [0.02, 0.1, 0.3, 1.0][r.random_range(0..4)];
        let centers: Vec<Vec<f64>> = (0..k).map(|_| gauss(&mut r, d)).collect();
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centers[r.random_range(0..k)];
                let scale = r.random_range(0.1..10.0);
                let noise = gauss(&mut r, d);
                c.iter().zip(&noise).map(|(a, b)| scale * (a + sigma * b)).collect()
            })
            .collect();
        let (book, refs) = build_codebook(&vectors, CacheKind::Key, theta).map_err(|e| e.to_string())?;
        for (i, v) in vectors.iter().enumerate() {
            let entry = &book.entries[refs.refs[i] as usize];
            let m = norm(v);
            ensure!(cos(v, entry) > theta, "token {i}: cos {} <= {theta}", cos(v, entry));
            let err: Vec<f64> = v.iter().zip(entry).map(|(a, b)| a - m * b).collect();
            ensure!(
                norm(&err) < m * (2.0 * (1.0 - theta)).sqrt(),
                "token {i}: error {} not below bound",
                norm(&err)
            );
            ensure!((refs.magnitudes[i] - m).abs() <= 1e-9 * m, "token {i}: magnitude mismatch");
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("1000 instances, {checked} tokens, 0 violations, {:.1}s", elapsed.as_secs_f64()))
}

/// Smallest dominating set size by exhaustive search over subsets.
fn min_dominating_set(adj: &[u32]) -> usize {
    let n = adj.len();
    let full = (1u32 << n) - 1;
    let mut best = n;
    for set in 0u32..=full {
        let size = set.count_ones() as usize;
        if size >= best {
            continue;
        }
        let mut covered = 0u32;
        let mut s = set;
        while s != 0 {
            let v = s.trailing_zeros() as usize;
            covered |= adj[v];
            s &= s - 1;
        }
        if covered == full {
            best = size;
        }
    }
    best
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut ratios = Vec::new();
    for _ in 0..200 {
        let n = r.random_range(1..=12);
        let d = r.random_range(2..=4);
        let theta = [0.7, 0.8, 0.9, 0.95][r.random_range(0..4)];
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut r, d)).collect();
        let adj: Vec<u32> = (0..n)
            .map(|a| (0..n).filter(|&b| a == b || cos(&vectors[a], &vectors[b]) > theta).fold(0, |m, b| m | 1 << b))
            .collect();
        let (book, refs) = build_codebook(&vectors, CacheKind::Value, theta).map_err(|e| e.to_string())?;
        // entries must be token directions, and every token must be covered
        let mut chosen = 0u32;
        for e in &book.entries {
            let v = (0..n)
                .find(|&i| cos(&vectors[i], e) > 1.0 - 1e-12)
                .ok_or("entry is not a token direction")?;
            chosen |= 1 << v;
        }
        for (i, &rf) in refs.refs.iter().enumerate() {
            ensure!(cos(&vectors[i], &book.entries[rf as usize]) > theta, "token {i} not dominated");
        }
        let covered = (0..n).filter(|&v| chosen & (1 << v) != 0).fold(0u32, |m, v| m | adj[v]);
        ensure!(covered == (1u32 << n) - 1, "greedy set does not dominate");
        let best = min_dominating_set(&adj);
        ensure!(book.len() >= best, "greedy {} below optimum {best}", book.len());
        ratios.push(book.len() as f64 / best as f64);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let worst = ratios.iter().cloned().fold(1.0, f64::max);
    Ok(format!("200 instances valid, mean greedy/optimal = {mean:.4}, worst = {worst:.3}"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst_mean = 0.0f64;
    let mut worst_jump = 0.0f64;
    for _ in 0..500 {
        let beta = r.random_range(0.01..0.3);
        let l = r.random_range(64..=8192usize);
        let lw = r.random_range(1..=64usize);
        let m = r.random_range(2..=80usize);
        let target: f64 = beta + (1.0 - beta) * r.random_range(1e-6..=1.0);
        let ratio = (target * (l - lw) as f64 + lw as f64) / l as f64;
        let opts = BudgetOptions { min_ratio: beta, ..Default::default() };
        let plan = BudgetPlan::new(ratio.min(1.0), l, lw, m, &opts).map_err(|e| e.to_string())?;
        let rc = (ratio.min(1.0) * l as f64 - lw as f64) / (l - lw) as f64;
        let alpha = (1.0 + beta) / 2.0;
        let (first, last) = if rc <= alpha { (2.0 * rc - beta, beta) } else { (1.0, 2.0 * rc - 1.0) };
        for (lam, &v) in plan.per_layer.iter().enumerate() {
            let expect = first + (last - first) * lam as f64 / (m - 1) as f64;
            ensure!((v - expect).abs() < 1e-12, "layer {lam}: {v} vs {expect}");
            ensure!(v >= beta && v <= 1.0, "layer {lam}: {v} outside [{beta}, 1]");
        }
        let mean = plan.per_layer.iter().sum::<f64>() / m as f64;
        worst_mean = worst_mean.max((mean - rc).abs());
        ensure!((mean - rc).abs() < 1e-9, "mean {mean} vs r_c {rc}");

        let below = endpoint_ratios(alpha - 1e-14, &opts).map_err(|e| e.to_string())?;
        let above = endpoint_ratios(alpha + 1e-14, &opts).map_err(|e| e.to_string())?;
        let jump = (below.0 - above.0).abs().max((below.1 - above.1).abs());
        worst_jump = worst_jump.max(jump);
        ensure!(jump < 1e-12, "endpoint jump {jump} at alpha {alpha}");
    }
    Ok(format!(
        "500 configs, worst |mean - r_c| = {worst_mean:.2e}, worst jump at alpha = {worst_jump:.2e}"
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::new(64, 8, 8, 4).map_err(|e| e.to_string())?;
    let opts = CompressionOptions {
        ratio: 1.0,
        key_threshold: 0.999999,
        value_threshold: 0.999999,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for seed in [40, 41] {
        let dump = generate_synthetic(&SyntheticSpec::gaussian().with_seed(seed), &cfg, 512).map_err(|e| e.to_string())?;
        let res = simulate_decode(&dump, &opts, &SimulationOptions { steps: 4, seed, ..Default::default() })
            .map_err(|e| e.to_string())?;
        ensure!(res.per_head.len() == 4 * 8, "expected 32 head summaries");
        worst = worst.max(res.max_abs);
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-4, "max abs divergence {worst:.3e}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("max abs divergence {worst:.3e} over 2 dumps, {:.1}s", elapsed.as_secs_f64()))
}

fn criterion_5() -> Outcome {
    let mut lines = Vec::new();
    for (kv, label) in [(4, "no GQA"), (2, "h_n=2"), (1, "h_n=4")] {
        let cfg = ModelConfig::new(64, 4, kv, 4).map_err(|e| e.to_string())?;
        let dump = generate_synthetic(&SyntheticSpec::clusters(5, 0.96, 0.9).with_seed(5), &cfg, 128)
            .map_err(|e| e.to_string())?;
        let opts = CompressionOptions { ratio: 0.5, key_threshold: 0.95, ..Default::default() };
        let out = compress(&dump, &opts).map_err(|e| e.to_string())?;
        let rep = &out.report;
        for (lam, l) in rep.per_layer.iter().enumerate() {
            ensure!(rep.key_codebook_sizes[lam] == 5, "{label} layer {lam}: |C_K| = {}", rep.key_codebook_sizes[lam]);
            let retained = rep.retained_tokens[lam] as f64;
            let expect = (rep.key_codebook_sizes[lam] + rep.value_codebook_sizes[lam]) as f64 / (2.0 * retained);
            ensure!((l.r2 - expect).abs() < 1e-9, "{label} layer {lam}: r2 {} vs {expect}", l.r2);
            ensure!(rep.value_codebook_sizes[lam] == 5, "{label} layer {lam}: |C_V| = {}", rep.value_codebook_sizes[lam]);
            ensure!((l.r2 - 5.0 / retained).abs() < 1e-9, "{label} layer {lam}: r2 {} vs 5/{retained}", l.r2);
        }
        lines.push(format!("{label}: |C_K| = 5 on {} layers", rep.per_layer.len()));
    }
    Ok(lines.join("; "))
}

/// Retained context indices per compressed head, computed from scratch.
fn oracle_retention(dump: &KvDump, layer: usize, opts: &CompressionOptions) -> Vec<Vec<usize>> {
    let cfg = &dump.config;
    let l = dump.layers[layer].cache.heads[0].len();
    let lw = opts.window_len;
    let lc = l - lw;
    let rc = (opts.ratio * l as f64 - lw as f64) / lc as f64;
    let beta = opts.budget.min_ratio;
    let (first, last) = if rc <= (1.0 + beta) / 2.0 { (2.0 * rc - beta, beta) } else { (1.0, 2.0 * rc - 1.0) };
    let m = cfg.num_layers;
    let rl = if m == 1 { rc } else { first + (last - first) * layer as f64 / (m - 1) as f64 };
    let keep = (rl * lc as f64).floor() as usize;

    let windows = dump.layers[layer].windows.as_ref().unwrap();
    let head_scores: Vec<Vec<f64>> = (0..cfg.num_q_heads)
        .map(|j| {
            let head = &dump.layers[layer].cache.heads[j / cfg.heads_per_group];
            let w = &windows[j];
            let mut ac = vec![0.0; lc];
            for i in w.len() - lw..w.len() {
                let a = oracle_attention(&w.queries[i], w.positions[i], &head.keys, &head.positions, &vec![true; l], cfg.rope_base);
                for (t, s) in ac.iter_mut().enumerate() {
                    *s += a[t] / (l - t) as f64;
                }
            }
            ac
        })
        .collect();
    let scores: Vec<Vec<f64>> = match opts.mode {
        GqaMode::PerHeadUnfolded => head_scores,
        GqaMode::GroupAveraged => (0..cfg.num_kv_heads)
            .map(|g| {
                let hn = cfg.heads_per_group;
                (0..lc)
                    .map(|t| (0..hn).map(|i| head_scores[g * hn + i][t]).sum::<f64>() / hn as f64)
                    .collect()
            })
            .collect(),
    };
    scores
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..lc).collect();
            idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            let mut kept: Vec<usize> = idx[..keep].to_vec();
            kept.extend(lc..l);
            kept.sort_unstable();
            kept
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    let mut heads_checked = 0;
    for inst in 0..50 {
        let d = [8, 16][r.random_range(0..2)];
        let kv = r.random_range(1..=2);
        let hn = r.random_range(1..=2);
        let m = r.random_range(1..=4);
        let l = r.random_range(32..=128usize);
        let lw = r.random_range(2..=8usize);
        let mode = if r.random_bool(0.5) { GqaMode::PerHeadUnfolded } else { GqaMode::GroupAveraged };
        let cfg = ModelConfig::new(d, kv * hn, kv, m).map_err(|e| e.to_string())?;
        let mut spec = SyntheticSpec::gaussian().with_seed(600 + inst);
        spec.query_window = lw;
        spec.query_temperature = r.random_range(1.0..8.0);
        let dump = generate_synthetic(&spec, &cfg, l).map_err(|e| e.to_string())?;
        let rc: f64 = r.random_range(0.08..0.9);
        let ratio = (rc * (l - lw) as f64 + lw as f64) / l as f64;
        let opts = CompressionOptions {
            ratio,
            window_len: lw,
            key_threshold: 0.999999,
            value_threshold: 0.999999,
            mode,
            ..Default::default()
        };
        let out = compress(&dump, &opts).map_err(|e| e.to_string())?;
        let rebuilt = reconstruct_dump(&out.archive, false).map_err(|e| e.to_string())?;
        for lam in 0..m {
            let expected = oracle_retention(&dump, lam, &opts);
            let got = &rebuilt.layers[lam].cache;
            ensure!(got.heads.len() == expected.len(), "instance {inst}: head count");
            let full = &dump.layers[lam].cache;
            let windows = dump.layers[lam].windows.as_ref().unwrap();
            for j in 0..cfg.num_q_heads {
                let c = if mode == GqaMode::PerHeadUnfolded && hn > 1 { j } else { j / hn };
                let kept = &expected[c];
                let positions: Vec<u32> = kept.iter().map(|&t| t as u32).collect();
                ensure!(
                    got.heads[c].positions == positions,
                    "instance {inst} layer {lam} head {c}: retained set differs"
                );
                ensure!(
                    got.heads[c].len() == out.archive.plan.retained_tokens(lam),
                    "instance {inst} layer {lam}: count {} vs plan",
                    got.heads[c].len()
                );
                let src = &full.heads[j / hn];
                let mut mask = vec![false; l];
                kept.iter().for_each(|&t| mask[t] = true);
                let w = &windows[j];
                let (q, p) = (&w.queries[w.len() - 1], w.positions[w.len() - 1]);
                let reference = context(&oracle_attention(q, p, &src.keys, &src.positions, &mask, cfg.rope_base), &src.values);
                let h = &got.heads[c];
                let ours = context(&oracle_attention(q, p, &h.keys, &h.positions, &vec![true; h.len()], cfg.rope_base), &h.values);
                let diff = reference.iter().zip(&ours).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
                ensure!(diff < 1e-6, "instance {inst} layer {lam} head {j}: divergence {diff:.3e}");
                heads_checked += 1;
            }
        }
    }
    Ok(format!("50 instances, {heads_checked} heads, retained sets exact, max divergence {worst:.2e}"))
}

fn criterion_7() -> Outcome {
    let cfg = ModelConfig::new(128, 2, 2, 1).map_err(|e| e.to_string())?;
    let l = layer_ratios(0, &[100, 100], &[50, 50], 40, &cfg, false).map_err(|e| e.to_string())?;
    ensure!((l.r1 - 0.5).abs() < 1e-12 && (l.r2 - 0.2).abs() < 1e-12, "r1/r2 {} {}", l.r1, l.r2);
    ensure!((l.r3 - 1.01471).abs() < 1e-5, "r3 = {}", l.r3);
    ensure!((l.r_layer - 0.10147).abs() < 1e-5, "r_layer = {}", l.r_layer);
    ensure!((r3_printed(&cfg) - (128.0 + 32.0 / 17.0) / 128.0).abs() < 1e-15, "r3 formula");

    let cfg = ModelConfig::new(32, 4, 2, 3).map_err(|e| e.to_string())?;
    let dump = generate_synthetic(&SyntheticSpec::clusters(6, 0.96, 0.6).with_seed(7), &cfg, 96).map_err(|e| e.to_string())?;
    let out = compress(&dump, &CompressionOptions { ratio: 0.4, ..Default::default() }).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("a.spkc");
    spindlekv::format::write_archive(&out.archive, &path).map_err(|e| e.to_string())?;
    let file_bits = std::fs::metadata(&path).map_err(|e| e.to_string())?.len() * 8;
    let heads: Vec<usize> = out.archive.layers.iter().map(|l| l.compressed.heads.len()).collect();
    let header_bits = 8 * (116 + 8 * heads.len() + heads.iter().map(|h| 21 + 4 * h).sum::<usize>()) as u64;
    ensure!(header_bits == 8 * archive_header_bytes(&heads) as u64, "documented header size");
    ensure!(out.report.header_bits == header_bits, "report header bits {}", out.report.header_bits);
    ensure!(
        file_bits - header_bits == out.report.exact_bits_compressed,
        "file payload {} vs reported {}",
        file_bits - header_bits,
        out.report.exact_bits_compressed
    );
    let analytic: u64 = out
        .archive
        .layers
        .iter()
        .map(|l| {
            let entries = l.compressed.codebook_size() as u64;
            let records = l.compressed.token_count() as u64;
            entries * 32 * 16 + records * (2 * (32 + 16) + 32)
        })
        .sum();
    ensure!(analytic == out.report.exact_bits_compressed, "analytic payload {analytic}");
    Ok(format!(
        "r3 = {:.6}, r_layer = {:.6}; archive {} bits = {} header + {} payload",
        l.r3, l.r_layer, file_bits, header_bits, out.report.exact_bits_compressed
    ))
}

fn criterion_8() -> Outcome {
    let cfg = ModelConfig::new(32, 4, 2, 3).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec::clusters(6, 0.96, 0.6).with_seed(8);
    let a = generate_synthetic(&spec, &cfg, 80).map_err(|e| e.to_string())?;
    let b = generate_synthetic(&spec, &cfg, 80).map_err(|e| e.to_string())?;
    let bytes = encode_dump(&a).map_err(|e| e.to_string())?;
    ensure!(bytes == encode_dump(&b).map_err(|e| e.to_string())?, "same seed gave different dumps");
    let back = decode_dump(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == a, "dump round-trip not float-exact");
    ensure!(encode_dump(&back).map_err(|e| e.to_string())? == bytes, "dump re-encode differs");

    let opts = CompressionOptions { ratio: 0.35, ..Default::default() };
    let mut archives = Vec::new();
    let mut reports = Vec::new();
    for workers in [1, 2, 7] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| e.to_string())?;
        let out = pool.install(|| compress(&back, &opts)).map_err(|e| e.to_string())?;
        archives.push(encode_archive(&out.archive).map_err(|e| e.to_string())?);
        reports.push(serde_json::to_vec(&out.report).map_err(|e| e.to_string())?);
    }
    ensure!(archives.windows(2).all(|w| w[0] == w[1]), "archive bytes depend on worker count");
    ensure!(reports.windows(2).all(|w| w[0] == w[1]), "report bytes depend on worker count");
    let decoded = decode_archive(&archives[0]).map_err(|e| e.to_string())?;
    ensure!(encode_archive(&decoded).map_err(|e| e.to_string())? == archives[0], "archive re-encode differs");
    Ok(format!(
        "dump {} bytes and archive {} bytes round-trip exactly; identical across 1/2/7 workers",
        bytes.len(),
        archives[0].len()
    ))
}

fn criterion_9() -> Outcome {
    let cfg = ModelConfig::new(32, 4, 2, 3).map_err(|e| e.to_string())?;
    let dump = generate_synthetic(&SyntheticSpec::clusters(8, 0.88, 0.5).with_seed(9), &cfg, 128).map_err(|e| e.to_string())?;
    let sim = SimulationOptions { steps: 8, ..Default::default() };
    let mut rows = Vec::new();
    for theta in [0.90, 0.95, 0.98, 0.999] {
        let opts = CompressionOptions {
            ratio: 1.0,
            key_threshold: theta,
            value_threshold: theta,
            ..Default::default()
        };
        let res = simulate_decode(&dump, &opts, &sim).map_err(|e| e.to_string())?;
        let size: usize = res.report.key_codebook_sizes.iter().chain(&res.report.value_codebook_sizes).sum();
        rows.push((theta, res.max_abs, res.rms, size));
    }
    for w in rows.windows(2) {
        let ((t0, a0, r0, s0), (t1, a1, r1, s1)) = (w[0], w[1]);
        ensure!(a1 <= a0, "max abs rises from {a0:.3e} at {t0} to {a1:.3e} at {t1}");
        ensure!(r1 <= r0, "rms rises from {r0:.3e} at {t0} to {r1:.3e} at {t1}");
        ensure!(s1 >= s0, "|C| falls from {s0} at {t0} to {s1} at {t1}");
    }
    let summary: Vec<String> = rows
        .iter()
        .map(|(t, a, _, s)| format!("{t}: {a:.2e}/|C|={s}"))
        .collect();
    Ok(summary.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("codebook coverage and error bound", criterion_1),
        ("greedy vs exact dominating set", criterion_2),
        ("budget conservation", criterion_3),
        ("identity pipeline fidelity", criterion_4),
        ("cluster-oracle compression", criterion_5),
        ("eviction vs masking oracle", criterion_6),
        ("ratio report parity and bit audit", criterion_7),
        ("determinism and round-trips", criterion_8),
        ("threshold monotonicity", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
