//! Greedy codebook over similar vectors, decode-time extension and the
//! per-token reconstruction error.

use spindlekv::codebook::{assign_or_extend, reconstruct};
use spindlekv::model::l2_norm;
use spindlekv::simulator::{generate_synthetic, SyntheticSpec};
use spindlekv::{build_codebook, CacheKind, ModelConfig};

fn main() -> spindlekv::Result<()> {
    let cfg = ModelConfig::new(64, 1, 1, 1)?;
    let dump = generate_synthetic(&SyntheticSpec::clusters(6, 0.97, 0.6).with_seed(4), &cfg, 300)?;
    let keys = &dump.layers[0].cache.heads[0].keys;

    for theta in [0.9, 0.95, 0.98, 0.995] {
        let (book, refs) = build_codebook(keys, CacheKind::Key, theta)?;
        let rebuilt = reconstruct(&book, &refs, None, false, &cfg)?;
        let worst = keys
            .iter()
            .zip(&rebuilt)
            .map(|(k, r)| {
                let diff: Vec<f64> = k.iter().zip(r).map(|(a, b)| a - b).collect();
                l2_norm(&diff) / l2_norm(k)
            })
            .fold(0.0, f64::max);
        println!(
            "theta {theta}: {} entries for {} keys, worst relative error {worst:.4} (bound {:.4})",
            book.len(),
            keys.len(),
            (2.0 * (1.0 - theta)).sqrt()
        );
    }

    let (mut book, mut refs) = build_codebook(keys, CacheKind::Key, 0.95)?;
    let before = book.len();
    let fresh: Vec<f64> = (0..64).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let r = assign_or_extend(&keys[0], &mut book, &mut refs)?;
    let s = assign_or_extend(&fresh, &mut book, &mut refs)?;
    println!("existing direction -> entry {r}; new direction -> entry {s}; size {before} -> {}", book.len());
    Ok(())
}
