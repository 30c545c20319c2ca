//! Similar-pair counts per head and the sorted accumulated-score profile.

use spindlekv::pipeline::census;
use spindlekv::simulator::{generate_synthetic, SyntheticSpec};
use spindlekv::ModelConfig;

fn main() -> spindlekv::Result<()> {
    let cfg = ModelConfig::new(32, 2, 2, 2)?;
    for (name, spec) in [
        ("one cluster", SyntheticSpec::clusters(1, 0.95, 0.0)),
        ("four clusters", SyntheticSpec::clusters(4, 0.95, 0.5)),
        ("gaussian", SyntheticSpec::gaussian()),
    ] {
        let dump = generate_synthetic(&spec, &cfg, 96)?;
        let c = census(&dump, 0.9, 0.9, 8)?;
        let row = &c.pairs[0];
        println!(
            "{name:>13}: {} / {} key pairs above 0.9, {} value pairs",
            row.key_pairs, row.total_pairs, row.value_pairs
        );
        let scores: Vec<f64> = c.profile.iter().filter(|p| p.layer == 0).map(|p| p.score).collect();
        let top = scores.last().copied().unwrap_or(0.0);
        let median = scores.get(scores.len() / 2).copied().unwrap_or(0.0);
        println!("{:>13}  score profile: median {median:.5}, max {top:.5}", "");
    }
    Ok(())
}
