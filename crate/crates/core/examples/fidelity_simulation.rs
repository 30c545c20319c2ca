//! Decode-time divergence between full and compressed attention across
//! similarity thresholds.

use spindlekv::pipeline::CompressionOptions;
use spindlekv::simulator::{generate_synthetic, simulate_decode, SimulationOptions, SyntheticSpec};
use spindlekv::ModelConfig;

fn main() -> spindlekv::Result<()> {
    let cfg = ModelConfig::new(32, 4, 2, 3)?;
    let dump = generate_synthetic(&SyntheticSpec::clusters(8, 0.9, 0.6).with_seed(2), &cfg, 128)?;
    let sim = SimulationOptions { steps: 8, ..Default::default() };

    println!("theta   max_abs    rms        |C_K|+|C_V|  bound");
    for theta in [0.90, 0.95, 0.98, 0.999] {
        let opts = CompressionOptions {
            ratio: 1.0,
            key_threshold: theta,
            value_threshold: theta,
            ..Default::default()
        };
        let res = simulate_decode(&dump, &opts, &sim)?;
        let size: usize = res.key_codebook_sizes.iter().chain(&res.value_codebook_sizes).sum();
        println!(
            "{theta:<6}  {:.3e}  {:.3e}  {size:>11}  {}",
            res.max_abs,
            res.rms,
            if res.bound_holds { "holds" } else { "violated" }
        );
    }

    let opts = CompressionOptions { ratio: 0.25, ..Default::default() };
    let res = simulate_decode(&dump, &opts, &sim)?;
    let worst = res.steps.iter().fold(0.0f64, |m, s| m.max(s.evicted_mass));
    println!("r = 0.25 at defaults: max abs {:.3e}, largest evicted attention mass {worst:.3}", res.max_abs);
    Ok(())
}
