//! Score-driven eviction on a grouped-query layer, unfolded per query head
//! and group-averaged.

use spindlekv::eviction::EvictionParams;
use spindlekv::pipeline::layer_scores;
use spindlekv::simulator::{generate_synthetic, SyntheticSpec};
use spindlekv::{evict_layer, unfold_gqa, GqaMode, ModelConfig};

fn main() -> spindlekv::Result<()> {
    let cfg = ModelConfig::new(32, 8, 2, 1)?;
    let dump = generate_synthetic(&SyntheticSpec::gaussian().with_seed(1), &cfg, 64)?;
    let layer = &dump.layers[0];
    let windows = layer.windows.as_ref().expect("synthetic dumps carry queries");

    for mode in [GqaMode::PerHeadUnfolded, GqaMode::GroupAveraged] {
        let working = match mode {
            GqaMode::PerHeadUnfolded => unfold_gqa(&layer.cache, &cfg)?,
            GqaMode::GroupAveraged => layer.cache.clone(),
        };
        let scores = layer_scores(&working, &layer.cache, windows, 8, mode, &cfg)?;
        let params = EvictionParams { ratio: 0.25, window_len: 8, mode };
        let (kept, set) = evict_layer(&working, &scores, &params, &cfg)?;
        println!("{mode:?}: {} heads, {} tokens each", kept.heads.len(), kept.heads[0].len());
        println!("  head 0 keeps context tokens {:?}", set.per_head[0]);
    }
    Ok(())
}
