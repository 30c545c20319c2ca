//! Rotary embedding and causal attention of a query window over one head.

use spindlekv::model::{apply_rope, attention_weights, dot};
use spindlekv::{HeadCache, ModelConfig, QueryWindow};

fn main() -> spindlekv::Result<()> {
    let cfg = ModelConfig::new(4, 1, 1, 1)?;

    let k = vec![1.0, 0.0, 0.5, -0.5];
    let q = vec![0.3, 0.8, -0.2, 0.1];
    // relative position is all that survives the rotation
    let near = dot(&apply_rope(&q, 10, &cfg)?, &apply_rope(&k, 7, &cfg)?);
    let far = dot(&apply_rope(&q, 110, &cfg)?, &apply_rope(&k, 107, &cfg)?);
    println!("q.k at offset 3: {near:.12} vs {far:.12}");

    let head = HeadCache::new(
        vec![0, 1, 2, 3],
        vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], k],
        vec![vec![1.0; 4]; 4],
    )?;
    let window = QueryWindow { positions: vec![2, 3], queries: vec![q.clone(), q] };
    let scores = attention_weights(&window, &head, &cfg)?;
    for (row, p) in scores.per_head[0].iter().zip(&window.positions) {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
        println!("query @{p}: [{}]", cells.join(", "));
    }
    Ok(())
}
