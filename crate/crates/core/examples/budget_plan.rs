//! Per-layer context ratios for a global reserve ratio.

use spindlekv::allocator::{BudgetOptions, BudgetPlan, EndpointRule};

fn main() -> spindlekv::Result<()> {
    let (seq_len, window, layers) = (2048, 8, 32);
    for r in [0.1, 0.2, 0.4, 0.8] {
        let plan = BudgetPlan::new(r, seq_len, window, layers, &BudgetOptions::default())?;
        let mean = plan.per_layer.iter().sum::<f64>() / layers as f64;
        println!(
            "r = {r:.1}: r_c = {:.4}, endpoints = ({:.4}, {:.4}), mean = {mean:.4}, tokens kept at layer 0 / {} = {} / {}",
            plan.context_ratio,
            plan.endpoints.0,
            plan.endpoints.1,
            layers - 1,
            plan.retained_tokens(0),
            plan.retained_tokens(layers - 1),
        );
    }

    let printed = BudgetOptions { rule: EndpointRule::Printed, ..Default::default() };
    let plan = BudgetPlan::new(0.8, seq_len, window, layers, &printed)?;
    println!("published endpoint form at r = 0.8: {:?}", plan.endpoints);
    Ok(())
}
