//! Expert loads of queue-ordered versus token-ordered MoE execution.

use emoe::moe::moe_report;

fn main() -> emoe::Result<()> {
    println!("{:>4} {:>9} {:>8} {:>7} {:>9}", "seed", "distinct", "queued", "token", "identical");
    for seed in 0..8 {
        let r = moe_report(128, 16, 2, 16, 32, seed)?;
        println!(
            "{seed:>4} {:>9} {:>8} {:>7} {:>9}",
            r.distinct_experts, r.reordered.expert_loads, r.oracle.expert_loads, r.outputs_identical
        );
    }
    Ok(())
}
