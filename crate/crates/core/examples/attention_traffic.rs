//! Token-block traffic of the naive and reordered attention schedules.

use emoe::attention::{make_schedule, measure_traffic, Phase};
use emoe::costmodel::analytic_attention_stats;

fn main() -> emoe::Result<()> {
    println!("{:>4} {:>2}  {:>9} {:>7} {:>9} {:>7}  {:>6}", "N", "p", "naive", "iters", "reorder", "iters", "ratio");
    for n in [16usize, 64, 128, 196] {
        for p in [1usize, 2, 4] {
            let naive = measure_traffic(&make_schedule(n, p, false, Phase::Qk)?);
            let re = measure_traffic(&make_schedule(n, p, true, Phase::Qk)?);
            let closed = analytic_attention_stats(n as u64, p as u64, true)?;
            assert_eq!(closed.data_load.to_integer(), re.blocks_loaded);
            println!(
                "{n:>4} {p:>2}  {:>9} {:>7} {:>9} {:>7}  {:>5.2}×",
                naive.blocks_loaded,
                naive.latency_iters,
                re.blocks_loaded,
                re.latency_iters,
                naive.blocks_loaded as f64 / re.blocks_loaded as f64
            );
        }
    }

    let s = make_schedule(4, 2, true, Phase::Qk)?;
    println!("\nreordered N = 4, p = 2:");
    for e in s.events() {
        println!("  iter {:>2} {:?} lane {} ({}, {})", e.iter, e.kind, e.lane, e.row, e.col);
    }
    Ok(())
}
