//! Memorized statistics versus the weighted-average baseline, and the
//! sample-level pooled statistics they are meant to reproduce.
//!
//! ```text
//! cargo run --example memorized_stats
//! ```

use memnorm::oracle::pooled_stats;
use memnorm::stats::{
    memorized_stats, weighted_moving_stats, weights_for_memory, BatchStats, StatsMemory,
};
use memnorm::tensor::Tensor;
use memnorm::Result;

fn main() -> Result<()> {
    // two batches of one feature whose means disagree
    let a = Tensor::vector(vec![0.0, 2.0]);
    let b = Tensor::vector(vec![4.0, 6.0]);
    let sa = BatchStats::new(vec![1.0], vec![1.0], 2)?;
    let sb = BatchStats::new(vec![5.0], vec![1.0], 2)?;

    let mut memory = StatsMemory::new(20, 1.0, 1.0)?;
    memory.push(sa.clone())?;
    let mem = memorized_stats(&memory, &sb)?;
    let avg = weighted_moving_stats(&[(sa, 1.0), (sb, 1.0)])?;
    let pooled = pooled_stats(&[a, b], &[1.0, 1.0])?;
    println!("pooled samples      mean {} var {}", pooled.mean[0], pooled.var[0]);
    println!("memorized (moments) mean {} var {}", mem.mean[0], mem.var[0]);
    println!("weighted average    mean {} var {}", avg.mean[0], avg.var[0]);

    // geometric decay of older entries
    let mut memory = StatsMemory::new(20, 0.9, 0.1)?;
    for m in [1.0, 2.0, 3.0] {
        memory.push(BatchStats::new(vec![m], vec![1.0], 8)?)?;
    }
    println!("weights, oldest first, current batch last: {:?}", weights_for_memory(&memory));
    memory.set_lambda(0.0)?;
    let current = BatchStats::new(vec![10.0], vec![4.0], 8)?;
    let m = memorized_stats(&memory, &current)?;
    println!("lambda = 0 gives back the current batch: mean {} var {}", m.mean[0], m.var[0]);
    Ok(())
}
