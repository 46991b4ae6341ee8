//! Accuracy of single-batch, moving-average, weighted and memorized
//! statistics against the true moments of a stream, with and without drift.
//!
//! ```text
//! cargo run --release --example stats_bench
//! ```

use memnorm::cli::bench::{bench_csv, run, BenchConfig};
use memnorm::Result;

fn main() -> Result<()> {
    let cfg = BenchConfig {
        drifts: vec![0.0, 0.1],
        ..BenchConfig::default()
    };
    print!("{}", bench_csv(&run(&cfg)?));
    Ok(())
}
