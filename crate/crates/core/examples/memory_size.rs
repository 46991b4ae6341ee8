//! Sensitivity of MBN to the memory capacity k.
//!
//! ```text
//! cargo run --release --example memory_size
//! ```

use memnorm::cli::RunConfig;
use memnorm::norm::NormMode;
use memnorm::train::fit;
use memnorm::Result;

fn main() -> Result<()> {
    let seeds = 5;
    for k in [0, 5, 10, 20, 40] {
        let mut total = 0.0;
        for seed in 1..=seeds {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.norm.mode = NormMode::Mbn;
            cfg.norm.memory = k;
            total += fit(&cfg.experiment(), &cfg.load_data()?)?.final_test_error().unwrap_or(f64::NAN);
        }
        println!("k = {k:2}: mean test error {:.4}", total / seeds as f64);
    }
    Ok(())
}
