//! Scheduled λ (0.1, then 0.5 and 0.9 at 40% and 60% of training) against
//! fixed values.
//!
//! ```text
//! cargo run --release --example lambda_ablation
//! ```

use memnorm::cli::RunConfig;
use memnorm::norm::NormMode;
use memnorm::train::fit;
use memnorm::Result;

fn main() -> Result<()> {
    let settings = [
        ("scheduled", "0:0.1,0.4:0.5,0.6:0.9"),
        ("fixed 0.1", "0:0.1"),
        ("fixed 0.5", "0:0.5"),
        ("fixed 0.9", "0:0.9"),
    ];
    let seeds = 5;
    for (name, schedule) in settings {
        let mut total = 0.0;
        for seed in 1..=seeds {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.norm.mode = NormMode::Mbn;
            cfg.set("train.lambda_schedule", schedule)?;
            total += fit(&cfg.experiment(), &cfg.load_data()?)?.final_test_error().unwrap_or(f64::NAN);
        }
        println!("{name:10} mean test error {:.4}", total / seeds as f64);
    }
    Ok(())
}
