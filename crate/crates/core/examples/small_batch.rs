//! BN versus MBN with batch size 8 on 10-class Gaussian blobs, several seeds.
//!
//! ```text
//! cargo run --release --example small_batch [-- separation seeds]
//! ```

use memnorm::cli::RunConfig;
use memnorm::norm::NormMode;
use memnorm::train::fit;
use memnorm::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let separation: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (mut sum_bn, mut sum_mbn, mut wins) = (0.0, 0.0, 0);
    for seed in 1..=seeds {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.data.separation = separation;
        let data = cfg.load_data()?;
        let mut errors = [0.0; 2];
        for (slot, mode) in errors.iter_mut().zip([NormMode::Bn, NormMode::Mbn]) {
            cfg.norm.mode = mode;
            *slot = fit(&cfg.experiment(), &data)?.final_test_error().unwrap_or(f64::NAN);
        }
        println!("seed {seed}: bn {:.4}  mbn {:.4}", errors[0], errors[1]);
        sum_bn += errors[0];
        sum_mbn += errors[1];
        wins += (errors[1] < errors[0]) as usize;
    }
    let n = seeds as f64;
    println!("mean test error: bn {:.4}  mbn {:.4}  (mbn lower in {wins}/{seeds} seeds)", sum_bn / n, sum_mbn / n);
    Ok(())
}
