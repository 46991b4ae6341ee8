//! Single versus double forward: how far the recorded statistics lag behind
//! the statistics the updated parameters actually produce.
//!
//! ```text
//! cargo run --release --example double_forward
//! ```

use memnorm::data::{BlobSpec, Split};
use memnorm::net::Network;
use memnorm::norm::{NormConfig, NormMode};
use memnorm::train::{train_iteration_double, train_iteration_single, OptState, StepSettings};
use memnorm::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let spec = BlobSpec { num_classes: 4, dim: 8, separation: 3.0, drift_per_batch: 0.0 };
    let data = spec.generate(1, Split::Train, 64)?;
    let step = StepSettings { lr: 0.1, momentum: 0.9, weight_decay: 1e-4 };
    for double in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::mlp(8, &[32, 32], 4, Some(&NormConfig::with_mode(NormMode::Mbn)), &mut rng)?;
        let mut opt = OptState::new(&mut net);
        let mut total = 0.0;
        let iters = data.len() / 16;
        for it in 0..iters {
            let idx: Vec<usize> = (it * 16..(it + 1) * 16).collect();
            let (x, y) = data.batch(&idx)?;
            let m = if double {
                train_iteration_double(&mut net, &x, &y, &mut opt, step)?
            } else {
                train_iteration_single(&mut net, &x, &y, &mut opt, step)?
            };
            total += m.staleness;
        }
        let name = if double { "double" } else { "single" };
        println!("{name}: mean staleness over {iters} iterations = {:.3e}", total / iters as f64);
    }
    Ok(())
}
