//! A small convolutional network with MBN, where each channel's statistics
//! pool over batch and spatial positions.
//!
//! ```text
//! cargo run --release --example cnn
//! ```

use memnorm::data::{Dataset, Split, TrainTest};
use memnorm::norm::NormConfig;
use memnorm::tensor::Tensor;
use memnorm::train::{fit, Arch, Experiment, TrainConfig};
use memnorm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 6x6 single-channel images: class 0 is brighter on the left half,
/// class 1 on the right.
fn halves(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 36);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &class in &labels {
        for _r in 0..6 {
            for c in 0..6 {
                let bright = (c < 3) == (class == 0);
                data.push(if bright { 0.6 } else { 0.0 } + rng.random_range(-0.5..0.5));
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 6, 6], data)?, labels, 2, split)
}

fn main() -> Result<()> {
    let data = TrainTest {
        train: halves(256, 1, Split::Train)?,
        test: halves(128, 2, Split::Test)?,
    };
    let exp = Experiment {
        seed: 1,
        arch: Arch::Cnn { channels: vec![4, 4] },
        norm: NormConfig::default(),
        train: TrainConfig { batch_size: 16, epochs: 4, lr0: 0.05, ..TrainConfig::default() },
    };
    print!("{}", fit(&exp, &data)?.to_csv());
    Ok(())
}
