//! Training from IDX files (the MNIST container format). A small synthetic
//! fixture is written first so the example runs offline; point the paths at
//! real `*-ubyte` files to use MNIST itself.
//!
//! ```text
//! cargo run --release --example idx_mnist
//! ```

use std::fs;

use memnorm::cli::RunConfig;
use memnorm::data::{encode_idx, Dataset, Split};
use memnorm::tensor::Tensor;
use memnorm::train::fit;
use memnorm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8x8 images of a bright horizontal (class 0) or vertical (class 1) bar.
fn bars(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let at = rng.random_range(1..7);
        for r in 0..8 {
            for c in 0..8 {
                let on = if class == 0 { r == at } else { c == at };
                let noise: f64 = rng.random_range(0.0..0.4);
                data.push(if on { 1.0 - noise / 2.0 } else { noise });
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 1, 8, 8], data)?, labels, 2, Split::Train)
}

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("memnorm-idx-example");
    fs::create_dir_all(&dir).expect("temp dir");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (split, n) in [("train", 400), ("test", 200)] {
        let (images, labels) = encode_idx(&bars(n, &mut rng)?)?;
        fs::write(dir.join(format!("{split}-images-idx3-ubyte")), images).expect("write");
        fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), labels).expect("write");
    }

    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.kind", "idx"),
        ("data.standardize", "true"),
        ("model.hidden", "32,32"),
        ("train.epochs", "3"),
    ] {
        cfg.set(k, v)?;
    }
    for split in ["train", "test"] {
        cfg.set(&format!("data.{split}_images"), dir.join(format!("{split}-images-idx3-ubyte")).to_str().unwrap())?;
        cfg.set(&format!("data.{split}_labels"), dir.join(format!("{split}-labels-idx1-ubyte")).to_str().unwrap())?;
    }
    let record = fit(&cfg.experiment(), &cfg.load_data()?)?;
    print!("{}", record.to_csv());
    Ok(())
}
