//! Finite-difference verification of every normalization layer's backward
//! pass and of a whole network.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use memnorm::cli::network_fixture;
use memnorm::norm::NormMode;
use memnorm::oracle::{
    check_network, check_norm_instance, NormInstance, DEFAULT_STEP, TOL_LAYER, TOL_NETWORK,
};
use memnorm::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for mode in NormMode::ALL {
        let mut worst: f64 = 0.0;
        let mut passed = 0;
        for _ in 0..20 {
            let inst = NormInstance::random(mode, 6, 4, 4, 0.9, &mut rng)?;
            let check = check_norm_instance(&inst, DEFAULT_STEP, TOL_LAYER)?;
            worst = worst.max(check.max_rel_err());
            passed += check.passed() as usize;
        }
        println!("{mode:8} {passed}/20 instances pass, worst relative error {worst:.2e}");
    }
    for arch in ["mlp", "cnn"] {
        let (net, x, y) = network_fixture(arch, NormMode::Mbn, 4, 3, 3, 0.9, 1)?;
        let check = check_network(&net, &x, &y, DEFAULT_STEP, TOL_NETWORK)?;
        println!("{arch} with MBN: pass = {}, worst relative error {:.2e}", check.passed(), check.max_rel_err());
    }
    Ok(())
}
