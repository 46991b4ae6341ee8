//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the console.

use std::fs;
use std::process::Command;
use std::time::Instant;

use memnorm::cli::bench::{run as run_bench, BenchConfig};
use memnorm::cli::{bn_equivalence_gap, network_fixture, RunConfig};
use memnorm::net::{ForwardMode, Network};
use memnorm::norm::{NormConfig, NormLayer, NormMode};
use memnorm::oracle::{
    check_network, check_norm_instance, pooled_stats, NormInstance, DEFAULT_STEP,
};
use memnorm::stats::{memorized_stats, weights_for_memory, BatchStats, StatsMemory};
use memnorm::tensor::{reduce_moments, Tensor};
use memnorm::train::{
    fit, staleness, train_iteration_double, train_iteration_single, OptState, StepSettings,
};
use memnorm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_ABS_TOL: f64 = 1e-8;
const NET_REL_TOL: f64 = 1e-4;
const INSTANCES_PER_MODE: usize = 25;
const IDENTITY_TOL: f64 = 1e-12;
const IDENTITY_INSTANCES: usize = 100;
const MOMENT_REL_TOL: f64 = 1e-10;
const CONSISTENCY_TOL: f64 = 1e-12;
const DIRECTIONAL_MARGIN: f64 = 0.005;
const SEEDS: u64 = 8;
const BENCH_TRIALS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in NormMode::ALL {
        let mut worst: f64 = 0.0;
        let mut passed = 0;
        for _ in 0..INSTANCES_PER_MODE {
            let batch = rng.random_range(2..=8);
            let features = rng.random_range(1..=5);
            let memory = rng.random_range(0..=4);
            let lambda = rng.random_range(0.0..=1.0);
            let inst = NormInstance::random(mode, batch, features, memory, lambda, &mut rng)?;
            let check = check_norm_instance(&inst, DEFAULT_STEP, (GRAD_REL_TOL, GRAD_ABS_TOL))?;
            worst = worst.max(check.max_rel_err());
            passed += check.passed() as usize;
        }
        ok &= passed == INSTANCES_PER_MODE;
        notes.push(format!("{mode} {passed}/{INSTANCES_PER_MODE} (max rel {worst:.1e})"));
    }
    for mode in NormMode::ALL {
        // BRN keeps its identity bounds here: a network-level difference
        // quotient would otherwise see r and d move with the input.
        let (net, x, y) = network_fixture("mlp", mode, 6, 4, 3, 0.7, 17)?;
        let check = check_network(&net, &x, &y, DEFAULT_STEP, (NET_REL_TOL, GRAD_ABS_TOL))?;
        ok &= check.passed();
        notes.push(format!("mlp/{mode} max rel {:.1e}", check.max_rel_err()));
    }
    outcome(ok, notes.join(", "))
}

fn criterion_2() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..IDENTITY_INSTANCES {
        let batch = rng.random_range(2..=8);
        let features = rng.random_range(1..=5);
        // even instances: λ = 0 with a full memory; odd: empty memory, any λ
        let (memory, lambda) = if i % 2 == 0 {
            (rng.random_range(1..=4), 0.0)
        } else {
            (0, rng.random_range(0.0..=1.0))
        };
        let inst = NormInstance::random(NormMode::Mbn, batch, features, memory, lambda, &mut rng)?;
        worst = worst.max(bn_equivalence_gap(&inst)?);
    }
    outcome(
        worst <= IDENTITY_TOL,
        format!("{IDENTITY_INSTANCES} instances, max abs diff {worst:.1e} (tol {IDENTITY_TOL:.0e})"),
    )
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..IDENTITY_INSTANCES {
        let features = rng.random_range(1..=4);
        let k = rng.random_range(0..=6);
        let eta = rng.random_range(0.05..=1.0);
        let lambda = rng.random_range(0.05..=1.0);
        let mut memory = StatsMemory::new(k, eta, lambda)?;
        let mut raw = Vec::new();
        for _ in 0..=k {
            let n = rng.random_range(1..=9);
            let shift: f64 = rng.random_range(-3.0..3.0);
            raw.push(Tensor::from_fn(&[n, features], |_| shift + rng.random_range(-2.0..2.0)));
        }
        let stats: Vec<BatchStats> = raw.iter().map(BatchStats::from_activations).collect::<Result<_>>()?;
        for s in &stats[..k] {
            memory.push(s.clone())?;
        }
        let moment = memorized_stats(&memory, &stats[k])?;
        let sample = pooled_stats(&raw, &weights_for_memory(&memory))?;
        for f in 0..features {
            worst = worst.max(rel(moment.mean[f], sample.mean[f])).max(rel(moment.var[f], sample.var[f]));
        }
    }
    let mut memory = StatsMemory::new(1, 1.0, 0.5)?;
    memory.push(BatchStats::new(vec![0.0], vec![1.0], 2)?)?;
    let worked = memorized_stats(&memory, &BatchStats::new(vec![4.0], vec![1.0], 2)?)?;
    let worked_err = rel(worked.mean[0], 8.0 / 3.0).max(rel(worked.var[0], 123.0 / 27.0));
    outcome(
        worst <= MOMENT_REL_TOL && worked_err <= MOMENT_REL_TOL,
        format!(
            "{IDENTITY_INSTANCES} collections max rel {worst:.1e}; worked example ({}, {}) rel {worked_err:.1e}",
            worked.mean[0], worked.var[0]
        ),
    )
}

fn criterion_4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut cases: Vec<Vec<Tensor>> = vec![vec![
        Tensor::new(vec![2, 1], vec![0.0, 2.0])?,
        Tensor::new(vec![2, 1], vec![4.0, 6.0])?,
    ]];
    for _ in 0..IDENTITY_INSTANCES {
        let (k, n, f) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(1..=3));
        cases.push(
            (0..k)
                .map(|_| {
                    let shift: f64 = rng.random_range(-5.0..5.0);
                    Tensor::from_fn(&[n, f], |_| shift + rng.random_range(-1.0..1.0))
                })
                .collect(),
        );
    }
    let mut first = (0.0, 0.0);
    for (ci, batches) in cases.iter().enumerate() {
        let f = batches[0].shape()[1];
        let mut memory = StatsMemory::new(batches.len(), 1.0, 1.0)?;
        let stats: Vec<BatchStats> = batches.iter().map(BatchStats::from_activations).collect::<Result<_>>()?;
        for s in &stats[..stats.len() - 1] {
            memory.push(s.clone())?;
        }
        let m = memorized_stats(&memory, stats.last().unwrap())?;
        let all: Vec<f64> = batches.iter().flat_map(|b| b.data().iter().copied()).collect();
        let rows = all.len() / f;
        let (mean, var) = reduce_moments(&Tensor::new(vec![rows, f], all)?, &[0])?;
        for j in 0..f {
            worst = worst.max(rel(m.mean[j], mean.data()[j])).max(rel(m.var[j], var.data()[j]));
        }
        if ci == 0 {
            first = (m.mean[0], m.var[0]);
        }
    }
    outcome(
        worst <= MOMENT_REL_TOL && first == (3.0, 5.0),
        format!("[0,2]/[4,6] -> ({}, {}); {} cases max rel {worst:.1e}", first.0, first.1, cases.len()),
    )
}

fn criterion_5() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..IDENTITY_INSTANCES {
        let batch = rng.random_range(2..=8);
        let features = rng.random_range(1..=5);
        let mut inst = NormInstance::random(NormMode::Brn, batch, features, 0, 0.0, &mut rng)?;
        inst.layer.set_brn_bounds(1.0, 0.0)?;
        let mut bn = NormLayer::new(features, &NormConfig::with_mode(NormMode::Bn))?;
        bn.gamma_mut().copy_from_slice(inst.layer.gamma());
        bn.beta_mut().copy_from_slice(inst.layer.beta());
        let mut brn = inst.layer.clone();
        let (ya, _) = brn.forward_train(&inst.x)?;
        let (yb, _) = bn.forward_train(&inst.x)?;
        let ga = brn.backward(&inst.grad_y)?;
        let gb = bn.backward(&inst.grad_y)?;
        worst = worst
            .max(max_gap(ya.data(), yb.data()))
            .max(max_gap(ga.grad_x.data(), gb.grad_x.data()))
            .max(max_gap(&ga.grad_gamma, &gb.grad_gamma))
            .max(max_gap(&ga.grad_beta, &gb.grad_beta));
    }
    outcome(
        worst <= IDENTITY_TOL,
        format!("{IDENTITY_INSTANCES} instances, max abs diff {worst:.1e}"),
    )
}

fn mbn_mlp(seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::mlp(5, &[16, 16], 3, Some(&NormConfig::with_mode(NormMode::Mbn)), &mut rng)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, f: usize) -> (Tensor, Vec<usize>) {
    let x = Tensor::from_fn(&[n, f], |_| rng.random_range(-2.0..2.0));
    (x, (0..n).map(|i| i % 3).collect())
}

const STEP: StepSettings = StepSettings {
    lr: 0.1,
    momentum: 0.9,
    weight_decay: 1e-4,
};

fn criterion_6() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut net = mbn_mlp(6)?;
    let mut opt = OptState::new(&mut net);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (x, y) = random_batch(&mut rng, 8, 5);
        // the gradient pass fixes the statistics eval will use
        let train = net.forward(&x, ForwardMode::TrainGrad)?;
        worst = worst.max(max_gap(net.predict(&x)?.data(), train.output.data()));
        net.clear_caches();
        train_iteration_double(&mut net, &x, &y, &mut opt, STEP)?;
        let (x2, _) = random_batch(&mut rng, 8, 5);
        let second = net.forward(&x2, ForwardMode::StatsOnly)?;
        worst = worst.max(max_gap(net.predict(&x2)?.data(), second.output.data()));
    }
    outcome(worst <= CONSISTENCY_TOL, format!("max abs diff {worst:.1e} over 20 batches"))
}

/// Statistics each norm layer produces on `x` under the current parameters
/// when the most recent memory entry (the one just recorded) is not yet in
/// memory, compared against that entry.
fn recomputed_staleness(net: &Network, x: &Tensor) -> Result<f64> {
    let mut before = net.clone();
    let mut recorded = Vec::new();
    for layer in before.norm_layers_mut() {
        let mem = layer.memory_mut().expect("memory layer");
        let entries: Vec<BatchStats> = mem.entries().cloned().collect();
        mem.clear();
        for e in &entries[..entries.len() - 1] {
            mem.push(e.clone())?;
        }
        recorded.push(entries.last().cloned().expect("a recorded entry"));
    }
    let (_, fresh, _) = before.stats_pass(x)?;
    staleness(&recorded, &fresh)
}

fn criterion_7() -> Result<Outcome> {
    let iterations = 15;
    let mut worst_double: f64 = 0.0;
    let mut min_single = f64::INFINITY;
    for double in [true, false] {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let mut net = mbn_mlp(7)?;
        let mut opt = OptState::new(&mut net);
        for _ in 0..iterations {
            let (x, y) = random_batch(&mut rng, 8, 5);
            let m = if double {
                train_iteration_double(&mut net, &x, &y, &mut opt, STEP)?
            } else {
                train_iteration_single(&mut net, &x, &y, &mut opt, STEP)?
            };
            let s = recomputed_staleness(&net, &x)?;
            if double {
                worst_double = worst_double.max(s).max(m.staleness);
            } else {
                min_single = min_single.min(s).min(m.staleness);
            }
        }
    }
    outcome(
        worst_double == 0.0 && min_single > 0.0,
        format!("double max {worst_double:e}; single min {min_single:.2e} over {iterations} iterations"),
    )
}

/// Final test error per seed for each configuration, run in parallel.
fn sweep(configs: &[RunConfig]) -> Result<Vec<Vec<f64>>> {
    std::thread::scope(|s| {
        let handles: Vec<Vec<_>> = configs
            .iter()
            .map(|cfg| {
                (1..=SEEDS)
                    .map(|seed| {
                        let mut c = cfg.clone();
                        c.seed = seed;
                        s.spawn(move || -> Result<f64> {
                            let rec = fit(&c.experiment(), &c.load_data()?)?;
                            Ok(rec.final_test_error().expect("a test row"))
                        })
                    })
                    .collect()
            })
            .collect();
        handles
            .into_iter()
            .map(|hs| hs.into_iter().map(|h| h.join().expect("run panicked")).collect())
            .collect()
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_8_and_10() -> Result<(Outcome, Outcome)> {
    let base = RunConfig::default();
    let mut bn = base.clone();
    bn.norm.mode = NormMode::Bn;
    let mut mbn = base.clone();
    mbn.norm.mode = NormMode::Mbn;
    let mut configs = vec![bn, mbn];
    for lambda in ["0.1", "0.5", "0.9"] {
        let mut c = configs[1].clone();
        c.set("train.lambda_schedule", &format!("0:{lambda}"))?;
        configs.push(c);
    }
    let errors = sweep(&configs)?;
    let (bn_err, mbn_err) = (&errors[0], &errors[1]);
    let wins = bn_err.iter().zip(mbn_err).filter(|(b, m)| m < b).count();
    let c8 = Outcome {
        pass: mean(mbn_err) <= mean(bn_err) + DIRECTIONAL_MARGIN && 2 * wins > SEEDS as usize,
        detail: format!(
            "{SEEDS} seeds, mean test error bn {:.4} mbn {:.4}, mbn lower in {wins}/{SEEDS}",
            mean(bn_err),
            mean(mbn_err)
        ),
    };
    let fixed: Vec<f64> = errors[2..].iter().map(|e| mean(e)).collect();
    let c10 = Outcome {
        pass: fixed.iter().all(|&f| mean(mbn_err) <= f + DIRECTIONAL_MARGIN),
        detail: format!(
            "scheduled {:.4}; fixed 0.1 {:.4}, 0.5 {:.4}, 0.9 {:.4}",
            mean(mbn_err),
            fixed[0],
            fixed[1],
            fixed[2]
        ),
    };
    Ok((c8, c10))
}

fn criterion_9() -> Result<Outcome> {
    let rows = run_bench(&BenchConfig {
        batch_sizes: vec![8],
        drifts: vec![0.0],
        trials: BENCH_TRIALS,
        ..BenchConfig::default()
    })?;
    let get = |name: &str| rows.iter().find(|r| r.estimator == name).map(|r| r.mse()).unwrap();
    let (single, memorized) = (get("single"), get("memorized"));
    outcome(
        memorized < single,
        format!("batch 8, {BENCH_TRIALS} trials: mse single {single:.4} memorized {memorized:.4}"),
    )
}

fn criterion_11() -> Result<Outcome> {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 3\ndata.train_per_class = 60\ndata.test_per_class = 30\ntrain.epochs = 3\n")
        .expect("write config");
    let run = |out: &str, config: &std::path::Path| {
        Command::new(env!("CARGO_BIN_EXE_memnorm"))
            .args(["train", "--config"])
            .arg(config)
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .expect("run memnorm")
            .status
            .success()
    };
    let ok = run("a", &cfg) && run("b", &cfg) && run("c", &dir.path().join("a/config.resolved"));
    let read = |d: &str| fs::read(dir.path().join(d).join("metrics.csv")).unwrap_or_default();
    let (a, b, c) = (read("a"), read("b"), read("c"));
    outcome(
        ok && !a.is_empty() && a == b && a == c,
        format!("{} bytes; rerun identical: {}; from config.resolved identical: {}", a.len(), a == b, a == c),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, start: Instant, r: Result<Outcome>| {
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(o) => {
                failures += !o.pass as usize;
                println!(
                    "criterion {n:2} {}: {name}: {} [{secs:.1}s]",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.detail
                );
            }
            Err(e) => {
                failures += 1;
                println!("criterion {n:2} FAIL: {name}: error {e} [{secs:.1}s]");
            }
        }
    };
    let t = Instant::now();
    report(1, "gradient exactness", t, criterion_1());
    let t = Instant::now();
    report(2, "BN reduction", t, criterion_2());
    let t = Instant::now();
    report(3, "moment form equals sample form", t, criterion_3());
    let t = Instant::now();
    report(4, "pooled variance", t, criterion_4());
    let t = Instant::now();
    report(5, "BRN identity regime", t, criterion_5());
    let t = Instant::now();
    report(6, "train/eval consistency", t, criterion_6());
    let t = Instant::now();
    report(7, "double-forward staleness", t, criterion_7());
    let t = Instant::now();
    let (c8, c10) = match criterion_8_and_10() {
        Ok((a, b)) => (Ok(a), Ok(b)),
        Err(e) => (Err(e), Err(memnorm::Error::State("sweep failed".into()))),
    };
    report(8, "small-batch directional", t, c8);
    let t2 = Instant::now();
    report(9, "estimator bench", t2, criterion_9());
    report(10, "lambda schedule non-inferiority", t, c10);
    let t = Instant::now();
    report(11, "determinism", t, criterion_11());
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
