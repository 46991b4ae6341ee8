//! The `memnorm` command line: `train`, `gradcheck` and `statsbench`.
//!
//! Exit codes: 0 success, 1 failed check, 2 bad configuration or I/O,
//! 3 non-finite loss during training.

pub mod bench;
pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::norm::{NormConfig, NormLayer, NormMode};
use crate::oracle::{check_network, check_norm_instance, GradCheck, NormInstance, DEFAULT_STEP, TOL_LAYER, TOL_NETWORK};
use crate::tensor::Tensor;
use crate::train::{fit_with_network, train_iteration_double, OptState, RunRecord, StepSettings, METRICS_HEADER};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "memnorm", version, about = "Memorized batch normalization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics.csv, config.resolved and model.ckpt.
    Train(TrainArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare statistics estimators against known generating moments.
    Statsbench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file of `key = value` lines; defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed sweep, e.g. `1..5` (inclusive) or `1,4,9`; runs in parallel,
    /// one `seed-<n>` subdirectory each, plus a merged metrics.csv.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// bn, mbn, brn, movnorm, mlp, cnn or all.
    pub mode: String,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub features: usize,
    #[arg(long, default_value_t = 3)]
    pub memory: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    /// Norm mode inside the `mlp` and `cnn` checks.
    #[arg(long, default_value = "mbn")]
    pub norm: NormMode,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub drift: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub features: usize,
    #[arg(long, default_value_t = 20)]
    pub memory: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub theta: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Statsbench(a) => cmd_statsbench(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Numeric(_) | Error::State(_) | Error::Domain(_) => 1,
        _ => 2,
    }
}

/// `1..5` (inclusive), `7` or `1,4,9`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list `{spec}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs one configuration and writes its artifacts into `out`.
pub fn run_to_dir(cfg: &RunConfig, out: &Path) -> Result<RunRecord> {
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write(&out.join("config.resolved"), cfg.resolved())?;
    let data = cfg.load_data()?;
    let (record, mut net) = fit_with_network(&cfg.experiment(), &data)?;
    write(&out.join("metrics.csv"), record.to_csv())?;
    checkpoint::save(&mut net, &out.join("model.ckpt"))?;
    Ok(record)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.train.validate()?;
    let Some(spec) = &args.seeds else {
        let record = run_to_dir(&cfg, &args.out)?;
        report(&record);
        return Ok(());
    };
    let seeds = parse_seeds(spec)?;
    let results: Vec<Result<RunRecord>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                let dir = args.out.join(format!("seed-{seed}"));
                s.spawn(move || run_to_dir(&c, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::state("training thread panicked"))))
            .collect()
    });
    let mut merged = String::from(METRICS_HEADER);
    merged.push('\n');
    for r in results {
        let record = r?;
        report(&record);
        for line in record.to_csv().lines().skip(1) {
            merged.push_str(line);
            merged.push('\n');
        }
    }
    write(&args.out.join("metrics.csv"), merged)
}

fn report(record: &RunRecord) {
    if let Some(last) = record.rows.last() {
        println!(
            "{} seed {}: epoch {} test error {} loss {}",
            last.method, last.seed, last.epoch, last.error, last.loss
        );
    }
}

fn print_check(label: &str, check: &GradCheck) {
    let groups: Vec<String> = check
        .groups
        .iter()
        .map(|g| format!("{}={:.3e}", g.name, g.report.max_rel_err))
        .collect();
    println!(
        "{label}: {} max_rel_err [{}]",
        if check.passed() { "PASS" } else { "FAIL" },
        groups.join(" ")
    );
    for g in check.groups.iter().filter(|g| !g.report.passed) {
        for o in &g.report.worst {
            println!(
                "  {}[{}]: analytic {} numeric {} abs err {}",
                g.name, o.index, o.analytic, o.numeric, o.abs_err
            );
        }
    }
}

/// Largest absolute difference between an MBN/MovNorm layer and a BN layer
/// with the same affine parameters, over forward output and all gradients.
pub fn bn_equivalence_gap(inst: &NormInstance) -> Result<f64> {
    let mut layer = inst.layer.clone();
    let mut bn = NormLayer::new(layer.features(), &NormConfig::with_mode(NormMode::Bn))?;
    bn.gamma_mut().copy_from_slice(layer.gamma());
    bn.beta_mut().copy_from_slice(layer.beta());
    let (ya, _) = layer.forward_train(&inst.x)?;
    let (yb, _) = bn.forward_train(&inst.x)?;
    let ga = layer.backward(&inst.grad_y)?;
    let gb = bn.backward(&inst.grad_y)?;
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok([
        gap(ya.data(), yb.data()),
        gap(ga.grad_x.data(), gb.grad_x.data()),
        gap(&ga.grad_gamma, &gb.grad_gamma),
        gap(&ga.grad_beta, &gb.grad_beta),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

/// A small network whose statistics stores were filled by a few training
/// iterations, with an input batch and labels for a whole-network check.
pub fn network_fixture(
    arch: &str,
    norm: NormMode,
    batch: usize,
    features: usize,
    memory: usize,
    lambda: f64,
    seed: u64,
) -> Result<(Network, Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NormConfig {
        mode: norm,
        memory: memory.max(1),
        lambda,
        ..NormConfig::default()
    };
    let classes = 3;
    let (mut net, shape) = match arch {
        "mlp" => (Network::mlp(features, &[6, 5], classes, Some(&cfg), &mut rng)?, vec![batch, features]),
        "cnn" => (Network::cnn([2, 4, 4], &[3], classes, Some(&cfg), &mut rng)?, vec![batch, 2, 4, 4]),
        other => return Err(Error::arg(format!("no network fixture `{other}`"))),
    };
    let sample = |rng: &mut ChaCha8Rng| Tensor::from_fn(&shape, |_| rng.random_range(-2.0..2.0));
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let mut opt = OptState::new(&mut net);
    let step = StepSettings {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    for _ in 0..memory {
        let x = sample(&mut rng);
        train_iteration_double(&mut net, &x, &labels, &mut opt, step)?;
    }
    net.clear_caches();
    Ok((net, sample(&mut rng), labels))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let modes: Vec<&str> = match args.mode.as_str() {
        "all" => vec!["bn", "mbn", "brn", "movnorm", "mlp", "cnn"],
        m => vec![m],
    };
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for mode in modes {
        for i in 0..args.instances.max(1) {
            let seed = args.seed.wrapping_add(i as u64);
            let label = format!("{mode} #{i}");
            let check = match mode {
                "mlp" | "cnn" => {
                    let (net, x, y) = network_fixture(
                        mode,
                        args.norm,
                        args.batch,
                        args.features,
                        args.memory,
                        args.lambda,
                        seed,
                    )?;
                    check_network(&net, &x, &y, args.step, TOL_NETWORK)?
                }
                m => {
                    let norm: NormMode = m.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let inst = NormInstance::random(norm, args.batch, args.features, args.memory, args.lambda, &mut rng)?;
                    if args.lambda == 0.0 && norm.uses_memory() {
                        let gap = bn_equivalence_gap(&inst)?;
                        let pass = gap <= 1e-12;
                        ok &= pass;
                        println!(
                            "{label}: BN equivalence {} (max abs diff {gap:.3e})",
                            if pass { "PASS" } else { "FAIL" }
                        );
                    }
                    check_norm_instance(&inst, args.step, TOL_LAYER)?
                }
            };
            print_check(&label, &check);
            ok &= check.passed();
            worst = worst.max(check.max_rel_err());
        }
    }
    println!(
        "gradcheck {}: {} (worst max_rel_err {worst:.3e})",
        args.mode,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

pub fn cmd_statsbench(args: &BenchArgs) -> Result<()> {
    let cfg = bench::BenchConfig {
        seed: args.seed,
        batch_sizes: args.batch_sizes.clone(),
        drifts: args.drift.clone(),
        trials: args.trials,
        features: args.features,
        memory: args.memory,
        eta: args.eta,
        lambda: args.lambda,
        theta: args.theta,
    };
    let csv = bench::bench_csv(&bench::run(&cfg)?);
    match &args.out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1..3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("3..1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Divergence { epoch: 1, iteration: 2 }), 3);
    }

    #[test]
    fn train_writes_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let args = |out: PathBuf| TrainArgs {
            config: None,
            overrides: vec![
                "data.train_per_class=20".into(),
                "data.test_per_class=10".into(),
                "data.classes=3".into(),
                "train.epochs=2".into(),
                "model.hidden=8".into(),
            ],
            out,
            seeds: None,
        };
        cmd_train(&args(dir.path().join("a"))).unwrap();
        cmd_train(&args(dir.path().join("b"))).unwrap();
        let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 1 + 2 * 2);
        let resolved = fs::read_to_string(dir.path().join("a/config.resolved")).unwrap();
        let again = TrainArgs {
            config: Some(dir.path().join("a/config.resolved")),
            overrides: vec![],
            out: dir.path().join("c"),
            seeds: None,
        };
        cmd_train(&again).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("c/config.resolved")).unwrap(), resolved);
        assert_eq!(
            fs::read(dir.path().join("a/metrics.csv")).unwrap(),
            fs::read(dir.path().join("c/metrics.csv")).unwrap()
        );
        assert!(dir.path().join("a/model.ckpt").exists());
    }

    #[test]
    fn gradcheck_modes_pass() {
        for mode in ["bn", "mbn", "brn", "movnorm", "mlp", "cnn"] {
            let args = GradcheckArgs {
                mode: mode.into(),
                batch: 4,
                features: 3,
                memory: 3,
                seed: 7,
                lambda: 0.9,
                instances: 1,
                step: DEFAULT_STEP,
                norm: NormMode::Mbn,
            };
            assert!(cmd_gradcheck(&args).unwrap(), "{mode}");
        }
    }
}
