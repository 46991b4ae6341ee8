//! SGD with momentum, piecewise schedules, single- and double-forward
//! iterations, and the epoch loop that produces a [`RunRecord`].

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{batches_with, Dataset, TrainTest};
use crate::error::{Error, Result};
use crate::net::{count_errors, softmax_xent, ForwardMode, Layer, Network};
use crate::norm::{NormConfig, NormMode};
use crate::rng::{indexed, substream, Stream};
use crate::stats::BatchStats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardScheme {
    /// Record the statistics of the gradient pass.
    Single,
    /// Record the statistics of a second, statistics-only pass run after the
    /// parameter update.
    Double,
}

impl ForwardScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            ForwardScheme::Single => "single",
            ForwardScheme::Double => "double",
        }
    }
}

impl fmt::Display for ForwardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForwardScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "1" => Ok(ForwardScheme::Single),
            "double" | "2" => Ok(ForwardScheme::Double),
            other => Err(Error::arg(format!(
                "unknown forward scheme `{other}` (expected single or double)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training fractions at which the learning rate is divided by 10.
    pub lr_drops: Vec<f64>,
    /// `(fraction, λ)` pairs; λ holds from each fraction until the next.
    /// Empty keeps the norm config's λ for the whole run.
    pub lambda_schedule: Vec<(f64, f64)>,
    /// Final `(r_max, d_max)` for BRN, reached at the end of the ramp.
    pub brn_max: (f64, f64),
    /// Fractions between which the BRN bounds ramp from `(1, 0)`.
    pub brn_ramp: (f64, f64),
    pub scheme: ForwardScheme,
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 10,
            lr_drops: vec![0.4, 0.6],
            lambda_schedule: vec![(0.0, 0.1), (0.4, 0.5), (0.6, 0.9)],
            brn_max: (3.0, 5.0),
            brn_ramp: (0.2, 0.4),
            scheme: ForwardScheme::Double,
            drop_last: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("train.lr must be a non-negative number, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        let increasing = |xs: &[f64]| {
            xs.iter().all(|f| (0.0..1.0).contains(f)) && xs.windows(2).all(|w| w[0] < w[1])
        };
        if !increasing(&self.lr_drops) {
            return bad("train.lr_drops must be strictly increasing fractions in [0, 1)".into());
        }
        let fracs: Vec<f64> = self.lambda_schedule.iter().map(|p| p.0).collect();
        if !increasing(&fracs) {
            return bad("train.lambda_schedule fractions must be strictly increasing in [0, 1)".into());
        }
        if self.lambda_schedule.iter().any(|p| !(0.0..=1.0).contains(&p.1)) {
            return bad("train.lambda_schedule values must lie in [0, 1]".into());
        }
        let (a, b) = self.brn_ramp;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return bad("train.brn_ramp must satisfy 0 <= start <= end <= 1".into());
        }
        if !(self.brn_max.0 >= 1.0 && self.brn_max.1 >= 0.0) {
            return bad("train.brn_r_max must be >= 1 and train.brn_d_max >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    /// `None` when the run keeps its configured λ.
    pub lambda: Option<f64>,
    pub brn_bounds: (f64, f64),
}

/// Learning rate, λ and BRN bounds at a training fraction in `[0, 1]`.
pub fn schedule_at(progress: f64, cfg: &TrainConfig) -> Schedule {
    let drops = cfg.lr_drops.iter().filter(|&&f| progress >= f).count();
    let lr = cfg.lr0 / 10f64.powi(drops as i32);
    let lambda = cfg
        .lambda_schedule
        .iter()
        .take_while(|(f, _)| progress >= *f)
        .last()
        .or(cfg.lambda_schedule.first())
        .map(|p| p.1);
    let (start, end) = cfg.brn_ramp;
    let t = if progress <= start {
        0.0
    } else if progress >= end {
        1.0
    } else {
        (progress - start) / (end - start)
    };
    let (r, d) = cfg.brn_max;
    Schedule {
        lr,
        lambda,
        brn_bounds: (1.0 + t * (r - 1.0), t * d),
    }
}

/// Momentum buffers, one per parameter buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(net: &mut Network) -> Self {
        OptState {
            velocity: net
                .params_mut()
                .iter()
                .map(|p| vec![0.0; p.values.len()])
                .collect(),
        }
    }
}

/// `v = momentum·v + (g + wd·p)`, `p -= lr·v`; no decay on γ and β.
pub fn sgd_step(
    net: &mut Network,
    grads: &[Vec<f64>],
    opt: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params = net.params_mut();
    if params.len() != grads.len() || params.len() != opt.velocity.len() {
        return Err(Error::arg(format!(
            "{} parameter buffers, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            opt.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut opt.velocity) {
        if p.values.len() != g.len() || g.len() != v.len() {
            return Err(Error::arg(format!("gradient shape mismatch for {}", p.name)));
        }
        let wd = if p.decay { weight_decay } else { 0.0 };
        for ((w, &gi), vi) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + wd * *w;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    pub loss: f64,
    /// Misclassified fraction of the batch.
    pub error: f64,
    /// Largest relative distance, over norm layers, between the statistics
    /// just recorded and those the current parameters produce on the batch.
    pub staleness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `max_l ‖Δ(mean, var)‖₂ / max(‖(mean, var)‖₂, 1e-12)` with the norms taken
/// against `reference`.
pub fn staleness(recorded: &[BatchStats], reference: &[BatchStats]) -> Result<f64> {
    if recorded.len() != reference.len() {
        return Err(Error::arg("staleness needs one statistic per layer on both sides"));
    }
    let mut worst: f64 = 0.0;
    for (a, b) in recorded.iter().zip(reference) {
        if a.features() != b.features() {
            return Err(Error::arg("staleness compared statistics of different widths"));
        }
        let (mut diff, mut norm) = (0.0, 0.0);
        for (x, y) in a.mean.iter().chain(&a.var).zip(b.mean.iter().chain(&b.var)) {
            diff += (x - y) * (x - y);
            norm += y * y;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    Ok(worst)
}

fn gradient_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    opt: &mut OptState,
    step: StepSettings,
) -> Result<(f64, f64, Vec<BatchStats>)> {
    let out = net.forward(x, ForwardMode::TrainGrad)?;
    let (loss, grad) = softmax_xent(&out.output, labels)?;
    let error = count_errors(&out.output, labels) as f64 / labels.len() as f64;
    if loss.is_finite() {
        let grads = net.backward(&grad)?;
        sgd_step(net, &grads.params, opt, step.lr, step.momentum, step.weight_decay)?;
    }
    Ok((loss, error, out.batch_stats))
}

/// Gradient pass, update, then a statistics-only pass whose fresh batch
/// statistics are recorded.
pub fn train_iteration_double(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    opt: &mut OptState,
    step: StepSettings,
) -> Result<IterationMetrics> {
    let (loss, error, _) = gradient_step(net, x, labels, opt, step)?;
    let second = net.forward(x, ForwardMode::StatsOnly)?;
    let probe = net.stats_pass(x)?.1;
    let staleness = staleness(&second.batch_stats, &probe)?;
    net.record(&second.batch_stats)?;
    Ok(IterationMetrics {
        loss,
        error,
        staleness,
    })
}

/// Gradient pass and update; records the statistics of the gradient pass,
/// which predate the update.
pub fn train_iteration_single(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    opt: &mut OptState,
    step: StepSettings,
) -> Result<IterationMetrics> {
    let (loss, error, first) = gradient_step(net, x, labels, opt, step)?;
    net.clear_caches();
    let probe = net.stats_pass(x)?.1;
    let staleness = staleness(&first, &probe)?;
    net.record(&first)?;
    Ok(IterationMetrics {
        loss,
        error,
        staleness,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// Hidden widths of the dense blocks.
    Mlp { hidden: Vec<usize> },
    /// Channel counts of the conv blocks.
    Cnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub seed: u64,
    pub arch: Arch,
    pub norm: NormConfig,
    pub train: TrainConfig,
}

impl Experiment {
    /// Method label used in metrics, e.g. `mbn-double`.
    pub fn method(&self) -> String {
        format!("{}-{}", self.norm.mode, self.train.scheme)
    }

    pub fn build_network(&self, sample_shape: &[usize], classes: usize) -> Result<Network> {
        let mut rng = substream(self.seed, Stream::Init);
        match (&self.arch, sample_shape) {
            (Arch::Mlp { hidden }, [_]) => {
                Network::mlp(sample_shape[0], hidden, classes, Some(&self.norm), &mut rng)
            }
            (Arch::Mlp { hidden }, _) => {
                let inputs = sample_shape.iter().product();
                let mlp = Network::mlp(inputs, hidden, classes, Some(&self.norm), &mut rng)?;
                let mut layers = vec![Layer::Flatten];
                layers.extend(mlp.layers().iter().cloned());
                Network::new(sample_shape.to_vec(), layers)
            }
            (Arch::Cnn { channels }, &[c, h, w]) => {
                Network::cnn([c, h, w], channels, classes, Some(&self.norm), &mut rng)
            }
            (Arch::Cnn { .. }, s) => Err(Error::Config(format!(
                "a cnn needs C x H x W samples, data has shape {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub error: f64,
    pub lr: f64,
    pub lambda: f64,
    pub staleness: f64,
    pub method: String,
    pub seed: u64,
    pub batch_size: usize,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,error,lr,lambda,staleness,method,seed,batch_size";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<MetricsRow>,
}

impl RunRecord {
    /// Error of the last `test` row.
    pub fn final_test_error(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.split == "test").map(|r| r.error)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch, r.split, r.loss, r.error, r.lr, r.lambda, r.staleness, r.method, r.seed, r.batch_size
            )
            .expect("writing to a String cannot fail");
        }
        s
    }
}

/// Loss and error of `net` on a whole split. Before any training the
/// network has no stored statistics, so `initial` evaluates with the
/// split's own batch statistics instead of the inference rule.
fn evaluate(net: &Network, ds: &Dataset, initial: bool) -> Result<(f64, f64)> {
    let logits = if initial {
        net.stats_pass(&ds.features)?.0
    } else {
        net.predict(&ds.features)?
    };
    let (loss, _) = softmax_xent(&logits, &ds.labels)?;
    Ok((loss, count_errors(&logits, &ds.labels) as f64 / ds.len() as f64))
}

/// Trains from scratch and returns the metrics: one initial test row, then
/// a train row (means over the epoch's iterations) and a test row per epoch.
pub fn fit(exp: &Experiment, data: &TrainTest) -> Result<RunRecord> {
    fit_with_network(exp, data).map(|(record, _)| record)
}

/// [`fit`] that also returns the trained network.
pub fn fit_with_network(exp: &Experiment, data: &TrainTest) -> Result<(RunRecord, Network)> {
    let cfg = &exp.train;
    cfg.validate()?;
    if data.train.sample_shape() != data.test.sample_shape() {
        return Err(Error::Config("train and test samples differ in shape".into()));
    }
    let classes = data.train.num_classes.max(data.test.num_classes);
    let mut net = exp.build_network(data.train.sample_shape(), classes)?;
    let mut opt = OptState::new(&mut net);
    let method = exp.method();
    let uses_lambda = exp.norm.mode == NormMode::Mbn || exp.norm.mode == NormMode::MovNorm;
    let mut record = RunRecord::default();
    let row = |epoch, split, loss, error, lr, lambda, staleness| MetricsRow {
        epoch,
        split,
        loss,
        error,
        lr,
        lambda,
        staleness,
        method: method.clone(),
        seed: exp.seed,
        batch_size: cfg.batch_size,
    };

    let first = apply_schedule(&mut net, exp, 0.0)?;
    let shown_lambda = |l: f64| if uses_lambda { l } else { 0.0 };
    let (loss, error) = evaluate(&net, &data.test, true)?;
    record.rows.push(row(0, "test", loss, error, first.lr, shown_lambda(first_lambda(exp, &first)), 0.0));

    for epoch in 0..cfg.epochs {
        let sched = apply_schedule(&mut net, exp, epoch as f64 / cfg.epochs as f64)?;
        let step = StepSettings {
            lr: sched.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let mut rng = indexed(exp.seed, Stream::Shuffle, epoch as u64);
        let plan = batches_with(data.train.len(), cfg.batch_size, &mut rng, cfg.drop_last)?;
        let (mut loss_sum, mut err_sum, mut stale_sum) = (0.0, 0.0, 0.0);
        for (it, idx) in plan.iter().enumerate() {
            let (x, y) = data.train.batch(idx)?;
            let m = match cfg.scheme {
                ForwardScheme::Double => train_iteration_double(&mut net, &x, &y, &mut opt, step)?,
                ForwardScheme::Single => train_iteration_single(&mut net, &x, &y, &mut opt, step)?,
            };
            if !m.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    iteration: it,
                });
            }
            loss_sum += m.loss;
            err_sum += m.error;
            stale_sum += m.staleness;
        }
        let k = plan.len().max(1) as f64;
        let lambda = shown_lambda(first_lambda(exp, &sched));
        record.rows.push(row(
            epoch + 1,
            "train",
            loss_sum / k,
            err_sum / k,
            sched.lr,
            lambda,
            stale_sum / k,
        ));
        let (loss, error) = evaluate(&net, &data.test, false)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                iteration: plan.len(),
            });
        }
        record.rows.push(row(epoch + 1, "test", loss, error, sched.lr, lambda, 0.0));
    }
    Ok((record, net))
}

fn first_lambda(exp: &Experiment, s: &Schedule) -> f64 {
    s.lambda.unwrap_or(exp.norm.lambda)
}

fn apply_schedule(net: &mut Network, exp: &Experiment, progress: f64) -> Result<Schedule> {
    let s = schedule_at(progress, &exp.train);
    if let Some(l) = s.lambda {
        net.set_lambda(l)?;
    }
    if exp.norm.mode == NormMode::Brn {
        net.set_brn_bounds(s.brn_bounds.0, s.brn_bounds.1)?;
    }
    Ok(s)
}
