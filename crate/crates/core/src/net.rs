//! Sequential networks built from dense, 3x3 convolution, ReLU, flatten and
//! normalization layers, plus the softmax cross-entropy loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::norm::{NormConfig, NormLayer, NormMode};
use crate::stats::{BatchStats, Moments};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone)]
pub struct Dense {
    /// `inputs x outputs`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        let [_, out] = weight.shape()[..] else {
            return Err(Error::arg("dense weight must be a matrix"));
        };
        if bias.len() != out {
            return Err(Error::arg(format!(
                "dense bias has {} entries for {} outputs",
                bias.len(),
                out
            )));
        }
        Ok(Dense {
            weight,
            bias,
            input: None,
        })
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[inputs, outputs], |_| normal.sample(rng));
        Dense {
            weight,
            bias: vec![0.0; outputs],
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        let out = self.outputs();
        for row in y.data_mut().chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    fn backward(&self, grad: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::state("dense backward without cached input"))?;
        let gw = matmul(&x.transpose()?, grad)?;
        let mut gb = vec![0.0; self.outputs()];
        for row in grad.data().chunks(self.outputs()) {
            for (s, g) in gb.iter_mut().zip(row) {
                *s += g;
            }
        }
        let gx = matmul(grad, &self.weight.transpose()?)?;
        Ok((gx, vec![gw.into_data(), gb]))
    }
}

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    /// `out_channels x in_channels x 3 x 3`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    input: Option<Tensor>,
}

impl Conv3x3 {
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = (in_channels * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Conv3x3 {
            weight: Tensor::from_fn(&[out_channels, in_channels, 3, 3], |_| normal.sample(rng)),
            bias: vec![0.0; out_channels],
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        match *x.shape() {
            [n, c, h, w] if c == self.in_channels() => Ok((n, c, h, w)),
            _ => Err(Error::arg(format!(
                "conv expects N x {} x H x W input, got {:?}",
                self.in_channels(),
                x.shape()
            ))),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.dims(x)?;
        let k = self.out_channels();
        let xs = x.data();
        let ws = self.weight.data();
        let mut out = vec![0.0; n * k * h * w];
        for b in 0..n {
            for o in 0..k {
                let plane = &mut out[(b * k + o) * h * w..(b * k + o + 1) * h * w];
                plane.iter_mut().for_each(|v| *v = self.bias[o]);
                for ci in 0..c {
                    let src = &xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let kern = &ws[(o * c + ci) * 9..(o * c + ci + 1) * 9];
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = 0.0;
                            for di in 0..3 {
                                let si = i + di;
                                if si == 0 || si > h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let sj = j + dj;
                                    if sj == 0 || sj > w {
                                        continue;
                                    }
                                    acc += kern[di * 3 + dj] * src[(si - 1) * w + sj - 1];
                                }
                            }
                            plane[i * w + j] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, k, h, w], out)
    }

    fn backward(&self, grad: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::state("conv backward without cached input"))?;
        let (n, c, h, w) = self.dims(x)?;
        let k = self.out_channels();
        if grad.shape() != [n, k, h, w] {
            return Err(Error::arg("conv gradient shape mismatch"));
        }
        let xs = x.data();
        let gs = grad.data();
        let ws = self.weight.data();
        let mut gw = vec![0.0; ws.len()];
        let mut gb = vec![0.0; k];
        let mut gx = vec![0.0; xs.len()];
        for b in 0..n {
            for o in 0..k {
                let gplane = &gs[(b * k + o) * h * w..(b * k + o + 1) * h * w];
                gb[o] += gplane.iter().sum::<f64>();
                for ci in 0..c {
                    let base = (b * c + ci) * h * w;
                    let kbase = (o * c + ci) * 9;
                    for i in 0..h {
                        for j in 0..w {
                            let g = gplane[i * w + j];
                            if g == 0.0 {
                                continue;
                            }
                            for di in 0..3 {
                                let si = i + di;
                                if si == 0 || si > h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let sj = j + dj;
                                    if sj == 0 || sj > w {
                                        continue;
                                    }
                                    let src = base + (si - 1) * w + sj - 1;
                                    gw[kbase + di * 3 + dj] += g * xs[src];
                                    gx[src] += g * ws[kbase + di * 3 + dj];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), gx)?, vec![gw, gb]))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv3x3),
    Relu,
    Flatten,
    Norm(NormLayer),
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Norm(_) => "norm",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || {
            Err(Error::arg(format!(
                "{} layer cannot take per-sample shape {:?}",
                self.name(),
                input
            )))
        };
        match self {
            Layer::Dense(d) => match input {
                [i] if *i == d.inputs() => Ok(vec![d.outputs()]),
                _ => bad(),
            },
            Layer::Conv(cv) => match input {
                [c, h, w] if *c == cv.in_channels() => Ok(vec![cv.out_channels(), *h, *w]),
                _ => bad(),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Norm(nl) => match input {
                [f] | [f, _, _] if *f == nl.features() => Ok(input.to_vec()),
                _ => bad(),
            },
        }
    }
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(1);
    let rest = if n == 0 { 0 } else { x.len() / n };
    x.clone().reshape(&[n, rest])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Training rule; caches everything backward needs.
    TrainGrad,
    /// Training rule with no caches; returns fresh batch statistics so the
    /// trainer can record them.
    StatsOnly,
    /// Inference rule; mutates nothing.
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Tensor,
    /// Fresh statistics of each norm layer's input, in layer order. Empty
    /// for [`ForwardMode::Eval`].
    pub batch_stats: Vec<BatchStats>,
}

/// Parameter gradients in [`Network::params_mut`] order, plus the gradient
/// with respect to the network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Tensor,
}

pub struct Param<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    /// Whether weight decay applies; false for γ and β.
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    relu_inputs: Vec<Option<Tensor>>,
    flatten_shapes: Vec<Option<Vec<usize>>>,
}

impl Network {
    /// `input_shape` is per sample (without the batch axis).
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut mode: Option<NormMode> = None;
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::arg(format!("layer {i}: {e}")))?;
            if let Layer::Norm(nl) = layer {
                match mode {
                    Some(m) if m != nl.mode() => {
                        return Err(Error::arg(format!(
                            "norm layers mix modes {} and {}",
                            m,
                            nl.mode()
                        )))
                    }
                    _ => mode = Some(nl.mode()),
                }
            }
        }
        let n = layers.len();
        Ok(Network {
            layers,
            input_shape,
            relu_inputs: vec![None; n],
            flatten_shapes: vec![None; n],
        })
    }

    /// `inputs -> [dense -> norm -> relu] per hidden width -> dense -> classes`.
    /// Without a norm config the norm layers are omitted.
    pub fn mlp<R: Rng>(
        inputs: usize,
        hidden: &[usize],
        classes: usize,
        norm: Option<&NormConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(Layer::Dense(Dense::init(width, h, rng)));
            if let Some(cfg) = norm {
                layers.push(Layer::Norm(NormLayer::new(h, cfg)?));
            }
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense(Dense::init(width, classes, rng)));
        Network::new(vec![inputs], layers)
    }

    /// `[conv3x3 -> norm -> relu] per channel count -> flatten -> dense`.
    pub fn cnn<R: Rng>(
        input: [usize; 3],
        channels: &[usize],
        classes: usize,
        norm: Option<&NormConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let [c0, h, w] = input;
        let mut layers = Vec::new();
        let mut c = c0;
        for &k in channels {
            layers.push(Layer::Conv(Conv3x3::init(c, k, rng)));
            if let Some(cfg) = norm {
                layers.push(Layer::Norm(NormLayer::new(k, cfg)?));
            }
            layers.push(Layer::Relu);
            c = k;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense(Dense::init(c * h * w, classes, rng)));
        Network::new(input.to_vec(), layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn norm_mode(&self) -> Option<NormMode> {
        self.norm_layers().next().map(|l| l.mode())
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> + '_ {
        self.layers.iter().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> + '_ {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        self.norm_layers_mut().try_for_each(|l| l.set_lambda(lambda))
    }

    pub fn set_brn_bounds(&mut self, r_max: f64, d_max: f64) -> Result<()> {
        self.norm_layers_mut()
            .try_for_each(|l| l.set_brn_bounds(r_max, d_max))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::arg(format!(
                "network expects N x {:?} input, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: ForwardMode) -> Result<ForwardOutput> {
        match mode {
            ForwardMode::Eval => Ok(ForwardOutput {
                output: self.predict(x)?,
                batch_stats: Vec::new(),
            }),
            ForwardMode::StatsOnly => {
                let (output, batch_stats, used) = self.stats_pass(x)?;
                self.clear_caches();
                for (layer, m) in self.norm_layers_mut().zip(used) {
                    if layer.mode().uses_memory() {
                        layer.set_frozen(Some(m));
                    }
                }
                Ok(ForwardOutput {
                    output,
                    batch_stats,
                })
            }
            ForwardMode::TrainGrad => {
                self.check_input(x)?;
                let mut h = x.clone();
                let mut batch_stats = Vec::new();
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    h = match layer {
                        Layer::Dense(d) => {
                            let y = d.forward(&h)?;
                            d.input = Some(h);
                            y
                        }
                        Layer::Conv(c) => {
                            let y = c.forward(&h)?;
                            c.input = Some(h);
                            y
                        }
                        Layer::Relu => {
                            let y = relu(&h);
                            self.relu_inputs[i] = Some(h);
                            y
                        }
                        Layer::Flatten => {
                            self.flatten_shapes[i] = Some(h.shape().to_vec());
                            flatten(&h)?
                        }
                        Layer::Norm(n) => {
                            let (y, s) = n.forward_train(&h)?;
                            batch_stats.push(s);
                            y
                        }
                    };
                }
                Ok(ForwardOutput {
                    output: h,
                    batch_stats,
                })
            }
        }
    }

    /// Inference forward.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Relu => relu(&h),
                Layer::Flatten => flatten(&h)?,
                Layer::Norm(n) => n.forward_eval(&h)?,
            };
        }
        Ok(h)
    }

    /// Training-rule forward without side effects. Returns the output, each
    /// norm layer's fresh batch statistics, and the statistics each norm
    /// layer normalized with.
    pub fn stats_pass(&self, x: &Tensor) -> Result<(Tensor, Vec<BatchStats>, Vec<Moments>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut fresh = Vec::new();
        let mut used = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Relu => relu(&h),
                Layer::Flatten => flatten(&h)?,
                Layer::Norm(n) => {
                    let (y, s, m) = n.forward_stats(&h)?;
                    fresh.push(s);
                    used.push(m);
                    y
                }
            };
        }
        Ok((h, fresh, used))
    }

    /// Folds one batch statistic per norm layer into that layer's store.
    pub fn record(&mut self, stats: &[BatchStats]) -> Result<()> {
        let count = self.norm_layers().count();
        if stats.len() != count {
            return Err(Error::arg(format!(
                "{} statistics for {} norm layers",
                stats.len(),
                count
            )));
        }
        self.norm_layers_mut()
            .zip(stats)
            .try_for_each(|(l, s)| l.record(s))
    }

    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => d.input = None,
                Layer::Conv(c) => c.input = None,
                Layer::Norm(n) => n.clear_cache(),
                Layer::Relu | Layer::Flatten => {}
            }
        }
        self.relu_inputs.iter_mut().for_each(|r| *r = None);
        self.flatten_shapes.iter_mut().for_each(|r| *r = None);
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<Gradients> {
        let mut g = grad_out.clone();
        let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gx, params) = match layer {
                Layer::Dense(d) => d.backward(&g)?,
                Layer::Conv(c) => c.backward(&g)?,
                Layer::Relu => {
                    let x = self.relu_inputs[i]
                        .as_ref()
                        .ok_or_else(|| Error::state("relu backward without cached input"))?;
                    (x.zip_map(&g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?, Vec::new())
                }
                Layer::Flatten => {
                    let shape = self.flatten_shapes[i]
                        .as_ref()
                        .ok_or_else(|| Error::state("flatten backward without cached shape"))?;
                    (g.reshape(shape)?, Vec::new())
                }
                Layer::Norm(n) => {
                    let r = n.backward(&g)?;
                    (r.grad_x, vec![r.grad_gamma, r.grad_beta])
                }
            };
            g = gx;
            per_layer.push(params);
        }
        per_layer.reverse();
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: g,
        })
    }

    /// Mutable views of every learnable buffer, in layer order.
    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push(Param {
                        name: format!("{i}.dense.weight"),
                        values: d.weight.data_mut(),
                        decay: true,
                    });
                    out.push(Param {
                        name: format!("{i}.dense.bias"),
                        values: &mut d.bias,
                        decay: true,
                    });
                }
                Layer::Conv(c) => {
                    out.push(Param {
                        name: format!("{i}.conv.weight"),
                        values: c.weight.data_mut(),
                        decay: true,
                    });
                    out.push(Param {
                        name: format!("{i}.conv.bias"),
                        values: &mut c.bias,
                        decay: true,
                    });
                }
                Layer::Norm(n) => {
                    let (g, b) = n.params_mut();
                    out.push(Param {
                        name: format!("{i}.norm.gamma"),
                        values: g,
                        decay: false,
                    });
                    out.push(Param {
                        name: format!("{i}.norm.beta"),
                        values: b,
                        decay: false,
                    });
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }

    /// Copies of every learnable buffer, in [`Network::params_mut`] order.
    pub fn param_values(&mut self) -> Vec<(String, Vec<f64>)> {
        self.params_mut()
            .into_iter()
            .map(|p| (p.name, p.values.to_vec()))
            .collect()
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c] = logits.shape()[..] else {
        return Err(Error::arg("logits must be batch x classes"));
    };
    if labels.len() != n {
        return Err(Error::arg(format!(
            "{} labels for a batch of {}",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(c).zip(labels).enumerate() {
        if y >= c {
            return Err(Error::arg(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad[i * c + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// Number of rows whose arg-max (first on ties) differs from the label.
pub fn count_errors(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best != y
        })
        .count()
}
