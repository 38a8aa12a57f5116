//! Dense networks with hand-written backpropagation, the Gaussian policy
//! head and the ADAM optimizer.
//!
//! Parameters live in one contiguous `Vec<f64>` so that combination,
//! optimizer updates and checkpointing all work on the flat view; layer
//! weights and biases are borrowed out of it as `ndarray` views.

use std::f64::consts::{E, PI};
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    Tanh,
    Softplus,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(z),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// `ln(1 + e^x)` computed as `max(x, 0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Layered weights and biases over a flat parameter vector. Each layer is
/// stored as its `outputs x inputs` weight matrix (row-major) followed by
/// its bias. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

/// Per-layer values recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer, `batch x inputs`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer, `batch x outputs`.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Pre-activations of the last layer.
    pub fn last_pre_activation(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl MlpParams {
    /// All-zero parameters for the given layer stack.
    pub fn zeros(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Shape(format!(
                    "layer with {} outputs feeds layer with {} inputs",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.len();
        }
        Ok(Self {
            layers,
            offsets,
            data: vec![0.0; total],
        })
    }

    /// `input -> hidden... -> output` with the hidden activation on every
    /// hidden layer. Hidden ReLU layers get He-uniform weights
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, the output layer a uniform
    /// `U(-0.1/sqrt(fan_in), 0.1/sqrt(fan_in))`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let layers: Vec<LayerShape> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 2 == sizes.len() {
                    output_activation
                } else {
                    hidden_activation
                },
            })
            .collect();
        let mut params = Self::zeros(layers)?;
        let n_layers = params.layers.len();
        for i in 0..n_layers {
            let fan_in = params.layers[i].inputs as f64;
            let scale = if i + 1 == n_layers {
                0.1 / fan_in.sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            let mut w = params.weights_mut(i);
            w.mapv_inplace(|_| rng.gen_range(-scale..=scale));
        }
        Ok(params)
    }

    /// Same shape, zero data.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            offsets: self.offsets.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").outputs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Overwrites all parameters from a flat vector of matching length.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, network has {}",
                flat.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(flat);
        Ok(())
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers == other.layers
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let s = self.layers[layer];
        let o = self.offsets[layer];
        ArrayView2::from_shape((s.outputs, s.inputs), &self.data[o..o + s.outputs * s.inputs])
            .expect("layer slice matches shape")
    }

    pub fn weights_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.layers[layer];
        let o = self.offsets[layer];
        ArrayViewMut2::from_shape((s.outputs, s.inputs), &mut self.data[o..o + s.outputs * s.inputs])
            .expect("layer slice matches shape")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let s = self.layers[layer];
        let o = self.offsets[layer] + s.outputs * s.inputs;
        ArrayView1::from(&self.data[o..o + s.outputs])
    }

    fn bias_slice_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layers[layer];
        let o = self.offsets[layer] + s.outputs * s.inputs;
        &mut self.data[o..o + s.outputs]
    }

    /// Single-input evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut h = Array1::from(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = self.weights(i).dot(&h);
            z += &self.bias(i);
            z.mapv_inplace(|v| layer.activation.apply(v));
            h = z;
        }
        Ok(h.to_vec())
    }

    /// Batched evaluation of `batch x input_dim` inputs, keeping what the
    /// backward pass needs.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} columns, network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&self.weights(i).t());
            z += &self.bias(i);
            let a = z.mapv(|v| layer.activation.apply(v));
            layer_inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(ForwardCache {
            inputs: layer_inputs,
            pre,
            output: h,
        })
    }

    /// Gradient of `sum_b upstream[b] . output[b]` with respect to the
    /// parameters, given a cache from [`forward_batch`](Self::forward_batch).
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<MlpParams> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "upstream is {:?}, output is {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut grad = self.zeros_like();
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let act = self.layers[i].activation;
            if act != Activation::Linear {
                delta.zip_mut_with(&cache.pre[i], |d, z| *d *= act.derivative(*z));
            }
            let gw = delta.t().dot(&cache.inputs[i]);
            grad.weights_mut(i).assign(&gw);
            let gb = delta.sum_axis(Axis(0));
            grad.bias_slice_mut(i).copy_from_slice(gb.as_slice().expect("contiguous"));
            if i > 0 {
                delta = delta.dot(&self.weights(i));
            }
        }
        Ok(grad)
    }

    /// Single-input gradient of `upstream . output`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<MlpParams> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream has {} entries, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let cache = self.forward_batch(x)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        self.backward_batch(&cache, up)
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &MlpParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("parameter shapes differ".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Text checkpoint: a header, one `layer <in> <out> <activation>` line
    /// per layer, then `params <n>` and one value per line. Values are
    /// written in shortest round-trip form, so reloading is bit-exact.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 22 + 128);
        writeln!(out, "diffdac-mlp v1").unwrap();
        self.write_body(&mut out);
        out
    }

    fn write_body(&self, out: &mut String) {
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(out, "layer {} {} {}", l.inputs, l.outputs, l.activation.name()).unwrap();
        }
        writeln!(out, "params {}", self.data.len()).unwrap();
        for x in &self.data {
            writeln!(out, "{x:?}").unwrap();
        }
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("diffdac-mlp v1") => {}
            other => return Err(Error::Parse(format!("bad checkpoint header {other:?}"))),
        }
        Self::read_body(&mut lines)
    }

    fn read_body<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint ends before `{name}`")))?;
            let parts: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if parts.first().map(String::as_str) != Some(name) {
                return Err(Error::Parse(format!("expected `{name}`, found `{line}`")));
            }
            Ok(parts[1..].to_vec())
        };
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let n_layers = parse_usize(field("layers")?.first().map(String::as_str).unwrap_or(""))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let f = field("layer")?;
            if f.len() != 3 {
                return Err(Error::Parse("layer line needs <in> <out> <activation>".into()));
            }
            layers.push(LayerShape {
                inputs: parse_usize(&f[0])?,
                outputs: parse_usize(&f[1])?,
                activation: f[2].parse()?,
            });
        }
        let n = parse_usize(field("params")?.first().map(String::as_str).unwrap_or(""))?;
        let mut params = Self::zeros(layers)?;
        if n != params.len() {
            return Err(Error::Shape(format!("checkpoint lists {n} params, layers need {}", params.len())));
        }
        for slot in params.data.iter_mut() {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("checkpoint truncated".into()))?;
            *slot = line
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("`{line}`: {e}")))?;
        }
        Ok(params)
    }
}

/// Sign of the entropy term in the actor loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Loss adds `-coeff * H`, rewarding exploration.
    #[default]
    Bonus,
    /// Loss adds `+coeff * H`.
    Penalty,
}

impl EntropyMode {
    /// Multiplier of `coeff * grad H` in the ascent direction.
    pub fn ascent_sign(self) -> f64 {
        match self {
            EntropyMode::Bonus => 1.0,
            EntropyMode::Penalty => -1.0,
        }
    }
}

/// Gaussian policy on a scalar action. The backbone emits two numbers
/// `(z_mean, z_var)`; the mean is `half_range * tanh(z_mean)` and the
/// variance `softplus(z_var) + var_floor`. The floor must be positive so the
/// variance stays positive even where softplus underflows.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyHead {
    pub backbone: MlpParams,
    pub half_range: f64,
    pub var_floor: f64,
}

/// Per-state quantities of the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub mean: f64,
    pub var: f64,
    /// `d mean / d z_mean`.
    pub dmean: f64,
    /// `d var / d z_var`.
    pub dvar: f64,
}

impl GaussianPolicyHead {
    /// Backbone `obs -> hidden (ReLU)... -> 2 (linear)`.
    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        half_range: f64,
        var_floor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = MlpParams::init(obs_dim, hidden, 2, Activation::Relu, Activation::Linear, rng)?;
        Self::new(backbone, half_range, var_floor)
    }

    pub fn new(backbone: MlpParams, half_range: f64, var_floor: f64) -> Result<Self> {
        if backbone.output_dim() != 2 {
            return Err(Error::Shape(format!(
                "policy backbone must output 2 values, outputs {}",
                backbone.output_dim()
            )));
        }
        if backbone.layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(Error::Shape("policy backbone output layer must be linear".into()));
        }
        if !(half_range > 0.0) || !(var_floor > 0.0) {
            return Err(Error::Argument(format!(
                "half_range {half_range} must be > 0 and var_floor {var_floor} > 0"
            )));
        }
        Ok(Self {
            backbone,
            half_range,
            var_floor,
        })
    }

    fn output_from(&self, z_mean: f64, z_var: f64) -> HeadOutput {
        let t = z_mean.tanh();
        HeadOutput {
            mean: self.half_range * t,
            var: softplus(z_var) + self.var_floor,
            dmean: self.half_range * (1.0 - t * t),
            dvar: sigmoid(z_var),
        }
    }

    pub fn output(&self, state: &[f64]) -> Result<HeadOutput> {
        let z = self.backbone.forward(state)?;
        Ok(self.output_from(z[0], z[1]))
    }

    /// `(mean, variance)` at `state`.
    pub fn mean_var(&self, state: &[f64]) -> Result<(f64, f64)> {
        let o = self.output(state)?;
        Ok((o.mean, o.var))
    }

    pub fn log_prob(&self, state: &[f64], action: f64) -> Result<f64> {
        if !action.is_finite() {
            return Err(Error::Numeric(format!("action {action} is not finite")));
        }
        let o = self.output(state)?;
        Ok(normal_log_density(action, o.mean, o.var))
    }

    /// Log-density and its gradient with respect to the backbone.
    pub fn log_prob_grad(&self, state: &[f64], action: f64) -> Result<(f64, MlpParams)> {
        if !action.is_finite() {
            return Err(Error::Numeric(format!("action {action} is not finite")));
        }
        let o = self.output(state)?;
        let up = log_prob_upstream(&o, action);
        Ok((normal_log_density(action, o.mean, o.var), self.backbone.backward(state, &up)?))
    }

    /// Differential entropy `0.5 ln(2 pi e var)`.
    pub fn entropy(&self, state: &[f64]) -> Result<f64> {
        let o = self.output(state)?;
        Ok(normal_entropy(o.var))
    }

    pub fn entropy_grad(&self, state: &[f64]) -> Result<(f64, MlpParams)> {
        let o = self.output(state)?;
        let up = entropy_upstream(&o);
        Ok((normal_entropy(o.var), self.backbone.backward(state, &up)?))
    }

    /// Samples `mean + sqrt(var) * eps` with `eps ~ N(0, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<f64> {
        let o = self.output(state)?;
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        Ok(o.mean + o.var.sqrt() * eps)
    }

    /// Batched head outputs from a backbone cache.
    pub fn outputs_from_cache(&self, cache: &ForwardCache) -> Vec<HeadOutput> {
        cache
            .output()
            .outer_iter()
            .map(|z| self.output_from(z[0], z[1]))
            .collect()
    }

    /// Ascent direction `sum_t w_t grad log pi(a_t|s_t) + c sign grad H(s_t)`
    /// over a batch, via one batched backward pass.
    pub fn weighted_score_grad(
        &self,
        states: ArrayView2<f64>,
        actions: &[f64],
        weights: &[f64],
        entropy_coeff: f64,
        entropy_mode: EntropyMode,
    ) -> Result<MlpParams> {
        let n = states.nrows();
        if actions.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "{n} states, {} actions, {} weights",
                actions.len(),
                weights.len()
            )));
        }
        let cache = self.backbone.forward_batch(states)?;
        let outputs = self.outputs_from_cache(&cache);
        let ent = entropy_coeff * entropy_mode.ascent_sign();
        let mut upstream = Array2::zeros((n, 2));
        for (t, o) in outputs.iter().enumerate() {
            let lp = log_prob_upstream(o, actions[t]);
            let h = entropy_upstream(o);
            upstream[[t, 0]] = weights[t] * lp[0] + ent * h[0];
            upstream[[t, 1]] = weights[t] * lp[1] + ent * h[1];
        }
        self.backbone.backward_batch(&cache, upstream.view())
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "diffdac-gaussian-head v1").unwrap();
        writeln!(out, "head {:?} {:?}", self.half_range, self.var_floor).unwrap();
        self.backbone.write_body(&mut out);
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("diffdac-gaussian-head v1") {
            return Err(Error::Parse("bad policy checkpoint header".into()));
        }
        let head = lines.next().unwrap_or_default();
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [_, half, floor] = parts.as_slice() else {
            return Err(Error::Parse(format!("bad head line `{head}`")));
        };
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let backbone = MlpParams::read_body(&mut lines)?;
        Self::new(backbone, parse(half)?, parse(floor)?)
    }
}

/// `d log N(a; mean, var) / d (z_mean, z_var)`.
fn log_prob_upstream(o: &HeadOutput, action: f64) -> [f64; 2] {
    let diff = action - o.mean;
    let dlp_dmean = diff / o.var;
    let dlp_dvar = -0.5 / o.var + 0.5 * diff * diff / (o.var * o.var);
    [dlp_dmean * o.dmean, dlp_dvar * o.dvar]
}

/// `d H / d (z_mean, z_var)`.
fn entropy_upstream(o: &HeadOutput) -> [f64; 2] {
    [0.0, 0.5 / o.var * o.dvar]
}

pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

pub fn normal_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

/// Bias-corrected ADAM moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step `params -= rate * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], rate: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "ADAM state has {} entries, params {}, gradient {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Update rule applied to a loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    /// Plain gradient descent `params -= rate * grad`.
    Sgd,
}

impl Optimizer {
    pub fn descend(&mut self, params: &mut MlpParams, grad: &MlpParams, rate: f64) -> Result<()> {
        if !params.same_shape(grad) {
            return Err(Error::Shape("gradient shape differs from parameters".into()));
        }
        match self {
            Optimizer::Adam(state) => state.step(params.as_flat_mut(), grad.as_flat(), rate),
            Optimizer::Sgd => params.add_scaled(-rate, grad),
        }
    }
}
