//! A small differentiable-network toolkit: dense layers with explicit
//! forward/backward passes, losses, Adam with a warmup + cosine schedule,
//! parameter EMA and a finite-difference gradient checker.
//!
//! Everything is `f64` and single-threaded. Matrix products go through
//! `matrixmultiply`'s `dgemm`, which is deterministic for a fixed build.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape {
                layer: "tensor".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing dimension of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m × k` and `op(b)` is
/// `k × n`. A transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through these
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named parameters with a gradient buffer of identical shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Read-only values alongside mutable gradients.
    pub fn split_mut(&mut self) -> (&[Tensor], &mut [Tensor]) {
        (&self.values, &mut self.grads)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| {
                (
                    n.clone(),
                    TensorRecord {
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every parameter from `records`, which must match this set's
    /// names and shapes exactly.
    pub fn load_records(&mut self, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        if records.len() != self.names.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, expected {}", records.len(), self.names.len()),
            ));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name:?}")))?;
            if rec.shape != value.shape {
                return Err(Error::Shape {
                    layer: name.clone(),
                    expected: value.shape.clone(),
                    got: rec.shape.clone(),
                });
            }
            let t = Tensor::from_vec(&rec.shape, rec.data.clone())?;
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("checkpoint tensor {name:?}"),
                });
            }
            *value = t;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation's output.
    fn backprop(self, output: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad
                .iter_mut()
                .zip(output)
                .for_each(|(g, &y)| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                }),
            Activation::Tanh => grad
                .iter_mut()
                .zip(output)
                .for_each(|(g, &y)| *g *= 1.0 - y * y),
        }
    }
}

/// Affine map `y = act(x W + b)` with `W` stored `input × output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Dense {
    /// Registers `name.w` and `name.b`, Xavier-uniform weights scaled by
    /// `gain`, zero bias.
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        gain: f64,
        rng: &mut seed::Rng,
    ) -> Result<Self> {
        let bound = gain * (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let weight = params.add(&format!("{name}.w"), Tensor::from_vec(&[input, output], w)?)?;
        let bias = params.add(&format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Dense {
            name: name.to_string(),
            weight,
            bias,
            input,
            output,
            activation,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input {
            return Err(Error::Shape {
                layer: self.name.clone(),
                expected: vec![x.rows(), self.input],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.rows();
        let bias = params.value(self.bias).data();
        let mut y = Tensor::zeros(&[n, self.output]);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(bias);
        }
        gemm(
            n,
            self.input,
            self.output,
            x.data(),
            false,
            params.value(self.weight).data(),
            false,
            y.data_mut(),
            1.0,
        );
        self.activation.apply(y.data_mut());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to `x`. `grad` is the upstream gradient on the activated output and is
    /// consumed.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        x: &Tensor,
        y: &Tensor,
        mut grad: Tensor,
    ) -> Result<Tensor> {
        self.check_input(x)?;
        if grad.shape() != y.shape() {
            return Err(Error::Shape {
                layer: self.name.clone(),
                expected: y.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        let n = x.rows();
        self.activation.backprop(y.data(), grad.data_mut());
        let (values, grads) = params.split_mut();
        gemm(
            self.input,
            n,
            self.output,
            x.data(),
            true,
            grad.data(),
            false,
            grads[self.weight.0].data_mut(),
            1.0,
        );
        let db = grads[self.bias.0].data_mut();
        for r in 0..n {
            for (d, g) in db.iter_mut().zip(grad.row(r)) {
                *d += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.input]);
        gemm(
            n,
            self.output,
            self.input,
            grad.data(),
            false,
            values[self.weight.0].data(),
            true,
            dx.data_mut(),
            0.0,
        );
        Ok(dx)
    }
}

/// A chain of dense layers. An empty chain is the identity.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations cached by [`Mlp::forward`]: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    values: Vec<Tensor>,
}

impl MlpTrace {
    pub fn input(&self) -> &Tensor {
        &self.values[0]
    }

    pub fn output(&self) -> &Tensor {
        self.values.last().expect("trace holds the input")
    }

    pub fn into_output(mut self) -> Tensor {
        self.values.pop().expect("trace holds the input")
    }
}

impl Mlp {
    /// `dims = [input, hidden.., output]`; hidden layers use `hidden`, the last
    /// layer `output` activation and a weight gain of `output_gain`.
    pub fn build(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        output_gain: f64,
        rng: &mut seed::Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let last = i + 2 == dims.len();
            let (act, gain) = if last { (output, output_gain) } else { (hidden, 1.0) };
            layers.push(Dense::build(
                params,
                &format!("{prefix}.{i}"),
                w[0],
                w[1],
                act,
                gain,
                rng,
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.output)
    }

    pub fn forward(&self, params: &ParamSet, input: Tensor) -> Result<MlpTrace> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input);
        for layer in &self.layers {
            let y = layer.forward(params, values.last().expect("nonempty"))?;
            values.push(y);
        }
        Ok(MlpTrace { values })
    }

    /// Backpropagates `upstream` (gradient on the output) through the cached
    /// trace, accumulating into `params`' gradient buffers. Returns the
    /// gradient on the input.
    pub fn backward(&self, params: &mut ParamSet, trace: &MlpTrace, upstream: Tensor) -> Result<Tensor> {
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::Config(format!(
                "trace holds {} activations, network needs {}",
                trace.values.len(),
                self.layers.len() + 1
            )));
        }
        let mut grad = upstream;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(params, &trace.values[i], &trace.values[i + 1], grad)?;
        }
        Ok(grad)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-row cross-entropy of `logits` (`n × c`) against class indices, and the
/// per-row gradient `softmax - onehot`.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape {
            layer: "cross_entropy".into(),
            expected: vec![targets.len(), logits.cols()],
            got: logits.shape().to_vec(),
        });
    }
    let mut losses = Vec::with_capacity(targets.len());
    let mut grad = Tensor::zeros(logits.shape());
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        losses.push(log_z - row[t]);
        let g = grad.row_mut(r);
        for (gi, &l) in g.iter_mut().zip(row) {
            *gi = (l - log_z).exp();
        }
        g[t] -= 1.0;
    }
    Ok((losses, grad))
}

/// Per-row mean squared error and its per-row gradient.
pub fn squared_error_rows(pred: &Tensor, target: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            layer: "squared_error".into(),
            expected: target.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let c = pred.cols() as f64;
    let mut losses = Vec::with_capacity(pred.rows());
    let mut grad = Tensor::zeros(pred.shape());
    for r in 0..pred.rows() {
        let (p, t) = (pred.row(r), target.row(r));
        losses.push(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c);
        for (g, (a, b)) in grad.row_mut(r).iter_mut().zip(p.iter().zip(t)) {
            *g = 2.0 * (a - b) / c;
        }
    }
    Ok((losses, grad))
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `final_lr` at
/// `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_steps: 200,
            peak_lr: 3e-3,
            final_lr: 3e-4,
            total_steps: 5000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.peak_lr > 0.0 && self.final_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.final_lr + (self.peak_lr - self.final_lr) * cosine
    }
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update using the gradients stored in `params`. Returns the
/// learning rate used.
pub fn opt_step(
    params: &mut ParamSet,
    step_index: usize,
    schedule: &ScheduleConfig,
    state: &mut AdamState,
) -> Result<f64> {
    if step_index >= schedule.total_steps {
        return Err(Error::Config(format!(
            "step {step_index} beyond schedule of {} steps",
            schedule.total_steps
        )));
    }
    if state.m.len() != params.len() {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    for (name, g) in params.names().iter().zip(params.grads()) {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name} at step {step_index}"),
            });
        }
    }
    let lr = schedule.lr(step_index);
    let t = (step_index + 1) as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for i in 0..params.len() {
        let id = ParamId(i);
        let g = params.grads[id.0].data().to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.values[id.0].data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(lr)
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update(ema: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
    }
    if ema.len() != params.len() {
        return Err(Error::Config("ema and parameters differ in size".into()));
    }
    for (e, p) in ema.values.iter_mut().zip(params.values()) {
        if e.shape() != p.shape() {
            return Err(Error::Shape {
                layer: "ema".into(),
                expected: p.shape().to_vec(),
                got: e.shape().to_vec(),
            });
        }
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Compares analytic gradients with central differences on `n_probes`
/// randomly chosen scalars and returns the largest relative error
/// `|g_an - g_fd| / (|g_an| + |g_fd| + 1e-12)`.
///
/// `loss` must zero-free accumulate gradients into the set it is handed and
/// return the scalar loss. Probes cycle through the tensors so every tensor
/// is covered once `n_probes >= params.len()`.
pub fn fd_check<F>(
    params: &mut ParamSet,
    mut loss: F,
    epsilon: f64,
    n_probes: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut ParamSet) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    if params.is_empty() {
        return Ok(0.0);
    }
    params.zero_grads();
    loss(params)?;
    let analytic: Vec<Tensor> = params.grads().to_vec();
    let mut rng = seed::rng(seed);
    let mut worst: f64 = 0.0;
    let offset = rng.random_range(0..params.len());
    for probe in 0..n_probes {
        let t = (offset + probe) % params.len();
        let j = rng.random_range(0..params.values[t].len());
        let original = params.values[t].data()[j];
        params.values[t].data_mut()[j] = original + epsilon;
        let plus = loss(params)?;
        params.values[t].data_mut()[j] = original - epsilon;
        let minus = loss(params)?;
        params.values[t].data_mut()[j] = original;
        let fd = (plus - minus) / (2.0 * epsilon);
        let an = analytic[t].data()[j];
        let rel = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    params.grads = analytic;
    Ok(worst)
}
