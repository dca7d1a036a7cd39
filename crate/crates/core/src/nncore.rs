//! Differentiable building blocks with hand-written backward passes.
//!
//! The architecture is fixed, so every layer keeps exactly the forward state
//! it needs and exposes a `backward` that accumulates into the parameter
//! gradient buffers. [`grad_check`] compares those gradients to central
//! finite differences.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{sigmoid, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A named learnable array with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Constant(f64),
    /// Square identity matrix; only valid for 2-D square shapes.
    Identity,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("parameter `{name}` has shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Constant(c) => vec![T::of(c); len],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [n] => (1, *n),
                    [a, b] => (*a, *b),
                    [a, rest @ ..] => (*a, rest.iter().product()),
                    [] => unreachable!(),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
            }
            Init::Identity => match shape {
                [a, b] if a == b => (0..len)
                    .map(|k| if k / a == k % a { T::one() } else { T::zero() })
                    .collect(),
                _ => return Err(Error::shape(format!("identity init needs a square shape, got {shape:?}"))),
            },
        };
        Ok(ParamTensor { name, shape: shape.to_vec(), grad: vec![T::zero(); len], values })
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<T>) -> Result<Self> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if shape.contains(&0) || values.len() != len {
            return Err(Error::shape(format!(
                "parameter `{name}`: {} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(ParamTensor { name, shape: shape.to_vec(), grad: vec![T::zero(); len], values })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Values viewed as a matrix (first dimension by the product of the rest).
    pub fn as_matrix(&self) -> Matrix<T> {
        let rows = self.shape[0];
        Matrix::from_vec(rows, self.len() / rows, self.values.clone()).expect("shape checked at construction")
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.len() / self.shape[0];
        &self.values[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn grad_row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.len() / self.shape[0];
        &mut self.grad[i * w..(i + 1) * w]
    }

    pub fn scalar(&self) -> T {
        self.values[0]
    }
}

/// Free-standing constructor with its own seeded generator.
pub fn init_params<T: Scalar>(shape: &[usize], scheme: Init, seed: u64) -> Result<ParamTensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParamTensor::new("param", shape, scheme, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::of(sigmoid(x.f64())),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: ParamTensor<T>,
    pub bias: ParamTensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: ParamTensor::new(format!("{name}.weight"), &[input, output], init, rng)?,
            bias: ParamTensor::new(format!("{name}.bias"), &[output], Init::Zeros, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "`{}` expects {} inputs, got {}",
                self.weight.name,
                self.input_dim(),
                x.cols()
            )));
        }
        let mut y = x.matmul(&self.weight.as_matrix())?;
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.bias.values) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
        let dw = x.matmul_tn(dy)?;
        for (g, &d) in self.weight.grad.iter_mut().zip(dw.data()) {
            *g += d;
        }
        for (g, d) in self.bias.grad.iter_mut().zip(dy.col_sums()) {
            *g += d;
        }
        dy.matmul_nt(&self.weight.as_matrix())
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// Forward state of one [`Mlp`] evaluation.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    inputs: Vec<Matrix<T>>,
    outputs: Vec<Matrix<T>>,
}

/// Stack of affine layers, each followed by its own activation.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<(Linear<T>, Activation)>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds `widths.len() - 1` layers: `hidden` activation on all but the
    /// last, `last` on the final one.
    pub fn new(
        name: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::shape(format!("mlp `{name}` needs at least two widths")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { last } else { hidden };
                Linear::new(&format!("{name}.{k}"), widths[k], widths[k + 1], Init::Xavier, rng).map(|l| (l, act))
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|(l, _)| l.output_dim()).unwrap_or(0)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for (layer, act) in &self.layers {
            h = layer.forward(&h)?.map(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (layer, act) in &self.layers {
            let y = layer.forward(&h)?.map(|v| act.apply(v));
            inputs.push(h);
            outputs.push(y.clone());
            h = y;
        }
        Ok((h, MlpCache { inputs, outputs }))
    }

    /// Single-vector convenience wrapper around [`Mlp::forward`].
    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.into_data())
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dout: &Matrix<T>) -> Result<Matrix<T>> {
        let mut grad = dout.clone();
        for (k, (layer, act)) in self.layers.iter_mut().enumerate().rev() {
            let y = &cache.outputs[k];
            let dpre = grad.zip_with(y, |g, y| g * act.derivative_from_output(y))?;
            grad = layer.backward(&cache.inputs[k], &dpre)?;
        }
        Ok(grad)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.layers.iter_mut().flat_map(|(l, _)| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        self.layers.iter().flat_map(|(l, _)| l.params()).collect()
    }
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm<T: Scalar>(x: &[T], eps: f64) -> Vec<T> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    if denom == 0.0 {
        return vec![T::zero(); x.len()];
    }
    x.iter().map(|v| T::of((v.f64() - mean) / denom)).collect()
}

/// Gradient of [`layer_norm`] with respect to its input.
pub fn layer_norm_backward<T: Scalar>(x: &[T], eps: f64, dy: &[T]) -> Vec<T> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    if denom == 0.0 {
        return vec![T::zero(); x.len()];
    }
    let xhat: Vec<f64> = x.iter().map(|v| (v.f64() - mean) / denom).collect();
    let mean_dy = dy.iter().map(|v| v.f64()).sum::<f64>() / n;
    let mean_dy_xhat = dy.iter().zip(&xhat).map(|(d, h)| d.f64() * h).sum::<f64>() / n;
    dy.iter()
        .zip(&xhat)
        .map(|(d, h)| T::of((d.f64() - mean_dy - h * mean_dy_xhat) / denom))
        .collect()
}

pub fn layer_norm_rows<T: Scalar>(x: &Matrix<T>, eps: f64) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&layer_norm(x.row(i), eps));
    }
    out
}

pub fn layer_norm_rows_backward<T: Scalar>(x: &Matrix<T>, eps: f64, dy: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&layer_norm_backward(x.row(i), eps, dy.row(i)));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam / AdamW state. Moment buffers are positional: the parameter list
/// passed to [`Optimizer::step`] must keep the same order between calls.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, step_count: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut ParamTensor<T>]) -> Result<()> {
        for p in params.iter() {
            if let Some(k) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at index {k} is {}",
                    p.name, p.grad[k]
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape("optimizer moments do not match the parameter list"));
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let lr = c.learning_rate;
        for ((p, m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            for k in 0..p.values.len() {
                let mut g = p.grad[k].f64();
                let mut theta = p.values[k].f64();
                match c.kind {
                    OptimizerKind::Adam => g += c.weight_decay * theta,
                    OptimizerKind::AdamW => theta -= lr * c.weight_decay * theta,
                }
                let mk = c.beta1 * m[k].f64() + (1.0 - c.beta1) * g;
                let vk = c.beta2 * v[k].f64() + (1.0 - c.beta2) * g * g;
                m[k] = T::of(mk);
                v[k] = T::of(vk);
                let update = lr * (mk / bias1) / ((vk / bias2).sqrt() + c.epsilon);
                p.values[k] = T::of(theta - update);
            }
        }
        Ok(())
    }
}

/// Something with parameters, a scalar loss, and a reverse-mode gradient.
pub trait Objective<T: Scalar> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>>;

    /// Loss only; must not depend on gradient buffers.
    fn loss(&mut self) -> Result<f64>;

    /// Zeroes gradients, then fills them for the current parameters.
    fn loss_and_grad(&mut self) -> Result<f64>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Coordinates whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Central finite-difference check of every parameter coordinate, using
/// the fourth-order stencil over `±δ` and `±2δ`.
pub fn grad_check<T: Scalar, O: Objective<T>>(obj: &mut O, delta: f64) -> Result<GradCheckReport> {
    grad_check_sampled(obj, delta, usize::MAX)
}

/// Like [`grad_check`] but with at most `per_param` evenly strided
/// coordinates per parameter tensor.
pub fn grad_check_sampled<T: Scalar, O: Objective<T>>(
    obj: &mut O,
    delta: f64,
    per_param: usize,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&delta) {
        return Err(Error::OutOfRange(format!("finite-difference step {delta} outside [1e-6, 1e-3]")));
    }
    obj.loss_and_grad()?;
    let analytic: Vec<(String, Vec<f64>)> = obj
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.grad.iter().map(|g| g.f64()).collect()))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let len = grads.len();
        let stride = if per_param >= len { 1 } else { len.div_ceil(per_param) };
        for k in (0..len).step_by(stride) {
            let original = obj.params_mut()[pi].values[k];
            let mut at = |h: f64| -> Result<f64> {
                obj.params_mut()[pi].values[k] = T::of(original.f64() + h);
                let l = obj.loss()?;
                if !l.is_finite() {
                    return Err(Error::CheckFailed(format!("loss not finite when perturbing `{name}`[{k}]")));
                }
                Ok(l)
            };
            let (p1, m1, p2, m2) = (at(delta), at(-delta), at(2.0 * delta), at(-2.0 * delta));
            obj.params_mut()[pi].values[k] = original;
            let numeric = (8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * delta);
            let a = grads[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.coordinates_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
