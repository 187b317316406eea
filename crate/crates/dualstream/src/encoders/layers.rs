//! Parameter-owning layers shared by the encoders and fusion heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ops::{self, scaled_dot_attention};
use crate::tensor::{ParamRegistry, Parameter, Scalar, Tape, Tensor, TensorError, Var};

/// Truncated normal init (std `std`, resampled beyond 2 std).
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(T::of_f64(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Kaiming fan-out normal init for conv kernels [cout, cin_g, kh, kw].
pub fn kaiming_fan_out<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    assert_eq!(shape.len(), 4);
    let fan_out = shape[0] * shape[2] * shape[3];
    let std = (2.0 / fan_out as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            T::of_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub struct LinearLayer<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(scope: &str, out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(
                format!("{scope}.weight"),
                trunc_normal(&[out_dim, in_dim], 0.02, rng),
            ),
            bias: Parameter::new(format!("{scope}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        ops::linear(x, tape.param(&self.weight), Some(tape.param(&self.bias)))
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        reg.register(&self.weight);
        reg.register(&self.bias);
    }
}

pub struct LayerNormLayer<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNormLayer<T> {
    pub fn new(scope: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{scope}.gamma"), Tensor::full(&[dim], T::one())),
            beta: Parameter::new(format!("{scope}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        ops::layernorm(x, tape.param(&self.gamma), tape.param(&self.beta), self.eps)
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        reg.register(&self.gamma);
        reg.register(&self.beta);
    }
}

pub struct Conv2dLayer<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Parameter::new(
            format!("{scope}.weight"),
            kaiming_fan_out(&[out_ch, in_ch / groups, kernel, kernel], rng),
        );
        let bias = bias.then(|| Parameter::new(format!("{scope}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            stride,
            pad,
            groups,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        ops::conv2d(
            x,
            tape.param(&self.weight),
            self.bias.as_ref().map(|b| tape.param(b)),
            self.stride,
            self.pad,
            self.groups,
        )
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        reg.register(&self.weight);
        if let Some(b) = &self.bias {
            reg.register(b);
        }
    }
}

pub struct BatchNorm2dLayer<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2dLayer<T> {
    pub fn new(scope: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{scope}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Parameter::new(format!("{scope}.beta"), Tensor::zeros(&[channels])),
            running_mean: Parameter::buffer(
                format!("{scope}.running_mean"),
                Tensor::zeros(&[channels]),
            ),
            running_var: Parameter::buffer(
                format!("{scope}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        train: bool,
    ) -> Result<Var<'t, T>, TensorError> {
        ops::batchnorm2d(
            x,
            tape.param(&self.gamma),
            tape.param(&self.beta),
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            train,
        )
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        reg.register(&self.gamma);
        reg.register(&self.beta);
        reg.register(&self.running_mean);
        reg.register(&self.running_var);
    }
}

/// Multi-head attention with learned Q/K/V/output projections (biases, no
/// attention dropout).
pub struct MultiHeadAttention<T: Scalar> {
    pub wq: LinearLayer<T>,
    pub wk: LinearLayer<T>,
    pub wv: LinearLayer<T>,
    pub wo: LinearLayer<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(scope: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: LinearLayer::new(&format!("{scope}.wq"), dim, dim, rng),
            wk: LinearLayer::new(&format!("{scope}.wk"), dim, dim, rng),
            wv: LinearLayer::new(&format!("{scope}.wv"), dim, dim, rng),
            wo: LinearLayer::new(&format!("{scope}.wo"), dim, dim, rng),
            heads,
        }
    }

    /// q: [B, Nq, D]; k, v: [B, Nk, D] -> [B, Nq, D].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let qp = self.wq.forward(tape, q)?;
        let kp = self.wk.forward(tape, k)?;
        let vp = self.wv.forward(tape, v)?;
        let ctx = scaled_dot_attention(qp, kp, vp, self.heads)?;
        self.wo.forward(tape, ctx)
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        self.wq.register(reg);
        self.wk.register(reg);
        self.wv.register(reg);
        self.wo.register(reg);
    }
}
