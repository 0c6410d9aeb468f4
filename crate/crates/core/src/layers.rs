//! Parameter layouts for the layer types used by the model.
//!
//! A layer knows its parameter names and shapes. `register` initializes them
//! into a [`ParamSet`]; `bind` puts the current values on a tape as leaves
//! and remembers which leaf belongs to which parameter.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::optim::ParamSet;
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform on `±bound`.
    Uniform {
        bound: f64,
    },
}

impl Init {
    pub fn sample<T: Real>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::HeNormal { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| T::of(d.sample(rng)))
            }
            Init::GlorotUniform { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Init::Uniform { bound: b }.sample(shape, rng)
            }
            Init::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Tensor::from_fn(shape, |_| T::of(d.sample(rng)))
            }
        }
    }
}

/// Leaves bound on one tape, keyed by parameter position.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: Vec<(usize, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<T: Real>(&mut self, tape: &mut Tape<T>, set: &ParamSet<T>, name: &str) -> Result<Var> {
        let pos = set
            .position(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let p = set.get(name).expect("position implies presence");
        let v = if p.trainable {
            tape.leaf(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        self.vars.push((pos, v));
        Ok(v)
    }

    /// `(parameter position, leaf)` pairs in binding order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().copied()
    }
}

/// Tape handles of one separable convolution.
#[derive(Clone, Copy, Debug)]
pub struct SeparableConvVars {
    pub depthwise: Var,
    pub pointwise: Var,
    pub bias: Var,
}

impl SeparableConvVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.separable_conv2d(x, self.depthwise, self.pointwise, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConvLayer {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl SeparableConvLayer {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub(crate) fn names(&self) -> [String; 3] {
        [
            format!("{}.depthwise", self.prefix),
            format!("{}.pointwise", self.prefix),
            format!("{}.bias", self.prefix),
        ]
    }

    pub fn register<T: Real>(&self, set: &mut ParamSet<T>, rng: &mut impl Rng, zero: bool) -> Result<()> {
        let [dn, pn, bn] = self.names();
        let k = self.kernel;
        let (dinit, pinit) = if zero {
            (Init::Zeros, Init::Zeros)
        } else {
            (
                Init::HeNormal { fan_in: k * k },
                Init::HeNormal {
                    fan_in: self.in_channels,
                },
            )
        };
        set.insert(&dn, dinit.sample(&[k, k, self.in_channels], rng))?;
        set.insert(&pn, pinit.sample(&[self.in_channels, self.out_channels], rng))?;
        set.insert(&bn, Tensor::zeros(&[self.out_channels]))
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<SeparableConvVars> {
        let [dn, pn, bn] = self.names();
        Ok(SeparableConvVars {
            depthwise: b.bind(tape, set, &dn)?,
            pointwise: b.bind(tape, set, &pn)?,
            bias: b.bind(tape, set, &bn)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input: Var,
    pub recurrent: Var,
    pub bias: Var,
}

impl LstmVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, seq: Var) -> Result<Var> {
        tape.lstm(seq, self.input, self.recurrent, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input_dim,
            hidden,
        }
    }

    fn names(&self) -> [String; 3] {
        [
            format!("{}.input", self.prefix),
            format!("{}.recurrent", self.prefix),
            format!("{}.bias", self.prefix),
        ]
    }

    pub fn register<T: Real>(&self, set: &mut ParamSet<T>, rng: &mut impl Rng, zero: bool) -> Result<()> {
        let [inn, rn, bn] = self.names();
        let u = self.hidden;
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform {
                bound: 1.0 / (u as f64).sqrt(),
            }
        };
        set.insert(&inn, init.sample(&[self.input_dim, 4 * u], rng))?;
        set.insert(&rn, init.sample(&[u, 4 * u], rng))?;
        set.insert(&bn, init.sample(&[4 * u], rng))
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<LstmVars> {
        let [inn, rn, bn] = self.names();
        Ok(LstmVars {
            input: b.bind(tape, set, &inn)?,
            recurrent: b.bind(tape, set, &rn)?,
            bias: b.bind(tape, set, &bn)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Plain `k×k` convolution with stride.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn register<T: Real>(&self, set: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<()> {
        let k = self.kernel;
        let init = Init::HeNormal {
            fan_in: k * k * self.in_channels,
        };
        set.insert(
            &format!("{}.weight", self.prefix),
            init.sample(&[k, k, self.in_channels, self.out_channels], rng),
        )?;
        set.insert(&format!("{}.bias", self.prefix), Tensor::zeros(&[self.out_channels]))
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<ConvVars> {
        Ok(ConvVars {
            weight: b.bind(tape, set, &format!("{}.weight", self.prefix))?,
            bias: b.bind(tape, set, &format!("{}.bias", self.prefix))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, v: &ConvVars, x: Var) -> Result<Var> {
        tape.conv2d(x, v.weight, v.bias, self.stride)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Per-sample normalization over all positions and channels with a
/// per-channel affine; see [`crate::nn::layer_norm_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub prefix: String,
    pub channels: usize,
}

impl NormLayer {
    pub fn register<T: Real>(&self, set: &mut ParamSet<T>) -> Result<()> {
        set.insert(&format!("{}.gamma", self.prefix), Tensor::ones(&[self.channels]))?;
        set.insert(&format!("{}.beta", self.prefix), Tensor::zeros(&[self.channels]))
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<NormVars> {
        Ok(NormVars {
            gamma: b.bind(tape, set, &format!("{}.gamma", self.prefix))?,
            beta: b.bind(tape, set, &format!("{}.beta", self.prefix))?,
        })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, v: &NormVars, x: Var) -> Result<Var> {
        tape.layer_norm(x, v.gamma, v.beta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub prefix: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayer {
    pub fn register<T: Real>(&self, set: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<()> {
        let init = Init::GlorotUniform {
            fan_in: self.inputs,
            fan_out: self.outputs,
        };
        set.insert(
            &format!("{}.weight", self.prefix),
            init.sample(&[self.inputs, self.outputs], rng),
        )?;
        set.insert(&format!("{}.bias", self.prefix), Tensor::zeros(&[self.outputs]))
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, set: &ParamSet<T>, b: &mut Bindings) -> Result<DenseVars> {
        Ok(DenseVars {
            weight: b.bind(tape, set, &format!("{}.weight", self.prefix))?,
            bias: b.bind(tape, set, &format!("{}.bias", self.prefix))?,
        })
    }

    /// `x: [inputs]` to `[1, outputs]`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, v: &DenseVars, x: Var) -> Result<Var> {
        let row = tape.reshape(x, &[1, self.inputs])?;
        let y = tape.matmul(row, v.weight)?;
        tape.add_bias(y, v.bias)
    }
}
