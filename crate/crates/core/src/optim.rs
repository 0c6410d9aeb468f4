//! Named parameters and the Adam optimizer.

use std::collections::BTreeMap;

use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            gradient,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Ordered collection of parameters addressed by name.
///
/// Insertion order is the canonical order used for initialization,
/// gradient reduction and serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` from its stored gradient.
pub fn adam_step<T: Real>(param: &mut Parameter<T>, state: &mut AdamState<T>) -> Result<()> {
    param.value.expect_same_shape(&param.gradient, "adam_step")?;
    param.value.expect_same_shape(&state.m, "adam_step")?;
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let lr = T::of(c.learning_rate);
    let eps = T::of(c.epsilon);
    let bc1 = T::one() - T::of(c.beta1.powi(state.step as i32));
    let bc2 = T::one() - T::of(c.beta2.powi(state.step as i32));
    let one = T::one();
    let values = param.value.data_mut();
    let grads = param.gradient.data();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamSet`], one state per parameter in set order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            states: params.iter().map(|p| AdamState::new(p.value.shape(), config)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            if p.trainable {
                adam_step(p, s)?;
            }
        }
        Ok(())
    }
}
