use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

/// A named weight with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    pub trainable: bool,
    adam: Option<AdamState>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::new_allow_empty(value.shape().to_vec(), vec![0.0; value.len()])
            .expect("grad buffer");
        Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
            trainable: true,
            adam: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn set_value(&mut self, t: Tensor) -> Result<()> {
        if t.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} cannot be replaced by {:?}",
                self.name,
                self.value.shape(),
                t.shape()
            )));
        }
        self.value = Arc::new(t);
        Ok(())
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8, no weight decay.
    #[default]
    Adam,
}

const ADAM_B1: f32 = 0.9;
const ADAM_B2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Applies one update to every trainable parameter from its accumulated grad.
pub fn optimizer_step(params: &mut [&mut Parameter], lr: f32, kind: OptimizerKind) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    for p in params.iter() {
        if p.trainable && !p.grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter '{}'",
                p.name
            )));
        }
    }
    for p in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        match kind {
            OptimizerKind::Sgd => {
                let g = p.grad.data().to_vec();
                for (w, g) in p.value_mut().data_mut().iter_mut().zip(g) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let n = p.grad.len();
                let g = p.grad.data().to_vec();
                let st = p.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                st.t += 1;
                let bc1 = 1.0 - ADAM_B1.powi(st.t as i32);
                let bc2 = 1.0 - ADAM_B2.powi(st.t as i32);
                let mut upd = vec![0.0; n];
                for i in 0..n {
                    st.m[i] = ADAM_B1 * st.m[i] + (1.0 - ADAM_B1) * g[i];
                    st.v[i] = ADAM_B2 * st.v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                    let mh = st.m[i] / bc1;
                    let vh = st.v[i] / bc2;
                    upd[i] = lr * mh / (vh.sqrt() + ADAM_EPS);
                }
                for (w, u) in p.value_mut().data_mut().iter_mut().zip(upd) {
                    *w -= u;
                }
            }
        }
    }
    Ok(())
}

/// Ordered, named collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

/// Tape variables for every parameter of a [`ParamSet`], in set order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

impl Bound {
    /// Wraps variables created elsewhere, in parameter-set order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let i = self.params.len();
        self.index.insert(name.clone(), i);
        self.params.push(Parameter::new(name, value));
        i
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        self.params[i].value()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.trainable = on;
        }
    }

    /// Creates one leaf per parameter. With `track = false` nothing on this
    /// set receives gradients regardless of `trainable`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_arc(p.value_arc(), track && p.trainable))
            .collect();
        Bound { vars }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds the gradients computed for `bound` into each parameter's buffer.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.wrt(*v) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn step(&mut self, lr: f32, kind: OptimizerKind) -> Result<()> {
        let mut refs: Vec<&mut Parameter> = self.params.iter_mut().collect();
        optimizer_step(&mut refs, lr, kind)
    }

    /// Bitwise fingerprint of all values, used to prove parameters are frozen.
    pub fn fingerprint(&self) -> Vec<u32> {
        self.params
            .iter()
            .flat_map(|p| p.value().data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0));
        p.accumulate_grad(&Tensor::scalar(0.5));
        optimizer_step(&mut [&mut p], 0.1, OptimizerKind::Sgd).unwrap();
        assert!((p.value().item() - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_leaves_value() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Parameter::new("p", Tensor::vector(vec![1.0, -2.0]));
            optimizer_step(&mut [&mut p], 0.1, kind).unwrap();
            assert_eq!(p.value().data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn sgd_on_square_contracts() {
        // f(p) = p^2, grad 2p, so each step multiplies p by 0.8.
        let mut p = Parameter::new("p", Tensor::scalar(1.0));
        for _ in 0..100 {
            p.zero_grad();
            let g = 2.0 * p.value().item();
            p.accumulate_grad(&Tensor::scalar(g));
            optimizer_step(&mut [&mut p], 0.1, OptimizerKind::Sgd).unwrap();
        }
        assert!(p.value().item().abs() < 1e-8);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut p = Parameter::new("blocks.0.qkv_w", Tensor::scalar(1.0));
        p.accumulate_grad(&Tensor::scalar(f32::NAN));
        let err = optimizer_step(&mut [&mut p], 0.1, OptimizerKind::Adam).unwrap_err();
        assert!(err.to_string().contains("blocks.0.qkv_w"));
        assert_eq!(p.value().item(), 1.0);
    }

    #[test]
    fn zero_grad_resets() {
        let mut p = Parameter::new("p", Tensor::ones(&[3]));
        p.accumulate_grad(&Tensor::ones(&[3]));
        p.zero_grad();
        assert!(p.grad().data().iter().all(|&g| g == 0.0));
        assert_eq!(p.grad().shape(), p.value().shape());
    }
}
