//! Central finite-difference oracle for tape gradients.
//!
//! Evaluates the loss closure from scratch for every perturbed element, so it
//! never touches the backward pass it is checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// concatenated gradient of all inputs.
    pub rel_error: f32,
    /// The same measure restricted to each input.
    pub per_input: Vec<f32>,
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = f(&mut tape, &vars);
    tape.value(l).item() as f64
}

/// Finite-difference formula used by the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central,
    /// Fourth-order central formula over `x ± h, x ± 2h`. Tolerates a larger
    /// `h`, which keeps f32 rounding noise down on deep compositions.
    FivePoint,
}

/// Compares tape gradients of `f` against central differences with step `h`.
pub fn check_gradients(
    inputs: &[Tensor],
    f: &impl Fn(&mut Tape, &[Var]) -> Var,
    h: f32,
) -> GradCheck {
    check_gradients_with(inputs, f, h, Stencil::Central)
}

pub fn check_gradients_with(
    inputs: &[Tensor],
    f: &impl Fn(&mut Tape, &[Var]) -> Var,
    h: f32,
    stencil: Stencil,
) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = vec![0.0f64; inputs[k].len()];
        let mut work = inputs.to_vec();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            let mut at = |step: f32| {
                work[k].data_mut()[i] = orig + step;
                eval(&work, f)
            };
            numeric[i] = match stencil {
                Stencil::Central => (at(h) - at(-h)) / (2.0 * h as f64),
                Stencil::FivePoint => {
                    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h as f64)
                }
            };
            work[k].data_mut()[i] = orig;
        }
        per_input.push(relative_error(&analytic, &numeric));
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }
    GradCheck {
        rel_error: relative_error(&all_analytic, &all_numeric),
        per_input,
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f32 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-7 {
        return diff as f32;
    }
    (diff / denom) as f32
}
