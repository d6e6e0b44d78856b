#![allow(dead_code)]

use crossmae::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Analytic gradients of `f` at `inputs` from one backward pass.
pub fn analytic_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

pub fn eval(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.value(loss).item()
}

/// Central finite differences of `f`, one coordinate at a time.
pub fn numeric_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            g.data_mut()[j] = (eval(&plus, f) - eval(&minus, f)) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Largest elementwise relative error between analytic and numeric gradients.
pub fn grad_check(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let a = analytic_grads(inputs, f);
    let n = numeric_grads(inputs, f);
    a.iter()
        .zip(&n)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| rel_err(*p, *q)).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// `sum(x ⊙ w)` for a fixed pseudo-random `w`, so every output entry gets a
/// distinct cotangent.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let w = random_tensor(tape.shape(x), seed);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
