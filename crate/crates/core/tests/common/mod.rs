#![allow(dead_code)]

use cyclereward::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Scalar function of a set of tape inputs.
pub type Objective<'a> = dyn Fn(&Tape, &[Var]) -> Var + 'a;

/// Reverse-mode gradient of `f` at `inputs`, one tensor per input.
pub fn analytic_grads(f: &Objective, inputs: &[Tensor]) -> Vec<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(&loss).expect("backward");
    vars.iter().map(|v| grads.get(v).expect("leaf grad").clone()).collect()
}

/// Central finite difference of `f` with respect to element `idx` of input
/// `which`, evaluated without recording anything.
pub fn finite_difference(f: &Objective, inputs: &[Tensor], which: usize, idx: usize, h: f64) -> f64 {
    let eval = |delta: f64| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut data = t.to_vec();
                if i == which {
                    data[idx] += delta;
                }
                tape.constant(Tensor::new(t.shape(), data).unwrap())
            })
            .collect();
        f(&tape, &vars).item()
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over every element of every input.
pub fn max_gradient_error(f: &Objective, inputs: &[Tensor], h: f64) -> f64 {
    let grads = analytic_grads(f, inputs);
    let mut worst = 0.0f64;
    for (which, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let numeric = finite_difference(f, inputs, which, idx, h);
            worst = worst.max(relative_error(g.data()[idx], numeric));
        }
    }
    worst
}
