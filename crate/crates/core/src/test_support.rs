//! Finite-difference oracles shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(dims, |_| r.gen_range(-1.0..1.0) as Real)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Builds `f` on fresh graphs and reduces its output with
/// `sum(weights * out)`, where `weights` are all ones (`None`) or seeded
/// random values. Compares the reverse-mode gradient of that reduction with
/// central differences (step `h`, reduction done in `f64` outside the graph)
/// for every input element and returns the worst relative error.
pub fn max_grad_err<F>(inputs: &[Tensor], h: f64, floor: f64, weights: Option<u64>, f: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids);
    let dims = g.value(out).dims().to_vec();
    let w = match weights {
        Some(seed) => rand_tensor(&dims, seed),
        None => Tensor::full(&dims, 1.0),
    };
    let wid = g.constant(w.clone());
    let p = g.mul(out, wid).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = ids.iter().map(|&i| g.grad_or_zeros(i)).collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&y, &wi)| y as f64 * wi as f64)
            .sum()
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h as Real;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h as Real;
            // Use the actually representable step.
            let step = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let num = (eval(&plus) - eval(&minus)) / step;
            let a = analytic[k].data()[i] as f64;
            worst = worst.max(rel_err(a, num, floor));
        }
    }
    worst
}

/// Per-op tolerance for `sum(w * op(x))` checks.
#[cfg(not(feature = "f64"))]
pub const OP_TOL: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const OP_TOL: f64 = 1e-6;

/// Finite-difference step for per-op checks.
#[cfg(not(feature = "f64"))]
pub const FD_STEP: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const FD_STEP: f64 = 1e-5;
