//! Finite-difference harness for the topic-model logit gradients.

use dwl::ot::{CostMatrix, Distribution};
use dwl::topic::{sinkhorn_grad, softmax_backward, TopicLogits};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub y: Vec<f64>,
    pub logits: TopicLogits,
    pub cost: Vec<Vec<f64>>,
}

pub fn instance(n: usize, k: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = TopicLogits::random(n, k, 1, &mut rng);
    let y = super::random_simplex(n, &mut rng);
    let cost = super::random_sq_cost(n, &mut rng);
    Instance { y, logits, cost }
}

pub fn cost_matrix(cost: &[Vec<f64>]) -> CostMatrix {
    let n = cost.len();
    CostMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| cost[i][j])).unwrap()
}

/// Analytic logit gradients, chained through the softmax Jacobians.
pub fn analytic(inst: &Instance, eps: f64, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let state = inst.logits.state().unwrap();
    let y = Distribution::new(Array1::from(inst.y.clone())).unwrap();
    let g = sinkhorn_grad(&y, &state, 0, &cost_matrix(&inst.cost), eps, iters).unwrap();
    let d_alpha = softmax_backward(state.doc_weights(0), g.grad_weights.view());
    let (n, k) = inst.logits.basis.dim();
    let mut d_gamma = Array2::<f64>::zeros((n, k));
    for kk in 0..k {
        d_gamma.column_mut(kk).assign(&softmax_backward(state.topic(kk), g.grad_basis.column(kk)));
    }
    (d_alpha.to_vec(), d_gamma.iter().copied().collect())
}

pub fn numeric(inst: &Instance, eps: f64, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = inst.logits.basis.dim();
    let gamma: Vec<Vec<f64>> = (0..n).map(|i| inst.logits.basis.row(i).to_vec()).collect();
    let alpha: Vec<f64> = inst.logits.weights.column(0).to_vec();
    let h = 1e-5;
    let d_alpha = (0..k)
        .map(|kk| {
            super::central_diff(
                |x| {
                    let mut a = alpha.clone();
                    a[kk] = x;
                    super::composite_loss(&inst.y, &gamma, &a, &inst.cost, eps, iters)
                },
                alpha[kk],
                h,
            )
        })
        .collect();
    let mut d_gamma = Vec::with_capacity(n * k);
    for i in 0..n {
        for kk in 0..k {
            d_gamma.push(super::central_diff(
                |x| {
                    let mut g = gamma.clone();
                    g[i][kk] = x;
                    super::composite_loss(&inst.y, &g, &alpha, &inst.cost, eps, iters)
                },
                gamma[i][kk],
                h,
            ));
        }
    }
    (d_alpha, d_gamma)
}
