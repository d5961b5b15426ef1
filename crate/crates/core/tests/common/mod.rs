//! Reference implementations shared by the integration suites. Everything
//! here is written with plain loops over `Vec`s so it shares no code path
//! with the library beyond the public types it is compared against.
#![allow(dead_code)]

use rand::Rng;

pub mod gradcheck;

pub const FLOOR: f64 = 1e-8;

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Barycenter forward recursion on `basis[k][n]` with the floor applied.
pub fn forward_barycenter(basis: &[Vec<f64>], weights: &[f64], cost: &[Vec<f64>], eps: f64, iters: usize) -> Vec<f64> {
    let n = cost.len();
    let kk = basis.len();
    let c: Vec<Vec<f64>> = cost.iter().map(|row| row.iter().map(|d| (-d / eps).exp()).collect()).collect();
    let b: Vec<Vec<f64>> = basis
        .iter()
        .map(|col| col.iter().map(|x| (1.0 - FLOOR) * x + FLOOR / n as f64).collect())
        .collect();
    let mut beta = vec![vec![1.0; n]; kk];
    let mut y = vec![0.0; n];
    for _ in 0..iters {
        let mut phi = vec![vec![0.0; n]; kk];
        for k in 0..kk {
            let mut ratio = vec![0.0; n];
            for i in 0..n {
                let cb: f64 = (0..n).map(|j| c[i][j] * beta[k][j]).sum();
                ratio[i] = b[k][i] / cb;
            }
            for j in 0..n {
                phi[k][j] = (0..n).map(|i| c[i][j] * ratio[i]).sum();
            }
        }
        for j in 0..n {
            let log: f64 = (0..kk).map(|k| weights[k] * phi[k][j].ln()).sum();
            y[j] = log.exp();
        }
        for k in 0..kk {
            for j in 0..n {
                beta[k][j] = y[j] / phi[k][j];
            }
        }
    }
    y
}

/// Squared reconstruction loss as a function of the logits.
/// `basis_logits[n][k]`, `weight_logits[k]`.
pub fn composite_loss(
    y: &[f64],
    basis_logits: &[Vec<f64>],
    weight_logits: &[f64],
    cost: &[Vec<f64>],
    eps: f64,
    iters: usize,
) -> f64 {
    let n = basis_logits.len();
    let kk = weight_logits.len();
    let basis: Vec<Vec<f64>> = (0..kk)
        .map(|k| softmax(&(0..n).map(|i| basis_logits[i][k]).collect::<Vec<_>>()))
        .collect();
    let lambda = softmax(weight_logits);
    let yhat = forward_barycenter(&basis, &lambda, cost, eps, iters);
    y.iter().zip(&yhat).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

pub fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Squared distances between `n` uniform points of the unit square.
pub fn random_sq_cost<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                    dx * dx + dy * dy
                })
                .collect()
        })
        .collect()
}

/// Exact transport by enumerating the basic feasible solutions of the
/// transport polytope: every support of `2n - 1` cells forming a spanning
/// tree of the bipartite row/column graph determines one vertex.
pub fn vertex_enumeration_ot(u: &[f64], v: &[f64], cost: &[Vec<f64>]) -> f64 {
    let n = u.len();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let size = 2 * n - 1;
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..size).collect();
    loop {
        if let Some(plan) = solve_tree(&pick.iter().map(|&p| cells[p]).collect::<Vec<_>>(), u, v) {
            let value: f64 = plan.iter().map(|&((i, j), t)| t * cost[i][j]).sum();
            best = best.min(value);
        }
        // next combination
        let mut i = size;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] != i + cells.len() - size {
                break;
            }
        }
        pick[i] += 1;
        for j in i + 1..size {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

// Peels leaves off the support; `None` when the support is not a spanning
// tree or the resulting amounts are infeasible.
fn solve_tree(support: &[(usize, usize)], u: &[f64], v: &[f64]) -> Option<Vec<((usize, usize), f64)>> {
    let mut row_left = u.to_vec();
    let mut col_left = v.to_vec();
    let mut open: Vec<bool> = vec![true; support.len()];
    let mut out = Vec::with_capacity(support.len());
    for _ in 0..support.len() {
        let mut found = None;
        'search: for (idx, &(i, j)) in support.iter().enumerate() {
            if !open[idx] {
                continue;
            }
            let row_deg = support.iter().enumerate().filter(|(q, c)| open[*q] && c.0 == i).count();
            if row_deg == 1 {
                found = Some((idx, true));
                break 'search;
            }
            let col_deg = support.iter().enumerate().filter(|(q, c)| open[*q] && c.1 == j).count();
            if col_deg == 1 {
                found = Some((idx, false));
                break 'search;
            }
        }
        let (idx, by_row) = found?;
        let (i, j) = support[idx];
        let amount = if by_row { row_left[i] } else { col_left[j] };
        if amount < -1e-12 {
            return None;
        }
        row_left[i] -= amount;
        col_left[j] -= amount;
        open[idx] = false;
        out.push(((i, j), amount.max(0.0)));
    }
    let slack: f64 = row_left.iter().chain(&col_left).map(|x| x.abs()).sum();
    (slack < 1e-9).then_some(out)
}

/// Symmetric cost with zero diagonal and i.i.d. uniform off-diagonal entries.
pub fn random_uniform_cost<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let x: f64 = rng.random();
            c[i][j] = x;
            c[j][i] = x;
        }
    }
    c
}
