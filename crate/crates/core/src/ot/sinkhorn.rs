use log::warn;
use ndarray::{Array1, Array2, Axis};

use super::{check_epsilon, gibbs_kernel, CostMatrix, Distribution, TransportPlan};
use crate::error::{Error, Result};

/// Where the Sinkhorn scalings are iterated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornDomain {
    /// Multiplicative scalings of the Gibbs kernel.
    Scaling,
    /// Dual potentials with log-sum-exp updates; needed when `cost / epsilon`
    /// is large enough for the kernel to underflow.
    Log,
    /// `Scaling` unless `max(cost) / epsilon` exceeds [`AUTO_LOG_RATIO`].
    #[default]
    Auto,
}

pub const AUTO_LOG_RATIO: f64 = 50.0;

/// Iteration cap for each intermediate epsilon of the log-domain schedule.
pub const ANNEAL_STAGE_ITERS: usize = 50;

#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    /// l1 marginal violation at which iteration stops.
    pub tol: f64,
    pub domain: SinkhornDomain,
}

impl SinkhornOptions {
    pub fn new(epsilon: f64) -> Self {
        SinkhornOptions {
            epsilon,
            max_iters: 1000,
            tol: 1e-6,
            domain: SinkhornDomain::Auto,
        }
    }

    pub fn max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn domain(mut self, domain: SinkhornDomain) -> Self {
        self.domain = domain;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// `Tr(Tᵀ cost) + epsilon Tr(Tᵀ ln T)`.
    pub value: f64,
    /// `Tr(Tᵀ cost)` alone.
    pub transport_cost: f64,
    /// Last iterate, rounded onto the couplings of the smoothed marginals.
    pub plan: TransportPlan,
    pub iterations: usize,
    /// l1 marginal violation of the last iterate before rounding.
    pub marginal_error: f64,
    /// False when `max_iters` ran out before the marginal tolerance was met.
    pub converged: bool,
}

/// Entropy-regularized transport between `u` and `v`.
///
/// Both marginals are floor-smoothed first so every scaling stays finite.
/// Running out of iterations is not an error: the result carries
/// `converged = false` and the achieved marginal error, and a warning is logged.
pub fn sinkhorn_distance(
    u: &Distribution,
    v: &Distribution,
    cost: &CostMatrix,
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    check_epsilon(opts.epsilon)?;
    let n = cost.n();
    if u.len() != n || v.len() != n {
        return Err(Error::shape(
            format!("marginals of length {n}"),
            format!("{} and {}", u.len(), v.len()),
        ));
    }
    if opts.max_iters == 0 {
        return Err(Error::param("max_iters must be positive"));
    }
    let a = u.smoothed();
    let b = v.smoothed();
    let use_log = match opts.domain {
        SinkhornDomain::Scaling => false,
        SinkhornDomain::Log => true,
        SinkhornDomain::Auto => cost.max_entry() / opts.epsilon > AUTO_LOG_RATIO,
    };
    let (plan, iterations, err) = if use_log {
        solve_log(&a, &b, cost, opts)?
    } else {
        solve_scaling(&a, &b, cost, opts)?
    };
    let converged = err <= opts.tol;
    if !converged {
        warn!(
            "sinkhorn did not converge in {} iterations (marginal error {err:.3e})",
            opts.max_iters
        );
    }
    let plan = TransportPlan::new(round_to_marginals(plan, &a, &b), a, b)?;
    let transport_cost = plan.transport_cost(cost);
    let value = transport_cost + opts.epsilon * plan.neg_entropy();
    if !value.is_finite() {
        return Err(Error::Numerical {
            iteration: iterations,
            what: "non-finite sinkhorn value".into(),
        });
    }
    Ok(SinkhornResult {
        value,
        transport_cost,
        marginal_error: err,
        plan,
        iterations,
        converged,
    })
}

fn solve_scaling(
    a: &Array1<f64>,
    b: &Array1<f64>,
    cost: &CostMatrix,
    opts: &SinkhornOptions,
) -> Result<(Array2<f64>, usize, f64)> {
    let kernel = gibbs_kernel(cost, opts.epsilon)?;
    let k = kernel.entries();
    let mut left = Array1::<f64>::ones(a.len());
    let mut right = Array1::<f64>::ones(b.len());
    let mut err = f64::INFINITY;
    let mut iters = 0;
    while iters < opts.max_iters {
        iters += 1;
        left = a / &k.dot(&right);
        right = b / &k.t().dot(&left);
        if !left.iter().chain(right.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numerical {
                iteration: iters,
                what: "sinkhorn scaling overflow".into(),
            });
        }
        // columns are exact after the right update; only rows can be off
        let rows = &left * &k.dot(&right);
        err = rows.iter().zip(a.iter()).map(|(r, t)| (r - t).abs()).sum();
        if err <= opts.tol {
            break;
        }
    }
    let plan = Array2::from_shape_fn(k.dim(), |(i, j)| left[i] * k[[i, j]] * right[j]);
    Ok((plan, iters, err))
}

fn solve_log(
    a: &Array1<f64>,
    b: &Array1<f64>,
    cost: &CostMatrix,
    opts: &SinkhornOptions,
) -> Result<(Array2<f64>, usize, f64)> {
    let eps = opts.epsilon;
    let c = cost.entries();
    let n = a.len();
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(n);
    let mut scratch = vec![0.0; n];
    let mut err = f64::INFINITY;
    let mut iters = 0;
    // anneal from the cost scale down to epsilon, warm-starting the potentials
    let mut schedule = Vec::new();
    let mut stage = cost.max_entry();
    while stage > eps {
        schedule.push(stage);
        stage /= 2.0;
    }
    schedule.push(eps);
    let last = schedule.len() - 1;
    for (s, &e) in schedule.iter().enumerate() {
        let budget = if s == last {
            opts.max_iters
        } else {
            (iters + ANNEAL_STAGE_ITERS).min(opts.max_iters)
        };
        while iters < budget {
            iters += 1;
            for i in 0..n {
                for j in 0..n {
                    scratch[j] = (g[j] - c[[i, j]]) / e;
                }
                f[i] = e * (log_a[i] - log_sum_exp(&scratch));
            }
            for j in 0..n {
                for i in 0..n {
                    scratch[i] = (f[i] - c[[i, j]]) / e;
                }
                g[j] = e * (log_b[j] - log_sum_exp(&scratch));
            }
            if !f.iter().chain(g.iter()).all(|x| x.is_finite()) {
                return Err(Error::Numerical {
                    iteration: iters,
                    what: "non-finite sinkhorn potentials".into(),
                });
            }
            err = 0.0;
            for i in 0..n {
                let row: f64 = (0..n).map(|j| ((f[i] + g[j] - c[[i, j]]) / e).exp()).sum();
                err += (row - a[i]).abs();
            }
            if err <= opts.tol {
                break;
            }
        }
    }
    let plan = Array2::from_shape_fn((n, n), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp());
    Ok((plan, iters, err))
}

/// Moves a nearly feasible plan onto the coupling polytope of `(a, b)`:
/// shrink overfull rows, then overfull columns, then fill the deficit with a
/// rank-one correction. Changes the plan by at most twice its l1 marginal
/// violation.
pub(crate) fn round_to_marginals(mut plan: Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let rows = plan.sum_axis(Axis(1));
    for (mut row, (&r, &target)) in plan.axis_iter_mut(Axis(0)).zip(rows.iter().zip(a.iter())) {
        if r > target {
            row *= target / r;
        }
    }
    let cols = plan.sum_axis(Axis(0));
    for (mut col, (&s, &target)) in plan.axis_iter_mut(Axis(1)).zip(cols.iter().zip(b.iter())) {
        if s > target {
            col *= target / s;
        }
    }
    let row_deficit = (a - &plan.sum_axis(Axis(1))).mapv(|x| x.max(0.0));
    let col_deficit = (b - &plan.sum_axis(Axis(0))).mapv(|x| x.max(0.0));
    let mass = row_deficit.sum();
    if mass > 0.0 {
        for ((i, j), t) in plan.indexed_iter_mut() {
            *t += row_deficit[i] * col_deficit[j] / mass;
        }
    }
    plan
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
