use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{gibbs_kernel, smooth, CostMatrix, GibbsKernel, MASS_TOL};
use crate::error::{Error, Result};

/// History of the barycenter forward recursion, kept for differentiation.
///
/// Index `l` of `beta` and `kernel_beta` refers to iteration `l` of the
/// recursion (`beta[0]` is all ones); `phi[l]` is produced at iteration `l`
/// so `phi[0]` is an unused placeholder. Matrices are `N x K`, one column per
/// basis element.
#[derive(Debug, Clone)]
pub struct BarycenterTrace {
    /// Floor-smoothed basis actually used by the recursion.
    pub basis: Array2<f64>,
    pub weights: Array1<f64>,
    pub phi: Vec<Array2<f64>>,
    pub beta: Vec<Array2<f64>>,
    /// `C beta[l]` for `l = 0..L-1`.
    pub kernel_beta: Vec<Array2<f64>>,
    pub yhat: Array1<f64>,
}

impl BarycenterTrace {
    pub fn iterations(&self) -> usize {
        self.beta.len() - 1
    }
}

/// Entropic Wasserstein barycenter of the columns of `basis` with `weights`.
///
/// Runs `inner_iters` rounds of `phi_k = Cᵀ(b_k / C beta_k)`,
/// `yhat = prod_k phi_k^w_k`, `beta_k = yhat / phi_k` from `beta_k = 1`.
/// The output is the raw last iterate: its total mass is 1 at the fixed point
/// and for a single basis element, and otherwise approaches 1 as the
/// recursion converges.
pub fn sinkhorn_barycenter(
    basis: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    epsilon: f64,
    inner_iters: usize,
) -> Result<Array1<f64>> {
    let kernel = gibbs_kernel(cost, epsilon)?;
    Ok(barycenter_forward(basis, weights, &kernel, inner_iters)?.yhat)
}

pub fn barycenter_forward(
    basis: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    kernel: &GibbsKernel,
    inner_iters: usize,
) -> Result<BarycenterTrace> {
    let (n, k) = basis.dim();
    if kernel.n() != n {
        return Err(Error::shape(format!("basis with {} rows", kernel.n()), n));
    }
    if weights.len() != k {
        return Err(Error::shape(format!("{k} weights"), weights.len()));
    }
    if inner_iters == 0 {
        return Err(Error::param("inner_iters must be positive"));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > MASS_TOL {
        return Err(Error::param("barycenter weights must lie on the simplex"));
    }
    let c = kernel.entries();
    let mut b = Array2::<f64>::zeros((n, k));
    for (mut dst, src) in b.axis_iter_mut(Axis(1)).zip(basis.axis_iter(Axis(1))) {
        dst.assign(&smooth(src));
    }

    let mut phi = Vec::with_capacity(inner_iters + 1);
    let mut beta = Vec::with_capacity(inner_iters + 1);
    let mut kernel_beta = Vec::with_capacity(inner_iters);
    phi.push(Array2::zeros((0, 0)));
    beta.push(Array2::<f64>::ones((n, k)));
    let mut yhat = Array1::<f64>::zeros(n);

    for l in 1..=inner_iters {
        let cb = c.dot(&beta[l - 1]);
        let ratio = &b / &cb;
        let phi_l = c.t().dot(&ratio);

        let mut log_y = Array1::<f64>::zeros(n);
        for (phi_k, &w) in phi_l.axis_iter(Axis(1)).zip(weights.iter()) {
            if w != 0.0 {
                Zip::from(&mut log_y).and(&phi_k).for_each(|acc, &p| *acc += w * p.ln());
            }
        }
        yhat = log_y.mapv(f64::exp);
        let mut beta_l = Array2::<f64>::zeros((n, k));
        for (mut col, phi_k) in beta_l.axis_iter_mut(Axis(1)).zip(phi_l.axis_iter(Axis(1))) {
            Zip::from(&mut col).and(&yhat).and(&phi_k).for_each(|o, &y, &p| *o = y / p);
        }
        if !yhat.iter().chain(beta_l.iter()).all(|x| x.is_finite() && *x > 0.0) {
            return Err(Error::Numerical {
                iteration: l,
                what: "barycenter scaling left the positive reals".into(),
            });
        }
        kernel_beta.push(cb);
        phi.push(phi_l);
        beta.push(beta_l);
    }

    Ok(BarycenterTrace {
        basis: b,
        weights: weights.to_owned(),
        phi,
        beta,
        kernel_beta,
        yhat,
    })
}
