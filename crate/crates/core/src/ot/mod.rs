//! Optimal-transport primitives over a finite state space.
//!
//! Costs are squared Euclidean distances between embedded states. Entropic
//! solvers work on the Gibbs kernel `exp(-cost / epsilon)`; the exact solver
//! is a small min-cost-flow used as a reference for the entropic ones.

mod barycenter;
mod exact;
mod sinkhorn;

pub use barycenter::{barycenter_forward, sinkhorn_barycenter, BarycenterTrace};
pub use exact::{exact_ot, ExactOt};
pub use sinkhorn::{sinkhorn_distance, SinkhornDomain, SinkhornOptions, SinkhornResult};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`Distribution`].
pub const MASS_TOL: f64 = 1e-9;

/// Mixing weight of the uniform floor applied before any Sinkhorn call.
pub const FLOOR: f64 = 1e-8;

/// A probability vector over `N` states.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Array1<f64>);

impl Distribution {
    pub fn new(probs: impl Into<Array1<f64>>) -> Result<Self> {
        let probs = probs.into();
        if probs.is_empty() {
            return Err(Error::param("distribution over zero states"));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::param(format!("negative or non-finite probability {bad}")));
        }
        let total = probs.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::param(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Distribution(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Distribution(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn point_mass(n: usize, state: usize) -> Self {
        let mut p = Array1::zeros(n);
        p[state] = 1.0;
        Distribution(p)
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    /// `(1 - FLOOR) p + FLOOR / N`, strictly positive.
    pub fn smoothed(&self) -> Array1<f64> {
        smooth(self.0.view())
    }
}

pub(crate) fn smooth(p: ArrayView1<'_, f64>) -> Array1<f64> {
    let floor = FLOOR / p.len() as f64;
    p.mapv(|x| (1.0 - FLOOR) * x + floor)
}

/// Builds a document distribution from token counts.
pub fn normalize_counts(counts: &[u64]) -> Result<Distribution> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDocument);
    }
    let probs: Array1<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(Distribution(probs))
}

/// Symmetric, nonnegative, zero-diagonal matrix of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
    tau_applied: Option<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (rows, cols) = entries.dim();
        if rows != cols {
            return Err(Error::shape("square cost matrix", format!("{rows}x{cols}")));
        }
        for i in 0..rows {
            if entries[[i, i]] != 0.0 {
                return Err(Error::param(format!("cost diagonal entry {i} is {}", entries[[i, i]])));
            }
            for j in 0..i {
                let (a, b) = (entries[[i, j]], entries[[j, i]]);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::param(format!("cost entry ({i},{j}) = {a}")));
                }
                if (a - b).abs() > 1e-9 {
                    return Err(Error::param(format!("cost not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(CostMatrix { entries, tau_applied: None })
    }

    pub(crate) fn from_parts(entries: Array2<f64>, tau_applied: Option<f64>) -> Self {
        CostMatrix { entries, tau_applied }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn tau_applied(&self) -> Option<f64> {
        self.tau_applied
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::param(format!("cost scale must be positive, got {s}")));
        }
        Ok(CostMatrix {
            entries: &self.entries * s,
            tau_applied: self.tau_applied,
        })
    }
}

/// Coupling between two marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    entries: Array2<f64>,
    row_marginal: Array1<f64>,
    col_marginal: Array1<f64>,
}

impl TransportPlan {
    pub fn new(entries: Array2<f64>, row_marginal: Array1<f64>, col_marginal: Array1<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != row_marginal.len() || c != col_marginal.len() {
            return Err(Error::shape(
                format!("{}x{}", row_marginal.len(), col_marginal.len()),
                format!("{r}x{c}"),
            ));
        }
        Ok(TransportPlan {
            entries,
            row_marginal,
            col_marginal,
        })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn row_marginal(&self) -> &Array1<f64> {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &Array1<f64> {
        &self.col_marginal
    }

    pub fn row_error(&self) -> f64 {
        l1_gap(&self.entries.sum_axis(ndarray::Axis(1)), &self.row_marginal)
    }

    pub fn col_error(&self) -> f64 {
        l1_gap(&self.entries.sum_axis(ndarray::Axis(0)), &self.col_marginal)
    }

    /// Sum of the l1 violations of both marginals.
    pub fn marginal_error(&self) -> f64 {
        self.row_error() + self.col_error()
    }

    /// `Tr(Tᵀ cost)`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        (&self.entries * cost.entries()).sum()
    }

    /// `Tr(Tᵀ ln T)` with `0 ln 0 = 0`.
    pub fn neg_entropy(&self) -> f64 {
        self.entries
            .iter()
            .map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 })
            .sum()
    }
}

fn l1_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// `exp(-cost / epsilon)`; every entry lies in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    entries: Array2<f64>,
    epsilon: f64,
}

impl GibbsKernel {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64) -> Result<GibbsKernel> {
    check_epsilon(epsilon)?;
    Ok(GibbsKernel {
        entries: cost.entries().mapv(|c| (-c / epsilon).exp()),
        epsilon,
    })
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("epsilon must be positive, got {epsilon}")))
    }
}
