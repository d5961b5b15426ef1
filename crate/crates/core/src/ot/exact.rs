use ndarray::{Array1, Array2};

use super::{CostMatrix, Distribution, TransportPlan};
use crate::error::{Error, Result};

// Amounts below this are treated as exhausted.
const AMOUNT_TOL: f64 = 1e-14;

/// Exact optimal transport together with dual potentials certifying it.
#[derive(Debug, Clone)]
pub struct ExactOt {
    pub value: f64,
    pub plan: TransportPlan,
    /// `f` with `f_i + g_j <= cost_ij`, equality on the plan's support.
    pub row_potential: Array1<f64>,
    pub col_potential: Array1<f64>,
}

/// Solves `min Tr(Tᵀ cost)` over couplings of `u` and `v` by successive
/// shortest augmenting paths. Meant for small problems (reference values).
pub fn exact_ot(u: &Distribution, v: &Distribution, cost: &CostMatrix) -> Result<ExactOt> {
    let n = cost.n();
    if u.len() != n || v.len() != n {
        return Err(Error::shape(
            format!("marginals of length {n}"),
            format!("{} and {}", u.len(), v.len()),
        ));
    }
    let c = cost.entries();
    let mut plan = Array2::<f64>::zeros((n, n));
    let mut supply = u.probs().clone();
    let mut demand = v.probs().clone();

    // nodes 0..n are rows, n..2n are columns
    let mut dist = vec![0.0f64; 2 * n];
    let mut pred = vec![usize::MAX; 2 * n];
    let max_augmentations = 4 * n * n + 16;
    for _ in 0..max_augmentations {
        if supply.iter().all(|&s| s <= AMOUNT_TOL) || demand.iter().all(|&d| d <= AMOUNT_TOL) {
            break;
        }
        for i in 0..n {
            dist[i] = if supply[i] > AMOUNT_TOL { 0.0 } else { f64::INFINITY };
            dist[n + i] = f64::INFINITY;
        }
        pred.fill(usize::MAX);
        relax(c, &plan, &mut dist, &mut pred);

        let sink = (0..n)
            .filter(|&j| demand[j] > AMOUNT_TOL && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(sink) = sink else {
            return Err(Error::Numerical {
                iteration: 0,
                what: "no augmenting path in transport network".into(),
            });
        };

        // walk back to the source row, collecting the bottleneck
        let mut path = Vec::new();
        let mut node = n + sink;
        let mut amount = demand[sink];
        while pred[node] != usize::MAX {
            let prev = pred[node];
            if prev >= n {
                // backward arc col(prev) -> row(node) cancels flow on (node, prev - n)
                amount = amount.min(plan[[node, prev - n]]);
            }
            path.push((prev, node));
            node = prev;
        }
        amount = amount.min(supply[node]);
        supply[node] -= amount;
        demand[sink] -= amount;
        for (from, to) in path {
            if from < n {
                plan[[from, to - n]] += amount;
            } else {
                plan[[to, from - n]] -= amount;
            }
        }
    }
    plan.mapv_inplace(|t| t.max(0.0));

    let (row_potential, col_potential) = potentials(c, &plan);
    let value = (&plan * c).sum();
    let plan = TransportPlan::new(plan, u.probs().clone(), v.probs().clone())?;
    Ok(ExactOt {
        value,
        plan,
        row_potential,
        col_potential,
    })
}

// Bellman-Ford over the residual bipartite network.
fn relax(c: &Array2<f64>, plan: &Array2<f64>, dist: &mut [f64], pred: &mut [usize]) {
    let n = c.nrows();
    for _ in 0..2 * n {
        let mut changed = false;
        for i in 0..n {
            if dist[i].is_finite() {
                for j in 0..n {
                    let d = dist[i] + c[[i, j]];
                    if d < dist[n + j] - 1e-15 {
                        dist[n + j] = d;
                        pred[n + j] = i;
                        changed = true;
                    }
                }
            }
        }
        for j in 0..n {
            if dist[n + j].is_finite() {
                for i in 0..n {
                    if plan[[i, j]] > AMOUNT_TOL {
                        let d = dist[n + j] - c[[i, j]];
                        if d < dist[i] - 1e-15 {
                            dist[i] = d;
                            pred[i] = n + j;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
}

// Shortest distances from a virtual root over the residual network of an
// optimal plan give feasible potentials satisfying complementary slackness.
fn potentials(c: &Array2<f64>, plan: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = c.nrows();
    let mut dist = vec![0.0f64; 2 * n];
    let mut pred = vec![usize::MAX; 2 * n];
    relax(c, plan, &mut dist, &mut pred);
    let f = Array1::from_iter((0..n).map(|i| -dist[i]));
    let g = Array1::from_iter((0..n).map(|j| dist[n + j]));
    (f, g)
}
