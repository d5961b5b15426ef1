//! Wasserstein dictionary learning over softmax-parametrized topics.
//!
//! Topics `B` (`N x K`) and document weights `Λ` (`K x M`) are column-wise
//! softmax images of unconstrained logits `R` and `A`. A document is
//! reconstructed as the entropic barycenter of the topics under its weights,
//! and the gradients of the squared reconstruction loss are obtained by
//! differentiating the barycenter recursion backwards through its history.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ot::{
    barycenter_forward, gibbs_kernel, BarycenterTrace, CostMatrix, Distribution, GibbsKernel, TransportPlan, FLOOR,
};

/// Unconstrained parameters: `basis` is `R` (`N x K`), `weights` is `A` (`K x M`).
#[derive(Debug, Clone, PartialEq)]
pub struct TopicLogits {
    pub basis: Array2<f64>,
    pub weights: Array2<f64>,
}

impl TopicLogits {
    /// Entries drawn i.i.d. from `N(0, 1)`.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, m: usize, rng: &mut R) -> Self {
        let basis = Array2::from_shape_simple_fn((n, k), || rng.sample(StandardNormal));
        let weights = Array2::from_shape_simple_fn((k, m), || rng.sample(StandardNormal));
        TopicLogits { basis, weights }
    }

    pub fn topics(&self) -> usize {
        self.basis.ncols()
    }

    pub fn state(&self) -> Result<TopicModelState> {
        TopicModelState::from_logits(self)
    }

    pub fn is_finite(&self) -> bool {
        self.basis.iter().chain(self.weights.iter()).all(|x| x.is_finite())
    }
}

/// Column-stochastic topics `B` and weights `Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModelState {
    basis: Array2<f64>,
    weights: Array2<f64>,
}

impl TopicModelState {
    pub fn from_logits(logits: &TopicLogits) -> Result<Self> {
        if logits.basis.ncols() != logits.weights.nrows() {
            return Err(Error::shape(
                format!("{} weight rows", logits.basis.ncols()),
                logits.weights.nrows(),
            ));
        }
        if !logits.is_finite() {
            return Err(Error::Numerical {
                iteration: 0,
                what: "non-finite topic logits".into(),
            });
        }
        Ok(TopicModelState {
            basis: softmax_columns(logits.basis.view()),
            weights: softmax_columns(logits.weights.view()),
        })
    }

    /// Builds a state from explicit stochastic matrices (columns must sum to 1).
    pub fn new(basis: Array2<f64>, weights: Array2<f64>) -> Result<Self> {
        if basis.ncols() != weights.nrows() {
            return Err(Error::shape(format!("{} weight rows", basis.ncols()), weights.nrows()));
        }
        for col in basis.axis_iter(Axis(1)).chain(weights.axis_iter(Axis(1))) {
            Distribution::new(col.to_owned())?;
        }
        Ok(TopicModelState { basis, weights })
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn topic(&self, k: usize) -> ArrayView1<'_, f64> {
        self.basis.column(k)
    }

    pub fn doc_weights(&self, m: usize) -> ArrayView1<'_, f64> {
        self.weights.column(m)
    }

    pub fn vocab_size(&self) -> usize {
        self.basis.nrows()
    }

    pub fn topics(&self) -> usize {
        self.basis.ncols()
    }

    pub fn documents(&self) -> usize {
        self.weights.ncols()
    }
}

/// Softmax of every column, with max-subtraction.
pub fn softmax_columns(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        softmax_inplace(col.view_mut());
    }
    out
}

pub(crate) fn softmax_inplace(mut col: ndarray::ArrayViewMut1<'_, f64>) {
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    col.mapv_inplace(|x| (x - max).exp());
    let total = col.sum();
    col /= total;
}

/// Pulls a gradient on a softmax output back to its logits:
/// `(diag(p) - p pᵀ) grad`.
pub fn softmax_backward(probs: ArrayView1<'_, f64>, grad: ArrayView1<'_, f64>) -> Array1<f64> {
    let inner = probs.dot(&grad);
    Zip::from(&probs).and(&grad).map_collect(|&p, &g| p * (g - inner))
}

/// `Σ_n (y_n - yhat_n)²`.
pub fn reconstruction_loss(y: ArrayView1<'_, f64>, yhat: ArrayView1<'_, f64>) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::shape(y.len(), yhat.len()));
    }
    Ok(y.iter().zip(yhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Barycentric reconstruction of document `m` under an already distilled cost.
pub fn reconstruct_document(
    state: &TopicModelState,
    m: usize,
    distilled_cost: &CostMatrix,
    epsilon: f64,
    inner_iters: usize,
) -> Result<Array1<f64>> {
    check_doc(state, m)?;
    let kernel = gibbs_kernel(distilled_cost, epsilon)?;
    Ok(barycenter_forward(state.basis().view(), state.doc_weights(m), &kernel, inner_iters)?.yhat)
}

fn check_doc(state: &TopicModelState, m: usize) -> Result<()> {
    if m >= state.documents() {
        return Err(Error::shape(format!("document index < {}", state.documents()), m));
    }
    Ok(())
}

/// Index of the largest weight, lowest index on ties.
pub fn argmax_topic(weights: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = k;
        }
    }
    best
}

/// Output of [`sinkhorn_grad`] for one document.
#[derive(Debug, Clone)]
pub struct SinkhornGrad {
    /// Gradient of the loss with respect to `B` (`N x K`).
    pub grad_basis: Array2<f64>,
    /// Gradient of the loss with respect to the document's weights.
    pub grad_weights: Array1<f64>,
    /// Entropic coupling between the closest topic and the reconstruction.
    pub plan_to_closest: TransportPlan,
    pub closest: usize,
    pub yhat: Array1<f64>,
    pub loss: f64,
}

/// Buffers of the backward passes. Reusable across documents of equal shape.
#[derive(Debug, Clone)]
pub struct SinkhornGradWorkspace {
    /// Weight gradient accumulator.
    pub w: Array1<f64>,
    /// Gradients flowing into `ln beta_k` (weights pass).
    pub r: Array2<f64>,
    /// Gradient with respect to `ln yhat` (weights pass).
    pub g: Array1<f64>,
    /// Basis gradient accumulator.
    pub m: Array2<f64>,
    /// Gradients flowing into `beta_k`, divided by `phi_k` (basis pass).
    pub z: Array2<f64>,
    /// `C` applied to the gradient on `phi_k` (basis pass).
    pub psi: Array2<f64>,
    pub trace: Option<BarycenterTrace>,
}

impl SinkhornGradWorkspace {
    pub fn new(n: usize, k: usize) -> Self {
        SinkhornGradWorkspace {
            w: Array1::zeros(k),
            r: Array2::zeros((n, k)),
            g: Array1::zeros(n),
            m: Array2::zeros((n, k)),
            z: Array2::zeros((n, k)),
            psi: Array2::zeros((n, k)),
            trace: None,
        }
    }

    fn reset(&mut self, n: usize, k: usize) {
        if self.m.dim() != (n, k) {
            *self = SinkhornGradWorkspace::new(n, k);
        } else {
            self.w.fill(0.0);
            self.r.fill(0.0);
            self.m.fill(0.0);
            self.z.fill(0.0);
            self.psi.fill(0.0);
        }
    }

    /// Runs the forward recursion and both backward passes for one document.
    ///
    /// `closest` selects the topic whose coupling to the reconstruction is
    /// returned; `None` picks the argmax weight.
    pub fn compute(
        &mut self,
        y: ArrayView1<'_, f64>,
        basis: ArrayView2<'_, f64>,
        weights: ArrayView1<'_, f64>,
        kernel: &GibbsKernel,
        inner_iters: usize,
        closest: Option<usize>,
    ) -> Result<SinkhornGrad> {
        let (n, k) = basis.dim();
        if y.len() != n {
            return Err(Error::shape(format!("document over {n} words"), y.len()));
        }
        let closest = closest.unwrap_or_else(|| argmax_topic(weights));
        if closest >= k {
            return Err(Error::shape(format!("topic index < {k}"), closest));
        }
        self.reset(n, k);
        let trace = barycenter_forward(basis, weights, kernel, inner_iters)?;
        let c = kernel.entries();
        let lambda = &trace.weights;
        let b = &trace.basis;
        let yhat = &trace.yhat;
        let big_l = trace.iterations();

        let grad_y: Array1<f64> = Zip::from(yhat).and(&y).map_collect(|&p, &q| 2.0 * (p - q));
        let loss = reconstruction_loss(y, yhat.view())?;

        // weights: walk the recursion backwards in log space
        self.g = &grad_y * yhat;
        for l in (1..=big_l).rev() {
            let phi = &trace.phi[l];
            let beta_prev = &trace.beta[l - 1];
            let cb = &trace.kernel_beta[l - 1];
            for kk in 0..k {
                self.w[kk] += phi.column(kk).iter().zip(self.g.iter()).map(|(p, g)| p.ln() * g).sum::<f64>();
            }
            let mut inner = Array2::<f64>::zeros((n, k));
            for kk in 0..k {
                let mut col = inner.column_mut(kk);
                Zip::from(&mut col)
                    .and(&self.g)
                    .and(self.r.column(kk))
                    .and(phi.column(kk))
                    .for_each(|o, &g, &r, &p| *o = (lambda[kk] * g - r) / p);
            }
            let mut scaled = c.dot(&inner);
            Zip::from(&mut scaled).and(b).and(cb).for_each(|s, &bb, &q| *s *= bb / (q * q));
            let mut r_new = c.t().dot(&scaled);
            Zip::from(&mut r_new).and(beta_prev).for_each(|r, &bp| *r = -*r * bp);
            self.g = r_new.sum_axis(Axis(1));
            self.r = r_new;
        }

        // basis: same walk in the original parametrization
        let mut grad_yl = grad_y.clone();
        for l in (1..=big_l).rev() {
            let beta_l = &trace.beta[l];
            let cb = &trace.kernel_beta[l - 1];
            let mut upstream = Array2::<f64>::zeros((n, k));
            for kk in 0..k {
                let mut col = upstream.column_mut(kk);
                Zip::from(&mut col)
                    .and(&grad_yl)
                    .and(self.z.column(kk))
                    .and(beta_l.column(kk))
                    .for_each(|o, &gy, &z, &bl| *o = (lambda[kk] * gy - z) * bl);
            }
            self.psi = c.dot(&upstream);
            Zip::from(&mut self.m).and(&self.psi).and(cb).for_each(|m, &p, &q| *m += p / q);
            if l >= 2 {
                let phi_prev = &trace.phi[l - 1];
                let mut scaled = self.psi.clone();
                Zip::from(&mut scaled).and(b).and(cb).for_each(|s, &bb, &q| *s *= bb / (q * q));
                let mut z_new = c.t().dot(&scaled);
                Zip::from(&mut z_new).and(phi_prev).for_each(|z, &p| *z = -*z / p);
                grad_yl = z_new.sum_axis(Axis(1));
                self.z = z_new;
            }
        }

        // the recursion ran on the floor-smoothed basis
        let grad_basis = &self.m * (1.0 - FLOOR);
        let plan_to_closest = recover_plan(&trace, c, closest)?;
        let out = SinkhornGrad {
            grad_basis,
            grad_weights: self.w.clone(),
            plan_to_closest,
            closest,
            yhat: yhat.clone(),
            loss,
        };
        if !out.grad_basis.iter().chain(out.grad_weights.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numerical {
                iteration: big_l,
                what: "non-finite sinkhorn gradient".into(),
            });
        }
        self.trace = Some(trace);
        Ok(out)
    }
}

// diag(b_k / C beta_k) C diag(beta_k) at the last forward step.
fn recover_plan(trace: &BarycenterTrace, c: &Array2<f64>, k: usize) -> Result<TransportPlan> {
    let big_l = trace.iterations();
    let beta = trace.beta[big_l - 1].column(k);
    let cb = trace.kernel_beta[big_l - 1].column(k);
    let b = trace.basis.column(k);
    let plan = Array2::from_shape_fn(c.dim(), |(i, j)| b[i] / cb[i] * c[[i, j]] * beta[j]);
    TransportPlan::new(plan, b.to_owned(), trace.yhat.clone())
}

/// Coupling between topic `k` and the barycentric reconstruction under
/// the given weights.
pub fn closest_plan(
    basis: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    kernel: &GibbsKernel,
    inner_iters: usize,
    k: usize,
) -> Result<TransportPlan> {
    if k >= basis.ncols() {
        return Err(Error::shape(format!("topic index < {}", basis.ncols()), k));
    }
    let trace = barycenter_forward(basis, weights, kernel, inner_iters)?;
    recover_plan(&trace, kernel.entries(), k)
}

/// Sinkhorn gradient of the squared reconstruction loss of document `m`.
pub fn sinkhorn_grad(
    y: &Distribution,
    state: &TopicModelState,
    m: usize,
    distilled_cost: &CostMatrix,
    epsilon: f64,
    inner_iters: usize,
) -> Result<SinkhornGrad> {
    check_doc(state, m)?;
    let kernel = gibbs_kernel(distilled_cost, epsilon)?;
    let mut ws = SinkhornGradWorkspace::new(state.vocab_size(), state.topics());
    ws.compute(y.view(), state.basis().view(), state.doc_weights(m), &kernel, inner_iters, None)
}

/// One descent step on the logits through the column softmax Jacobians.
///
/// `grad_weights` holds `(document index, gradient on λ_m)` pairs; columns of
/// `A` for documents not listed are left untouched.
pub fn apply_logit_updates(
    logits: &mut TopicLogits,
    state: &TopicModelState,
    grad_basis: ArrayView2<'_, f64>,
    grad_weights: &[(usize, Array1<f64>)],
    rho: f64,
) -> Result<()> {
    if grad_basis.dim() != logits.basis.dim() || state.basis().dim() != logits.basis.dim() {
        return Err(Error::shape(
            format!("{:?}", logits.basis.dim()),
            format!("{:?}", grad_basis.dim()),
        ));
    }
    for kk in 0..logits.basis.ncols() {
        let step = softmax_backward(state.topic(kk), grad_basis.column(kk));
        logits.basis.column_mut(kk).scaled_add(-rho, &step);
    }
    for (m, grad) in grad_weights {
        if *m >= logits.weights.ncols() || grad.len() != logits.weights.nrows() {
            return Err(Error::shape(
                format!("weight gradient of length {} for a document < {}", logits.weights.nrows(), logits.weights.ncols()),
                format!("length {} for document {m}", grad.len()),
            ));
        }
        let step = softmax_backward(state.doc_weights(*m), grad.view());
        logits.weights.column_mut(*m).scaled_add(-rho, &step);
    }
    Ok(())
}

/// Settings for estimating the weights of a document with fixed topics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldIn {
    pub steps: usize,
    pub rate: f64,
}

impl Default for FoldIn {
    fn default() -> Self {
        FoldIn { steps: 300, rate: 20.0 }
    }
}

/// Estimates `λ` for a document against fixed topics by gradient descent on
/// its weight logits, starting from uniform weights.
pub fn infer_weights(
    y: ArrayView1<'_, f64>,
    basis: ArrayView2<'_, f64>,
    kernel: &GibbsKernel,
    inner_iters: usize,
    fold_in: FoldIn,
) -> Result<Array1<f64>> {
    let (n, k) = basis.dim();
    let mut alpha = Array1::<f64>::zeros(k);
    let mut lambda = Array1::from_elem(k, 1.0 / k as f64);
    let mut ws = SinkhornGradWorkspace::new(n, k);
    for _ in 0..fold_in.steps {
        let grad = ws.compute(y, basis, lambda.view(), kernel, inner_iters, None)?;
        let step = softmax_backward(lambda.view(), grad.grad_weights.view());
        alpha.scaled_add(-fold_in.rate, &step);
        lambda.assign(&alpha);
        softmax_inplace(lambda.view_mut());
    }
    Ok(lambda)
}
