//! Linear word embeddings and the transport-driven Laplacian objective.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ot::{CostMatrix, TransportPlan};

/// Distillation exponents below this oversmooth the cost.
pub const TAU_WARN_BELOW: f64 = 0.25;

/// One-hot linear embedding: column `n` of `theta` is the embedding of word `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    theta: Array2<f64>,
    theta_current: Array2<f64>,
}

impl EmbeddingModel {
    pub fn new(theta: Array2<f64>) -> Result<Self> {
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(Error::param("embedding has non-finite entries"));
        }
        Ok(EmbeddingModel {
            theta_current: theta.clone(),
            theta,
        })
    }

    /// Embedding `theta` with proximal anchor `anchor`.
    pub fn with_anchor(theta: Array2<f64>, anchor: Array2<f64>) -> Result<Self> {
        if theta.dim() != anchor.dim() {
            return Err(Error::shape(format!("{:?}", theta.dim()), format!("{:?}", anchor.dim())));
        }
        let mut model = EmbeddingModel::new(theta)?;
        if !anchor.iter().all(|x| x.is_finite()) {
            return Err(Error::param("anchor has non-finite entries"));
        }
        model.theta_current = anchor;
        Ok(model)
    }

    /// `dim x n` entries drawn from `N(0, 1 / dim)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let theta = Array2::from_shape_simple_fn((dim, n), || scale * rng.sample::<f64, _>(StandardNormal));
        EmbeddingModel {
            theta_current: theta.clone(),
            theta,
        }
    }

    /// Reads `<token> <v1> ... <vD>` lines; the tokens must be exactly `vocab`.
    pub fn from_text(path: &Path, vocab: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut columns: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: lineno + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default();
            let values = parts
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if *dim.get_or_insert(values.len()) != values.len() || values.is_empty() {
                return Err(parse_err(format!("token {token:?} has {} components", values.len())));
            }
            let slot = index
                .get(token)
                .ok_or_else(|| parse_err(format!("token {token:?} is not in the vocabulary")))?;
            if columns[*slot].replace(values).is_some() {
                return Err(parse_err(format!("token {token:?} appears twice")));
            }
        }
        if let Some(missing) = columns.iter().position(Option::is_none) {
            return Err(Error::param(format!("no embedding for token {:?}", vocab[missing])));
        }
        let dim = dim.unwrap_or(0);
        let theta = Array2::from_shape_fn((dim, vocab.len()), |(d, n)| columns[n].as_ref().unwrap()[d]);
        EmbeddingModel::new(theta)
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn theta_current(&self) -> &Array2<f64> {
        &self.theta_current
    }

    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.theta.ncols()
    }

    pub fn embedding(&self, n: usize) -> ArrayView1<'_, f64> {
        self.theta.column(n)
    }

    /// Records the current parameters as the proximal anchor.
    pub fn snapshot(&mut self) {
        self.theta_current.assign(&self.theta);
    }
}

/// Squared Euclidean distances between all embedding pairs.
pub fn cost_matrix(model: &EmbeddingModel) -> CostMatrix {
    let theta = model.theta();
    let n = theta.ncols();
    let mut entries = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let d: f64 = theta
                .column(i)
                .iter()
                .zip(theta.column(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            entries[[i, j]] = d;
            entries[[j, i]] = d;
        }
    }
    CostMatrix::from_parts(entries, None)
}

/// Entrywise power `cost^tau`, `0 < tau <= 1`.
pub fn distill(cost: &CostMatrix, tau: f64) -> Result<CostMatrix> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::param(format!("distillation exponent must lie in (0, 1], got {tau}")));
    }
    if tau < TAU_WARN_BELOW {
        warn!("distillation exponent {tau} is below {TAU_WARN_BELOW}; the cost will be oversmoothed");
    }
    let entries = if tau == 1.0 {
        cost.entries().clone()
    } else {
        cost.entries().mapv(|c| c.powf(tau))
    };
    let applied = cost.tau_applied().unwrap_or(1.0) * tau;
    Ok(CostMatrix::from_parts(entries, Some(applied)))
}

/// Sum of document-to-topic couplings over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedTransport {
    entries: Array2<f64>,
    documents: usize,
}

impl AggregatedTransport {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn documents(&self) -> usize {
        self.documents
    }
}

pub fn aggregate_transports<'a>(
    n: usize,
    plans: impl IntoIterator<Item = &'a TransportPlan>,
) -> Result<AggregatedTransport> {
    let mut entries = Array2::<f64>::zeros((n, n));
    let mut documents = 0;
    for plan in plans {
        if plan.entries().dim() != (n, n) {
            return Err(Error::shape(format!("{n}x{n} plan"), format!("{:?}", plan.entries().dim())));
        }
        entries += plan.entries();
        documents += 1;
    }
    Ok(AggregatedTransport { entries, documents })
}

/// `diag(S 1) - S` for a symmetric nonnegative similarity `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMatrix(Array2<f64>);

impl LaplacianMatrix {
    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn zeros(n: usize) -> Self {
        LaplacianMatrix(Array2::zeros((n, n)))
    }

    pub fn scaled(&self, s: f64) -> Self {
        LaplacianMatrix(&self.0 * s)
    }
}

pub fn laplacian(transport: &AggregatedTransport) -> LaplacianMatrix {
    laplacian_of(transport.entries())
}

pub(crate) fn laplacian_of(t: &Array2<f64>) -> LaplacianMatrix {
    let s = (t + &t.t()) * 0.5;
    let degree = s.sum_axis(Axis(1));
    let mut l = -s;
    for (i, d) in degree.iter().enumerate() {
        l[[i, i]] += d;
    }
    LaplacianMatrix(l)
}

/// `Tr(X L Xᵀ)`.
pub fn laplacian_term(model: &EmbeddingModel, lap: &LaplacianMatrix) -> f64 {
    let x = model.theta();
    (x.dot(lap.entries()) * x).sum()
}

/// `Tr(X L Xᵀ) + beta ||theta - theta_c||²`.
pub fn embedding_objective(model: &EmbeddingModel, lap: &LaplacianMatrix, beta: f64) -> f64 {
    let drift = model.theta() - model.theta_current();
    laplacian_term(model, lap) + beta * drift.iter().map(|d| d * d).sum::<f64>()
}

/// Gradient of the Laplacian term alone: `2 theta L`.
pub fn laplacian_gradient(model: &EmbeddingModel, lap: &LaplacianMatrix) -> Array2<f64> {
    model.theta().dot(lap.entries()) * 2.0
}

/// `2 theta L + 2 beta (theta - theta_c)`.
pub fn embedding_gradient(model: &EmbeddingModel, lap: &LaplacianMatrix, beta: f64) -> Array2<f64> {
    let mut grad = laplacian_gradient(model, lap);
    grad.scaled_add(2.0 * beta, &(model.theta() - model.theta_current()));
    grad
}

/// One descent step of rate `rho` on the embedding objective.
pub fn embedding_gradient_step(model: &mut EmbeddingModel, lap: &LaplacianMatrix, beta: f64, rho: f64) -> Result<()> {
    let n = model.vocab_size();
    if lap.entries().dim() != (n, n) {
        return Err(Error::shape(format!("{n}x{n} laplacian"), format!("{:?}", lap.entries().dim())));
    }
    let grad = embedding_gradient(model, lap, beta);
    model.theta.scaled_add(-rho, &grad);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    #[test]
    fn cost_cases() {
        let zero = EmbeddingModel::new(Array2::zeros((3, 4))).unwrap();
        assert!(cost_matrix(&zero).entries().iter().all(|&c| c == 0.0));

        let line = EmbeddingModel::new(array![[0.0, 3.0]]).unwrap();
        assert_eq!(cost_matrix(&line).entries(), &array![[0.0, 9.0], [9.0, 0.0]]);

        let theta = array![[0.0, 1.0, 4.0], [2.0, -1.0, 0.5]];
        let permuted = array![[4.0, 0.0, 1.0], [0.5, 2.0, -1.0]];
        let a = cost_matrix(&EmbeddingModel::new(theta).unwrap());
        let b = cost_matrix(&EmbeddingModel::new(permuted).unwrap());
        let perm = [2, 0, 1];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(b.entries()[[i, j]], a.entries()[[perm[i], perm[j]]]);
            }
        }
    }

    #[test]
    fn distill_cases() {
        let cost = CostMatrix::new(array![[0.0, 4.0], [4.0, 0.0]]).unwrap();
        assert_eq!(distill(&cost, 1.0).unwrap().entries(), cost.entries());
        let half = distill(&cost, 0.5).unwrap();
        assert_eq!(half.entries(), &array![[0.0, 2.0], [2.0, 0.0]]);
        assert_eq!(half.tau_applied(), Some(0.5));
        assert!(distill(&cost, 0.0).is_err());
        assert!(distill(&cost, 1.5).is_err());
        // below the oversmoothing threshold is still accepted
        assert!(distill(&cost, 0.1).is_ok());
    }

    fn plan(entries: Array2<f64>) -> TransportPlan {
        let rows = entries.sum_axis(Axis(1));
        let cols = entries.sum_axis(Axis(0));
        TransportPlan::new(entries, rows, cols).unwrap()
    }

    #[test]
    fn aggregate_cases() {
        let p = plan(array![[0.5, 0.1], [0.0, 0.4]]);
        assert_eq!(aggregate_transports(2, [&p]).unwrap().entries(), p.entries());
        let twice = aggregate_transports(2, [&p, &p]).unwrap();
        assert_eq!(twice.entries(), &(p.entries() * 2.0));
        assert_eq!(twice.documents(), 2);
        let empty = aggregate_transports(2, []).unwrap();
        assert_eq!(empty.entries(), &Array2::<f64>::zeros((2, 2)));
        let wrong = plan(Array2::from_elem((3, 3), 1.0 / 9.0));
        assert!(aggregate_transports(2, [&wrong]).is_err());
    }

    #[test]
    fn laplacian_cases() {
        let t = AggregatedTransport {
            entries: array![[0.0, 1.0], [0.0, 0.0]],
            documents: 1,
        };
        assert_eq!(laplacian(&t).entries(), &array![[0.5, -0.5], [-0.5, 0.5]]);

        let diag = AggregatedTransport {
            entries: Array2::from_diag(&array![0.3, 0.2, 0.5]),
            documents: 1,
        };
        assert_eq!(laplacian(&diag).entries(), &Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn objective_cases() {
        let t = AggregatedTransport {
            entries: array![[0.0, 1.0], [0.0, 0.0]],
            documents: 1,
        };
        let lap = laplacian(&t);
        let model = EmbeddingModel::new(array![[0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(embedding_objective(&model, &lap, 0.3), 0.5, epsilon = 1e-15);
        assert_eq!(embedding_objective(&model, &LaplacianMatrix::zeros(2), 0.3), 0.0);

        let coincident = EmbeddingModel::new(array![[2.0, 2.0], [-1.0, -1.0]]).unwrap();
        assert_eq!(laplacian_term(&coincident, &lap), 0.0);
        assert!(laplacian_gradient(&coincident, &lap).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn step_cases() {
        let mut model = EmbeddingModel::new(array![[0.2, -1.0, 0.4]]).unwrap();
        let before = model.theta().clone();
        embedding_gradient_step(&mut model, &LaplacianMatrix::zeros(3), 0.01, 0.05).unwrap();
        assert_eq!(model.theta(), &before);

        // pure proximal pull: step is exactly -2 rho beta (theta - theta_c)
        let mut model = EmbeddingModel::new(array![[0.0, 0.0, 0.0]]).unwrap();
        model.theta = array![[1.0, -2.0, 0.5]];
        let (beta, rho) = (10.0, 0.01);
        let drift = model.theta() - model.theta_current();
        let expected = model.theta() - &(&drift * (2.0 * rho * beta));
        embedding_gradient_step(&mut model, &LaplacianMatrix::zeros(3), beta, rho).unwrap();
        assert_abs_diff_eq!(model.theta(), &expected, epsilon = 1e-15);

        assert!(embedding_gradient_step(&mut model, &LaplacianMatrix::zeros(2), beta, rho).is_err());
    }

    #[test]
    fn pretrained_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "b 1.0 2.0\na -1 0.5\n").unwrap();
        let vocab = vec!["a".to_string(), "b".to_string()];
        let model = EmbeddingModel::from_text(&path, &vocab).unwrap();
        assert_eq!(model.theta(), &array![[-1.0, 1.0], [0.5, 2.0]]);
        assert_eq!(model.embedding(1), Array1::from(vec![1.0, 2.0]));

        std::fs::write(&path, "a 1 2\n").unwrap();
        assert!(EmbeddingModel::from_text(&path, &vocab).is_err());
        std::fs::write(&path, "a 1 2\nb 1\n").unwrap();
        assert!(EmbeddingModel::from_text(&path, &vocab).is_err());
        std::fs::write(&path, "a 1 2\nb 1 2\nc 0 0\n").unwrap();
        assert!(EmbeddingModel::from_text(&path, &vocab).is_err());
    }
}
