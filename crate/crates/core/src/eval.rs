//! Document classification, procedure recommendation, topic reports and
//! embedding-graph export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, TokenKind, Vocabulary};
use crate::embedding::{cost_matrix, distill, EmbeddingModel};
use crate::error::{Error, Result};
use crate::ot::{gibbs_kernel, sinkhorn_distance, CostMatrix, Distribution, GibbsKernel, SinkhornOptions};
use crate::topic::{infer_weights, FoldIn, TopicLogits, TopicModelState};
use crate::trainer::TrainConfig;

/// `x` with 6 significant digits, trailing zeros dropped.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can carry into the next decade
    let rounded: f64 = format!("{:.5e}", x).parse().unwrap();
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..6).contains(&exp) {
        trim(format!("{:.*}", (5 - exp) as usize, rounded))
    } else {
        let s = format!("{:.5e}", rounded);
        let (mant, e) = s.split_once('e').unwrap();
        format!("{}e{}", trim(mant.to_string()), e)
    }
}

/// Rounds to 6 significant digits.
pub fn round_sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    AvePool,
    TopicWeight,
    WordDistribution,
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ave_pool" => Ok(FeatureMode::AvePool),
            "topic_weight" => Ok(FeatureMode::TopicWeight),
            "word_distribution" => Ok(FeatureMode::WordDistribution),
            other => Err(Error::param(format!(
                "unknown feature {other:?} (expected ave_pool, topic_weight or word_distribution)"
            ))),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::AvePool => "ave_pool",
            FeatureMode::TopicWeight => "topic_weight",
            FeatureMode::WordDistribution => "word_distribution",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocFeature {
    pub mode: FeatureMode,
    pub vector: Array1<f64>,
}

/// Trained parameters in the form evaluation needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub embedding: EmbeddingModel,
    pub topics: TopicModelState,
    train_columns: HashMap<String, usize>,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fold_in: FoldIn,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let logits = TopicLogits {
            basis: ckpt.topic_logits,
            weights: ckpt.weight_logits,
        };
        Ok(TrainedModel {
            topics: logits.state()?,
            embedding: EmbeddingModel::new(ckpt.theta)?,
            train_columns: ckpt.train_ids.iter().enumerate().map(|(j, id)| (id.clone(), j)).collect(),
            train_ids: ckpt.train_ids,
            validation_ids: ckpt.validation_ids,
            test_ids: ckpt.test_ids,
            vocab: ckpt.vocab,
            config: ckpt.config,
            fold_in: FoldIn::default(),
        })
    }

    /// Kernel of the distilled embedding cost the topics were fitted under.
    pub fn kernel(&self) -> Result<GibbsKernel> {
        gibbs_kernel(&distill(&cost_matrix(&self.embedding), self.config.tau)?, self.config.epsilon)
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.vocab().tokens() != self.vocab.tokens() {
            return Err(Error::param(format!(
                "corpus vocabulary ({} tokens) differs from the model vocabulary ({} tokens)",
                corpus.vocab().len(),
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Corpus positions of the listed ids, skipping ids the corpus lacks.
    pub fn positions(&self, corpus: &Corpus, ids: &[String]) -> Vec<usize> {
        let index: HashMap<&str, usize> = corpus.ids().iter().enumerate().map(|(m, id)| (id.as_str(), m)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }
}

/// Estimated topic weights of a document: folded in against the trained
/// topics, so training and held-out documents are represented alike.
pub fn topic_weights(y: ArrayView1<'_, f64>, model: &TrainedModel, kernel: &GibbsKernel) -> Result<Array1<f64>> {
    infer_weights(y, model.topics.basis().view(), kernel, model.config.inner_iters, model.fold_in)
}

/// Learned weights of a training document, if it was one.
pub fn learned_weights(model: &TrainedModel, id: &str) -> Option<Array1<f64>> {
    model.train_columns.get(id).map(|&j| model.topics.doc_weights(j).to_owned())
}

/// Features of the documents at corpus positions `docs`.
pub fn doc_features(corpus: &Corpus, docs: &[usize], model: &TrainedModel, mode: FeatureMode) -> Result<Vec<DocFeature>> {
    let kernel = match mode {
        FeatureMode::TopicWeight => Some(model.kernel()?),
        _ => None,
    };
    docs.par_iter()
        .map(|&m| {
            let y = corpus.doc(m);
            let vector = match mode {
                FeatureMode::AvePool => model.embedding.theta().dot(&y),
                FeatureMode::TopicWeight => topic_weights(y, model, kernel.as_ref().unwrap())?,
                FeatureMode::WordDistribution => y.to_owned(),
            };
            Ok(DocFeature { mode, vector })
        })
        .collect()
}

/// Transport cost (entropy excluded) of the entropic plan between two
/// word distributions.
/// Iteration budget for document distances; small epsilon needs far more than the solver default.
pub const DOC_DISTANCE_MAX_ITERS: usize = 10_000;

pub fn wasserstein_doc_distance(y_a: &Distribution, y_b: &Distribution, cost: &CostMatrix, epsilon: f64) -> Result<f64> {
    Ok(sinkhorn_distance(y_a, y_b, cost, &SinkhornOptions::new(epsilon).max_iters(DOC_DISTANCE_MAX_ITERS))?.transport_cost)
}

#[derive(Debug, Clone)]
pub enum Metric {
    Euclidean,
    Wasserstein { cost: CostMatrix, epsilon: f64 },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Wasserstein { .. } => "wasserstein",
        }
    }

    pub fn distance(&self, a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
        match self {
            Metric::Euclidean => Ok(euclidean(a.view(), b.view())),
            Metric::Wasserstein { cost, epsilon } => wasserstein_doc_distance(
                &Distribution::new(a.clone())?,
                &Distribution::new(b.clone())?,
                cost,
                *epsilon,
            ),
        }
    }
}

pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<u32>,
    pub accuracy: f64,
}

/// Majority vote among the `k` nearest training points. Distance ties go to
/// the lower training index, vote ties to the smaller class id.
pub fn knn_classify(
    train: &[Array1<f64>],
    train_labels: &[u32],
    test: &[Array1<f64>],
    test_labels: &[u32],
    metric: &Metric,
    k: usize,
) -> Result<KnnResult> {
    if train.is_empty() {
        return Err(Error::param("k-NN needs a nonempty training set"));
    }
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::shape("one label per feature", "mismatched label count"));
    }
    if k == 0 {
        return Err(Error::param("k must be positive"));
    }
    let predictions = test
        .par_iter()
        .map(|x| {
            let mut dists = train
                .iter()
                .enumerate()
                .map(|(i, t)| Ok((metric.distance(x, t)?, i)))
                .collect::<Result<Vec<(f64, usize)>>>()?;
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
            for &(_, i) in dists.iter().take(k) {
                *votes.entry(train_labels[i]).or_default() += 1;
            }
            let best = votes.values().copied().max().unwrap();
            Ok(*votes.iter().find(|(_, &v)| v == best).unwrap().0)
        })
        .collect::<Result<Vec<u32>>>()?;
    let correct = predictions.iter().zip(test_labels).filter(|(p, t)| p == t).count();
    let accuracy = if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 };
    Ok(KnnResult { predictions, accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            other => Err(Error::param(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// The `top` procedures closest to the admission's diseases, ties by
/// vocabulary order.
pub fn recommend_procedures(
    diseases: &[usize],
    model: &EmbeddingModel,
    vocab: &Vocabulary,
    top: usize,
    aggregation: Aggregation,
) -> Result<Vec<usize>> {
    let procedures = vocab.indices_of_kind(TokenKind::Procedure);
    if procedures.is_empty() {
        return Err(Error::param("vocabulary has no procedure tokens"));
    }
    if diseases.is_empty() {
        return Err(Error::param("admission has no disease tokens"));
    }
    if top == 0 || top > procedures.len() {
        return Err(Error::param(format!(
            "list length {top} must lie in 1..={}",
            procedures.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = procedures
        .iter()
        .map(|&p| {
            let d = diseases.iter().map(|&d| euclidean(model.embedding(p), model.embedding(d)));
            let score = match aggregation {
                Aggregation::Mean => d.sum::<f64>() / diseases.len() as f64,
                Aggregation::Min => d.fold(f64::INFINITY, f64::min),
            };
            (score, p)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(top).map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationResult {
    pub recommended: Vec<usize>,
    pub truth: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RecommendationResult {
    pub fn new(recommended: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if truth.is_empty() || recommended.is_empty() {
            return Err(Error::param("recommendation and ground truth must be nonempty"));
        }
        let t: HashSet<usize> = truth.iter().copied().collect();
        let hits = recommended.iter().filter(|e| t.contains(e)).count() as f64;
        let precision = hits / recommended.len() as f64;
        let recall = hits / t.len() as f64;
        let f1 = if hits == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(RecommendationResult {
            recommended,
            truth,
            precision,
            recall,
            f1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Means of the per-admission precision, recall and F1.
pub fn topn_prf(results: &[RecommendationResult]) -> Result<Prf> {
    if results.is_empty() {
        return Err(Error::param("no admissions to score"));
    }
    let m = results.len() as f64;
    Ok(Prf {
        precision: results.iter().map(|r| r.precision).sum::<f64>() / m,
        recall: results.iter().map(|r| r.recall).sum::<f64>() / m,
        f1: results.iter().map(|r| r.f1).sum::<f64>() / m,
    })
}

/// Per topic, the `top_n` most probable tokens, ties by vocabulary order.
pub fn topic_report(basis: &Array2<f64>, vocab: &Vocabulary, top_n: usize) -> Vec<Vec<(String, f64)>> {
    basis
        .columns()
        .into_iter()
        .map(|col| {
            let mut idx: Vec<usize> = (0..col.len()).collect();
            idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            idx.into_iter()
                .take(top_n)
                .map(|i| (vocab.token(i).to_string(), col[i]))
                .collect()
        })
        .collect()
}

pub fn topic_report_csv(report: &[Vec<(String, f64)>]) -> String {
    let mut out = String::from("topic,rank,token,probability\n");
    for (k, row) in report.iter().enumerate() {
        for (r, (token, p)) in row.iter().enumerate() {
            out.push_str(&format!("{k},{},{token},{}\n", r + 1, fmt_sig(*p)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: String,
    pub dst: String,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Directed edges from every token to its `k` nearest other tokens.
pub fn knn_graph(model: &EmbeddingModel, vocab: &Vocabulary, k: usize) -> Result<Graph> {
    let n = vocab.len();
    if model.vocab_size() != n {
        return Err(Error::shape(format!("{n} embeddings"), model.vocab_size()));
    }
    if k == 0 || k >= n {
        return Err(Error::param(format!("graph degree must lie in 1..{n}, got {k}")));
    }
    let nodes = (0..n)
        .map(|i| GraphNode {
            id: vocab.token(i).to_string(),
            kind: vocab.kind(i),
        })
        .collect();
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclidean(model.embedding(i), model.embedding(j)), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(d.into_iter().take(k).map(|(dist, j)| GraphEdge {
            src: vocab.token(i).to_string(),
            dst: vocab.token(j).to_string(),
            dist: round_sig(dist),
        }));
    }
    Ok(Graph { nodes, edges })
}
