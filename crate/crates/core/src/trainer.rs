//! Alternating optimization of the topic model and the word embeddings.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::corpus::Corpus;
use crate::embedding::{
    aggregate_transports, cost_matrix, distill, embedding_gradient_step, laplacian, laplacian_gradient, EmbeddingModel,
};
use crate::error::{Error, Result};
use crate::ot::{gibbs_kernel, GibbsKernel, TransportPlan};
use crate::topic::{apply_logit_updates, argmax_topic, closest_plan, SinkhornGrad, SinkhornGradWorkspace, TopicLogits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub topics: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub tau: f64,
    pub inner_iters: usize,
    pub seed: u64,
    /// Label whose class ids fix each document's closest topic.
    pub supervised: Option<String>,
    pub init_embeddings: Option<PathBuf>,
    /// Worker threads for per-document gradients; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            beta: 0.01,
            epsilon: 0.01,
            topics: 8,
            embed_dim: 50,
            learning_rate: 0.05,
            epochs: 50,
            tau: 0.5,
            inner_iters: 50,
            seed: 0,
            supervised: None,
            init_embeddings: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::param(what.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be nonnegative");
        }
        if self.topics < 2 {
            return bad("topics must be at least 2");
        }
        if self.embed_dim < 1 {
            return bad("embed_dim must be at least 1");
        }
        if self.inner_iters < 1 {
            return bad("inner_iters must be at least 1");
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::param(format!("{key} = {value:?}: {e}")))
        }
        let optional = |v: &str| (!v.is_empty() && v != "none").then(|| v.to_string());
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "topics" => self.topics = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "inner_iters" => self.inner_iters = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "supervised" => self.supervised = optional(value),
            "init_embeddings" => self.init_embeddings = optional(value).map(PathBuf::from),
            "workers" => self.workers = num(key, value)?,
            other => return Err(Error::param(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        format!(
            "batch_size = {}\nbeta = {}\nepsilon = {}\ntopics = {}\nembed_dim = {}\nlearning_rate = {}\nepochs = {}\ntau = {}\ninner_iters = {}\nseed = {}\nsupervised = {}\ninit_embeddings = {}\nworkers = {}\n",
            self.batch_size,
            self.beta,
            self.epsilon,
            self.topics,
            self.embed_dim,
            self.learning_rate,
            self.epochs,
            self.tau,
            self.inner_iters,
            self.seed,
            opt(self.supervised.clone()),
            opt(self.init_embeddings.as_ref().map(|p| p.display().to_string())),
            self.workers,
        )
    }
}

/// The supervised topic when given, otherwise the argmax weight (lowest
/// index on ties).
pub fn closest_topic(lambda: ArrayView1<'_, f64>, supervised: Option<usize>) -> usize {
    supervised.unwrap_or_else(|| argmax_topic(lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Frobenius norm of the Laplacian-term gradient, averaged over batches.
    pub grad_norm: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Telemetry {
    pub epochs: Vec<EpochTelemetry>,
}

impl Telemetry {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,grad_norm,wall_time_secs\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                crate::eval::fmt_sig(e.mean_loss),
                crate::eval::fmt_sig(e.grad_norm),
                crate::eval::fmt_sig(e.wall_time_secs)
            ));
        }
        out
    }
}

/// State of one training run over the training documents of a corpus.
pub struct Trainer<'c> {
    corpus: &'c Corpus,
    config: TrainConfig,
    /// Corpus indices of the training documents; column `j` of the weight
    /// logits belongs to `docs[j]`.
    docs: Vec<usize>,
    supervised: Option<Vec<usize>>,
    embedding: EmbeddingModel,
    logits: TopicLogits,
    rng: ChaCha8Rng,
    epoch: usize,
    telemetry: Telemetry,
    pool: rayon::ThreadPool,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::param(format!("worker pool: {e}")))
}

fn training_docs(corpus: &Corpus) -> Vec<usize> {
    match corpus.splits() {
        Some(s) => s.train.clone(),
        None => (0..corpus.len()).collect(),
    }
}

impl<'c> Trainer<'c> {
    /// Draws `theta` (unless imported), then the topic logits, then the
    /// weight logits from the seeded generator.
    pub fn new(corpus: &'c Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let docs = training_docs(corpus);
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = corpus.vocab().len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = match &config.init_embeddings {
            Some(path) => {
                let model = EmbeddingModel::from_text(path, corpus.vocab().tokens())?;
                if model.dim() != config.embed_dim {
                    return Err(Error::shape(
                        format!("{}-dimensional embeddings", config.embed_dim),
                        model.dim(),
                    ));
                }
                model
            }
            None => EmbeddingModel::random(config.embed_dim, n, &mut rng),
        };
        let logits = TopicLogits::random(n, config.topics, docs.len(), &mut rng);
        let supervised = supervision(corpus, &config, &docs)?;
        Ok(Trainer {
            corpus,
            pool: pool(config.workers)?,
            config,
            docs,
            supervised,
            embedding,
            logits,
            rng,
            epoch: 0,
            telemetry: Telemetry::default(),
        })
    }

    /// Resumes from a checkpoint taken on the same corpus.
    pub fn from_checkpoint(corpus: &'c Corpus, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.check_corpus(corpus)?;
        let docs = ckpt
            .train_ids
            .iter()
            .map(|id| {
                corpus
                    .position(id)
                    .ok_or_else(|| Error::param(format!("training document {id:?} is not in the corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        let supervised = supervision(corpus, &ckpt.config, &docs)?;
        Ok(Trainer {
            corpus,
            pool: pool(ckpt.config.workers)?,
            docs,
            supervised,
            embedding: EmbeddingModel::new(ckpt.theta)?,
            logits: TopicLogits {
                basis: ckpt.topic_logits,
                weights: ckpt.weight_logits,
            },
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            telemetry: Telemetry::default(),
            config: ckpt.config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn embedding(&self) -> &EmbeddingModel {
        &self.embedding
    }

    pub fn logits(&self) -> &TopicLogits {
        &self.logits
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn training_docs(&self) -> &[usize] {
        &self.docs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let ids = |idx: &[usize]| idx.iter().map(|&m| self.corpus.ids()[m].clone()).collect::<Vec<_>>();
        let (validation_ids, test_ids) = match self.corpus.splits() {
            Some(s) => (ids(&s.validation), ids(&s.test)),
            None => (Vec::new(), Vec::new()),
        };
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            vocab: self.corpus.vocab().clone(),
            train_ids: ids(&self.docs),
            validation_ids,
            test_ids,
            theta: self.embedding.theta().clone(),
            topic_logits: self.logits.basis.clone(),
            weight_logits: self.logits.weights.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Trains until `config.epochs` epochs are done.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// One pass over the training documents in a seeded order. On a
    /// non-finite loss or parameter the state rolls back to the start of
    /// the epoch and a divergence error is returned.
    pub fn run_epoch(&mut self) -> Result<EpochTelemetry> {
        let start = Instant::now();
        let saved = (self.embedding.clone(), self.logits.clone(), self.rng.clone());
        let epoch = self.epoch + 1;
        match self.epoch_body(epoch) {
            Ok((mean_loss, grad_norm)) => {
                self.epoch = epoch;
                let t = EpochTelemetry {
                    epoch,
                    mean_loss,
                    grad_norm,
                    wall_time_secs: start.elapsed().as_secs_f64(),
                };
                info!("epoch {epoch}: loss {mean_loss:.6e}, embedding gradient {grad_norm:.6e}");
                self.telemetry.epochs.push(t.clone());
                Ok(t)
            }
            Err(e) => {
                (self.embedding, self.logits, self.rng) = saved;
                Err(match e {
                    Error::Numerical { what, .. } => Error::Divergence { epoch, what },
                    other => other,
                })
            }
        }
    }

    fn epoch_body(&mut self, epoch: usize) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            let (loss, norm) = self.step(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: "reconstruction loss is not finite".into(),
                });
            }
            loss_sum += loss;
            norm_sum += norm;
            batches += 1;
        }
        if !(self.logits.is_finite() && self.embedding.theta().iter().all(|x| x.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                what: "parameters are not finite".into(),
            });
        }
        Ok((loss_sum / self.docs.len() as f64, norm_sum / batches.max(1) as f64))
    }

    fn kernel(&self) -> Result<GibbsKernel> {
        let cost = cost_matrix(&self.embedding);
        if !cost.entries().iter().all(|c| c.is_finite()) {
            return Err(Error::Numerical {
                iteration: 0,
                what: "embedding distances overflow".into(),
            });
        }
        gibbs_kernel(&distill(&cost, self.config.tau)?, self.config.epsilon)
    }

    /// One batch: logit step, plan recovery under the refreshed weights,
    /// embedding step. Returns the summed loss and the Laplacian-gradient norm.
    fn step(&mut self, batch: &[usize]) -> Result<(f64, f64)> {
        let (n, k) = self.logits.basis.dim();
        let iters = self.config.inner_iters;
        let kernel = self.kernel()?;
        let state = self.logits.state()?;
        let y = self.corpus.y();
        let docs = &self.docs;
        let supervised = self.supervised.clone();
        let sup = |j: usize| supervised.as_ref().map(|s| s[j]);
        let grads: Vec<Result<SinkhornGrad>> = self.pool.install(|| {
            batch
                .par_iter()
                .map_init(
                    || SinkhornGradWorkspace::new(n, k),
                    |ws, &j| {
                        ws.compute(y.column(docs[j]), state.basis().view(), state.doc_weights(j), &kernel, iters, sup(j))
                    },
                )
                .collect()
        });

        // reduction in ascending document order
        let scale = 1.0 / batch.len() as f64;
        let mut grad_basis = Array2::<f64>::zeros((n, k));
        let mut weight_grads: Vec<(usize, Array1<f64>)> = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        for (&j, g) in batch.iter().zip(grads) {
            let g = g?;
            grad_basis.scaled_add(scale, &g.grad_basis);
            loss += g.loss;
            weight_grads.push((j, g.grad_weights));
        }
        apply_logit_updates(
            &mut self.logits,
            &state,
            grad_basis.view(),
            &weight_grads,
            self.config.learning_rate,
        )?;

        let state = self.logits.state()?;
        let plans: Vec<Result<TransportPlan>> = self.pool.install(|| {
            batch
                .par_iter()
                .map(|&j| {
                    let lambda = state.doc_weights(j);
                    closest_plan(state.basis().view(), lambda, &kernel, iters, closest_topic(lambda, sup(j)))
                })
                .collect()
        });
        let plans = plans.into_iter().collect::<Result<Vec<_>>>()?;
        let lap = laplacian(&aggregate_transports(n, &plans)?).scaled(scale);
        self.embedding.snapshot();
        let norm = laplacian_gradient(&self.embedding, &lap).iter().map(|g| g * g).sum::<f64>().sqrt();
        embedding_gradient_step(&mut self.embedding, &lap, self.config.beta, self.config.learning_rate)?;
        debug!("batch of {}: loss {:.6e}, embedding gradient {norm:.6e}", batch.len(), loss * scale);
        Ok((loss, norm))
    }
}

fn supervision(corpus: &Corpus, config: &TrainConfig, docs: &[usize]) -> Result<Option<Vec<usize>>> {
    let Some(name) = &config.supervised else {
        return Ok(None);
    };
    let classes = corpus.label_classes(name)?;
    docs.iter()
        .map(|&m| match classes[m] {
            Some(c) if (c as usize) < config.topics => Ok(c as usize),
            Some(c) => Err(Error::param(format!(
                "document {:?} has class {c} of {name:?} but there are {} topics",
                corpus.ids()[m],
                config.topics
            ))),
            None => Err(Error::param(format!("document {:?} lacks label {name:?}", corpus.ids()[m]))),
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Runs a full training and returns the final parameters.
pub fn train(corpus: &Corpus, config: TrainConfig) -> Result<(EmbeddingModel, TopicLogits, Telemetry)> {
    let mut trainer = Trainer::new(corpus, config)?;
    trainer.run()?;
    Ok((trainer.embedding, trainer.logits, trainer.telemetry))
}
