//! Lossless JSON checkpoints of a training run.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, TokenKind, Vocabulary};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "dwl-ckpt-1";

/// Position of the training generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(self.word_pos.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub vocab: Vocabulary,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub theta: Array2<f64>,
    pub topic_logits: Array2<f64>,
    pub weight_logits: Array2<f64>,
    pub rng: RngState,
}

impl Checkpoint {
    /// Checks that `corpus` uses the vocabulary this run was trained on.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let (n, got) = (self.theta.ncols(), corpus.vocab().len());
        if n != got {
            return Err(Error::shape(format!("vocabulary of {n} tokens"), got));
        }
        if corpus.vocab().tokens() != self.vocab.tokens() {
            return Err(Error::param("corpus vocabulary differs from the checkpoint vocabulary"));
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.vocab.len();
        let (d, k, m) = (self.config.embed_dim, self.config.topics, self.train_ids.len());
        let expect = [
            ("theta", self.theta.dim(), (d, n)),
            ("topic_logits", self.topic_logits.dim(), (n, k)),
            ("weight_logits", self.weight_logits.dim(), (k, m)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::shape(format!("{name} {want:?}"), format!("{got:?}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            epoch: self.epoch,
            // the pool size is not model state; a resume defaults to every core
            config: TrainConfig {
                workers: 0,
                ..self.config.clone()
            },
            vocabulary: self
                .vocab
                .tokens()
                .iter()
                .zip(self.vocab.kinds())
                .map(|(t, k)| VocabEntry {
                    token: t.clone(),
                    kind: *k,
                })
                .collect(),
            train_ids: self.train_ids.clone(),
            validation_ids: self.validation_ids.clone(),
            test_ids: self.test_ids.clone(),
            theta: Matrix::encode(&self.theta),
            topic_logits: Matrix::encode(&self.topic_logits),
            weight_logits: Matrix::encode(&self.weight_logits),
            rng: RngFile {
                seed: hex::encode(self.rng.seed),
                word_pos: self.rng.word_pos.to_string(),
                digest: self.rng.digest(),
            },
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let corrupt = |e: serde_json::Error| Error::CorruptCheckpoint(e.to_string());
        let value: serde_json::Value = serde_json::from_str(text).map_err(corrupt)?;
        let found = value.get("format").and_then(|f| f.as_str()).unwrap_or_default();
        if found != CHECKPOINT_FORMAT {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_FORMAT.into(),
                found: found.into(),
            });
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(corrupt)?;
        let seed: [u8; 32] = hex::decode(&file.rng.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::CorruptCheckpoint("bad generator seed".into()))?;
        let word_pos = file
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::CorruptCheckpoint("bad generator position".into()))?;
        let rng = RngState { seed, word_pos };
        if rng.digest() != file.rng.digest {
            return Err(Error::CorruptCheckpoint("generator digest mismatch".into()));
        }
        let vocab = Vocabulary::new(file.vocabulary.into_iter().map(|e| (e.token, e.kind)))
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let ckpt = Checkpoint {
            config: file.config,
            epoch: file.epoch,
            vocab,
            train_ids: file.train_ids,
            validation_ids: file.validation_ids,
            test_ids: file.test_ids,
            theta: file.theta.decode("theta")?,
            topic_logits: file.topic_logits.decode("topic_logits")?,
            weight_logits: file.weight_logits.decode("weight_logits")?,
            rng,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_json()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    epoch: usize,
    config: TrainConfig,
    vocabulary: Vec<VocabEntry>,
    train_ids: Vec<String>,
    validation_ids: Vec<String>,
    test_ids: Vec<String>,
    theta: Matrix,
    topic_logits: Matrix,
    weight_logits: Matrix,
    rng: RngFile,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    kind: TokenKind,
}

#[derive(Serialize, Deserialize)]
struct RngFile {
    seed: String,
    word_pos: String,
    digest: String,
}

/// Row-major little-endian f64 payload.
#[derive(Serialize, Deserialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: String,
}

impl Matrix {
    fn encode(a: &Array2<f64>) -> Self {
        let bytes: Vec<u8> = a.iter().flat_map(|x| x.to_le_bytes()).collect();
        Matrix {
            rows: a.nrows(),
            cols: a.ncols(),
            data: B64.encode(bytes),
        }
    }

    fn decode(&self, name: &str) -> Result<Array2<f64>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        if Some(bytes.len()) != self.rows.checked_mul(self.cols).and_then(|c| c.checked_mul(8)) {
            return Err(Error::CorruptCheckpoint(format!(
                "{name}: {} bytes for a {}x{} matrix",
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((self.rows, self.cols), values).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::parse("a\tdisease\nb\tprocedure\n").unwrap();
        let config = TrainConfig {
            embed_dim: 1,
            topics: 2,
            ..TrainConfig::default()
        };
        Checkpoint {
            config,
            epoch: 3,
            vocab,
            train_ids: vec!["x".into()],
            validation_ids: vec![],
            test_ids: vec!["y".into()],
            theta: array![[0.1, -f64::MIN_POSITIVE]],
            topic_logits: array![[1.0 / 3.0, 2.0], [-0.0, 1e300]],
            weight_logits: array![[0.5], [-0.25]],
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(9)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let bits = |a: &Array2<f64>| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.topic_logits), bits(&c.topic_logits));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let text = sample().to_json();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::from_json(cut), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn wrong_format_is_a_version_error() {
        let text = sample().to_json().replace(CHECKPOINT_FORMAT, "dwl-ckpt-0");
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn tampered_payload_is_corrupt() {
        let c = sample();
        let mut file: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        file["theta"]["cols"] = 3.into();
        assert!(Checkpoint::from_json(&file.to_string()).is_err());
        let mut file: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        file["rng"]["word_pos"] = "17".into();
        assert!(matches!(Checkpoint::from_json(&file.to_string()), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn resumed_generator_continues_the_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let expected: [u64; 3] = rng.random();
        let got: [u64; 3] = state.restore().random();
        assert_eq!(got, expected);
    }
}
