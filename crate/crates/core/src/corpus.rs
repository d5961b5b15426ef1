//! Bag-of-words corpora: vocabulary, JSONL ingestion, splits and a synthetic
//! generator with planted topics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::{weighted::WeightedIndex, Distribution as _};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Disease,
    Procedure,
    Generic,
}

impl TokenKind {
    /// Kind implied by the `d_` / `p_` code prefixes.
    pub fn from_prefix(token: &str) -> Self {
        if token.starts_with("d_") {
            TokenKind::Disease
        } else if token.starts_with("p_") {
            TokenKind::Procedure
        } else {
            TokenKind::Generic
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Disease => "disease",
            TokenKind::Procedure => "procedure",
            TokenKind::Generic => "generic",
        }
    }
}

impl FromStr for TokenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disease" => Ok(TokenKind::Disease),
            "procedure" => Ok(TokenKind::Procedure),
            "generic" => Ok(TokenKind::Generic),
            other => Err(Error::param(format!("unknown token kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens are sorted lexicographically; duplicates are an error.
    pub fn new(entries: impl IntoIterator<Item = (String, TokenKind)>) -> Result<Self> {
        let mut entries: Vec<(String, TokenKind)> = entries.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::param(format!("token {:?} listed twice", w[0].0)));
        }
        let index = entries.iter().enumerate().map(|(i, (t, _))| (t.clone(), i)).collect();
        let (tokens, kinds) = entries.into_iter().unzip();
        Ok(Vocabulary { tokens, kinds, index })
    }

    /// Sorted unique tokens, kinds from their prefixes.
    pub fn infer<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let unique: BTreeSet<&str> = tokens.into_iter().collect();
        Vocabulary::new(unique.into_iter().map(|t| (t.to_string(), TokenKind::from_prefix(t)))).unwrap()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (token, kind) = match line.split_once('\t') {
                Some((t, k)) => (
                    t,
                    k.trim().parse().map_err(|e: Error| Error::Parse {
                        line: lineno + 1,
                        message: e.to_string(),
                    })?,
                ),
                None => (line, TokenKind::Generic),
            };
            let token = token.trim();
            if token.is_empty() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "empty token".into(),
                });
            }
            entries.push((token.to_string(), kind));
        }
        Vocabulary::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// One token per line with an explicit kind suffix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, k) in self.tokens.iter().zip(&self.kinds) {
            out.push_str(t);
            out.push('\t');
            out.push_str(k.as_str());
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn kind(&self, i: usize) -> TokenKind {
        self.kinds[i]
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn indices_of_kind(&self, kind: TokenKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kinds[i] == kind).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Int(i64),
    Str(String),
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelValue::Int(i) => write!(f, "{i}"),
            LabelValue::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, LabelValue>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// `(record id, token)` pairs dropped because the vocabulary was fixed.
    pub unknown_tokens: Vec<(String, String)>,
    /// Records whose tokens were all unknown.
    pub rejected: Vec<String>,
    /// Records with no tokens at all.
    pub skipped_empty: Vec<String>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.unknown_tokens.is_empty() && self.rejected.is_empty() && self.skipped_empty.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocab: Vocabulary,
    ids: Vec<String>,
    counts: Vec<Vec<u64>>,
    y: Array2<f64>,
    labels: Vec<BTreeMap<String, LabelValue>>,
    splits: Option<Splits>,
}

impl Corpus {
    /// Builds a corpus from in-memory records. Without `vocab` the
    /// vocabulary is inferred from the records.
    pub fn from_records(records: Vec<Record>, vocab: Option<Vocabulary>) -> Result<(Self, LoadReport)> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let vocab = vocab.unwrap_or_else(|| Vocabulary::infer(records.iter().flat_map(|r| r.tokens.iter().map(String::as_str))));
        let n = vocab.len();
        let mut report = LoadReport::default();
        let (mut ids, mut counts, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for r in records {
            if r.tokens.is_empty() {
                warn!("record {:?} has no tokens; skipped", r.id);
                report.skipped_empty.push(r.id);
                continue;
            }
            let mut c = vec![0u64; n];
            let mut known = 0;
            for t in &r.tokens {
                match vocab.index_of(t) {
                    Some(i) => {
                        c[i] += 1;
                        known += 1;
                    }
                    None => report.unknown_tokens.push((r.id.clone(), t.clone())),
                }
            }
            if known == 0 {
                report.rejected.push(r.id);
                continue;
            }
            ids.push(r.id);
            counts.push(c);
            labels.push(r.labels);
        }
        if ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let y = distributions(n, &counts);
        Ok((
            Corpus {
                vocab,
                ids,
                counts,
                y,
                labels,
                splits: None,
            },
            report,
        ))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    /// `N x M`; column `m` is the word distribution of document `m`.
    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn doc(&self, m: usize) -> ArrayView1<'_, f64> {
        self.y.column(m)
    }

    pub fn counts(&self, m: usize) -> &[u64] {
        &self.counts[m]
    }

    pub fn labels(&self, m: usize) -> &BTreeMap<String, LabelValue> {
        &self.labels[m]
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    /// Class ids for label `name`: integer labels are used as is, string
    /// labels are numbered in sorted order. `None` where a document lacks it.
    pub fn label_classes(&self, name: &str) -> Result<Vec<Option<u32>>> {
        let values: Vec<Option<&LabelValue>> = self.labels.iter().map(|l| l.get(name)).collect();
        if values.iter().all(Option::is_none) {
            return Err(Error::param(format!("no document carries label {name:?}")));
        }
        let strings: BTreeSet<&str> = values
            .iter()
            .filter_map(|v| match v {
                Some(LabelValue::Str(s)) => Some(s.as_str()),
                _ => None,
            })
            .collect();
        let has_ints = values.iter().any(|v| matches!(v, Some(LabelValue::Int(_))));
        if has_ints && !strings.is_empty() {
            return Err(Error::param(format!("label {name:?} mixes integers and strings")));
        }
        let rank: HashMap<&str, u32> = strings.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect();
        values
            .into_iter()
            .map(|v| match v {
                None => Ok(None),
                Some(LabelValue::Str(s)) => Ok(Some(rank[s.as_str()])),
                Some(LabelValue::Int(i)) => u32::try_from(*i)
                    .map(Some)
                    .map_err(|_| Error::param(format!("label {name:?} has negative or oversized class {i}"))),
            })
            .collect()
    }

    /// Records with tokens listed in vocabulary order, one per count.
    pub fn records(&self) -> Vec<Record> {
        (0..self.len())
            .map(|m| Record {
                id: self.ids[m].clone(),
                tokens: self.counts[m]
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &c)| std::iter::repeat_n(self.vocab.token(i).to_string(), c as usize))
                    .collect(),
                labels: self.labels[m].clone(),
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Writes the records and the vocabulary they are indexed against.
    pub fn save(&self, records_path: &Path, vocab_path: &Path) -> Result<()> {
        write_file(records_path, self.to_jsonl().as_bytes())?;
        write_file(vocab_path, self.vocab.to_text().as_bytes())
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        let mut all: Vec<usize> = splits.train.iter().chain(&splits.validation).chain(&splits.test).copied().collect();
        all.sort_unstable();
        if all != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::param("splits must partition the documents"));
        }
        self.splits = Some(splits);
        Ok(self)
    }
}

fn distributions(n: usize, counts: &[Vec<u64>]) -> Array2<f64> {
    let mut y = Array2::<f64>::zeros((n, counts.len()));
    for (m, c) in counts.iter().enumerate() {
        let total: u64 = c.iter().sum();
        for (i, &k) in c.iter().enumerate() {
            y[[i, m]] = k as f64 / total as f64;
        }
    }
    y
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Loads a JSONL records file, against `vocab_path` when given.
pub fn load_corpus(records_path: &Path, vocab_path: Option<&Path>) -> Result<(Corpus, LoadReport)> {
    let text = std::fs::read_to_string(records_path).map_err(|e| Error::io(records_path, e))?;
    let records = parse_records(&text)?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = vocab_path.map(Vocabulary::load).transpose()?;
    Corpus::from_records(records, vocab)
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 0.25, 0.25];

fn split_sizes(m: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = (m as f64 * ratios[0]).round() as usize;
    let val = ((m as f64 * ratios[1]).round() as usize).min(m - train.min(m));
    let train = train.min(m);
    [train, val, m - train - val]
}

/// Seeded train/validation/test split. With `stratify` each class of that
/// label is spread over the splits in proportion.
pub fn split_corpus(corpus: Corpus, ratios: [f64; 3], seed: u64, stratify: Option<&str>) -> Result<Corpus> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let m = corpus.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    if let Some(name) = stratify {
        let classes = corpus.label_classes(name)?;
        let mut groups: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
        for &d in &order {
            groups.entry(classes[d]).or_default().push(d);
        }
        // rank within class mapped to (0, 1), so every prefix of the merged
        // order holds each class in proportion
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(m);
        for docs in groups.values() {
            let g = docs.len() as f64;
            keyed.extend(docs.iter().enumerate().map(|(j, &d)| ((j as f64 + 0.5) / g, d)));
        }
        let position: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &d)| (d, p)).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(position[&a.1].cmp(&position[&b.1])));
        order = keyed.into_iter().map(|(_, d)| d).collect();
    }
    let [a, b, _] = split_sizes(m, ratios);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: sorted(&order[..a]),
        validation: sorted(&order[a..a + b]),
        test: sorted(&order[a + b..]),
    };
    corpus.with_splits(splits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub topics: usize,
    pub documents: usize,
    pub doc_length: usize,
    pub concentration: f64,
    pub seed: u64,
}

/// Fraction of each planted topic's mass on its own block.
pub const SYNTHETIC_BLOCK_MASS: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    pub true_topics: Array2<f64>,
    pub true_weights: Array2<f64>,
    pub true_cluster: Vec<usize>,
    pub generator_seed: u64,
}

/// Label name carrying the planted cluster of each synthetic document.
pub const CLUSTER_LABEL: &str = "cluster";

pub fn generate_synthetic(spec: SyntheticSpec) -> Result<(Corpus, SyntheticGroundTruth)> {
    let SyntheticSpec {
        vocab_size: n,
        topics: k,
        documents: m,
        doc_length,
        concentration,
        seed,
    } = spec;
    if k < 2 || n < k {
        return Err(Error::param(format!("need vocabulary size >= topics >= 2, got N={n}, K={k}")));
    }
    if m == 0 || doc_length == 0 {
        return Err(Error::param("need at least one document of positive length"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::param(format!("concentration must be positive, got {concentration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut topics = Array2::<f64>::from_elem((n, k), (1.0 - SYNTHETIC_BLOCK_MASS) / n as f64);
    for kk in 0..k {
        let (lo, hi) = (kk * n / k, (kk + 1) * n / k);
        for i in lo..hi {
            topics[[i, kk]] += SYNTHETIC_BLOCK_MASS / (hi - lo) as f64;
        }
    }

    // Gamma(a) = Gamma(a + 1) U^(1/a), kept in logs so tiny concentrations
    // do not underflow
    let gamma = Gamma::new(concentration + 1.0, 1.0).map_err(|e| Error::param(e.to_string()))?;
    let mut weights = Array2::<f64>::zeros((k, m));
    for mut col in weights.columns_mut() {
        let logs: Vec<f64> = (0..k)
            .map(|_| {
                let g: f64 = gamma.sample(&mut rng);
                let u: f64 = rng.sample(Open01);
                g.ln() + u.ln() / concentration
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        for (w, l) in col.iter_mut().zip(&logs) {
            *w = (l - max).exp() / total;
        }
    }
    let cluster: Vec<usize> = weights.columns().into_iter().map(crate::topic::argmax_topic).collect();

    let width = n.saturating_sub(1).to_string().len();
    let doc_width = m.saturating_sub(1).to_string().len();
    let tokens: Vec<String> = (0..n).map(|i| format!("w{i:0width$}")).collect();
    let mixture = topics.dot(&weights);
    let mut records = Vec::with_capacity(m);
    for d in 0..m {
        let sampler = WeightedIndex::new(mixture.column(d).iter().copied()).map_err(|e| Error::param(e.to_string()))?;
        let words = (0..doc_length).map(|_| tokens[sampler.sample(&mut rng)].clone()).collect();
        records.push(Record {
            id: format!("doc{d:0doc_width$}"),
            tokens: words,
            labels: BTreeMap::from([(CLUSTER_LABEL.to_string(), LabelValue::Int(cluster[d] as i64))]),
        });
    }
    let vocab = Vocabulary::new(tokens.into_iter().map(|t| (t, TokenKind::Generic)))?;
    let (corpus, _) = Corpus::from_records(records, Some(vocab))?;
    Ok((
        corpus,
        SyntheticGroundTruth {
            true_topics: topics,
            true_weights: weights,
            true_cluster: cluster,
            generator_seed: seed,
        },
    ))
}

/// Word distribution of a count vector.
pub fn counts_to_distribution(counts: &[u64]) -> Array1<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}
