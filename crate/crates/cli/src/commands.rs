use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dwl::checkpoint::{load_checkpoint, Checkpoint};
use dwl::corpus::{
    generate_synthetic, load_corpus, parse_records, split_corpus, Corpus, Splits, SyntheticSpec, TokenKind, Vocabulary,
    DEFAULT_RATIOS,
};
use dwl::embedding::cost_matrix;
use dwl::eval::{
    doc_features, fmt_sig, knn_classify, knn_graph, recommend_procedures, topic_report, topic_report_csv, topn_prf,
    Aggregation, FeatureMode, Metric, RecommendationResult, TrainedModel,
};
use dwl::trainer::Trainer;
use log::{info, warn};
use ndarray::Array2;
use serde_json::json;

use crate::manifest::{digest_file, write_atomic};
use crate::{EvalArgs, GraphArgs, RecommendArgs, SynthArgs, TrainArgs};

/// Inputs, outputs and settings gathered for the manifest.
pub struct Run {
    out: PathBuf,
    seed: Option<u64>,
    config_file: Option<PathBuf>,
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<crate::manifest::InputDigest>,
    pub outputs: Vec<String>,
}

impl Run {
    pub fn new(out: PathBuf, seed: Option<u64>, config_file: Option<PathBuf>) -> Self {
        Run {
            out,
            seed,
            config_file,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest_file(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(name), bytes)?;
        self.outputs.push(name.into());
        Ok(())
    }

    fn config_text(&mut self) -> Result<Option<String>> {
        let Some(path) = self.config_file.clone() else {
            return Ok(None);
        };
        self.input(&path)?;
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(text))
    }

    fn reject_config(&self, command: &str) -> Result<()> {
        if self.config_file.is_some() {
            bail!("--config is not used by {command}");
        }
        Ok(())
    }
}

fn key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value, got {line:?}", lineno + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key} = {value:?}: {e}"))
}

pub fn synth(run: &mut Run, args: &SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        vocab_size: 30,
        topics: 4,
        documents: 500,
        doc_length: 100,
        concentration: 0.1,
        seed: run.seed.unwrap_or(0),
    };
    let mut procedures = 0;
    if let Some(text) = run.config_text()? {
        for (k, v) in key_values(&text)? {
            match k.as_str() {
                "vocab_size" => spec.vocab_size = parse(&k, &v)?,
                "topics" => spec.topics = parse(&k, &v)?,
                "documents" => spec.documents = parse(&k, &v)?,
                "doc_length" => spec.doc_length = parse(&k, &v)?,
                "concentration" => spec.concentration = parse(&k, &v)?,
                "procedures" => procedures = parse(&k, &v)?,
                "seed" if run.seed.is_none() => spec.seed = parse(&k, &v)?,
                "seed" => {}
                other => bail!("unknown synth setting {other:?}"),
            }
        }
    }
    spec.vocab_size = args.vocab_size.unwrap_or(spec.vocab_size);
    spec.topics = args.topics.unwrap_or(spec.topics);
    spec.documents = args.documents.unwrap_or(spec.documents);
    spec.doc_length = args.doc_length.unwrap_or(spec.doc_length);
    spec.concentration = args.concentration.unwrap_or(spec.concentration);
    procedures = args.procedures.unwrap_or(procedures);
    if procedures > spec.vocab_size {
        bail!("{procedures} procedures exceed the vocabulary of {}", spec.vocab_size);
    }
    run.config = Some(json!({
        "vocab_size": spec.vocab_size,
        "topics": spec.topics,
        "documents": spec.documents,
        "doc_length": spec.doc_length,
        "concentration": spec.concentration,
        "procedures": procedures,
        "seed": spec.seed,
    }));

    let (corpus, truth) = generate_synthetic(spec)?;
    let corpus = if procedures > 0 {
        let n = spec.vocab_size;
        let vocab = Vocabulary::new(corpus.vocab().tokens().iter().enumerate().map(|(i, t)| {
            let kind = if i >= n - procedures { TokenKind::Procedure } else { TokenKind::Disease };
            (t.clone(), kind)
        }))?;
        Corpus::from_records(corpus.records(), Some(vocab))?.0
    } else {
        corpus
    };
    let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let truth = json!({
        "true_topics": rows(&truth.true_topics),
        "true_weights": rows(&truth.true_weights),
        "true_cluster": truth.true_cluster,
        "generator_seed": truth.generator_seed,
    });
    run.write("records.jsonl", corpus.to_jsonl().as_bytes())?;
    run.write("vocab.tsv", corpus.vocab().to_text().as_bytes())?;
    run.write("ground_truth.json", format!("{}\n", serde_json::to_string_pretty(&truth)?).as_bytes())?;
    info!("wrote {} documents over {} tokens", corpus.len(), corpus.vocab().len());
    Ok(())
}

fn load_records(run: &mut Run, records: &Path, vocab: Option<&Path>) -> Result<Corpus> {
    run.input(records)?;
    if let Some(v) = vocab {
        run.input(v)?;
    }
    let (corpus, report) = load_corpus(records, vocab)?;
    if !report.is_clean() {
        warn!(
            "{} unknown tokens dropped, {} records rejected, {} empty records skipped",
            report.unknown_tokens.len(),
            report.rejected.len(),
            report.skipped_empty.len()
        );
    }
    Ok(corpus)
}

fn splits_from_ids(corpus: &Corpus, ckpt: &Checkpoint) -> Result<Splits> {
    let find = |ids: &[String]| {
        ids.iter()
            .map(|id| corpus.position(id).ok_or_else(|| anyhow!("document {id:?} from the checkpoint is not in the records")))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Splits {
        train: find(&ckpt.train_ids)?,
        validation: find(&ckpt.validation_ids)?,
        test: find(&ckpt.test_ids)?,
    })
}

pub fn train(run: &mut Run, args: &TrainArgs) -> Result<()> {
    let corpus = load_records(run, &args.records, args.vocab.as_deref())?;
    let resume = match &args.resume {
        Some(path) => {
            run.input(path)?;
            Some(load_checkpoint(path)?)
        }
        None => None,
    };
    let mut config = resume.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    if let Some(text) = run.config_text()? {
        config.apply_text(&text)?;
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {o:?}"))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = run.seed {
        config.seed = s;
    }
    config.validate()?;
    run.config = Some(serde_json::to_value(&config)?);

    let corpus = match &resume {
        Some(ckpt) => {
            let splits = splits_from_ids(&corpus, ckpt)?;
            corpus.with_splits(splits)?
        }
        None => split_corpus(corpus, DEFAULT_RATIOS, config.seed, args.stratify.as_deref())?,
    };
    let mut trainer = match resume {
        Some(mut ckpt) => {
            if ckpt.config.seed != config.seed || ckpt.config.topics != config.topics || ckpt.config.embed_dim != config.embed_dim {
                bail!("a resumed run cannot change seed, topics or embed_dim");
            }
            ckpt.config = config.clone();
            Trainer::from_checkpoint(&corpus, ckpt)?
        }
        None => Trainer::new(&corpus, config.clone())?,
    };
    let outcome = trainer.run();
    let ckpt = trainer.checkpoint();
    run.write("checkpoint.json", ckpt.to_json().as_bytes())?;
    run.write("telemetry.csv", trainer.telemetry().to_csv().as_bytes())?;
    let model = TrainedModel::from_checkpoint(ckpt)?;
    run.write("topics.csv", topic_report_csv(&topic_report(model.topics.basis(), &model.vocab, 3)).as_bytes())?;
    outcome?;
    info!("trained {} epochs on {} documents", trainer.epoch(), trainer.training_docs().len());
    Ok(())
}

fn load_model(run: &mut Run, path: &Path) -> Result<TrainedModel> {
    run.input(path)?;
    Ok(TrainedModel::from_checkpoint(load_checkpoint(path)?)?)
}

/// Records indexed against the model vocabulary; any disagreement is an error.
fn model_corpus(run: &mut Run, model: &TrainedModel, records: &Path, vocab: Option<&Path>) -> Result<Corpus> {
    run.input(records)?;
    if let Some(v) = vocab {
        run.input(v)?;
        let given = Vocabulary::load(v)?;
        if given.tokens() != model.vocab.tokens() {
            bail!(
                "vocabulary mismatch: {} has {} tokens, the checkpoint {}",
                v.display(),
                given.len(),
                model.vocab.len()
            );
        }
    }
    let text = std::fs::read_to_string(records).with_context(|| format!("reading {}", records.display()))?;
    let (corpus, report) = Corpus::from_records(parse_records(&text)?, Some(model.vocab.clone()))?;
    if let Some((id, token)) = report.unknown_tokens.first() {
        bail!(
            "vocabulary mismatch: token {token:?} in record {id:?} is not in the checkpoint vocabulary ({} unknown)",
            report.unknown_tokens.len()
        );
    }
    model.check_corpus(&corpus)?;
    Ok(corpus)
}

pub fn eval(run: &mut Run, args: &EvalArgs) -> Result<()> {
    run.reject_config("eval")?;
    let features = args
        .feature
        .iter()
        .map(|f| f.parse::<FeatureMode>())
        .collect::<dwl::Result<Vec<_>>>()?;
    for m in &args.metric {
        if m != "euclidean" && m != "wasserstein" {
            bail!("unknown metric {m:?}");
        }
    }
    if args.knn.contains(&0) {
        bail!("--knn values must be positive");
    }
    run.config = Some(json!({
        "label": args.label,
        "feature": args.feature,
        "metric": args.metric,
        "knn": args.knn,
        "allow_overlap": args.allow_overlap,
    }));
    let model = load_model(run, &args.checkpoint)?;
    let corpus = model_corpus(run, &model, &args.records, args.vocab.as_deref())?;
    let classes = corpus.label_classes(&args.label)?;
    let labelled = |ids: &[String]| -> Vec<usize> {
        model.positions(&corpus, ids).into_iter().filter(|&m| classes[m].is_some()).collect()
    };
    let train = labelled(&model.train_ids);
    let test = if args.allow_overlap { train.clone() } else { labelled(&model.test_ids) };
    if train.is_empty() {
        bail!("no labelled training documents");
    }
    if test.is_empty() {
        bail!("the test split is empty");
    }
    let labels = |docs: &[usize]| docs.iter().map(|&m| classes[m].expect("filtered")).collect::<Vec<u32>>();
    let (train_labels, test_labels) = (labels(&train), labels(&test));

    let mut csv = String::from("feature,metric,k,accuracy,test_documents\n");
    let mut rows = 0;
    for &mode in &features {
        let vectors = |docs: &[usize]| -> Result<Vec<_>> {
            Ok(doc_features(&corpus, docs, &model, mode)?.into_iter().map(|f| f.vector).collect())
        };
        let (train_x, test_x) = (vectors(&train)?, vectors(&test)?);
        for name in &args.metric {
            let metric = match name.as_str() {
                "wasserstein" if mode != FeatureMode::WordDistribution => {
                    warn!("skipping {mode} with the wasserstein metric, which compares word distributions");
                    continue;
                }
                "wasserstein" => Metric::Wasserstein {
                    cost: cost_matrix(&model.embedding),
                    epsilon: model.config.epsilon,
                },
                _ => Metric::Euclidean,
            };
            for &k in &args.knn {
                let r = knn_classify(&train_x, &train_labels, &test_x, &test_labels, &metric, k)?;
                info!("{mode} {} k={k}: accuracy {}", metric.name(), fmt_sig(r.accuracy));
                csv.push_str(&format!("{mode},{},{k},{},{}\n", metric.name(), fmt_sig(r.accuracy), test.len()));
                rows += 1;
            }
        }
    }
    if rows == 0 {
        bail!("no valid feature and metric combination requested");
    }
    run.write("metrics.csv", csv.as_bytes())
}

pub fn recommend(run: &mut Run, args: &RecommendArgs) -> Result<()> {
    run.reject_config("recommend")?;
    let aggregation: Aggregation = args.aggregation.parse()?;
    run.config = Some(json!({ "top": args.top, "aggregation": args.aggregation }));
    let model = load_model(run, &args.checkpoint)?;
    let corpus = model_corpus(run, &model, &args.records, args.vocab.as_deref())?;
    let vocab = &model.vocab;
    let procedures = vocab.indices_of_kind(TokenKind::Procedure);
    if procedures.is_empty() {
        bail!("the vocabulary has no procedure tokens");
    }
    if let Some(&l) = args.top.iter().find(|&&l| l == 0 || l > procedures.len()) {
        bail!("list length {l} must lie in 1..={}", procedures.len());
    }
    let present = |m: usize, kind: TokenKind| -> Vec<usize> {
        corpus.counts(m).iter().enumerate().filter(|&(i, &c)| c > 0 && vocab.kind(i) == kind).map(|(i, _)| i).collect()
    };
    let admissions: Vec<(usize, Vec<usize>, Vec<usize>)> = model
        .positions(&corpus, &model.test_ids)
        .into_iter()
        .map(|m| (m, present(m, TokenKind::Disease), present(m, TokenKind::Procedure)))
        .filter(|(_, d, p)| !d.is_empty() && !p.is_empty())
        .collect();
    if admissions.is_empty() {
        bail!("the test split has no admission with both diseases and procedures");
    }

    let mut lists = String::from("id,top,recommended,precision,recall,f1\n");
    let mut summary = String::from("top,precision,recall,f1,admissions\n");
    for &top in &args.top {
        let mut results = Vec::with_capacity(admissions.len());
        for (m, diseases, truth) in &admissions {
            let rec = recommend_procedures(diseases, &model.embedding, vocab, top, aggregation)?;
            let r = RecommendationResult::new(rec, truth.clone())?;
            let names: Vec<&str> = r.recommended.iter().map(|&i| vocab.token(i)).collect();
            lists.push_str(&format!(
                "{},{top},{},{},{},{}\n",
                corpus.ids()[*m],
                names.join(" "),
                fmt_sig(r.precision),
                fmt_sig(r.recall),
                fmt_sig(r.f1)
            ));
            results.push(r);
        }
        let prf = topn_prf(&results)?;
        info!("top {top}: P {} R {} F1 {}", fmt_sig(prf.precision), fmt_sig(prf.recall), fmt_sig(prf.f1));
        summary.push_str(&format!(
            "{top},{},{},{},{}\n",
            fmt_sig(prf.precision),
            fmt_sig(prf.recall),
            fmt_sig(prf.f1),
            results.len()
        ));
    }
    run.write("recommendations.csv", lists.as_bytes())?;
    run.write("recommendation_summary.csv", summary.as_bytes())
}

pub fn export_graph(run: &mut Run, args: &GraphArgs) -> Result<()> {
    run.reject_config("export-graph")?;
    run.config = Some(json!({ "k": args.k }));
    let model = load_model(run, &args.checkpoint)?;
    let graph = knn_graph(&model.embedding, &model.vocab, args.k)?;
    run.write("graph.json", format!("{}\n", serde_json::to_string_pretty(&graph)?).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_skip_comments_and_blanks() {
        let kv = key_values("# header\n\ntopics = 4 # planted\nconcentration=0.1\n").unwrap();
        assert_eq!(kv, vec![("topics".into(), "4".into()), ("concentration".into(), "0.1".into())]);
        assert!(key_values("topics 4\n").is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let div = anyhow::Error::new(dwl::Error::Divergence { epoch: 3, what: "nan".into() });
        assert_eq!(crate::exit_code(&div), 2);
        let parse = anyhow::Error::new(dwl::Error::Parse { line: 1, message: "x".into() });
        assert_eq!(crate::exit_code(&parse), 1);
        assert_eq!(crate::exit_code(&anyhow!("plain")), 1);
    }
}
