//! One test per acceptance criterion. Each prints a single PASS/FAIL line;
//! run with `--nocapture` to see them.

mod common;

use std::time::Instant;

use dwl::checkpoint::save_checkpoint;
use dwl::corpus::{generate_synthetic, split_corpus, Corpus, SyntheticGroundTruth, SyntheticSpec, DEFAULT_RATIOS};
use dwl::embedding::{aggregate_transports, embedding_gradient, embedding_objective, laplacian, EmbeddingModel};
use dwl::eval::{doc_features, knn_classify, topn_prf, FeatureMode, Metric, RecommendationResult, TrainedModel};
use dwl::ot::{exact_ot, sinkhorn_distance, CostMatrix, Distribution, SinkhornOptions, TransportPlan};
use dwl::trainer::{TrainConfig, Trainer};
use ndarray::{array, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck;

fn report(criterion: &str, pass: bool, detail: String) {
    println!("{} {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

const EPSILONS: [f64; 3] = [0.1, 0.01, 0.001];
const OT_MAX_ITERS: usize = 2_000_000;
const OT_TOL: f64 = 1e-6;

struct OtInstance {
    u: Vec<f64>,
    v: Vec<f64>,
    cost: Vec<Vec<f64>>,
}

fn ot_instances() -> Vec<OtInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..100)
        .map(|_| {
            let n = rng.random_range(2..=8);
            OtInstance {
                u: common::random_simplex(n, &mut rng),
                v: common::random_simplex(n, &mut rng),
                cost: common::random_uniform_cost(n, &mut rng),
            }
        })
        .collect()
}

fn dist(p: &[f64]) -> Distribution {
    Distribution::new(Array1::from(p.to_vec())).unwrap()
}

fn cost_of(c: &[Vec<f64>]) -> CostMatrix {
    let n = c.len();
    CostMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| c[i][j])).unwrap()
}

#[test]
fn ot_oracle_equivalence() {
    let mut solver_secs = 0.0;
    let mut worst_rel: f64 = 0.0;
    let mut failures = Vec::new();
    for (t, inst) in ot_instances().iter().enumerate() {
        // enumeration is combinatorial, so only the smaller instances get it
        if inst.u.len() <= 5 {
            let (u, v, c) = (dist(&inst.u), dist(&inst.v), cost_of(&inst.cost));
            let exact = exact_ot(&u, &v, &c).unwrap().value;
            let oracle = common::vertex_enumeration_ot(&inst.u, &inst.v, &inst.cost);
            if (exact - oracle).abs() > 1e-9 {
                failures.push(format!("instance {t}: exact_ot {exact} vs enumeration {oracle}"));
            }
        }
        let start = Instant::now();
        let (u, v, c) = (dist(&inst.u), dist(&inst.v), cost_of(&inst.cost));
        let exact = exact_ot(&u, &v, &c).unwrap().value;
        // a plan within OT_TOL of its marginals is priced within this of the true iterate
        let slack = 2.0 * OT_TOL * c.max_entry() + 1e-8;
        let mut last_gap = f64::INFINITY;
        for eps in EPSILONS {
            let r = sinkhorn_distance(&u, &v, &c, &SinkhornOptions::new(eps).max_iters(OT_MAX_ITERS).tol(OT_TOL)).unwrap();
            let gap = r.transport_cost - exact;
            if !r.converged {
                failures.push(format!("instance {t}: no convergence at eps {eps}"));
            }
            if gap < -slack {
                failures.push(format!("instance {t}: cost below the optimum by {:e} at eps {eps}", -gap));
            }
            if gap > last_gap + slack {
                failures.push(format!("instance {t}: gap grew from {last_gap:e} to {gap:e} at eps {eps}"));
            }
            last_gap = gap;
        }
        solver_secs += start.elapsed().as_secs_f64();
        let rel = last_gap.abs() / exact.max(f64::MIN_POSITIVE);
        worst_rel = worst_rel.max(rel);
        if rel > 0.01 {
            failures.push(format!("instance {t}: relative gap {rel:e} at eps 0.001"));
        }
    }
    if solver_secs >= 30.0 {
        failures.push(format!("solvers took {solver_secs:.1} s"));
    }
    report(
        "OT oracle equivalence",
        failures.is_empty(),
        format!("100 instances, worst relative gap {worst_rel:.2e}, solvers {solver_secs:.1} s {failures:?}"),
    );
}

#[test]
fn marginal_feasibility() {
    let mut worst: f64 = 0.0;
    for inst in ot_instances() {
        let (u, v, c) = (dist(&inst.u), dist(&inst.v), cost_of(&inst.cost));
        for eps in EPSILONS {
            let r = sinkhorn_distance(&u, &v, &c, &SinkhornOptions::new(eps).max_iters(OT_MAX_ITERS).tol(OT_TOL)).unwrap();
            let p = r.plan.entries();
            let rows = p.sum_axis(Axis(1));
            let cols = p.sum_axis(Axis(0));
            let err: f64 = rows.iter().zip(&inst.u).map(|(a, b)| (a - b).abs()).sum::<f64>()
                + cols.iter().zip(&inst.v).map(|(a, b)| (a - b).abs()).sum::<f64>();
            worst = worst.max(err);
        }
    }
    report("marginal feasibility", worst <= 1e-6, format!("worst l1 marginal error {worst:.2e}"));
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (n, k) in [(4, 2), (6, 3), (8, 4)] {
        for seed in 0..10 {
            let inst = gradcheck::instance(n, k, 1000 * n as u64 + seed);
            let (aa, ag) = gradcheck::analytic(&inst, 0.05, 30);
            let (na, ng) = gradcheck::numeric(&inst, 0.05, 30);
            worst = worst.max(common::rel_err(&aa, &na)).max(common::rel_err(&ag, &ng));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient fidelity",
        worst <= 1e-3 && secs < 120.0,
        format!("worst relative error {worst:.2e} over 30 instances, {secs:.1} s"),
    );
}

fn random_plan<R: Rng>(n: usize, rng: &mut R) -> TransportPlan {
    let entries = Array2::from_shape_simple_fn((n, n), || rng.random::<f64>());
    let rows = entries.sum_axis(Axis(1));
    let cols = entries.sum_axis(Axis(0));
    TransportPlan::new(entries, rows, cols).unwrap()
}

#[test]
fn embedding_gradient_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d, n, beta) = (2, 3, 0.01);
    let lap = laplacian(&aggregate_transports(n, &[random_plan(n, &mut rng)]).unwrap());
    let theta = Array2::from_shape_simple_fn((d, n), || rng.random::<f64>() - 0.5);
    let anchor = Array2::from_shape_simple_fn((d, n), || rng.random::<f64>() - 0.5);
    let model = EmbeddingModel::with_anchor(theta.clone(), anchor.clone()).unwrap();
    let analytic: Vec<f64> = embedding_gradient(&model, &lap, beta).iter().copied().collect();
    let mut numeric = Vec::new();
    for i in 0..d {
        for j in 0..n {
            numeric.push(common::central_diff(
                |x| {
                    let mut t = theta.clone();
                    t[[i, j]] = x;
                    embedding_objective(&EmbeddingModel::with_anchor(t, anchor.clone()).unwrap(), &lap, beta)
                },
                theta[[i, j]],
                1e-5,
            ));
        }
    }
    let err = common::rel_err(&analytic, &numeric);
    report("embedding gradient", err <= 1e-6, format!("relative error {err:.2e}"));
}

#[test]
fn laplacian_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut asym, mut row_sum, mut min_eig): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let t = Array2::from_shape_simple_fn((n, n), || rng.random::<f64>() * 3.0);
        let plan = TransportPlan::new(t.clone(), t.sum_axis(Axis(1)), t.sum_axis(Axis(0))).unwrap();
        let l = laplacian(&aggregate_transports(n, &[plan]).unwrap()).entries().clone();
        asym = asym.max((&l - &l.t()).iter().fold(0.0, |m, x| m.max(x.abs())));
        row_sum = row_sum.max(l.sum_axis(Axis(1)).iter().fold(0.0, |m, x| m.max(x.abs())));
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| l[[i, j]]);
        min_eig = min_eig.min(m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min));
    }
    report(
        "laplacian properties",
        asym == 0.0 && row_sum <= 1e-12 && min_eig >= -1e-8,
        format!("max asymmetry {asym:e}, max row sum {row_sum:.1e}, min eigenvalue {min_eig:.2e}"),
    );
}

fn synthetic() -> (Corpus, SyntheticGroundTruth) {
    let (c, truth) = generate_synthetic(SyntheticSpec {
        vocab_size: 30,
        topics: 4,
        documents: 500,
        doc_length: 100,
        concentration: 0.1,
        seed: 0,
    })
    .unwrap();
    (split_corpus(c, DEFAULT_RATIOS, 0, None).unwrap(), truth)
}

fn synthetic_config() -> TrainConfig {
    TrainConfig {
        topics: 4,
        epsilon: 0.01,
        learning_rate: 0.05,
        tau: 0.5,
        batch_size: 256,
        epochs: 50,
        seed: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_topic_recovery() {
    let start = Instant::now();
    let (c, truth) = synthetic();
    let mut t = Trainer::new(&c, TrainConfig { workers: 1, ..synthetic_config() }).unwrap();
    t.run().unwrap();
    let model = TrainedModel::from_checkpoint(t.checkpoint()).unwrap();
    let s = c.splits().unwrap();
    let labels = |docs: &[usize]| docs.iter().map(|&m| truth.true_cluster[m] as u32).collect::<Vec<_>>();
    let feats = |docs: &[usize]| {
        doc_features(&c, docs, &model, FeatureMode::TopicWeight)
            .unwrap()
            .into_iter()
            .map(|f| f.vector)
            .collect::<Vec<_>>()
    };
    let r = knn_classify(&feats(&s.train), &labels(&s.train), &feats(&s.test), &labels(&s.test), &Metric::Euclidean, 1)
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "synthetic topic recovery",
        r.accuracy >= 0.9 && secs < 600.0,
        format!("1-NN accuracy {:.3} on {} held-out documents, {secs:.1} s", r.accuracy, s.test.len()),
    );
}

#[test]
fn distillation_effect() {
    let (c, _) = synthetic();
    let norm = |tau: f64| {
        let mut t = Trainer::new(&c, TrainConfig { tau, epochs: 2, ..synthetic_config() }).unwrap();
        t.run().unwrap();
        t.telemetry().epochs[1].grad_norm
    };
    let (half, one) = (norm(0.5), norm(1.0));
    report(
        "distillation effect",
        half > one,
        format!("epoch-2 embedding gradient norm {half:.6e} at tau 0.5, {one:.6e} at tau 1.0"),
    );
}

#[test]
fn metric_suite_exactness() {
    let r = RecommendationResult::new(vec![1, 2, 9], vec![1, 2, 3, 4, 5]).unwrap();
    let prf = topn_prf(&[r]).unwrap();
    let table = prf.precision == 2.0 / 3.0 && prf.recall == 0.4 && prf.f1 == 0.5;

    // test point equidistant from train points 0 and 1
    let train = vec![array![1.0, 0.0], array![-1.0, 0.0], array![0.0, 5.0], array![0.0, -5.0]];
    let test = vec![array![0.0, 0.0]];
    let nearest = knn_classify(&train, &[4, 2, 7, 7], &test, &[4], &Metric::Euclidean, 1).unwrap();
    let swapped = knn_classify(&train, &[2, 4, 7, 7], &test, &[2], &Metric::Euclidean, 1).unwrap();
    // two votes each for classes 3 and 1
    let votes = knn_classify(&train, &[3, 1, 3, 1], &test, &[1], &Metric::Euclidean, 4).unwrap();
    let ties = nearest.predictions == [4] && swapped.predictions == [2] && votes.predictions == [1];
    report(
        "metric-suite exactness",
        table && ties,
        format!(
            "P/R/F1 = {}/{}/{}, tie predictions {:?} {:?} {:?}",
            prf.precision, prf.recall, prf.f1, nearest.predictions, swapped.predictions, votes.predictions
        ),
    );
}

#[test]
fn determinism() {
    let (c, _) = synthetic();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: usize| {
        let mut t = Trainer::new(&c, TrainConfig { workers, epochs: 3, ..synthetic_config() }).unwrap();
        t.run().unwrap();
        let path = dir.path().join(name);
        save_checkpoint(&path, &t.checkpoint()).unwrap();
        std::fs::read(path).unwrap()
    };
    let (a, b, four) = (run("a.json", 1), run("b.json", 1), run("four.json", 4));
    report(
        "determinism",
        a == b && a == four,
        format!("repeat identical: {}, 1 vs 4 workers identical: {}", a == b, a == four),
    );
}
