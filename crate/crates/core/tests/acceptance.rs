//! End-to-end acceptance run: prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 are exact checks and always decide the exit status. The
//! directional experiment checks (7-9) are reported; set
//! `FEDIIH_ACCEPTANCE_STRICT=1` to make their failures fail the run too.
//! Criterion 10 runs only when `FEDIIH_CORA_DIR` points at a directory with
//! `cora.content` and `cora.cites`, and never fails the run.

mod common;

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::{
    alpha_ascent, js_quadrature, objective_gradient_check, random_graph, random_params, random_tensor,
    randomized_greedy_cut, routing_case, seeded, structural_graph, weighted_mean, KARATE,
};
use fediih::client::{Ablation, ClassifierInput, FederatedParams, PosteriorSummary, PriorConfig};
use fediih::encoder::RoutingConfig;
use fediih::graph::{generate_synthetic_layers, GraphFormat, RelationSpec, SplitRatios, SyntheticSpec};
use fediih::harness::{
    ground_truth_similarity, prepare, run_prepared, DatasetConfig, ExperimentConfig, Method, MetricsReport, Prepared,
};
use fediih::partition::{balance_cap, edge_cut, partition_nonoverlapping, partition_overlapping, DEFAULT_BALANCE};
use fediih::server::{
    fedavg, fedavg_bias, js_divergence, kl_diag, separate_federate, update_global_alpha, weight_matrix, AlphaMode, DiagGaussian,
    JsMethod,
};
use fediih::tensor::Tensor;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for input in [ClassifierInput::Projected, ClassifierInput::Routed] {
        worst = worst.max(objective_gradient_check(Ablation::default(), input).max_rel);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-4 && secs < 10.0, format!("max rel error {worst:.2e}, {secs:.2} s"))
}

fn routing_correctness() -> Outcome {
    let (mut sum_err, mut diff) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let (s, d) = routing_case(seed);
        sum_err = sum_err.max(s);
        diff = diff.max(d);
    }
    outcome(
        sum_err <= 1e-9 && diff <= 1e-10,
        format!("probability sum error {sum_err:.2e}, oracle mismatch {diff:.2e}"),
    )
}

fn alpha_closed_form() -> Outcome {
    let mut rng = seeded(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(1..=5);
        let j = rng.random_range(1..=6);
        let prior = PriorConfig {
            sigma2_alpha: rng.random_range(0.2..3.0),
            sigma2_h: rng.random_range(0.05..2.0),
        };
        let mus: Vec<Vec<f64>> = (0..m).map(|_| (0..j).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let summaries: Vec<PosteriorSummary> = mus
            .iter()
            .map(|mu| PosteriorSummary {
                mu_hat: vec![mu.clone()],
                var_hat: vec![vec![1.0; j]],
                n: 10,
            })
            .collect();
        let got = update_global_alpha(&summaries, &prior, AlphaMode::Deterministic, 0).unwrap();
        let want = alpha_ascent(&mus, prior.sigma2_h, prior.sigma2_alpha);
        for (a, b) in got.alpha_tilde[0].data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max coordinate error {worst:.2e} over 50 instances"))
}

fn random_gaussian(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> DiagGaussian {
    DiagGaussian::new(
        (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
        (0..dim).map(|_| rng.random_range(0.05..4.0)).collect(),
    )
    .unwrap()
}

fn divergence_identities() -> Outcome {
    let mut rng = seeded(12);
    let mut ok = true;
    let mut asym = 0.0f64;
    for _ in 0..200 {
        let p = random_gaussian(&mut rng, 3);
        let q = random_gaussian(&mut rng, 3);
        for method in [JsMethod::default(), JsMethod::MomentMatched] {
            ok &= kl_diag(&p, &p) == 0.0 && js_divergence(&p, &p, method).unwrap() == 0.0;
            let a = js_divergence(&p, &q, method).unwrap();
            let b = js_divergence(&q, &p, method).unwrap();
            ok &= (0.0..=1.0).contains(&a);
            asym = asym.max((a - b).abs());
        }
    }
    let mut rng = seeded(4);
    let (mut worst, mut worst_mm) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (m1, m2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (v1, v2) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let p = DiagGaussian::new(vec![m1], vec![v1]).unwrap();
        let q = DiagGaussian::new(vec![m2], vec![v2]).unwrap();
        let exact = js_quadrature(m1, v1, m2, v2);
        worst = worst.max((js_divergence(&p, &q, JsMethod::default()).unwrap() - exact).abs());
        worst_mm = worst_mm.max((js_divergence(&p, &q, JsMethod::MomentMatched).unwrap() - exact).abs());
    }
    outcome(
        ok && asym <= 1e-12 && worst <= 0.05,
        format!(
            "identities {}, asymmetry {asym:.1e}, 1-D error {worst:.3} (moment-matched estimator {worst_mm:.3})",
            if ok { "hold" } else { "violated" }
        ),
    )
}

fn federation_algebra() -> Outcome {
    let mut rng = seeded(9);
    let mut row_err = 0.0f64;
    let mut fixed = 0.0f64;
    for m in 1..=6 {
        let s = random_tensor(&mut rng, m, m, 1.0);
        for tau in [0.0, 1.0, 10.0, 100.0] {
            let w = weight_matrix(&s, tau);
            for r in 0..m {
                row_err = row_err.max((w.row_slice(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let one = random_params(&mut rng, 2, 3, 2, 4);
        let beta = vec![weight_matrix(&s, 10.0), weight_matrix(&s, 3.0)];
        for p in separate_federate(&vec![one.clone(); m], &beta).unwrap() {
            fixed = fixed.max(p.max_abs_diff(&one));
        }
    }

    let params: Vec<FederatedParams> = (0..4).map(|_| random_params(&mut rng, 2, 3, 2, 3)).collect();
    let s = random_tensor(&mut rng, 4, 4, 1.0);
    let beta = vec![weight_matrix(&s, 1e-9), weight_matrix(&s, 1e-9)];
    let mut uniform_err = 0.0f64;
    for p in separate_federate(&params, &beta).unwrap() {
        for f in 0..2 {
            let want = weighted_mean(&params.iter().map(|q| &q.weights[f]).collect::<Vec<_>>(), &[0.25; 4]);
            uniform_err = uniform_err.max(p.weights[f].max_abs_diff(&want));
        }
        let want = weighted_mean(&params.iter().map(|q| &q.cls_weight).collect::<Vec<_>>(), &[0.25; 4]);
        uniform_err = uniform_err.max(p.cls_weight.max_abs_diff(&want));
    }

    let params: Vec<FederatedParams> = (0..3).map(|_| random_params(&mut rng, 1, 4, 3, 2)).collect();
    let sep = separate_federate(&params, &[Tensor::filled(3, 3, 1.0 / 3.0)]).unwrap();
    let avg = fedavg(&params, &[7, 7, 7]).unwrap();
    let biases: Vec<Tensor> = params.iter().map(|p| p.cls_bias.clone()).collect();
    let bias = fedavg_bias(&biases, &[7, 7, 7]).unwrap();
    let fedavg_err = sep
        .into_iter()
        .map(|mut p| {
            p.cls_bias = bias.clone();
            p.max_abs_diff(&avg)
        })
        .fold(0.0, f64::max);

    outcome(
        row_err <= 1e-9 && fixed <= 1e-12 && uniform_err <= 1e-6 && fedavg_err <= 1e-10,
        format!(
            "row sums {row_err:.1e}, fixed point {fixed:.1e}, tiny tau {uniform_err:.1e}, FedAvg path {fedavg_err:.1e}"
        ),
    )
}

fn partitioning() -> Outcome {
    let mut failures = Vec::new();
    for case in 0..50u64 {
        let mut rng = seeded(1000 + case);
        let n = rng.random_range(20..120);
        let m = rng.random_range(2..=8);
        let density = rng.random_range(0.02..0.2);
        let g = random_graph(&mut rng, n, 1, 1, density);
        let p = partition_nonoverlapping(&g, m, case).unwrap();
        let mut seen = vec![0usize; n];
        for set in &p.assignments {
            for &id in set {
                seen[id] += 1;
            }
        }
        let limit = (1.3 * n as f64 / m as f64).max((n as f64 / m as f64).ceil());
        let largest = p.sizes().into_iter().max().unwrap_or(0);
        if seen.iter().any(|&c| c != 1) || largest as f64 > limit {
            failures.push(format!("graph {case}"));
        }

        let groups = rng.random_range(1..=3);
        let over = partition_overlapping(&g, 5 * groups, case).unwrap();
        let base = partition_nonoverlapping(&g, groups, case).unwrap();
        let halves = over.m() == 5 * groups
            && over
                .assignments
                .iter()
                .zip(&over.base_part)
                .all(|(set, &b)| set.len() == base.assignments[b].len().div_ceil(2));
        if !halves {
            failures.push(format!("overlapping {case}"));
        }

        let (a, b) = (rng.random_range(3..20), rng.random_range(3..20));
        let mut edges: Vec<(usize, usize)> = (0..a - 1).map(|i| (i, i + 1)).collect();
        edges.extend((a..a + b - 1).map(|i| (i, i + 1)));
        let two = structural_graph(a + b, &edges);
        if a.max(b) <= balance_cap(a + b, 2, DEFAULT_BALANCE) {
            let p = partition_nonoverlapping(&two, 2, case).unwrap();
            if edge_cut(&two, &p).unwrap() != 0 {
                failures.push(format!("two components {a}+{b}"));
            }
        }
    }
    let karate = structural_graph(34, &KARATE);
    let cap = balance_cap(34, 4, DEFAULT_BALANCE);
    let oracle = randomized_greedy_cut(34, &KARATE, 4, cap, 1000);
    let ours = edge_cut(&karate, &partition_nonoverlapping(&karate, 4, 0).unwrap()).unwrap();
    outcome(
        failures.is_empty(),
        format!("50 graphs, failures {failures:?}; karate cut {ours} vs restart oracle {oracle}"),
    )
}

/// Two planted domains spread over five communities, one per client.
fn synthetic_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig::Synthetic(SyntheticSpec {
            n: 300,
            d: 16,
            c: 4,
            relations: vec![RelationSpec { p_in: 0.25, p_out: 0.02 }; 2],
            communities: 5,
            domains: 2,
            p_cross: 0.002,
            noise: 2.0,
            domain_shift: 5.0,
            label_skew: 0.0,
            seed: 7,
        }),
        clients: 5,
        k: 2,
        d_out: 32,
        classifier_input: ClassifierInput::Routed,
        rounds: 30,
        epochs: 5,
        lr: 0.02,
        weight_decay: 5e-4,
        dropout: 0.2,
        lambda_elbo: 0.001,
        seeds: vec![0, 1, 2],
        ..Default::default()
    }
}

fn run(config: &ExperimentConfig, prepared: &Prepared) -> MetricsReport {
    run_prepared(config, prepared).expect("experiment runs").report
}

fn directional(base: &ExperimentConfig, prepared: &Prepared) -> (Outcome, MetricsReport) {
    let start = Instant::now();
    let full = run(base, prepared);
    let fedavg = run(&ExperimentConfig { method: Method::Fedavg, ..base.clone() }, prepared);
    let local = run(&ExperimentConfig { method: Method::Local, ..base.clone() }, prepared);
    let secs = start.elapsed().as_secs_f64();
    let (f, a, l) = (100.0 * full.test_mean, 100.0 * fedavg.test_mean, 100.0 * local.test_mean);
    let pass = f - l >= 2.0 && f - a >= 2.0 && secs < 300.0;
    let detail = format!(
        "FedIIH {f:.2} (+-{:.2}), local {l:.2}, FedAvg {a:.2}; margins {:+.2} / {:+.2}, {secs:.1} s",
        100.0 * full.test_std,
        f - l,
        f - a
    );
    (outcome(pass, detail), full)
}

fn ablations(base: &ExperimentConfig, prepared: &Prepared, full: &MetricsReport) -> Outcome {
    let toggles = [
        ("w/o HM", Ablation { no_hm: true, ..Default::default() }),
        ("w/o VI", Ablation { no_vi: true, ..Default::default() }),
        ("w/o Dis", Ablation { no_dis: true, ..Default::default() }),
    ];
    let mut pass = true;
    let mut parts = vec![format!("full {:.2}", 100.0 * full.test_mean)];
    for (name, ablation) in toggles {
        let report = run(&ExperimentConfig { ablation, ..base.clone() }, prepared);
        pass &= report.test_mean <= full.test_mean;
        parts.push(format!("{name} {:.2}", 100.0 * report.test_mean));
    }
    outcome(pass, parts.join(", "))
}

/// Planted domain of each client: majority domain of its nodes.
fn client_clusters(config: &ExperimentConfig, prepared: &Prepared) -> Vec<usize> {
    let DatasetConfig::Synthetic(spec) = &config.dataset else {
        unreachable!("synthetic config")
    };
    let planted = generate_synthetic_layers(spec).unwrap();
    prepared
        .partition
        .assignments
        .iter()
        .map(|set| {
            let mut counts = vec![0usize; spec.domains];
            for &id in set {
                counts[planted.domain[id]] += 1;
            }
            (0..spec.domains).max_by_key(|&d| counts[d]).unwrap()
        })
        .collect()
}

fn nearest(s: &Tensor, i: usize) -> usize {
    (0..s.rows())
        .filter(|&j| j != i)
        .max_by(|&a, &b| s.get(i, a).total_cmp(&s.get(i, b)))
        .unwrap()
}

fn similarity_sanity(config: &ExperimentConfig, prepared: &Prepared, full: &MetricsReport) -> Outcome {
    let clusters = client_clusters(config, prepared);
    let m = clusters.len();
    let k = config.model_config().k;
    let states: Vec<_> = full.seeds.iter().filter_map(|s| s.similarity.as_ref()).collect();
    if states.is_empty() {
        return outcome(false, "no similarity recorded".into());
    }
    let mut pass = true;
    let mut parts = Vec::new();
    let mut mean_sim = Tensor::zeros(m, m);
    for f in 0..k {
        let (mut within, mut between) = ((0.0, 0), (0.0, 0));
        for state in &states {
            let s = &state.similarity[f];
            for a in 0..m {
                for b in 0..m {
                    if a == b {
                        continue;
                    }
                    let slot = if clusters[a] == clusters[b] { &mut within } else { &mut between };
                    slot.0 += s.get(a, b);
                    slot.1 += 1;
                    mean_sim.set(a, b, mean_sim.get(a, b) + s.get(a, b));
                }
            }
        }
        let (w, b) = (within.0 / within.1.max(1) as f64, between.0 / between.1.max(1) as f64);
        pass &= w > b;
        parts.push(format!("factor {f}: within {w:.3} between {b:.3}"));
    }
    let shards: Vec<_> = prepared.shards.iter().map(|s| s.graph.clone()).collect();
    let truth = ground_truth_similarity(&shards, config.js_method).unwrap();
    let agree = (0..m)
        .filter(|&i| clusters[nearest(&mean_sim, i)] == clusters[nearest(&truth, i)])
        .count();
    let rate = agree as f64 / m as f64;
    pass &= rate >= 0.8;
    parts.push(format!("top-1 cluster agreement {agree}/{m}"));
    outcome(pass, parts.join("; "))
}

/// Standard Cora settings with five non-overlapping clients.
fn cora_config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig::Files {
            edges: dir.join("cora.cites"),
            nodes: dir.join("cora.content"),
            format: GraphFormat::Linqs,
        },
        clients: 5,
        split: SplitRatios {
            train: 0.2,
            val: 0.4,
            test: 0.4,
        },
        k: 2,
        d_out: 128,
        routing: RoutingConfig {
            iterations: 6,
            layers: 4,
            ..Default::default()
        },
        rounds: 100,
        epochs: 1,
        lr: 0.02,
        dropout: 0.3,
        weight_decay: 0.005,
        seeds: vec![0, 1, 2],
        ..Default::default()
    }
}

fn cora_check(dir: PathBuf) -> Outcome {
    let config = cora_config(&dir);
    let prepared = match prepare(&config) {
        Ok(p) => p,
        Err(e) => return outcome(false, format!("could not load {}: {e}", dir.display())),
    };
    let full = run(&config, &prepared);
    let fedavg = run(&ExperimentConfig { method: Method::Fedavg, ..config.clone() }, &prepared);
    let (f, a) = (100.0 * full.test_mean, 100.0 * fedavg.test_mean);
    outcome(f - a >= 3.0, format!("FedIIH {f:.2}, FedAvg {a:.2}, margin {:+.2}", f - a))
}

fn main() -> ExitCode {
    let strict = env::var("FEDIIH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut hard_failures = 0;
    let mut report = |id: usize, name: &str, blocking: bool, o: Outcome| {
        let status = if o.pass { "PASS" } else if blocking { "FAIL" } else { "FAIL (reported)" };
        println!("criterion {id:>2} {status}: {name}: {}", o.detail);
        if !o.pass && blocking {
            hard_failures += 1;
        }
    };
    report(1, "gradient fidelity", true, gradient_fidelity());
    report(2, "routing correctness", true, routing_correctness());
    report(3, "global latent closed form", true, alpha_closed_form());
    report(4, "divergence identities", true, divergence_identities());
    report(5, "federation algebra", true, federation_algebra());
    report(6, "partitioning", true, partitioning());

    let base = synthetic_config();
    let prepared = prepare(&base).expect("synthetic data prepares");
    let (o, full) = directional(&base, &prepared);
    report(7, "end-to-end direction", strict, o);
    report(8, "ablation ordering", strict, ablations(&base, &prepared, &full));
    report(9, "similarity sanity", strict, similarity_sanity(&base, &prepared, &full));

    match env::var_os("FEDIIH_CORA_DIR") {
        Some(dir) => {
            let o = cora_check(PathBuf::from(dir));
            if !o.pass {
                println!("warning: Cora check did not reach its margin");
            }
            report(10, "Cora soft check", false, o);
        }
        None => println!("criterion 10 SKIP: Cora soft check: set FEDIIH_CORA_DIR to a directory with cora.content and cora.cites"),
    }

    if hard_failures > 0 {
        println!("{hard_failures} blocking criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
