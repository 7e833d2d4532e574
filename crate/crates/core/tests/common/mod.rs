//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fediih::client::{
    build_loss, Ablation, ClassifierInput, ClientData, ClientModel, FederatedParams, ModelConfig, ModelVars, Noise,
    PriorConfig,
    TrainConfig,
};
use fediih::encoder::{route, EdgeIndex, RoutingConfig};
use fediih::graph::{make_splits, GraphData, SplitRatios};
use fediih::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst finite-difference mismatch over all parameter entries.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `eval` around `params`; `eval` returns the loss
/// value and analytic gradients aligned with its input.
pub fn check_gradients(params: &[Tensor], h: f64, eval: impl Fn(&[Tensor]) -> (f64, Vec<Tensor>)) -> GradCheck {
    let (_, analytic) = eval(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut worst = GradCheck {
        max_rel: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (plus, _) = eval(&work);
            work[p].data_mut()[i] = orig - h;
            let (minus, _) = eval(&work);
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let rel = rel_error(a, numeric);
            worst.entries += 1;
            if rel > worst.max_rel {
                worst = GradCheck {
                    max_rel: rel,
                    param: p,
                    index: i,
                    analytic: a,
                    numeric,
                    entries: worst.entries,
                };
            }
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Undirected random graph with Gaussian features and round-robin labels.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, p: f64) -> GraphData {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let features = random_tensor(rng, n, d, 1.0);
    GraphData::new(features, edges, (0..n).map(|i| i % c).collect(), c, (0..n).collect()).unwrap()
}

pub fn client_data(graph: GraphData, seed: u64) -> ClientData {
    let ratios = SplitRatios {
        train: 0.5,
        val: 0.25,
        test: 0.25,
    };
    let masks = make_splits(&graph, ratios, seed).unwrap();
    ClientData::new(graph, masks, false)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (norm + 1e-12)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar-loop routing: `z[k][u]` is the unit-normalized block of node `u`,
/// node `src` aggregates from `dst`. Returns the outputs and, per iteration,
/// the `edges x K` neighbor-factor probabilities.
pub fn routing_oracle(
    z: &[Vec<Vec<f64>>],
    edges: &[(usize, usize)],
    iterations: usize,
    layers: usize,
    tau_p: f64,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let k = z.len();
    let n = z[0].len();
    let mut input: Vec<Vec<Vec<f64>>> = z.to_vec();
    let mut trace = Vec::new();
    for _ in 0..layers {
        if edges.is_empty() {
            input = input.iter().map(|zk| zk.iter().map(|r| normalize(r)).collect()).collect();
            continue;
        }
        let mut c = input.clone();
        for _ in 0..iterations {
            let mut probs = Vec::with_capacity(edges.len());
            for &(u, v) in edges {
                let scores: Vec<f64> = (0..k).map(|f| dot(&input[f][v], &c[f][u]) / tau_p).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                probs.push(exps.iter().map(|e| e / total).collect::<Vec<f64>>());
            }
            let mut next = input.clone();
            for f in 0..k {
                for (e, &(u, v)) in edges.iter().enumerate() {
                    for j in 0..next[f][u].len() {
                        next[f][u][j] += probs[e][f] * input[f][v][j];
                    }
                }
                for u in 0..n {
                    next[f][u] = normalize(&next[f][u]);
                }
            }
            c = next;
            trace.push(probs);
        }
        input = c;
    }
    (input, trace)
}

/// Numerical maximizer of the concave global-latent objective
/// `-sum_m |mu_m - a|^2 / s2h - |a|^2 / s2a`, by gradient ascent per coordinate.
pub fn alpha_ascent(mu_hats: &[Vec<f64>], s2h: f64, s2a: f64) -> Vec<f64> {
    let j = mu_hats[0].len();
    let mut a = vec![0.0; j];
    let m = mu_hats.len() as f64;
    let curvature = 2.0 * m / s2h + 2.0 / s2a;
    let step = 0.5 / curvature;
    for _ in 0..10_000 {
        let mut moved = 0.0f64;
        for c in 0..j {
            let grad: f64 = mu_hats.iter().map(|mu| 2.0 * (mu[c] - a[c]) / s2h).sum::<f64>() - 2.0 * a[c] / s2a;
            a[c] += step * grad;
            moved = moved.max((step * grad).abs());
        }
        if moved < 1e-15 {
            break;
        }
    }
    a
}

fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Base-2 JS divergence between 1-D Gaussians by composite Simpson quadrature.
pub fn js_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let s = v1.sqrt().max(v2.sqrt());
    let lo = m1.min(m2) - 12.0 * s;
    let hi = m1.max(m2) + 12.0 * s;
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let f = |x: f64| {
        let p = gaussian_pdf(x, m1, v1);
        let q = gaussian_pdf(x, m2, v2);
        let m = 0.5 * (p + q);
        let term = |a: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
        0.5 * term(p) + 0.5 * term(q)
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

/// Weighted average of equally shaped tensors.
pub fn weighted_mean(ts: &[&Tensor], w: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(ts[0].rows(), ts[0].cols());
    for (t, &wi) in ts.iter().zip(w) {
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += wi * v;
        }
    }
    out
}

pub fn model_config(input: ClassifierInput) -> ModelConfig {
    ModelConfig {
        k: 2,
        d_out: 8,
        routing: RoutingConfig {
            iterations: 2,
            layers: 1,
            tau_p: 1.0,
        },
        classifier_input: input,
        ..Default::default()
    }
}

/// Finite-difference check of the full local objective with fixed noise.
pub fn objective_gradient_check(ablation: Ablation, input: ClassifierInput) -> GradCheck {
    let mut rng = seeded(21);
    let data: ClientData = client_data(random_graph(&mut rng, 12, 5, 3, 0.3), 4);
    let cfg = model_config(input);
    let mut model = ClientModel::new(5, 3, &cfg, &mut rng).unwrap();
    for a in &mut model.alpha_hat {
        *a = random_tensor(&mut rng, 1, 4, 0.5).with_grad();
    }
    let alpha_tilde: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, 1, 4, 0.5)).collect();
    let noise = Noise::sample(12, 2, 4, 0.25, &mut rng);
    let train = TrainConfig {
        lambda_elbo: 1.0,
        ablation,
        ..Default::default()
    };
    let prior = PriorConfig::default();
    let names = model.param_names();
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    check_gradients(&params, 1e-5, |p| {
        let named = names.iter().cloned().zip(p.iter().cloned()).collect();
        let m = ClientModel::from_named(named).unwrap();
        let tape = Tape::new();
        let vars = ModelVars::record(&tape, &m);
        let fwd = build_loss(&tape, &vars, &data, &alpha_tilde, &prior, &cfg, &train, &noise).unwrap();
        let value = fwd.total.item();
        let grads = tape.backward(fwd.total).unwrap();
        let g = vars
            .all()
            .iter()
            .zip(p)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        (value, g)
    })
}

pub fn unit_blocks(rng: &mut rand_chacha::ChaCha8Rng, k: usize, n: usize, j: usize) -> Vec<Tensor> {
    (0..k)
        .map(|_| {
            let t = random_tensor(rng, n, j, 1.0);
            let tape = Tape::new();
            tape.constant(&t).row_l2_normalize(1e-12).value()
        })
        .collect()
}

pub fn as_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Routing on a random graph checked against the scalar-loop transcription.
pub fn routing_case(seed: u64) -> (f64, f64) {
    let mut rng = seeded(seed);
    let n = rng.random_range(1..=10);
    let k = rng.random_range(1..=3);
    let j = rng.random_range(1..=4);
    let graph = random_graph(&mut rng, n, 2, 1, 0.4);
    let cfg = RoutingConfig {
        iterations: rng.random_range(1..=4),
        layers: rng.random_range(1..=2),
        tau_p: rng.random_range(0.5..2.0),
    };
    let z = unit_blocks(&mut rng, k, n, j);
    let tape = Tape::new();
    let vars: Vec<Var> = z.iter().map(|t| tape.constant(t)).collect();
    let edges = EdgeIndex::new(n, graph.edges());
    let routed = route(&vars, &edges, &cfg).unwrap();
    let zs: Vec<Vec<Vec<f64>>> = z.iter().map(as_rows).collect();
    let (want, trace) = routing_oracle(&zs, graph.edges(), cfg.iterations, cfg.layers, cfg.tau_p);

    let mut max_sum_err = 0.0f64;
    let mut max_diff = 0.0f64;
    assert_eq!(routed.probabilities.len(), trace.len());
    for (p, q) in routed.probabilities.iter().zip(&trace) {
        for e in 0..p.rows() {
            max_sum_err = max_sum_err.max((p.row_slice(e).iter().sum::<f64>() - 1.0).abs());
            for f in 0..k {
                max_diff = max_diff.max((p.get(e, f) - q[e][f]).abs());
            }
        }
    }
    for (c, w) in routed.c.iter().zip(&want) {
        let got = c.value();
        for (r, row) in w.iter().enumerate() {
            for (col, v) in row.iter().enumerate() {
                max_diff = max_diff.max((got.get(r, col) - v).abs());
            }
        }
    }
    (max_sum_err, max_diff)
}


pub const KARATE: [(usize, usize); 78] = [
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8), (0, 10), (0, 11), (0, 12), (0, 13),
    (0, 17), (0, 19), (0, 21), (0, 31), (1, 2), (1, 3), (1, 7), (1, 13), (1, 17), (1, 19), (1, 21), (1, 30),
    (2, 3), (2, 7), (2, 8), (2, 9), (2, 13), (2, 27), (2, 28), (2, 32), (3, 7), (3, 12), (3, 13), (4, 6),
    (4, 10), (5, 6), (5, 10), (5, 16), (6, 16), (8, 30), (8, 32), (8, 33), (9, 33), (13, 33), (14, 32),
    (14, 33), (15, 32), (15, 33), (18, 32), (18, 33), (19, 33), (20, 32), (20, 33), (22, 32), (22, 33),
    (23, 25), (23, 27), (23, 29), (23, 32), (23, 33), (24, 25), (24, 27), (24, 31), (25, 31), (26, 29),
    (26, 33), (27, 33), (28, 31), (28, 33), (29, 32), (29, 33), (30, 32), (30, 33), (31, 32), (31, 33),
    (32, 33),
];

pub fn structural_graph(n: usize, edges: &[(usize, usize)]) -> GraphData {
    GraphData::new(Tensor::zeros(n, 1), edges.iter().copied(), vec![0; n], 1, (0..n).collect()).unwrap()
}

pub fn cut_of(edges: &[(usize, usize)], part: &[usize]) -> usize {
    edges.iter().filter(|(u, v)| part[*u] != part[*v]).count()
}

/// Best cut over random balanced starts, each improved by single-node moves
/// until no improving move fits under the size cap.
pub fn randomized_greedy_cut(n: usize, edges: &[(usize, usize)], m: usize, cap: usize, restarts: usize) -> usize {
    let mut rng = seeded(99);
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut best = usize::MAX;
    for _ in 0..restarts {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut part = vec![0; n];
        for (i, &v) in order.iter().enumerate() {
            part[v] = i % m;
        }
        let mut sizes = vec![0; m];
        for &p in &part {
            sizes[p] += 1;
        }
        loop {
            let mut improved = false;
            for v in 0..n {
                let mut links = vec![0i64; m];
                for &u in &adj[v] {
                    links[part[u]] += 1;
                }
                let from = part[v];
                let target = (0..m)
                    .filter(|&t| t != from && sizes[t] < cap && sizes[from] > 1)
                    .max_by_key(|&t| (links[t], std::cmp::Reverse(t)));
                if let Some(t) = target {
                    if links[t] > links[from] {
                        part[v] = t;
                        sizes[from] -= 1;
                        sizes[t] += 1;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        best = best.min(cut_of(edges, &part));
    }
    best
}

pub fn random_params(rng: &mut ChaCha8Rng, k: usize, d: usize, j: usize, c: usize) -> FederatedParams {
    FederatedParams {
        weights: (0..k).map(|_| random_tensor(rng, d, j, 1.0)).collect(),
        biases: (0..k).map(|_| random_tensor(rng, 1, j, 1.0)).collect(),
        cls_weight: random_tensor(rng, c, k * j, 1.0),
        cls_bias: random_tensor(rng, 1, c, 1.0),
    }
}

