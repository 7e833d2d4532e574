//! Server-side aggregation: posterior similarities, softmax federation
//! weights, per-factor weighted averaging and the global latent update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{FederatedParams, PosteriorSummary, PriorConfig};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("variance {0} is not positive")]
    NonPositiveVariance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("client {0} did not upload")]
    MissingClient(usize),
    #[error("no client uploads")]
    NoClients,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ServerError>;

/// A diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(ServerError::Shape(format!("{} means, {} variances", mean.len(), var.len())));
        }
        if let Some(&v) = var.iter().find(|&&v| !(v > 0.0)) {
            return Err(ServerError::NonPositiveVariance(v));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((xi, m), v) in x.iter().zip(&self.mean).zip(&self.var) {
            s += (xi - m) * (xi - m) / v + v.ln();
        }
        -0.5 * (s + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// KL divergence in nats between diagonal Gaussians.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    p.mean
        .iter()
        .zip(&p.var)
        .zip(q.mean.iter().zip(&q.var))
        .map(|((mp, vp), (mq, vq))| 0.5 * ((vq / vp).ln() + (vp + (mp - mq).powi(2)) / vq - 1.0))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JsMethod {
    /// Expectation estimated with exact mixture densities on a fixed set of
    /// standard-normal draws shared by both arguments.
    MonteCarlo { samples: usize, seed: u64 },
    /// Closed form against a single Gaussian fitted to the mixture's moments.
    MomentMatched,
}

impl Default for JsMethod {
    fn default() -> Self {
        JsMethod::MonteCarlo {
            samples: 8192,
            seed: 0x5eed,
        }
    }
}

/// Base-2 Jensen-Shannon divergence between diagonal Gaussians, in `[0, 1]`.
pub fn js_divergence(p: &DiagGaussian, q: &DiagGaussian, method: JsMethod) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(ServerError::Shape(format!("dimensions {} and {}", p.dim(), q.dim())));
    }
    for g in [p, q] {
        if let Some(&v) = g.var.iter().find(|&&v| !(v > 0.0)) {
            return Err(ServerError::NonPositiveVariance(v));
        }
    }
    if p == q {
        return Ok(0.0);
    }
    let js = match method {
        JsMethod::MomentMatched => {
            let mean: Vec<f64> = p.mean.iter().zip(&q.mean).map(|(a, b)| 0.5 * (a + b)).collect();
            let var: Vec<f64> = p
                .var
                .iter()
                .zip(&q.var)
                .zip(p.mean.iter().zip(&q.mean))
                .map(|((vp, vq), (mp, mq))| 0.5 * (vp + vq) + (0.5 * (mp - mq)).powi(2))
                .collect();
            let mix = DiagGaussian { mean, var };
            (0.5 * kl_diag(p, &mix) + 0.5 * kl_diag(q, &mix)) / std::f64::consts::LN_2
        }
        JsMethod::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = p.dim();
            let mut z = vec![0.0; d];
            let mut xp = vec![0.0; d];
            let mut xq = vec![0.0; d];
            let (mut acc_p, mut acc_q) = (0.0, 0.0);
            for _ in 0..samples.max(1) {
                for i in 0..d {
                    z[i] = rng.sample(StandardNormal);
                    xp[i] = p.mean[i] + p.var[i].sqrt() * z[i];
                    xq[i] = q.mean[i] + q.var[i].sqrt() * z[i];
                }
                // log2(2p / (p + q)) = 1 - log2(1 + q/p)
                acc_p += 1.0 - softplus(q.log_density(&xp) - p.log_density(&xp)) / std::f64::consts::LN_2;
                acc_q += 1.0 - softplus(p.log_density(&xq) - q.log_density(&xq)) / std::f64::consts::LN_2;
            }
            let s = samples.max(1) as f64;
            0.5 * (acc_p / s) + 0.5 * (acc_q / s)
        }
    };
    Ok(js.clamp(0.0, 1.0))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn factor_gaussian(s: &PosteriorSummary, k: usize) -> Result<DiagGaussian> {
    DiagGaussian::new(s.mu_hat[k].clone(), s.var_hat[k].clone())
}

/// Per-factor `M x M` similarity `1 - JS`, symmetric with unit diagonal.
pub fn similarity_matrix(summaries: &[PosteriorSummary], method: JsMethod) -> Result<Vec<Tensor>> {
    let m = summaries.len();
    let k = summaries.first().ok_or(ServerError::NoClients)?.k();
    if let Some(bad) = summaries.iter().position(|s| s.k() != k) {
        return Err(ServerError::Shape(format!("client {bad} has {} factors, expected {k}", summaries[bad].k())));
    }
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let gs = summaries.iter().map(|s| factor_gaussian(s, f)).collect::<Result<Vec<_>>>()?;
        let mut s = Tensor::filled(m, m, 1.0);
        for a in 0..m {
            for b in a + 1..m {
                let v = 1.0 - js_divergence(&gs[a], &gs[b], method)?;
                s.set(a, b, v);
                s.set(b, a, v);
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Softmax of `tau * s_row` with max-subtraction.
pub fn federation_weights(s_row: &[f64], tau: f64) -> Vec<f64> {
    let max = s_row.iter().map(|s| tau * s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s_row.iter().map(|s| (tau * s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Row-wise [`federation_weights`] of a similarity matrix.
pub fn weight_matrix(s: &Tensor, tau: f64) -> Tensor {
    let (m, _) = s.shape();
    let mut out = Tensor::zeros(m, m);
    for r in 0..m {
        for (c, w) in federation_weights(s.row_slice(r), tau).into_iter().enumerate() {
            out.set(r, c, w);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityState {
    pub similarity: Vec<Tensor>,
    pub beta: Vec<Tensor>,
}

impl SimilarityState {
    pub fn compute(summaries: &[PosteriorSummary], method: JsMethod, tau: f64) -> Result<Self> {
        let similarity = similarity_matrix(summaries, method)?;
        let beta = similarity.iter().map(|s| weight_matrix(s, tau)).collect();
        Ok(Self { similarity, beta })
    }
}

fn check_shapes(params: &[FederatedParams]) -> Result<()> {
    let first = params.first().ok_or(ServerError::NoClients)?;
    for (i, p) in params.iter().enumerate() {
        let same = p.k() == first.k()
            && p.tensors().iter().zip(first.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(ServerError::Shape(format!("client {i} parameters differ in shape from client 0")));
        }
    }
    Ok(())
}

/// `sum_j w_j t_j` for weights summing to one, written as `t_a + sum_j w_j
/// (t_j - t_a)` around the heaviest input `a`, so identical inputs and
/// one-hot weights come back bit-for-bit.
fn combine<'a>(tensors: impl Iterator<Item = &'a Tensor>, weights: &[f64]) -> Tensor {
    let tensors: Vec<&Tensor> = tensors.collect();
    let heaviest = (0..tensors.len().min(weights.len()))
        .max_by(|&x, &y| weights[x].total_cmp(&weights[y]))
        .expect("at least one tensor");
    let anchor = tensors[heaviest];
    let mut out = anchor.clone();
    for (t, &w) in tensors.iter().zip(weights) {
        for ((o, v), a) in out.data_mut().iter_mut().zip(t.data()).zip(anchor.data()) {
            *o += w * (v - a);
        }
    }
    out
}

/// Per-factor weighted averaging of projection blocks and classifier column
/// blocks. Classifier biases are left untouched.
pub fn separate_federate(params: &[FederatedParams], beta: &[Tensor]) -> Result<Vec<FederatedParams>> {
    check_shapes(params)?;
    let m = params.len();
    let k = params[0].k();
    if beta.len() != k || beta.iter().any(|b| b.shape() != (m, m)) {
        return Err(ServerError::Shape(format!("need {k} weight matrices of shape {m}x{m}")));
    }
    let j = params[0].weights[0].cols();
    let mut out = Vec::with_capacity(m);
    for target in 0..m {
        let mut fp = params[target].clone();
        for f in 0..k {
            let w = beta[f].row_slice(target);
            fp.weights[f] = combine(params.iter().map(|p| &p.weights[f]), w);
            fp.biases[f] = combine(params.iter().map(|p| &p.biases[f]), w);
            let blocks: Vec<Tensor> = params.iter().map(|p| p.cls_weight.col_block(f * j, j)).collect();
            fp.cls_weight.set_col_block(f * j, &combine(blocks.iter(), w))?;
        }
        out.push(fp);
    }
    Ok(out)
}

fn size_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| s as f64 / total.max(1) as f64).collect()
}

/// Size-weighted mean of classifier biases.
pub fn fedavg_bias(biases: &[Tensor], sizes: &[usize]) -> Result<Tensor> {
    if biases.is_empty() {
        return Err(ServerError::NoClients);
    }
    if biases.len() != sizes.len() || biases.iter().any(|b| b.shape() != biases[0].shape()) {
        return Err(ServerError::Shape("bias shapes or size count differ".into()));
    }
    Ok(combine(biases.iter(), &size_weights(sizes)))
}

/// Size-weighted mean of every federated tensor.
pub fn fedavg(params: &[FederatedParams], sizes: &[usize]) -> Result<FederatedParams> {
    check_shapes(params)?;
    if sizes.len() != params.len() {
        return Err(ServerError::Shape("one size per client required".into()));
    }
    let w = size_weights(sizes);
    let k = params[0].k();
    Ok(FederatedParams {
        weights: (0..k).map(|f| combine(params.iter().map(|p| &p.weights[f]), &w)).collect(),
        biases: (0..k).map(|f| combine(params.iter().map(|p| &p.biases[f]), &w)).collect(),
        cls_weight: combine(params.iter().map(|p| &p.cls_weight), &w),
        cls_bias: combine(params.iter().map(|p| &p.cls_bias), &w),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    #[default]
    Deterministic,
    /// One draw from a unit-variance Gaussian around the closed form.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalLatent {
    pub alpha_tilde: Vec<Tensor>,
}

impl GlobalLatent {
    pub fn zeros(k: usize, j: usize) -> Self {
        Self {
            alpha_tilde: (0..k).map(|_| Tensor::zeros(1, j)).collect(),
        }
    }
}

/// `alpha_k = sum_m mu_hat_m,k / (M + sigma2_h / sigma2_alpha)`, optionally
/// perturbed by a seeded standard-normal draw.
pub fn update_global_alpha(
    summaries: &[PosteriorSummary],
    prior: &PriorConfig,
    mode: AlphaMode,
    seed: u64,
) -> Result<GlobalLatent> {
    let first = summaries.first().ok_or(ServerError::NoClients)?;
    let denom = summaries.len() as f64 + prior.sigma2_h / prior.sigma2_alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha_tilde = Vec::with_capacity(first.k());
    for f in 0..first.k() {
        let j = first.mu_hat[f].len();
        let mut sum = vec![0.0; j];
        for (i, s) in summaries.iter().enumerate() {
            if s.k() != first.k() || s.mu_hat[f].len() != j {
                return Err(ServerError::Shape(format!("client {i} summary shape differs")));
            }
            for (acc, v) in sum.iter_mut().zip(&s.mu_hat[f]) {
                *acc += v;
            }
        }
        let mut row: Vec<f64> = sum.into_iter().map(|v| v / denom).collect();
        if mode == AlphaMode::Sampled {
            for v in &mut row {
                *v += rng.sample::<f64, _>(StandardNormal);
            }
        }
        alpha_tilde.push(Tensor::row(&row));
    }
    Ok(GlobalLatent { alpha_tilde })
}

/// Unwraps a full set of uploads, naming the first absent client.
pub fn collect_uploads<T: Clone>(uploads: &[Option<T>]) -> Result<Vec<T>> {
    uploads
        .iter()
        .enumerate()
        .map(|(i, u)| u.clone().ok_or(ServerError::MissingClient(i)))
        .collect()
}
