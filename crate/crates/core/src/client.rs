//! Per-client variational model: classifier, reparameterized latents,
//! reconstruction likelihood, prior terms and the local training step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, Activation, EdgeIndex, EncoderVars, FactorizedParams, RoutingConfig, SigmaHead};
use crate::graph::{GraphData, SplitMasks};
use crate::tensor::{Adam, Tape, Tensor, TensorError, Var};

/// Reconstruction logits are clamped to this magnitude before the log-sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Floor applied to uploaded posterior variances.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask selects no nodes")]
    EmptyMask,
    #[error("non-finite {term}: {value}")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Concatenated projected embeddings, before routing.
    #[default]
    Projected,
    /// Concatenated routed embeddings.
    Routed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Variance of the global-latent prior.
    pub sigma2_alpha: f64,
    /// Variance of the node latents around the global latent.
    pub sigma2_h: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma2_alpha: 1.0,
            sigma2_h: 0.25,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_alpha > 0.0 && self.sigma2_h > 0.0) {
            return Err(ClientError::Config(format!("prior variances must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Fix the global latent at zero and drop the global-latent terms.
    pub no_hm: bool,
    /// Use the posterior mean instead of a sample and drop the latent KL.
    pub no_vi: bool,
    /// Collapse to a single factor.
    pub no_dis: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub k: usize,
    pub d_out: usize,
    pub routing: RoutingConfig,
    pub activation: Activation,
    pub classifier_input: ClassifierInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 2,
            d_out: 16,
            routing: RoutingConfig::default(),
            activation: Activation::default(),
            classifier_input: ClassifierInput::default(),
        }
    }
}

impl ModelConfig {
    pub fn block_dim(&self) -> usize {
        self.d_out / self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_out == 0 || !self.d_out.is_multiple_of(self.k) {
            return Err(ClientError::Config(format!(
                "d_out {} must be a positive multiple of K {}",
                self.d_out, self.k
            )));
        }
        self.routing.validate()?;
        Ok(())
    }

    /// The configuration actually trained under `ablation`.
    pub fn effective(&self, ablation: &Ablation) -> ModelConfig {
        let mut cfg = *self;
        if ablation.no_dis {
            cfg.k = 1;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Weight of the negative evidence lower bound relative to cross-entropy.
    pub lambda_elbo: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 0.0,
            dropout: 0.0,
            lambda_elbo: 1.0,
            ablation: Ablation::default(),
        }
    }
}

/// The parameters shared with the server: projection blocks and the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// `c x d_out`; column block `k` belongs to factor `k`.
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

impl FederatedParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.weights.iter().chain(&self.biases).collect();
        out.push(&self.cls_weight);
        out.push(&self.cls_bias);
        out
    }

    /// Largest elementwise difference over all tensors.
    pub fn max_abs_diff(&self, other: &FederatedParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub factorized: FactorizedParams,
    pub sigma_head: SigmaHead,
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
    pub alpha_hat: Vec<Tensor>,
}

impl ClientModel {
    pub fn new<R: Rng + ?Sized>(d: usize, c: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let j = cfg.block_dim();
        Ok(Self {
            factorized: FactorizedParams::new(d, cfg.d_out, cfg.k, rng)?,
            sigma_head: SigmaHead::new(cfg.k, j, rng),
            cls_weight: Tensor::glorot(c, cfg.d_out, rng).with_grad(),
            cls_bias: Tensor::zeros(1, c).with_grad(),
            alpha_hat: (0..cfg.k).map(|_| Tensor::zeros(1, j).with_grad()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.factorized.k()
    }

    pub fn param_names(&self) -> Vec<String> {
        let k = self.k();
        let mut names = Vec::new();
        names.extend((0..k).map(|i| format!("factor{i}.weight")));
        names.extend((0..k).map(|i| format!("factor{i}.bias")));
        names.extend((0..k).map(|i| format!("sigma{i}.weight")));
        names.extend((0..k).map(|i| format!("sigma{i}.bias")));
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names.extend((0..k).map(|i| format!("alpha_hat{i}")));
        names
    }

    /// Every trainable tensor, in [`ClientModel::param_names`] order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(&self.factorized.weights);
        out.extend(&self.factorized.biases);
        out.extend(&self.sigma_head.weights);
        out.extend(&self.sigma_head.biases);
        out.push(&self.cls_weight);
        out.push(&self.cls_bias);
        out.extend(&self.alpha_hat);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(&mut self.factorized.weights);
        out.extend(&mut self.factorized.biases);
        out.extend(&mut self.sigma_head.weights);
        out.extend(&mut self.sigma_head.biases);
        out.push(&mut self.cls_weight);
        out.push(&mut self.cls_bias);
        out.extend(&mut self.alpha_hat);
        out
    }

    /// Rebuilds a model from named tensors as produced by `param_names`.
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let k = named.iter().filter(|(n, _)| n.ends_with(".weight") && n.starts_with("factor")).count();
        let mut model = ClientModel {
            factorized: FactorizedParams {
                weights: vec![Tensor::zeros(0, 0); k],
                biases: vec![Tensor::zeros(0, 0); k],
            },
            sigma_head: SigmaHead {
                weights: vec![Tensor::zeros(0, 0); k],
                biases: vec![Tensor::zeros(0, 0); k],
            },
            cls_weight: Tensor::zeros(0, 0),
            cls_bias: Tensor::zeros(0, 0),
            alpha_hat: vec![Tensor::zeros(0, 0); k],
        };
        let expected = model.param_names();
        if named.len() != expected.len() {
            return Err(ClientError::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let pos = expected
                .iter()
                .position(|e| *e == name)
                .ok_or_else(|| ClientError::Config(format!("unexpected tensor {name}")))?;
            *model.params_mut()[pos] = tensor.with_grad();
        }
        Ok(model)
    }

    pub fn federated(&self) -> FederatedParams {
        FederatedParams {
            weights: self.factorized.weights.clone(),
            biases: self.factorized.biases.clone(),
            cls_weight: self.cls_weight.clone(),
            cls_bias: self.cls_bias.clone(),
        }
    }

    pub fn set_federated(&mut self, p: &FederatedParams) -> Result<()> {
        if p.k() != self.k() || p.cls_weight.shape() != self.cls_weight.shape() {
            return Err(ClientError::Config("federated parameter shapes do not match the model".into()));
        }
        let copy = |dst: &mut Tensor, src: &Tensor| {
            *dst = src.clone().with_grad();
        };
        for (dst, src) in self.factorized.weights.iter_mut().zip(&p.weights) {
            copy(dst, src);
        }
        for (dst, src) in self.factorized.biases.iter_mut().zip(&p.biases) {
            copy(dst, src);
        }
        copy(&mut self.cls_weight, &p.cls_weight);
        copy(&mut self.cls_bias, &p.cls_bias);
        Ok(())
    }
}

/// A client's local shard with cached structures.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub graph: GraphData,
    pub masks: SplitMasks,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor,
}

impl ClientData {
    pub fn new(graph: GraphData, masks: SplitMasks, add_self_loops: bool) -> Self {
        let graph = if add_self_loops { graph.with_self_loops() } else { graph };
        let n = graph.n();
        let mut adjacency = Tensor::zeros(n, n);
        for &(u, v) in graph.edges() {
            adjacency.set(u, v, 1.0);
        }
        Self {
            edges: graph.edges().to_vec(),
            graph,
            masks,
            adjacency,
        }
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn edge_index(&self) -> EdgeIndex {
        EdgeIndex::new(self.n(), &self.edges)
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    /// Log-likelihood of the adjacency (a non-positive number).
    pub reconstruction: f64,
    pub kl_latent: f64,
    pub alpha_log_prior: f64,
    pub alpha_kl: f64,
    pub total: f64,
}

/// Per-factor diagonal Gaussian summary of a client's node posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mu_hat: Vec<Vec<f64>>,
    pub var_hat: Vec<Vec<f64>>,
    pub n: usize,
}

impl PosteriorSummary {
    pub fn k(&self) -> usize {
        self.mu_hat.len()
    }
}

/// `mu + sigma * eps`, elementwise.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    for other in [sigma, eps] {
        if other.shape() != mu.shape() {
            return Err(TensorError::Shape {
                op: "reparameterize",
                lhs: mu.shape(),
                rhs: other.shape(),
            }
            .into());
        }
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(Tensor::new(mu.rows(), mu.cols(), data)?)
}

/// `sum_ij A_ij log s(r_i.r_j) + (1 - A_ij) log(1 - s(r_i.r_j))` over all ordered pairs.
pub fn reconstruction_loglik<'t>(h: Var<'t>, adjacency: Var<'t>) -> Result<Var<'t>> {
    let logits = h.matmul(&h.transpose())?.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let (n, _) = adjacency.shape();
    let ones = h_constant(h, &Tensor::filled(n, n, 1.0));
    let pos = adjacency.mul(&logits.log_sigmoid())?;
    let neg = ones.sub(&adjacency)?.mul(&logits.scale(-1.0).log_sigmoid())?;
    Ok(pos.add(&neg)?.sum())
}

fn h_constant<'t>(like: Var<'t>, t: &Tensor) -> Var<'t> {
    like.tape().constant(t)
}

/// Node-averaged KL between `N(mu_i, sigma_i^2)` rows and `N(alpha, sigma2_h I)`.
pub fn kl_latent<'t>(mu: Var<'t>, log_sigma: Var<'t>, alpha: Var<'t>, prior: &PriorConfig) -> Result<Var<'t>> {
    let (n, _) = mu.shape();
    let diff = mu.sub(&alpha_rows(alpha, n)?)?;
    let var_ratio = log_sigma.scale(2.0).exp().scale(1.0 / prior.sigma2_h);
    let per = var_ratio
        .add(&diff.mul(&diff)?.scale(1.0 / prior.sigma2_h))?
        .sub(&log_sigma.scale(2.0))?
        .add_scalar(prior.sigma2_h.ln() - 1.0)
        .scale(0.5);
    Ok(per.sum().scale(1.0 / n.max(1) as f64))
}

fn alpha_rows<'t>(alpha: Var<'t>, n: usize) -> Result<Var<'t>> {
    let (_, j) = alpha.shape();
    Ok(h_constant(alpha, &Tensor::zeros(n, j)).add_row(&alpha)?)
}

/// Value-level latent KL from `(H_mu, H_sigma)`.
pub fn kl_latent_value(mu: &Tensor, sigma: &Tensor, alpha: &Tensor, prior: &PriorConfig) -> Result<f64> {
    let tape = Tape::new();
    let log_sigma = sigma.map(f64::ln);
    Ok(kl_latent(tape.constant(mu), tape.constant(&log_sigma), tape.constant(alpha), prior)?.item())
}

/// `sum_k log N(alpha_hat_k; 0, sigma2_alpha I)`.
pub fn alpha_log_prior<'t>(alpha_hat: &[Var<'t>], prior: &PriorConfig) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for a in alpha_hat {
        let j = a.shape().1 as f64;
        let term = a
            .mul(a)?
            .sum()
            .scale(-0.5 / prior.sigma2_alpha)
            .add_scalar(-0.5 * j * (2.0 * std::f64::consts::PI * prior.sigma2_alpha).ln());
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| ClientError::Config("no factors".into()))
}

/// `sum_k 0.5 * |alpha_hat_k - alpha_tilde_k|^2`.
pub fn alpha_kl<'t>(alpha_hat: &[Var<'t>], alpha_tilde: &[Var<'t>]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (a, t) in alpha_hat.iter().zip(alpha_tilde) {
        let d = a.sub(t)?;
        let term = d.mul(&d)?.sum().scale(0.5);
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| ClientError::Config("no factors".into()))
}

/// `(alpha_log_prior, alpha_kl)` for plain tensors.
pub fn alpha_terms(alpha_hat: &[Tensor], alpha_tilde: &[Tensor], prior: &PriorConfig) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let hat: Vec<_> = alpha_hat.iter().map(|t| tape.constant(t)).collect();
    let tilde: Vec<_> = alpha_tilde.iter().map(|t| tape.constant(t)).collect();
    Ok((alpha_log_prior(&hat, prior)?.item(), alpha_kl(&hat, &tilde)?.item()))
}

/// `H W^T + b`.
pub fn classify<'t>(h: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    Ok(h.matmul(&weight.transpose())?.add_row(&bias)?)
}

/// Mean negative log-softmax of the true class over masked rows.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], mask: &[bool]) -> Result<Var<'t>> {
    let (n, c) = logits.shape();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ClientError::EmptyMask);
    }
    let mut pick = Tensor::zeros(n, c);
    for i in (0..n).filter(|&i| mask[i]) {
        pick.set(i, labels[i], -1.0 / count as f64);
    }
    let pick = h_constant(logits, &pick);
    Ok(logits.row_log_softmax().mul(&pick)?.sum())
}

/// Moment-matched diagonal Gaussian of the per-node posteriors of each factor.
pub fn summarize_posterior(mu: &[Tensor], sigma: &[Tensor]) -> PosteriorSummary {
    let n = mu.first().map_or(0, Tensor::rows);
    let mut mu_hat = Vec::with_capacity(mu.len());
    let mut var_hat = Vec::with_capacity(mu.len());
    for (m, s) in mu.iter().zip(sigma) {
        let j = m.cols();
        let mut mean = vec![0.0; j];
        let mut second = vec![0.0; j];
        for i in 0..n {
            for c in 0..j {
                let (mv, sv) = (m.get(i, c), s.get(i, c));
                mean[c] += mv;
                second[c] += sv * sv + mv * mv;
            }
        }
        let inv = 1.0 / n.max(1) as f64;
        let mean: Vec<f64> = mean.iter().map(|v| v * inv).collect();
        let var = second
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s * inv - m * m).max(VAR_FLOOR))
            .collect();
        mu_hat.push(mean);
        var_hat.push(var);
    }
    PosteriorSummary { mu_hat, var_hat, n }
}

/// Tape handles for every model parameter, in [`ClientModel::params`] order.
pub struct ModelVars<'t> {
    pub encoder: EncoderVars<'t>,
    pub cls_weight: Var<'t>,
    pub cls_bias: Var<'t>,
    pub alpha_hat: Vec<Var<'t>>,
}

impl<'t> ModelVars<'t> {
    pub fn record(tape: &'t Tape, model: &ClientModel) -> Self {
        Self {
            encoder: EncoderVars::record(tape, &model.factorized, &model.sigma_head),
            cls_weight: tape.leaf(&model.cls_weight),
            cls_bias: tape.leaf(&model.cls_bias),
            alpha_hat: model.alpha_hat.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        let e = &self.encoder;
        let mut out = Vec::new();
        out.extend(&e.weights);
        out.extend(&e.biases);
        out.extend(&e.sigma_weights);
        out.extend(&e.sigma_biases);
        out.push(self.cls_weight);
        out.push(self.cls_bias);
        out.extend(&self.alpha_hat);
        out
    }
}

/// Random draws of one training pass: dropout masks and latent noise.
pub struct Noise {
    pub dropout: Vec<Tensor>,
    pub eps: Vec<Tensor>,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(n: usize, k: usize, j: usize, dropout: f64, rng: &mut R) -> Self {
        let keep = 1.0 - dropout;
        let dropout = (0..k)
            .map(|_| {
                let data = (0..n * j)
                    .map(|_| if dropout > 0.0 && rng.random::<f64>() >= keep { 0.0 } else { 1.0 / keep })
                    .collect();
                Tensor::new(n, j, data).expect("sized buffer")
            })
            .collect();
        let eps = (0..k).map(|_| Tensor::randn(n, j, 1.0, rng)).collect();
        Self { dropout, eps }
    }

    /// No dropout and zero latent noise.
    pub fn none(n: usize, k: usize, j: usize) -> Self {
        Self {
            dropout: (0..k).map(|_| Tensor::filled(n, j, 1.0)).collect(),
            eps: (0..k).map(|_| Tensor::zeros(n, j)).collect(),
        }
    }
}

pub struct Forward<'t> {
    pub total: Var<'t>,
    pub logits: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Builds the full local objective on `tape`:
/// `CE + lambda * (kl_latent + alpha_kl - reconstruction - alpha_log_prior)`.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    data: &ClientData,
    alpha_tilde: &[Tensor],
    prior: &PriorConfig,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    noise: &Noise,
) -> Result<Forward<'t>> {
    let ablation = train.ablation;
    let edges = data.edge_index();
    let x = tape.constant(data.graph.features());
    let masks: Vec<Var<'t>> = noise.dropout.iter().map(|m| tape.constant(m)).collect();
    let enc = encode(x, &vars.encoder, &edges, model_cfg.activation, &model_cfg.routing, |k, z| {
        z.mul(&masks[k])
    })?;

    let cls_in = match model_cfg.classifier_input {
        ClassifierInput::Projected => Var::concat_cols(&enc.z)?,
        ClassifierInput::Routed => Var::concat_cols(&enc.mu)?,
    };
    let logits = classify(cls_in, vars.cls_weight, vars.cls_bias)?;
    let ce = cross_entropy(logits, data.graph.labels(), &data.masks.train)?;

    let h_tilde: Vec<Var<'t>> = if ablation.no_vi {
        enc.mu.clone()
    } else {
        enc.mu
            .iter()
            .zip(&enc.log_sigma)
            .zip(&noise.eps)
            .map(|((mu, ls), eps)| Ok(mu.add(&ls.exp().mul(&tape.constant(eps))?)?))
            .collect::<Result<_>>()?
    };
    let recon = reconstruction_loglik(Var::concat_cols(&h_tilde)?, tape.constant(data.adjacency()))?;

    let zero_alpha: Vec<Tensor>;
    let alpha_src = if ablation.no_hm {
        zero_alpha = alpha_tilde.iter().map(|a| Tensor::zeros(a.rows(), a.cols())).collect();
        &zero_alpha
    } else {
        alpha_tilde
    };
    if alpha_src.len() != enc.mu.len() {
        return Err(ClientError::Config(format!(
            "{} global latents for {} factors",
            alpha_src.len(),
            enc.mu.len()
        )));
    }
    let alpha_vars: Vec<Var<'t>> = alpha_src.iter().map(|a| tape.constant(a)).collect();

    let mut elbo_neg = recon.scale(-1.0);
    let mut breakdown = LossBreakdown {
        cross_entropy: ce.item(),
        reconstruction: recon.item(),
        ..Default::default()
    };
    if !ablation.no_vi {
        let mut kl: Option<Var<'t>> = None;
        for ((mu, ls), a) in enc.mu.iter().zip(&enc.log_sigma).zip(&alpha_vars) {
            let term = kl_latent(*mu, *ls, *a, prior)?;
            kl = Some(match kl {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let kl = kl.expect("at least one factor");
        breakdown.kl_latent = kl.item();
        elbo_neg = elbo_neg.add(&kl)?;
    }
    if !ablation.no_hm {
        let log_prior = alpha_log_prior(&vars.alpha_hat, prior)?;
        let akl = alpha_kl(&vars.alpha_hat, &alpha_vars)?;
        breakdown.alpha_log_prior = log_prior.item();
        breakdown.alpha_kl = akl.item();
        elbo_neg = elbo_neg.add(&akl)?.sub(&log_prior)?;
    }
    let total = ce.add(&elbo_neg.scale(train.lambda_elbo))?;
    breakdown.total = total.item();

    for (term, value) in [
        ("cross_entropy", breakdown.cross_entropy),
        ("reconstruction", breakdown.reconstruction),
        ("kl_latent", breakdown.kl_latent),
        ("alpha_log_prior", breakdown.alpha_log_prior),
        ("alpha_kl", breakdown.alpha_kl),
        ("total", breakdown.total),
    ] {
        if !value.is_finite() {
            return Err(ClientError::NonFinite { term, value });
        }
    }
    Ok(Forward {
        total,
        logits,
        breakdown,
    })
}

/// One full-graph optimizer step on the local objective.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut ClientModel,
    optimizer: &mut Adam,
    data: &ClientData,
    alpha_tilde: &[Tensor],
    prior: &PriorConfig,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = Noise::sample(data.n(), model.k(), model_cfg.block_dim(), train.dropout, rng);
    let tape = Tape::new();
    let vars = ModelVars::record(&tape, model);
    let fwd = build_loss(&tape, &vars, data, alpha_tilde, prior, model_cfg, train, &noise)?;
    let grads = tape.backward(fwd.total)?;
    let all = vars.all();
    let mut params = model.params_mut();
    for (p, v) in params.iter_mut().zip(&all) {
        match grads.get(*v) {
            Some(g) => p.accumulate_grad(g)?,
            None => p.accumulate_grad(&Tensor::zeros(p.rows(), p.cols()))?,
        }
    }
    optimizer.step(&mut params)?;
    Ok(fwd.breakdown)
}

/// Deterministic forward pass: class logits and the posterior branches.
pub struct Evaluation {
    pub logits: Tensor,
    pub mu: Vec<Tensor>,
    pub sigma: Vec<Tensor>,
}

pub fn evaluate(model: &ClientModel, data: &ClientData, model_cfg: &ModelConfig) -> Result<Evaluation> {
    let tape = Tape::new();
    let vars = ModelVars::record(&tape, model);
    let enc = encode(
        tape.constant(data.graph.features()),
        &vars.encoder,
        &data.edge_index(),
        model_cfg.activation,
        &model_cfg.routing,
        |_, z| Ok(z),
    )?;
    let cls_in = match model_cfg.classifier_input {
        ClassifierInput::Projected => Var::concat_cols(&enc.z)?,
        ClassifierInput::Routed => Var::concat_cols(&enc.mu)?,
    };
    let logits = classify(cls_in, vars.cls_weight, vars.cls_bias)?.value();
    Ok(Evaluation {
        logits,
        mu: enc.mu.iter().map(Var::value).collect(),
        sigma: enc.log_sigma.iter().map(|l| l.value().map(f64::exp)).collect(),
    })
}
