//! Disentangled encoder: per-factor subspace projection, neighborhood
//! routing, factor concatenation and the log-sigma head.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tape, Tensor, TensorError, Var, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.01)
    }
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::LeakyRelu(slope) => x.leaky_relu(slope),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    /// Assignment/aggregation iterations per layer.
    pub iterations: usize,
    pub layers: usize,
    pub tau_p: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            layers: 1,
            tau_p: 1.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.layers == 0 || !(self.tau_p > 0.0) {
            return Err(TensorError::Invalid {
                op: "routing",
                msg: format!("need iterations >= 1, layers >= 1, tau_p > 0: {self:?}"),
            });
        }
        Ok(())
    }
}

/// Per-factor projection blocks `W[k]: d x J`, `b[k]: 1 x J` with `J = d_out / K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl FactorizedParams {
    pub fn new<R: Rng + ?Sized>(d: usize, d_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || !d_out.is_multiple_of(k) {
            return Err(TensorError::Invalid {
                op: "factorized_params",
                msg: format!("d_out {d_out} is not divisible by K {k}"),
            });
        }
        let j = d_out / k;
        Ok(Self {
            weights: (0..k).map(|_| Tensor::glorot(d, j, rng).with_grad()).collect(),
            biases: (0..k).map(|_| Tensor::zeros(1, j).with_grad()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn block_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn d_in(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn d_out(&self) -> usize {
        self.k() * self.block_dim()
    }
}

/// Local affine maps `J -> J` per factor producing log standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaHead {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl SigmaHead {
    pub fn new<R: Rng + ?Sized>(k: usize, j: usize, rng: &mut R) -> Self {
        Self {
            weights: (0..k).map(|_| Tensor::randn(j, j, 0.1, rng).with_grad()).collect(),
            biases: (0..k).map(|_| Tensor::zeros(1, j).with_grad()).collect(),
        }
    }

    /// All-zero head, so every sigma is exactly one.
    pub fn zero(k: usize, j: usize) -> Self {
        Self {
            weights: (0..k).map(|_| Tensor::zeros(j, j).with_grad()).collect(),
            biases: (0..k).map(|_| Tensor::zeros(1, j).with_grad()).collect(),
        }
    }
}

/// Directed adjacency entries: node `src[e]` aggregates from `dst[e]`.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub n: usize,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
}

impl EdgeIndex {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        Self {
            n,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// `act(X W[k] + b[k])`, rows L2-normalized, for each factor.
pub fn project<'t>(x: Var<'t>, weights: &[Var<'t>], biases: &[Var<'t>], act: Activation) -> Result<Vec<Var<'t>>> {
    if weights.len() != biases.len() {
        return Err(TensorError::Invalid {
            op: "project",
            msg: format!("{} weights but {} biases", weights.len(), biases.len()),
        });
    }
    weights
        .iter()
        .zip(biases)
        .map(|(w, b)| Ok(act.apply(x.matmul(w)?.add_row(b)?).row_l2_normalize(NORM_EPS)))
        .collect()
}

/// Routed factor outputs and the factor-assignment probabilities of every
/// iteration (one `E x K` matrix per iteration, layers concatenated).
pub struct Routed<'t> {
    pub c: Vec<Var<'t>>,
    pub probabilities: Vec<Tensor>,
}

fn route_layer<'t>(z: &[Var<'t>], edges: &EdgeIndex, iterations: usize, tau_p: f64, trace: &mut Vec<Tensor>) -> Result<Vec<Var<'t>>> {
    if edges.is_empty() {
        return Ok(z.iter().map(|zk| zk.row_l2_normalize(NORM_EPS)).collect());
    }
    let width = z[0].shape().1;
    let neighbor: Vec<Var<'t>> = z
        .iter()
        .map(|zk| zk.gather_rows(edges.dst.clone()))
        .collect::<Result<_>>()?;
    let mut c: Vec<Var<'t>> = z.to_vec();
    for _ in 0..iterations {
        let scores = neighbor
            .iter()
            .zip(&c)
            .map(|(zv, ck)| Ok(zv.mul(&ck.gather_rows(edges.src.clone())?)?.row_sum().scale(1.0 / tau_p)))
            .collect::<Result<Vec<_>>>()?;
        let p = Var::concat_cols(&scores)?.row_softmax();
        trace.push(p.value());
        c = neighbor
            .iter()
            .zip(z)
            .enumerate()
            .map(|(k, (zv, zk))| {
                let weighted = p.slice_cols(k, 1)?.broadcast_cols(width)?.mul(zv)?;
                Ok(weighted
                    .scatter_add_rows(edges.src.clone(), edges.n)?
                    .add(zk)?
                    .row_l2_normalize(NORM_EPS))
            })
            .collect::<Result<_>>()?;
    }
    Ok(c)
}

/// Neighborhood routing over `layers` stacked blocks; each block starts its
/// assignment from the block input and feeds its output to the next.
pub fn route<'t>(z: &[Var<'t>], edges: &EdgeIndex, config: &RoutingConfig) -> Result<Routed<'t>> {
    config.validate()?;
    let mut probabilities = Vec::new();
    let mut current = z.to_vec();
    for _ in 0..config.layers {
        current = route_layer(&current, edges, config.iterations, config.tau_p, &mut probabilities)?;
    }
    Ok(Routed {
        c: current,
        probabilities,
    })
}

/// Column concatenation of equally tall factor blocks.
pub fn concat_factors(blocks: &[Tensor]) -> Result<Tensor> {
    let rows = blocks.first().map_or(0, Tensor::rows);
    if let Some(b) = blocks.iter().find(|b| b.rows() != rows) {
        return Err(TensorError::Shape {
            op: "concat_factors",
            lhs: (rows, 0),
            rhs: b.shape(),
        });
    }
    let cols: usize = blocks.iter().map(Tensor::cols).sum();
    let mut out = Tensor::zeros(rows, cols);
    let mut offset = 0;
    for b in blocks {
        out.set_col_block(offset, b)?;
        offset += b.cols();
    }
    Ok(out)
}

/// Splits `h` into `k` equal column blocks.
pub fn split_factors(h: &Tensor, k: usize) -> Vec<Tensor> {
    let j = h.cols() / k;
    (0..k).map(|i| h.col_block(i * j, j)).collect()
}

/// Mean and log-sigma branches of the encoder. Both share the projection
/// and routing; the sigma branch adds the per-factor head.
pub struct Encoded<'t> {
    pub z: Vec<Var<'t>>,
    pub mu: Vec<Var<'t>>,
    pub log_sigma: Vec<Var<'t>>,
    pub probabilities: Vec<Tensor>,
}

pub struct EncoderVars<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
    pub sigma_weights: Vec<Var<'t>>,
    pub sigma_biases: Vec<Var<'t>>,
}

impl<'t> EncoderVars<'t> {
    pub fn record(tape: &'t Tape, params: &FactorizedParams, head: &SigmaHead) -> Self {
        let leaves = |ts: &[Tensor]| ts.iter().map(|t| tape.leaf(t)).collect();
        Self {
            weights: leaves(&params.weights),
            biases: leaves(&params.biases),
            sigma_weights: leaves(&head.weights),
            sigma_biases: leaves(&head.biases),
        }
    }
}

/// Projection, a per-factor transform of the projected blocks (dropout), routing
/// and the sigma head.
pub fn encode<'t>(
    x: Var<'t>,
    vars: &EncoderVars<'t>,
    edges: &EdgeIndex,
    act: Activation,
    routing: &RoutingConfig,
    transform: impl Fn(usize, Var<'t>) -> Result<Var<'t>>,
) -> Result<Encoded<'t>> {
    let z = project(x, &vars.weights, &vars.biases, act)?
        .into_iter()
        .enumerate()
        .map(|(k, z)| transform(k, z))
        .collect::<Result<Vec<_>>>()?;
    let routed = route(&z, edges, routing)?;
    let log_sigma = routed
        .c
        .iter()
        .zip(vars.sigma_weights.iter().zip(&vars.sigma_biases))
        .map(|(c, (w, b))| c.matmul(w)?.add_row(b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        z,
        mu: routed.c,
        log_sigma,
        probabilities: routed.probabilities,
    })
}

/// Value-only encoder pass returning `(H_mu[k], H_sigma[k])`.
pub fn encode_mu_sigma(
    x: &Tensor,
    params: &FactorizedParams,
    head: &SigmaHead,
    edges: &EdgeIndex,
    act: Activation,
    routing: &RoutingConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = EncoderVars::record(&tape, params, head);
    let enc = encode(tape.constant(x), &vars, edges, act, routing, |_, z| Ok(z))?;
    let mu = enc.mu.iter().map(Var::value).collect();
    let sigma = enc.log_sigma.iter().map(|l| l.value().map(f64::exp)).collect();
    Ok((mu, sigma))
}
