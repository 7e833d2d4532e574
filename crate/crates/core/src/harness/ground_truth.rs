use crate::graph::GraphData;
use crate::server::{js_divergence, DiagGaussian, JsMethod, Result};
use crate::tensor::Tensor;

use crate::client::VAR_FLOOR;

/// Diagonal Gaussian fitted to a shard's rows of `[features, degree / (n - 1)]`.
pub fn shard_gaussian(shard: &GraphData) -> Result<DiagGaussian> {
    let n = shard.n();
    let d = shard.d();
    let degrees = shard.degrees();
    let norm = (n.max(2) - 1) as f64;
    let row = |i: usize| -> Vec<f64> {
        let mut r = shard.features().row_slice(i).to_vec();
        r.push(degrees[i] as f64 / norm);
        r
    };
    let mut mean = vec![0.0; d + 1];
    let mut second = vec![0.0; d + 1];
    for i in 0..n {
        for (c, v) in row(i).into_iter().enumerate() {
            mean[c] += v;
            second[c] += v * v;
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    let mean: Vec<f64> = mean.into_iter().map(|v| v * inv).collect();
    let var = second
        .into_iter()
        .zip(&mean)
        .map(|(s, m)| (s * inv - m * m).max(VAR_FLOOR))
        .collect();
    DiagGaussian::new(mean, var)
}

/// `1 - JS` between per-shard feature/degree Gaussians; unit diagonal.
pub fn ground_truth_similarity(shards: &[GraphData], method: JsMethod) -> Result<Tensor> {
    let gs = shards.iter().map(shard_gaussian).collect::<Result<Vec<_>>>()?;
    let m = gs.len();
    let mut s = Tensor::filled(m, m, 1.0);
    for a in 0..m {
        for b in a + 1..m {
            let v = 1.0 - js_divergence(&gs[a], &gs[b], method)?;
            s.set(a, b, v);
            s.set(b, a, v);
        }
    }
    Ok(s)
}
