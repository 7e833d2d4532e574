use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GraphData, GraphError, Result};
use crate::tensor::Tensor;

/// Connection probabilities of one relation type: `p_in` between nodes in
/// the same block of that relation, `p_out` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub p_in: f64,
    pub p_out: f64,
}

/// Parameters of the multi-relation block model.
///
/// Relation 0 blocks nodes by class label; every further relation blocks
/// them by an independent random group in `0..c`. Edges are drawn only
/// inside a community (contiguous node ranges), plus `p_cross` between
/// communities. Community `q` belongs to domain `q % domains`; a domain
/// rotates which class prototype its nodes express and adds its own offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub relations: Vec<RelationSpec>,
    pub communities: usize,
    pub domains: usize,
    pub p_cross: f64,
    pub noise: f64,
    pub domain_shift: f64,
    /// Probability that a node takes its community's dominant class instead
    /// of a uniform label.
    pub label_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 100,
            d: 16,
            c: 3,
            relations: vec![
                RelationSpec { p_in: 0.2, p_out: 0.01 },
                RelationSpec { p_in: 0.2, p_out: 0.01 },
            ],
            communities: 1,
            domains: 1,
            p_cross: 0.0,
            noise: 1.0,
            domain_shift: 0.0,
            label_skew: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn k_true(&self) -> usize {
        self.relations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GraphError::Validation(msg));
        if self.n == 0 || self.c == 0 {
            return bad("n and c must be positive".into());
        }
        if self.relations.is_empty() {
            return bad("at least one relation type is required".into());
        }
        if self.communities == 0 || self.communities > self.n {
            return bad(format!("communities must lie in 1..={}", self.n));
        }
        if self.domains == 0 {
            return bad("domains must be positive".into());
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        for (t, r) in self.relations.iter().enumerate() {
            if !unit(r.p_in) || !unit(r.p_out) {
                return bad(format!("relation {t} probabilities outside [0, 1]"));
            }
        }
        if !unit(self.p_cross) || !unit(self.label_skew) {
            return bad("p_cross and label_skew must lie in [0, 1]".into());
        }
        if !(self.noise >= 0.0) || !(self.domain_shift >= 0.0) {
            return bad("noise and domain_shift must be non-negative".into());
        }
        Ok(())
    }
}

/// A generated graph together with its planted structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGraph {
    pub graph: GraphData,
    /// Undirected within-community edges `(u, v)`, `u < v`, per relation.
    pub layers: Vec<Vec<(usize, usize)>>,
    pub cross_edges: Vec<(usize, usize)>,
    pub community: Vec<usize>,
    pub domain: Vec<usize>,
    /// Block membership per relation; row 0 equals the labels.
    pub groups: Vec<Vec<usize>>,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GraphData> {
    generate_synthetic_layers(spec).map(|s| s.graph)
}

pub fn generate_synthetic_layers(spec: &SyntheticSpec) -> Result<SyntheticGraph> {
    spec.validate()?;
    let SyntheticSpec { n, d, c, .. } = *spec;
    let k = spec.k_true();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let community: Vec<usize> = (0..n).map(|i| i * spec.communities / n).collect();
    let domain: Vec<usize> = community.iter().map(|q| q % spec.domains).collect();

    let labels: Vec<usize> = community
        .iter()
        .map(|&q| {
            if rng.random::<f64>() < spec.label_skew {
                q % c
            } else {
                rng.random_range(0..c)
            }
        })
        .collect();
    let mut groups = vec![labels.clone()];
    for _ in 1..k {
        groups.push((0..n).map(|_| rng.random_range(0..c)).collect());
    }

    let class_proto = gaussian_rows(&mut rng, c, d);
    let group_proto: Vec<Vec<Vec<f64>>> = (1..k).map(|_| gaussian_rows(&mut rng, c, d)).collect();
    let domain_offset = gaussian_rows(&mut rng, spec.domains, d);

    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let proto = &class_proto[(labels[i] + domain[i]) % c];
        for j in 0..d {
            let mut x = proto[j] + spec.domain_shift * domain_offset[domain[i]][j];
            for (t, g) in group_proto.iter().enumerate() {
                x += g[groups[t + 1][i]][j];
            }
            let z: f64 = rng.sample(StandardNormal);
            data.push(x + spec.noise * z);
        }
    }
    let features = Tensor::new(n, d, data).map_err(|e| GraphError::Validation(e.to_string()))?;

    let mut layers = vec![Vec::new(); k];
    let mut cross_edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if community[u] == community[v] {
                for (t, rel) in spec.relations.iter().enumerate() {
                    let p = if groups[t][u] == groups[t][v] { rel.p_in } else { rel.p_out };
                    if rng.random::<f64>() < p {
                        layers[t].push((u, v));
                    }
                }
            } else if rng.random::<f64>() < spec.p_cross {
                cross_edges.push((u, v));
            }
        }
    }

    let all = layers.iter().flatten().chain(&cross_edges).copied().collect::<Vec<_>>();
    let graph = GraphData::new(features, all, labels, c, (0..n).collect())?;
    Ok(SyntheticGraph {
        graph,
        layers,
        cross_edges,
        community,
        domain,
        groups,
    })
}
