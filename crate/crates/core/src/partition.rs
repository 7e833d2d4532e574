//! Client subgraph assignment: a balanced min-cut partitioner, the
//! half-sampling overlapping scheme, and a plain-text partition format.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphData;

pub const DEFAULT_BALANCE: f64 = 1.3;

/// Base parts used by the overlapping scheme per group of this many clients.
pub const CLIENTS_PER_BASE_PART: usize = 5;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("cannot split {n} nodes into {m} parts")]
    PartCount { m: usize, n: usize },
    #[error("overlapping partition needs at least {CLIENTS_PER_BASE_PART} clients, got {0}")]
    TooFewClients(usize),
    #[error("{0} is undefined for an overlapping partition")]
    Overlapping(&'static str),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("partition file lists {found} nodes, graph has {expected}")]
    Length { expected: usize, found: usize },
    #[error("part {0} is empty")]
    EmptyPart(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PartitionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    #[default]
    NonOverlapping,
    Overlapping,
}

/// Node-id sets, one per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub mode: PartitionMode,
    /// Sorted global node ids per client.
    pub assignments: Vec<Vec<usize>>,
    /// Base part each client set was drawn from (identity when non-overlapping).
    pub base_part: Vec<usize>,
}

impl Partition {
    pub fn m(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Part index per local node of `graph`; only defined when non-overlapping.
    pub fn membership(&self, graph: &GraphData) -> Result<Vec<usize>> {
        if self.mode == PartitionMode::Overlapping {
            return Err(PartitionError::Overlapping("membership"));
        }
        let index = graph.index_map();
        let mut part = vec![usize::MAX; graph.n()];
        for (p, ids) in self.assignments.iter().enumerate() {
            for id in ids {
                if let Some(&i) = index.get(id) {
                    part[i] = p;
                }
            }
        }
        Ok(part)
    }

    fn from_membership(graph: &GraphData, part: &[usize], m: usize) -> Self {
        let mut assignments = vec![Vec::new(); m];
        for (i, &p) in part.iter().enumerate() {
            assignments[p].push(graph.node_ids()[i]);
        }
        for a in &mut assignments {
            a.sort_unstable();
        }
        Partition {
            mode: PartitionMode::NonOverlapping,
            assignments,
            base_part: (0..m).collect(),
        }
    }
}

/// Largest part size admitted for `n` nodes in `m` parts.
pub fn balance_cap(n: usize, m: usize, balance: f64) -> usize {
    let ideal = n.div_ceil(m);
    ideal.max((balance * n as f64 / m as f64).floor() as usize)
}

fn multi_source_bfs(adj: &[Vec<usize>], sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Seeds spread out by BFS distance: the first is random, each further seed
/// is a node farthest from those chosen (unreachable counts as farthest).
fn spread_seeds(adj: &[Vec<usize>], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = adj.len();
    let mut seeds = vec![rng.random_range(0..n)];
    while seeds.len() < m {
        let dist = multi_source_bfs(adj, &seeds);
        let far = dist
            .iter()
            .enumerate()
            .filter(|(i, _)| !seeds.contains(i))
            .map(|(_, &d)| d)
            .max()
            .unwrap_or(0);
        let candidates: Vec<usize> = (0..n).filter(|i| dist[*i] == far && !seeds.contains(i)).collect();
        seeds.push(*candidates.choose(rng).expect("m <= n leaves a candidate"));
    }
    seeds
}

/// Greedy region growing: the smallest unfinished part repeatedly absorbs
/// the unassigned node most connected to it.
fn grow(adj: &[Vec<usize>], seeds: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = adj.len();
    let m = seeds.len();
    let target: Vec<usize> = (0..m).map(|p| n / m + usize::from(p < n % m)).collect();
    let mut part = vec![usize::MAX; n];
    let mut size = vec![0usize; m];
    let mut conn = vec![vec![0usize; n]; m];
    let assign = |v: usize, p: usize, part: &mut Vec<usize>, size: &mut Vec<usize>, conn: &mut Vec<Vec<usize>>| {
        part[v] = p;
        size[p] += 1;
        for &w in &adj[v] {
            conn[p][w] += 1;
        }
    };
    for (p, &s) in seeds.iter().enumerate() {
        assign(s, p, &mut part, &mut size, &mut conn);
    }
    let mut remaining = n - m;
    while remaining > 0 {
        let p = (0..m)
            .filter(|&p| size[p] < target[p])
            .min_by_key(|&p| (size[p], p))
            .expect("targets sum to n");
        let best = (0..n)
            .filter(|&v| part[v] == usize::MAX)
            .max_by_key(|&v| (conn[p][v], std::cmp::Reverse(v)));
        let v = match best {
            Some(v) if conn[p][v] > 0 => v,
            _ => {
                let free: Vec<usize> = (0..n).filter(|&v| part[v] == usize::MAX).collect();
                *free.choose(rng).expect("remaining > 0")
            }
        };
        assign(v, p, &mut part, &mut size, &mut conn);
        remaining -= 1;
    }
    part
}

fn links(adj: &[Vec<usize>], part: &[usize], v: usize, p: usize) -> usize {
    adj[v].iter().filter(|&&w| w != v && part[w] == p).count()
}

/// Boundary refinement: single-node moves and pairwise swaps that strictly
/// reduce the cut while respecting the size cap, until none remains.
fn refine(adj: &[Vec<usize>], part: &mut [usize], m: usize, cap: usize) {
    let n = adj.len();
    let mut size = vec![0usize; m];
    for &p in part.iter() {
        size[p] += 1;
    }
    for _pass in 0..100 {
        let mut improved = false;
        for v in 0..n {
            let from = part[v];
            if size[from] <= 1 {
                continue;
            }
            let own = links(adj, part, v, from);
            let mut best: Option<(usize, usize)> = None;
            for &w in &adj[v] {
                let to = part[w];
                if to == from || size[to] >= cap {
                    continue;
                }
                let gain = links(adj, part, v, to);
                if gain > own && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, to));
                }
            }
            if let Some((_, to)) = best {
                part[v] = to;
                size[from] -= 1;
                size[to] += 1;
                improved = true;
            }
        }
        for u in 0..n {
            let a = part[u];
            let own_u = links(adj, part, u, a) as isize;
            let mut best: Option<(isize, usize)> = None;
            for &x in &adj[u] {
                let b = part[x];
                if b == a {
                    continue;
                }
                let to_b = links(adj, part, u, b) as isize;
                for &v in &adj[u] {
                    if part[v] != b {
                        continue;
                    }
                    let own_v = links(adj, part, v, b) as isize;
                    let to_a = links(adj, part, v, a) as isize;
                    // u and v are adjacent: the edge between them stays cut
                    let gain = (to_b - own_u) + (to_a - own_v) - 2;
                    if gain > 0 && best.is_none_or(|(g, _)| gain > g) {
                        best = Some((gain, v));
                    }
                }
            }
            if let Some((_, v)) = best {
                part.swap(u, v);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

fn components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut i = 0;
        while i < comp.len() {
            for &v in &adj[comp[i]] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                }
            }
            i += 1;
        }
        out.push(comp);
    }
    out
}

/// Whole connected components packed largest-first into the lightest part
/// that still has room; `None` unless every part ends up non-empty.
fn pack_components(adj: &[Vec<usize>], m: usize, cap: usize) -> Option<Vec<usize>> {
    let mut comps = components(adj);
    if comps.len() < m {
        return None;
    }
    comps.sort_by_key(|c| (std::cmp::Reverse(c.len()), c[0]));
    let mut part = vec![0; adj.len()];
    let mut size = vec![0usize; m];
    for comp in comps {
        let p = (0..m).filter(|&p| size[p] + comp.len() <= cap).min_by_key(|&p| (size[p], p))?;
        size[p] += comp.len();
        for v in comp {
            part[v] = p;
        }
    }
    size.iter().all(|&s| s > 0).then_some(part)
}

fn cut_of(adj: &[Vec<usize>], part: &[usize]) -> usize {
    adj.iter()
        .enumerate()
        .flat_map(|(u, ns)| ns.iter().map(move |&v| (u, v)))
        .filter(|&(u, v)| u < v && part[u] != part[v])
        .count()
}

/// Disjoint balanced cover of all nodes with a small edge cut.
pub fn partition_nonoverlapping(graph: &GraphData, m: usize, seed: u64) -> Result<Partition> {
    partition_with_balance(graph, m, seed, DEFAULT_BALANCE)
}

pub fn partition_with_balance(graph: &GraphData, m: usize, seed: u64, balance: f64) -> Result<Partition> {
    let n = graph.n();
    if m == 0 || m > n {
        return Err(PartitionError::PartCount { m, n });
    }
    let adj = graph.adjacency_lists();
    let cap = balance_cap(n, m, balance);
    let part = match pack_components(&adj, m, cap) {
        Some(part) => part,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seeds = spread_seeds(&adj, m, &mut rng);
            let mut part = grow(&adj, &seeds, &mut rng);
            refine(&adj, &mut part, m, cap);
            part
        }
    };
    log::debug!("partitioned {n} nodes into {m} parts, cut {}", cut_of(&adj, &part));
    Ok(Partition::from_membership(graph, &part, m))
}

/// `floor(m / 5)` base parts, each sampled into client sets of half its
/// size. Base part `b` serves five clients, the first `m % 5` base parts one
/// more. Sampling for a base part uses its own RNG stream.
pub fn partition_overlapping(graph: &GraphData, m: usize, seed: u64) -> Result<Partition> {
    if m < CLIENTS_PER_BASE_PART {
        return Err(PartitionError::TooFewClients(m));
    }
    let bases = m / CLIENTS_PER_BASE_PART;
    let base = partition_nonoverlapping(graph, bases, seed)?;
    let mut assignments = Vec::with_capacity(m);
    let mut base_part = Vec::with_capacity(m);
    for (b, ids) in base.assignments.iter().enumerate() {
        let count = CLIENTS_PER_BASE_PART + usize::from(b < m % CLIENTS_PER_BASE_PART);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let half = ids.len().div_ceil(2);
        for _ in 0..count {
            let mut sample: Vec<usize> = ids.choose_multiple(&mut rng, half).copied().collect();
            sample.sort_unstable();
            assignments.push(sample);
            base_part.push(b);
        }
    }
    Ok(Partition {
        mode: PartitionMode::Overlapping,
        assignments,
        base_part,
    })
}

/// Undirected non-loop edges whose endpoints lie in different parts.
pub fn edge_cut(graph: &GraphData, partition: &Partition) -> Result<usize> {
    let part = partition.membership(graph)?;
    Ok(graph
        .undirected_edges()
        .filter(|&(u, v)| part[u] != part[v])
        .count())
}

pub fn save_partition(graph: &GraphData, partition: &Partition, path: &Path) -> Result<()> {
    if partition.mode == PartitionMode::Overlapping {
        return Err(PartitionError::Overlapping("the partition file format"));
    }
    let part = partition.membership(graph)?;
    let mut order: Vec<usize> = (0..graph.n()).collect();
    order.sort_by_key(|&i| graph.node_ids()[i]);
    let mut body = String::new();
    for i in order {
        let _ = writeln!(body, "{}", part[i]);
    }
    fs::write(path, body).map_err(|source| PartitionError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads one part index per line, lines in ascending node-id order.
pub fn load_partition(graph: &GraphData, path: &Path) -> Result<Partition> {
    let text = fs::read_to_string(path).map_err(|source| PartitionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut parts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let p = t.parse::<usize>().map_err(|e| PartitionError::Parse {
            line: line_no,
            msg: format!("{t:?}: {e}"),
        })?;
        parts.push((line_no, p));
    }
    let n = graph.n();
    if parts.len() != n {
        return Err(PartitionError::Length {
            expected: n,
            found: parts.len(),
        });
    }
    let m = parts.iter().map(|&(_, p)| p + 1).max().unwrap_or(0);
    if let Some(&(line, p)) = parts.iter().find(|&&(_, p)| p >= n) {
        return Err(PartitionError::Parse {
            line,
            msg: format!("part index {p} out of range for {n} nodes"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| graph.node_ids()[i]);
    let mut membership = vec![0; n];
    for (&i, &(_, p)) in order.iter().zip(&parts) {
        membership[i] = p;
    }
    let partition = Partition::from_membership(graph, &membership, m);
    if let Some(empty) = partition.assignments.iter().position(Vec::is_empty) {
        return Err(PartitionError::EmptyPart(empty));
    }
    Ok(partition)
}
