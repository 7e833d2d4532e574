use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphData, GraphError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.2, 0.4, 0.4)
    }
}

/// Disjoint train/val/test membership flags, one entry per node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// Masks restricted to local indices `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> SplitMasks {
        let pick = |m: &[bool]| idx.iter().map(|&i| m[i]).collect();
        SplitMasks {
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
        }
    }

    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn is_disjoint(&self) -> bool {
        (0..self.len()).all(|i| {
            usize::from(self.train[i]) + usize::from(self.val[i]) + usize::from(self.test[i]) <= 1
        })
    }
}

/// Splits `total` across groups in proportion to `sizes` so the parts sum
/// to `total` exactly and each part is within one of its exact share.
fn largest_remainder(sizes: &[usize], frac: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * frac).collect();
    let mut alloc: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(&e, &s)| (e.floor() as usize).min(s))
        .collect();
    let mut remaining = total.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while remaining > 0 {
        let before = remaining;
        for &c in &order {
            if remaining == 0 {
                break;
            }
            if alloc[c] < sizes[c] {
                alloc[c] += 1;
                remaining -= 1;
            }
        }
        if before == remaining {
            break;
        }
    }
    alloc
}

/// Stratified random train/val/test assignment.
///
/// Global counts are `round(ratio * n)` (the test count absorbs rounding when
/// the ratios sum to one); each class receives its proportional share by
/// largest remainder.
pub fn make_splits(graph: &GraphData, ratios: SplitRatios, seed: u64) -> Result<SplitMasks> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r) || r.is_nan()) {
        return Err(GraphError::Split(format!("ratios must lie in [0, 1]: {ratios:?}")));
    }
    let sum = train + val + test;
    if sum > 1.0 + 1e-9 {
        return Err(GraphError::Split(format!("ratios sum to {sum} > 1")));
    }
    let n = graph.n();
    let c = graph.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in graph.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    if train > 0.0 {
        for (class, members) in by_class.iter().enumerate() {
            if !members.is_empty() && (members.len() as f64) * train < 1.0 - 1e-9 {
                return Err(GraphError::Split(format!(
                    "class {class} has {} nodes, fewer than the {} needed for one training sample",
                    members.len(),
                    (1.0 / train).ceil()
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let n_train = (train * n as f64).round() as usize;
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let n_test = if (sum - 1.0).abs() < 1e-9 {
        n - n_train - n_val
    } else {
        ((test * n as f64).round() as usize).min(n - n_train - n_val)
    };

    let train_alloc = largest_remainder(&sizes, train, n_train);
    let left: Vec<usize> = sizes.iter().zip(&train_alloc).map(|(s, t)| s - t).collect();
    let rest = 1.0 - train;
    let val_frac = if rest > 0.0 { val / rest } else { 0.0 };
    let val_alloc = largest_remainder(&left, val_frac, n_val);
    let left2: Vec<usize> = left.iter().zip(&val_alloc).map(|(s, v)| s - v).collect();
    let rest2 = 1.0 - train - val;
    let test_frac = if rest2 > 0.0 { (test / rest2).min(1.0) } else { 0.0 };
    let test_alloc = largest_remainder(&left2, test_frac, n_test);

    let mut masks = SplitMasks {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    for (class, members) in by_class.iter().enumerate() {
        let (t, v, s) = (train_alloc[class], val_alloc[class], test_alloc[class]);
        for &i in &members[..t] {
            masks.train[i] = true;
        }
        for &i in &members[t..t + v] {
            masks.val[i] = true;
        }
        for &i in &members[t + v..t + v + s] {
            masks.test[i] = true;
        }
    }
    Ok(masks)
}
