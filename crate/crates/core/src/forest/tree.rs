//! CART classification tree on bootstrap samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::FeatureMatrix;

pub(crate) const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Node {
    /// Split feature, or `LEAF`.
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Class index voted by a leaf.
    pub value: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tree {
    pub nodes: Vec<Node>,
}

pub(crate) struct TreeParams {
    pub n_classes: usize,
    pub mtry: usize,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    /// Range of each feature over the full training set.
    pub feature_range: Vec<f64>,
}

struct Split {
    feature: usize,
    threshold: f64,
    /// Sum of n * gini over both children; lower is better.
    score: f64,
    /// Gap between the straddling values relative to the feature's training
    /// range; breaks exact score ties independently of column order.
    gap: f64,
}

fn majority(counts: &[usize]) -> u32 {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best as u32
}

/// n * gini(counts) = n - Σ c² / n.
fn weighted_gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    n as f64 - sq / n as f64
}

impl Tree {
    pub fn fit_bootstrap(
        x: &FeatureMatrix,
        y: &[u32],
        params: &TreeParams,
        rng: &mut ChaCha8Rng,
    ) -> Tree {
        let n = x.n_rows();
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        Tree::fit_indices(x, y, sample, params, rng)
    }

    pub fn fit_indices(
        x: &FeatureMatrix,
        y: &[u32],
        root: Vec<usize>,
        params: &TreeParams,
        rng: &mut ChaCha8Rng,
    ) -> Tree {
        let mut nodes = Vec::new();
        // (node slot, sample indices, depth)
        let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        nodes.push(Node {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            value: 0,
        });
        stack.push((0, root, 0));
        let mut features: Vec<usize> = (0..x.dim()).collect();
        while let Some((slot, idx, depth)) = stack.pop() {
            let mut counts = vec![0usize; params.n_classes];
            for &i in &idx {
                counts[y[i] as usize] += 1;
            }
            nodes[slot].value = majority(&counts);
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let depth_done = params.max_depth.is_some_and(|d| depth >= d);
            if pure || depth_done || idx.len() < 2 * params.min_samples_leaf {
                continue;
            }
            let Some(split) = best_split(x, y, &idx, &counts, params, &mut features, rng) else {
                continue;
            };
            let (left, right): (Vec<usize>, Vec<usize>) = idx
                .iter()
                .partition(|&&i| x.get(i, split.feature) <= split.threshold);
            let l = nodes.len();
            for _ in 0..2 {
                nodes.push(Node {
                    feature: LEAF,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value: 0,
                });
            }
            nodes[slot].feature = split.feature as u32;
            nodes[slot].threshold = split.threshold;
            nodes[slot].left = l as u32;
            nodes[slot].right = (l + 1) as u32;
            stack.push((l + 1, right, depth + 1));
            stack.push((l, left, depth + 1));
        }
        Tree { nodes }
    }

    pub fn predict(&self, row: &[f64]) -> u32 {
        let mut k = 0;
        loop {
            let node = &self.nodes[k];
            if node.feature == LEAF {
                return node.value;
            }
            k = if row[node.feature as usize] <= node.threshold {
                node.left
            } else {
                node.right
            } as usize;
        }
    }
}

/// Visits features in random order and evaluates them until `mtry`
/// non-constant ones have been tried; constant features do not count.
fn best_split(
    x: &FeatureMatrix,
    y: &[u32],
    idx: &[usize],
    counts: &[usize],
    params: &TreeParams,
    features: &mut [usize],
    rng: &mut ChaCha8Rng,
) -> Option<Split> {
    let d = features.len();
    let n = idx.len();
    let parent = weighted_gini(counts, n);
    let mut best: Option<Split> = None;
    let mut tried = 0;
    let mut order: Vec<(f64, u32)> = Vec::with_capacity(n);
    for k in 0..d {
        if tried >= params.mtry {
            break;
        }
        let j = rng.random_range(k..d);
        features.swap(k, j);
        let f = features[k];
        order.clear();
        order.extend(idx.iter().map(|&i| (x.get(i, f), y[i])));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        if order[0].0 == order[n - 1].0 {
            continue;
        }
        tried += 1;
        let range = params.feature_range[f];
        let mut left = vec![0usize; params.n_classes];
        let mut right = counts.to_vec();
        for s in 0..n - 1 {
            let c = order[s].1 as usize;
            left[c] += 1;
            right[c] -= 1;
            let (v, next) = (order[s].0, order[s + 1].0);
            if v == next {
                continue;
            }
            let nl = s + 1;
            let nr = n - nl;
            if nl < params.min_samples_leaf || nr < params.min_samples_leaf {
                continue;
            }
            let score = weighted_gini(&left, nl) + weighted_gini(&right, nr);
            let gap = (next - v) / range;
            let better = best
                .as_ref()
                .is_none_or(|b| score < b.score || (score == b.score && gap > b.gap));
            if score < parent - 1e-12 && better {
                let mut threshold = v + (next - v) / 2.0;
                if threshold >= next {
                    threshold = v;
                }
                best = Some(Split {
                    feature: f,
                    threshold,
                    score,
                    gap,
                });
            }
        }
    }
    best
}
