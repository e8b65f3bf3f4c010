//! Isolation forest over dense feature vectors.
//!
//! Each tree recursively partitions a subsample by picking a random feature
//! that is not constant in the current partition and a split uniformly
//! between its minimum and maximum. Points that are isolated after few
//! splits score close to 1.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SpatialError;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Normalizer `c(m)`: average path length of an unsuccessful binary search
/// tree lookup among `m` points.
pub fn average_path_length(m: usize) -> Result<f64, SpatialError> {
    match m {
        0 => Err(SpatialError::Domain(m)),
        1 => Ok(0.0),
        _ => {
            let m = m as f64;
            let harmonic = (m - 1.0).ln() + EULER_GAMMA;
            Ok(2.0 * harmonic - 2.0 * (m - 1.0) / m)
        }
    }
}

fn c(m: usize) -> f64 {
    average_path_length(m.max(1)).expect("m >= 1")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestParams {
    pub trees: usize,
    /// `None` means `min(256, n)`.
    pub subsample: Option<usize>,
}

impl Default for IsolationForestParams {
    fn default() -> Self {
        IsolationForestParams { trees: 100, subsample: None }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Split { feature: usize, value: f64, left: usize, right: usize },
    Leaf { size: usize },
}

#[derive(Clone, Debug)]
pub struct IsolationTree {
    nodes: Vec<Node>,
    depth: usize,
}

impl IsolationTree {
    fn fit(data: &[Vec<f64>], rows: Vec<usize>, height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new(), depth: 0 };
        tree.grow(data, rows, 0, height_limit, rng);
        tree
    }

    fn grow(&mut self, data: &[Vec<f64>], rows: Vec<usize>, depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> usize {
        self.depth = self.depth.max(depth);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= limit || rows.len() <= 1 {
            return id;
        }
        let dims = data[rows[0]].len();
        // features that still vary within this partition
        let candidates: Vec<(usize, f64, f64)> = (0..dims)
            .filter_map(|f| {
                let (lo, hi) = rows
                    .iter()
                    .map(|&r| data[r][f])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if candidates.is_empty() {
            return id;
        }
        let (feature, lo, hi) = candidates[rng.gen_range(0..candidates.len())];
        let value = rng.gen_range(lo..hi);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&r| data[r][feature] <= value);
        let left = self.grow(data, left_rows, depth + 1, limit, rng);
        let right = self.grow(data, right_rows, depth + 1, limit, rng);
        self.nodes[id] = Node::Split { feature, value, left, right };
        id
    }

    /// Depth reached by `x` plus the expected remaining depth of its leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[node] {
                Node::Split { feature, value, left, right } => {
                    node = if x[feature] <= value { left } else { right };
                    depth += 1;
                }
                Node::Leaf { size } => return depth as f64 + c(size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

#[derive(Clone, Debug)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample_size: usize,
}

impl IsolationForest {
    pub fn fit(data: &[Vec<f64>], params: &IsolationForestParams, seed: u64) -> Result<Self, SpatialError> {
        let n = data.len();
        if n < 2 {
            return Err(SpatialError::TooFewNodes(n));
        }
        if params.trees == 0 {
            return Err(SpatialError::BadParams("tree count must be positive".into()));
        }
        let subsample_size = params.subsample.unwrap_or(256).min(n);
        if subsample_size < 2 {
            return Err(SpatialError::BadParams("subsample must be at least 2".into()));
        }
        let height_limit = (subsample_size as f64).log2().ceil() as usize;
        let trees = (0..params.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let rows = if subsample_size == n {
                    (0..n).collect()
                } else {
                    let mut rows = sample(&mut rng, n, subsample_size).into_vec();
                    rows.sort_unstable();
                    rows
                };
                IsolationTree::fit(data, rows, height_limit, &mut rng)
            })
            .collect();
        Ok(IsolationForest { trees, subsample_size })
    }

    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn subsample_size(&self) -> usize {
        self.subsample_size
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// `2^(-E(h(x)) / c(subsample))`.
    pub fn score(&self, x: &[f64]) -> f64 {
        score_from_path(self.mean_path_length(x), self.subsample_size)
    }
}

pub fn score_from_path(mean_path: f64, subsample_size: usize) -> f64 {
    2f64.powf(-mean_path / c(subsample_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_values() {
        assert_eq!(average_path_length(1).unwrap(), 0.0);
        // 2(ln 1 + gamma) - 1
        assert!((average_path_length(2).unwrap() - 0.15443132980306573).abs() < 1e-12);
        // frozen from direct evaluation of 2(ln 255 + gamma) - 2*255/256
        assert!((average_path_length(256).unwrap() - 10.244770920119917).abs() < 1e-12);
        assert!((average_path_length(16).unwrap() - 4.695531732007486).abs() < 1e-12);
        assert!(matches!(average_path_length(0), Err(SpatialError::Domain(0))));
    }

    #[test]
    fn path_equal_to_normalizer_scores_one_half() {
        for m in [2, 16, 256] {
            assert_eq!(score_from_path(c(m), m), 0.5);
        }
    }

    #[test]
    fn tree_depth_is_bounded() {
        let data: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let params = IsolationForestParams { trees: 20, subsample: Some(64) };
        let forest = IsolationForest::fit(&data, &params, 3).unwrap();
        assert_eq!(forest.subsample_size(), 64);
        for t in forest.trees() {
            assert!(t.depth() <= 6);
        }
    }

    #[test]
    fn identical_points_score_one_half() {
        let data = vec![vec![1.0, 2.0]; 8];
        let forest = IsolationForest::fit(&data, &IsolationForestParams::default(), 0).unwrap();
        assert!((forest.score(&data[0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_scores() {
        let data: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 5) as f64, (i * i % 11) as f64]).collect();
        let p = IsolationForestParams::default();
        let a = IsolationForest::fit(&data, &p, 9).unwrap();
        let b = IsolationForest::fit(&data, &p, 9).unwrap();
        for x in &data {
            assert_eq!(a.score(x), b.score(x));
        }
    }
}
