//! Seeded random-forest classifier used by the shallow-feature confound audit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means ceil(sqrt(p)).
    pub mtry: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 200,
            max_depth: 8,
            mtry: None,
            min_samples_split: 2,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> &[f64] {
        match self {
            Node::Leaf(p) => p,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    classes: usize,
    mtry: usize,
    max_depth: usize,
    min_samples_split: usize,
}

impl TreeBuilder<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let mut p = vec![0.0; self.classes];
        for &i in idx {
            p[self.y[i]] += 1.0;
        }
        let n = idx.len() as f64;
        p.iter_mut().for_each(|v| *v /= n);
        Node::Leaf(p)
    }

    fn build(&self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> Node {
        let mut counts = vec![0usize; self.classes];
        for &i in idx.iter() {
            counts[self.y[i]] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || idx.len() < self.min_samples_split {
            return self.leaf(idx);
        }
        let p = self.x[0].len();
        let mut features: Vec<usize> = (0..p).collect();
        features.shuffle(rng);
        let parent = gini(&counts, idx.len());

        let mut best: Option<(f64, usize, f64)> = None;
        for &f in features.iter().take(self.mtry) {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0usize; self.classes];
            let n = idx.len();
            for k in 0..n - 1 {
                left[self.y[idx[k]]] += 1;
                let (va, vb) = (self.x[idx[k]][f], self.x[idx[k + 1]][f]);
                if va == vb {
                    continue;
                }
                let right: Vec<usize> = counts.iter().zip(&left).map(|(c, l)| c - l).collect();
                let nl = k + 1;
                let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl))
                    / n as f64;
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, va + (vb - va) / 2.0));
                }
            }
        }
        let Some((score, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        if score >= parent {
            return self.leaf(idx);
        }
        idx.sort_by_key(|&i| self.x[i][feature] > threshold);
        let split = idx.partition_point(|&i| self.x[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(split);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.build(l, depth + 1, rng)),
            right: Box::new(self.build(r, depth + 1, rng)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RandomForest {
    trees: Vec<Node>,
    classes: usize,
}

impl RandomForest {
    /// Trees are grown in parallel; tree `t` draws from its own stream so the
    /// result does not depend on scheduling.
    pub fn fit(
        x: &[Vec<f64>],
        y: &[usize],
        classes: usize,
        config: &ForestConfig,
        seed: u64,
    ) -> RandomForest {
        assert!(
            !x.is_empty() && x.len() == y.len(),
            "forest needs matching non-empty x and y"
        );
        let p = x[0].len();
        let mtry = config
            .mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p);
        let builder = TreeBuilder {
            x,
            y,
            classes,
            mtry,
            max_depth: config.max_depth,
            min_samples_split: config.min_samples_split.max(2),
        };
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let n = x.len();
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                builder.build(&mut idx, 0, &mut rng)
            })
            .collect();
        RandomForest { trees, classes }
    }

    /// Mean leaf class distribution over trees; argmax with ties to the
    /// lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut acc = vec![0.0; self.classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.predict(x)) {
                *a += p;
            }
        }
        let mut best = 0;
        for (k, &v) in acc.iter().enumerate() {
            if v > acc[best] {
                best = k;
            }
        }
        best
    }
}
