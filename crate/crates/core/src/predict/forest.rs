//! Bootstrap-aggregated CART trees with Gini splits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { probs: [f64; CLASSES] },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn probs(&self, x: &[f64]) -> [f64; CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { probs } => return *probs,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

fn gini(counts: &[usize; CLASSES], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    max_depth: Option<usize>,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let mut probs = [0.0; CLASSES];
        for &i in idx {
            probs[self.y[i]] += 1.0;
        }
        for p in probs.iter_mut() {
            *p /= idx.len().max(1) as f64;
        }
        self.nodes.push(Node::Leaf { probs });
        self.nodes.len() - 1
    }

    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut counts = [0usize; CLASSES];
        for &i in idx.iter() {
            counts[self.y[i]] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || idx.len() < 2 || self.max_depth.is_some_and(|m| depth >= m) {
            return self.leaf(idx);
        }
        let parent = gini(&counts, idx.len());
        let d = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in sample(rng, d, self.mtry.min(d)).into_iter() {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = [0usize; CLASSES];
            for s in 1..idx.len() {
                left[self.y[idx[s - 1]]] += 1;
                let (lo, hi) = (self.x[idx[s - 1]][f], self.x[idx[s]][f]);
                if lo == hi {
                    continue;
                }
                let mut right = counts;
                for c in 0..CLASSES {
                    right[c] -= left[c];
                }
                let n = idx.len() as f64;
                let impurity = (s as f64 * gini(&left, s) + (n - s as f64) * gini(&right, idx.len() - s)) / n;
                if best.is_none_or(|b| impurity < b.0) {
                    best = Some((impurity, f, 0.5 * (lo + hi)));
                }
            }
        }
        match best {
            Some((imp, f, thr)) if imp < parent - 1e-12 => {
                idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
                let cut = idx.partition_point(|&i| self.x[i][f] <= thr);
                let slot = self.nodes.len();
                self.nodes.push(Node::Leaf { probs: [0.0; CLASSES] });
                let (l, r) = idx.split_at_mut(cut);
                let left = self.build(l, depth + 1, rng);
                let right = self.build(r, depth + 1, rng);
                self.nodes[slot] = Node::Split { feature: f, threshold: thr, left, right };
                slot
            }
            _ => self.leaf(idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], trees: usize, max_depth: Option<usize>, max_features: f64, seed: u64) -> Self {
        let d = x[0].len();
        let mtry = ((max_features * d as f64).round() as usize).clamp(1, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees.max(1))
            .map(|_| {
                let mut idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                let mut b = Builder {
                    x,
                    y,
                    max_depth,
                    mtry,
                    nodes: Vec::new(),
                };
                b.build(&mut idx, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Self { trees }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut acc = [0.0; CLASSES];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.probs(x)) {
                *a += p;
            }
        }
        (0..CLASSES).fold(0, |best, c| if acc[c] > acc[best] { c } else { best })
    }
}
