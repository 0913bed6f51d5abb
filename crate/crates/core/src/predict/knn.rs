use serde::{Deserialize, Serialize};

use super::{Metric, CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub metric: Metric,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl KnnModel {
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
            Metric::Manhattan => a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum(),
        }
    }

    /// Majority vote of the k nearest (ties in distance by training order);
    /// vote ties go to the class with the smaller summed distance, then the
    /// lower class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut d: Vec<(f64, usize)> = self.x.iter().map(|t| self.distance(t, x)).zip(0..).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0usize; CLASSES];
        let mut dist = [0.0f64; CLASSES];
        for &(di, i) in d.iter().take(self.k.max(1)) {
            votes[self.y[i]] += 1;
            dist[self.y[i]] += di;
        }
        (0..CLASSES)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| votes[b].cmp(&votes[a]).then(dist[a].total_cmp(&dist[b])).then(a.cmp(&b)))
            .unwrap_or(0)
    }
}
