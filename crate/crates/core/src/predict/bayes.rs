use serde::{Deserialize, Serialize};

use super::CLASSES;

/// Gaussian naive Bayes. Every per-class variance is inflated by
/// `smoothing × (largest feature variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnbModel {
    pub log_prior: Vec<Option<f64>>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl GnbModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], smoothing: f64) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let max_var = (0..d)
            .map(|j| {
                let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
                x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n
            })
            .fold(0.0, f64::max);
        let eps = (smoothing * max_var).max(1e-12);
        let mut log_prior = vec![None; CLASSES];
        let mut means = vec![vec![0.0; d]; CLASSES];
        let mut vars = vec![vec![1.0; d]; CLASSES];
        for c in 0..CLASSES {
            let rows: Vec<&Vec<f64>> = x.iter().zip(y).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            if rows.is_empty() {
                continue;
            }
            let k = rows.len() as f64;
            log_prior[c] = Some((k / n).ln());
            for j in 0..d {
                let m = rows.iter().map(|r| r[j]).sum::<f64>() / k;
                means[c][j] = m;
                vars[c][j] = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / k + eps;
            }
        }
        Self { log_prior, means, vars }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let score = |c: usize| -> f64 {
            let Some(lp) = self.log_prior[c] else { return f64::NEG_INFINITY };
            lp + x
                .iter()
                .zip(&self.means[c])
                .zip(&self.vars[c])
                .map(|((v, m), s)| -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (v - m).powi(2) / s))
                .sum::<f64>()
        };
        (0..CLASSES).fold(0, |best, c| if score(c) > score(best) { c } else { best })
    }
}
