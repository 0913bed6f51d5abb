//! C-SVC trained by SMO with second-order working-set selection.

use serde::{Deserialize, Serialize};

use super::{Kernel, CLASSES};
use crate::error::{Error, Result};

const TAU: f64 = 1e-12;
const EPS: f64 = 1e-3;
const MAX_ITER: usize = 100_000;

pub(crate) fn kernel(k: Kernel, gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    match k {
        Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Rbf => {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-gamma * d).exp()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    /// Support vectors with coefficients α_i·y_i.
    pub support: Vec<Vec<f64>>,
    pub coef: Vec<f64>,
    pub rho: f64,
}

impl BinarySvm {
    pub fn decision(&self, kind: Kernel, gamma: f64, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * kernel(kind, gamma, s, x))
            .sum::<f64>()
            - self.rho
    }
}

/// Solves min ½αᵀQα − Σα, 0 ≤ α ≤ C, yᵀα = 0 with labels `y` in {−1, +1}.
pub fn train_binary(x: &[Vec<f64>], y: &[f64], c: f64, kind: Kernel, gamma: f64) -> BinarySvm {
    let n = x.len();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| kernel(kind, gamma, &x[i], &x[j])).collect())
        .collect();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i][j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];

    for _ in 0..MAX_ITER {
        let up = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] < c) || (y[t] < 0.0 && a[t] > 0.0);
        let low = |t: usize, a: &[f64]| (y[t] < 0.0 && a[t] < c) || (y[t] > 0.0 && a[t] > 0.0);

        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if up(t, &alpha) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(t, &alpha) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            let b = gmax - v;
            if b > 0.0 {
                let a = (k[i][i] + k[t][t] - 2.0 * k[i][t]).max(TAU);
                let obj = -(b * b) / a;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax - gmin < EPS || j == usize::MAX {
            break;
        }

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(t, i) * di + q(t, j) * dj;
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum += yg;
            free += 1;
        }
    }
    let rho = if free > 0 {
        sum / free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else {
        0.0
    };

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support.push(x[t].clone());
            coef.push(alpha[t] * y[t]);
        }
    }
    BinarySvm { support, coef, rho }
}

/// One-vs-rest over the classes present in training; prediction is the
/// largest margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub gamma: f64,
    pub machines: Vec<Option<BinarySvm>>,
}

impl SvmModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], c: f64, kernel: Kernel, gamma: f64) -> Result<Self> {
        if !(c > 0.0 && gamma > 0.0) {
            return Err(Error::invalid("SVM needs C > 0 and gamma > 0"));
        }
        let machines = (0..CLASSES)
            .map(|cls| {
                let pos = y.iter().filter(|&&l| l == cls).count();
                if pos == 0 || pos == y.len() {
                    return None;
                }
                let yy: Vec<f64> = y.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
                Some(train_binary(x, &yy, c, kernel, gamma))
            })
            .collect();
        Ok(Self { kernel, gamma, machines })
    }

    pub fn margins(&self, x: &[f64]) -> Vec<f64> {
        self.machines
            .iter()
            .map(|m| m.as_ref().map_or(f64::NEG_INFINITY, |m| m.decision(self.kernel, self.gamma, x)))
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let m = self.margins(x);
        (0..m.len()).fold(0, |best, c| if m[c] > m[best] { c } else { best })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Perceptron convergence certifies linear separability.
    fn perceptron_separates(x: &[Vec<f64>], y: &[f64]) -> bool {
        let d = x[0].len();
        let mut w = vec![0.0; d + 1];
        for _ in 0..10_000 {
            let mut errors = 0;
            for (xi, &yi) in x.iter().zip(y) {
                let s: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
                if yi * s <= 0.0 {
                    for k in 0..d {
                        w[k] += yi * xi[k];
                    }
                    w[d] += yi;
                    errors += 1;
                }
            }
            if errors == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn linear_svm_separates_separable_data() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = Vec::new();
            let mut y = Vec::new();
            while x.len() < 60 {
                let p: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.1;
                if s.abs() < 0.05 {
                    continue;
                }
                y.push(s.signum());
                x.push(p);
            }
            assert!(perceptron_separates(&x, &y));
            let m = train_binary(&x, &y, 1e4, Kernel::Linear, 1.0);
            let errors = x
                .iter()
                .zip(&y)
                .filter(|(xi, yi)| m.decision(Kernel::Linear, 1.0, xi) * **yi <= 0.0)
                .count();
            assert_eq!(errors, 0, "seed {seed}");
        }
    }

    #[test]
    fn rbf_solves_xor() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let m = train_binary(&x, &y, 10.0, Kernel::Rbf, 2.0);
        for (xi, yi) in x.iter().zip(&y) {
            assert!(m.decision(Kernel::Rbf, 2.0, xi) * yi > 0.0);
        }
    }

    #[test]
    fn hand_solvable_two_points() {
        // Points ±1 on a line: w = 1, b = 0, both on the margin with α = 0.5.
        let m = train_binary(&[vec![1.0], vec![-1.0]], &[1.0, -1.0], 10.0, Kernel::Linear, 1.0);
        assert!((m.decision(Kernel::Linear, 1.0, &[0.5]) - 0.5).abs() < 1e-9);
        assert!(m.coef.iter().all(|c| (c.abs() - 0.5).abs() < 1e-9));
    }
}
