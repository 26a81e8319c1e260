//! Two-variable decomposition solver for the kernel SVM dual
//!
//! ```text
//! minimize   1/2 a^T Q a - e^T a
//! subject to y^T a = 0,  0 <= a_i <= C
//! with       Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! Each iteration picks the maximal violating pair (first-order working-set
//! selection, lowest index on ties), solves the two-variable subproblem in
//! closed form and clips to the box. Iteration stops once the KKT gap
//! `max_{I_up} -y G - min_{I_low} -y G` drops below the tolerance. There is
//! no randomness and no shrinking, so a given input order always follows the
//! same path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kernel::KernelSpec;

/// Curvature floor for non-positive-definite pairs.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmTrainConfig {
    /// Box constraint.
    pub c: f64,
    pub kkt_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            kkt_tolerance: 1e-8,
            max_iterations: 10_000_000,
        }
    }
}

impl SvmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Argument(format!(
                "C must be positive, got {}",
                self.c
            )));
        }
        if !(self.kkt_tolerance > 0.0) {
            return Err(Error::Argument(format!(
                "kkt tolerance must be positive, got {}",
                self.kkt_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportVector {
    pub alpha: f64,
    /// +1 or -1.
    pub y: f64,
    pub x: Vec<f64>,
}

/// A trained two-class machine. Only instances with `alpha > 0` are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub kernel: KernelSpec,
    pub c: f64,
    pub bias: f64,
    pub support: Vec<SupportVector>,
    pub iterations: usize,
    /// KKT gap at termination.
    pub kkt_gap: f64,
    pub n_features: usize,
}

impl BinarySvm {
    /// `D(x) = sum_i alpha_i y_i K(x, x_i) + b`
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Argument(format!(
                "input has {} features, machine expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(self.decision_value_unchecked(x))
    }

    pub(crate) fn decision_value_unchecked(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .support
            .iter()
            .map(|sv| sv.alpha * sv.y * self.kernel.eval_unchecked(x, &sv.x))
            .sum();
        s + self.bias
    }

    /// `sum_i y_i alpha_i` over the support set.
    pub fn equality_residual(&self) -> f64 {
        self.support.iter().map(|sv| sv.y * sv.alpha).sum()
    }
}

#[inline]
fn in_up(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

#[inline]
fn in_low(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

/// Result of the raw dual solve, indexed like the training rows.
#[derive(Debug, Clone)]
pub(crate) struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub gap: f64,
}

pub(crate) fn solve_dual(
    gram: &[f64],
    y: &[f64],
    c: f64,
    tol: f64,
    max_iterations: usize,
) -> Result<DualSolution> {
    let m = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * gram[i * m + j];
    let mut alpha = vec![0.0; m];
    let mut grad = vec![-1.0; m];
    let mut iterations = 0;
    let gap = loop {
        let mut i = usize::MAX;
        let mut max_up = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut min_low = f64::INFINITY;
        for t in 0..m {
            let v = -y[t] * grad[t];
            if in_up(y[t], alpha[t], c) && v > max_up {
                max_up = v;
                i = t;
            }
            if in_low(y[t], alpha[t], c) && v < min_low {
                min_low = v;
                j = t;
            }
        }
        let gap = max_up - min_low;
        if i == usize::MAX || j == usize::MAX || gap < tol {
            break gap.max(0.0);
        }
        if iterations >= max_iterations {
            return Err(Error::NotConverged {
                iterations,
                violation: gap,
            });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = q(i, j);
        if y[i] != y[j] {
            let mut quad = q(i, i) + q(j, j) + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
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
            let mut quad = q(i, i) + q(j, j) - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
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

        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    };

    // b = -rho; rho averages y_i G_i over free vectors, else sits mid-interval.
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..m {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        (upper + lower) / 2.0
    };
    Ok(DualSolution {
        alpha,
        bias: -rho,
        iterations,
        gap,
    })
}

/// Trains one binary machine on `xs` with labels `ys` in {-1, +1}.
pub fn train_binary(
    xs: &[&[f64]],
    ys: &[f64],
    kernel: &KernelSpec,
    cfg: &SvmTrainConfig,
) -> Result<BinarySvm> {
    cfg.validate()?;
    kernel.validate()?;
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!(
            "{} rows but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    if let Some(y) = ys.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::Argument(format!("binary label {y} is not +1/-1")));
    }
    if !ys.contains(&1.0) || !ys.contains(&-1.0) {
        return Err(Error::Argument("both classes must be present".into()));
    }
    let n_features = xs[0].len();
    if xs.iter().any(|x| x.len() != n_features) {
        return Err(Error::Argument("rows differ in dimension".into()));
    }
    let m = xs.len();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let k = kernel.eval_unchecked(xs[i], xs[j]);
            gram[i * m + j] = k;
            gram[j * m + i] = k;
        }
    }
    let sol = solve_dual(&gram, ys, cfg.c, cfg.kkt_tolerance, cfg.max_iterations)?;
    let support = sol
        .alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 0.0)
        .map(|(i, &a)| SupportVector {
            alpha: a,
            y: ys[i],
            x: xs[i].to_vec(),
        })
        .collect();
    Ok(BinarySvm {
        kernel: *kernel,
        c: cfg.c,
        bias: sol.bias,
        support,
        iterations: sol.iterations,
        kkt_gap: sol.gap,
        n_features,
    })
}
