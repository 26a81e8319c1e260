//! Test-only oracles, independent of the library's solver code paths.
#![allow(dead_code)]

pub mod gradcheck;

/// Plain kernels, re-derived here so the oracle shares no code with the
/// library.
pub fn linear(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rbf(gamma: f64) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |a, b| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-gamma * d2).exp()
    }
}

/// Euclidean projection onto `{a : y^T a = 0, 0 <= a <= c}`: find the
/// multiplier `lambda` with `sum_i y_i clip(v_i - lambda y_i, 0, c) = 0` by
/// bisection (the sum is nonincreasing in `lambda`).
fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let eval = |lambda: f64| -> (f64, Vec<f64>) {
        let a: Vec<f64> = v
            .iter()
            .zip(y)
            .map(|(&vi, &yi)| (vi - lambda * yi).clamp(0.0, c))
            .collect();
        (a.iter().zip(y).map(|(ai, yi)| ai * yi).sum(), a)
    };
    let span = v.iter().fold(0.0f64, |m, x| m.max(x.abs())) + c + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    eval(0.5 * (lo + hi)).1
}

pub struct OracleSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Projected-gradient descent on `1/2 a^T Q a - e^T a` (equivalently ascent
/// on the dual objective) until the projected-gradient residual falls below
/// `tol`.
pub fn dual_oracle(
    xs: &[Vec<f64>],
    ys: &[f64],
    c: f64,
    kernel: &dyn Fn(&[f64], &[f64]) -> f64,
    tol: f64,
) -> OracleSolution {
    let m = xs.len();
    let q: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| ys[i] * ys[j] * kernel(&xs[i], &xs[j]))
                .collect()
        })
        .collect();
    let lipschitz = q
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let step = 1.0 / lipschitz;
    let grad = |a: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|i| (0..m).map(|j| q[i][j] * a[j]).sum::<f64>() - 1.0)
            .collect()
    };
    let mut alpha = vec![0.0; m];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < 5_000_000 {
        let g = grad(&alpha);
        let trial: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - gi).collect();
        let p = project(&trial, ys, c);
        residual = p
            .iter()
            .zip(&alpha)
            .fold(0.0f64, |mx, (pi, ai)| mx.max((pi - ai).abs()));
        if residual < tol {
            break;
        }
        let moved: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - step * gi).collect();
        alpha = project(&moved, ys, c);
        iterations += 1;
    }

    // Intercept from the KKT conditions: free multipliers pin it exactly,
    // otherwise take the middle of the feasible interval.
    let g = grad(&alpha);
    let bound_eps = 1e-9 * c;
    let (mut upper, mut lower) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free) = (0.0, 0usize);
    for i in 0..m {
        let yg = ys[i] * g[i];
        let at_upper = alpha[i] >= c - bound_eps;
        let at_lower = alpha[i] <= bound_eps;
        if !(at_upper || at_lower) {
            free_sum += yg;
            free += 1;
        } else if (at_upper && ys[i] < 0.0) || (at_lower && ys[i] > 0.0) {
            upper = upper.min(yg);
        } else {
            lower = lower.max(yg);
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        0.5 * (upper + lower)
    };
    OracleSolution {
        alpha,
        bias: -rho,
        iterations,
        residual,
    }
}

pub fn oracle_decision(
    sol: &OracleSolution,
    xs: &[Vec<f64>],
    ys: &[f64],
    kernel: &dyn Fn(&[f64], &[f64]) -> f64,
    x: &[f64],
) -> f64 {
    xs.iter()
        .zip(ys)
        .zip(&sol.alpha)
        .map(|((xi, yi), ai)| ai * yi * kernel(x, xi))
        .sum::<f64>()
        + sol.bias
}

/// Deterministic small random problem: `m` points in 2-D from two noisy
/// clusters, both labels present.
pub fn random_problem(seed: u64, m: usize) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    use mtverify_core::rng::SeededRng;
    let mut rng = SeededRng::new(seed);
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for i in 0..m {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let center = if y > 0.0 { [1.0, 1.0] } else { [-1.0, -0.5] };
        xs.push(vec![
            center[0] + 1.2 * rng.normal(),
            center[1] + 1.2 * rng.normal(),
        ]);
        ys.push(y);
    }
    let c = 0.5 + 9.5 * rng.uniform();
    (xs, ys, c)
}
