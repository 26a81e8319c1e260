use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel function of the dual problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `K(a, b) = a . b`
    Linear,
    /// `K(a, b) = exp(-gamma * |a - b|^2)`
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<Self> {
        let spec = KernelSpec::Rbf { gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Rbf { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            KernelSpec::Rbf { gamma } => Err(Error::Argument(format!(
                "rbf gamma must be positive, got {gamma}"
            ))),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, KernelSpec::Linear)
    }

    /// Kernel value without the dimension check.
    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = x - y;
                        d * d
                    })
                    .sum();
                (-gamma * d2).exp()
            }
        }
    }
}

/// Evaluates the kernel on two vectors of equal dimension.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "kernel arguments differ in dimension ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    spec.validate()?;
    Ok(spec.eval_unchecked(a, b))
}

/// `1 / (n * Var(X))` over every feature value of the training rows, the
/// usual "scale" default for the RBF width.
pub fn default_gamma<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    let mut count = 0usize;
    let mut n_features = 0usize;
    let mut values = Vec::new();
    for row in rows {
        n_features = row.len();
        values.extend_from_slice(row);
        count += 1;
    }
    if count == 0 || n_features == 0 {
        return Err(Error::Argument(
            "cannot derive gamma from an empty set".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Argument(
            "constant features leave gamma undefined".into(),
        ));
    }
    Ok(1.0 / (n_features as f64 * var))
}
