//! Reference kernel SVM with one-vs-one multiclass reduction.

mod kernel;
mod smo;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernel::{default_gamma, kernel_eval, KernelSpec};
pub use smo::{train_binary, BinarySvm, SupportVector, SvmTrainConfig};

/// Version tag of the JSON model document.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One binary machine of the one-vs-one ensemble; `positive` maps to
/// `y = +1`, `negative` to `y = -1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMachine {
    pub positive: i64,
    pub negative: i64,
    pub machine: BinarySvm,
}

/// One-vs-one multiclass SVM over arbitrary integer class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classes: Vec<i64>,
    pub kernel: KernelSpec,
    pub config: SvmTrainConfig,
    /// Pairs `(classes[a], classes[b])`, `a < b`, in lexicographic order.
    pub pairs: Vec<PairMachine>,
    pub n_features: usize,
}

/// Output of [`SvmModel::predict`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub class: i64,
    /// Sum of the winner's pairwise decision values, each oriented so that
    /// positive favors the winner.
    pub score: f64,
    /// Raw decision value of every pair machine, in model pair order.
    pub pairwise: Vec<f64>,
}

pub fn train_multiclass(
    rows: &[&[f64]],
    labels: &[i64],
    kernel: &KernelSpec,
    cfg: &SvmTrainConfig,
) -> Result<SvmModel> {
    if rows.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least two classes, found {}",
            classes.len()
        )));
    }
    let n_features = rows[0].len();
    let mut pair_ids = Vec::new();
    for a in 0..classes.len() {
        for b in a + 1..classes.len() {
            pair_ids.push((classes[a], classes[b]));
        }
    }
    // Pairs are independent; collect() keeps pair order.
    let results: Vec<Result<PairMachine>> = pair_ids
        .par_iter()
        .map(|&(pos, neg)| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (row, &l) in rows.iter().zip(labels) {
                if l == pos {
                    xs.push(*row);
                    ys.push(1.0);
                } else if l == neg {
                    xs.push(*row);
                    ys.push(-1.0);
                }
            }
            train_binary(&xs, &ys, kernel, cfg).map(|machine| PairMachine {
                positive: pos,
                negative: neg,
                machine,
            })
        })
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, (pos, neg)) in results.into_iter().zip(&pair_ids) {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => failures.push(format!("pair ({pos}, {neg}): {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Training(failures.join("; ")));
    }
    Ok(SvmModel {
        classes,
        kernel: *kernel,
        config: *cfg,
        pairs,
        n_features,
    })
}

impl SvmModel {
    pub fn predict(&self, x: &[f64]) -> Result<DecisionReport> {
        if x.len() != self.n_features {
            return Err(Error::Argument(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.n_features
            )));
        }
        let pairwise: Vec<f64> = self
            .pairs
            .iter()
            .map(|p| p.machine.decision_value_unchecked(x))
            .collect();
        let mut votes = vec![0usize; self.classes.len()];
        let index = |c: i64| self.classes.binary_search(&c).expect("pair class in model");
        for (p, &d) in self.pairs.iter().zip(&pairwise) {
            let winner = if d >= 0.0 { p.positive } else { p.negative };
            votes[index(winner)] += 1;
        }
        // Highest vote wins; the first maximum is the lowest class id.
        let mut best = 0;
        for (k, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = k;
            }
        }
        let class = self.classes[best];
        let score = self
            .pairs
            .iter()
            .zip(&pairwise)
            .filter_map(|(p, &d)| {
                if p.positive == class {
                    Some(d)
                } else if p.negative == class {
                    Some(-d)
                } else {
                    None
                }
            })
            .sum();
        Ok(DecisionReport {
            class,
            score,
            pairwise,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument {
            version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model document version {}",
                doc.version
            )));
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    version: u32,
    model: SvmModel,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(k: usize, per: usize) -> (Vec<Vec<f64>>, Vec<i64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..k {
            for i in 0..per {
                let angle = c as f64 * 2.0 * std::f64::consts::PI / k as f64;
                let jitter = (i as f64 * 0.37).sin() * 0.3;
                xs.push(vec![5.0 * angle.cos() + jitter, 5.0 * angle.sin() - jitter]);
                ys.push(c as i64);
            }
        }
        (xs, ys)
    }

    #[test]
    fn ten_classes_give_forty_five_machines() {
        let (xs, ys) = blobs(10, 4);
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let m = train_multiclass(
            &rows,
            &ys,
            &KernelSpec::Rbf { gamma: 0.5 },
            &Default::default(),
        )
        .unwrap();
        assert_eq!(m.pairs.len(), 45);
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(m.predict(x).unwrap().class, y);
        }
    }

    #[test]
    fn two_classes_reduce_to_binary_sign() {
        let (xs, ys) = blobs(2, 5);
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let cfg = SvmTrainConfig::default();
        let m = train_multiclass(&rows, &ys, &KernelSpec::Linear, &cfg).unwrap();
        assert_eq!(m.pairs.len(), 1);
        let yb: Vec<f64> = ys
            .iter()
            .map(|&y| if y == 0 { 1.0 } else { -1.0 })
            .collect();
        let b = train_binary(&rows, &yb, &KernelSpec::Linear, &cfg).unwrap();
        for x in [[0.3, -2.0], [4.0, 1.0], [-6.0, 0.5]] {
            let d = b.decision_value(&x).unwrap();
            let r = m.predict(&x).unwrap();
            assert_eq!(r.pairwise, vec![d]);
            assert_eq!(r.class, if d >= 0.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn vote_tie_goes_to_lowest_class() {
        // Three classes whose machines each vote for a different class at
        // the centroid: a 1-1-1 tie.
        let (xs, ys) = blobs(3, 3);
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut m = train_multiclass(&rows, &ys, &KernelSpec::Linear, &Default::default()).unwrap();
        // Force a cyclic vote: (0,1) -> 0, (0,2) -> 2, (1,2) -> 1.
        for (p, bias) in m.pairs.iter_mut().zip([1e6, -1e6, 1e6]) {
            p.machine.bias = bias;
        }
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap().class, 0);
    }

    #[test]
    fn single_class_rejected() {
        let xs = [vec![1.0], vec![2.0]];
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        assert!(
            train_multiclass(&rows, &[4, 4], &KernelSpec::Linear, &Default::default()).is_err()
        );
    }

    #[test]
    fn json_document_round_trip() {
        let (xs, ys) = blobs(3, 3);
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let m = train_multiclass(
            &rows,
            &ys,
            &KernelSpec::Rbf { gamma: 0.2 },
            &Default::default(),
        )
        .unwrap();
        let back = SvmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let text = m
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(SvmModel::from_json(&text), Err(Error::Config(_))));
    }
}
