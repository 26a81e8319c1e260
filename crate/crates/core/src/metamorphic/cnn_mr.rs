use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::cnn::{evaluate, prepare_image, CnnModel, TracePoint};
use crate::dataset::{DatasetSplit, LabeledImageSet};
use crate::error::{Error, Result};

use super::{
    CnnSubject, Family, MrSpec, MrStatus, MrVerdict, SigmaMaxReport, StepSigma, VariantEvidence,
    VariantTrace,
};

fn population_sigma(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Builds the `sigma_max` report of a set of variant traces.
///
/// The per-step spread covers the steps every variant reached. A diverged
/// variant makes `sigma_max` infinite.
pub fn sigma_report(traces: Vec<VariantTrace>, threshold: f64) -> SigmaMaxReport {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in &traces {
        for p in &t.trace {
            by_step.entry(p.step).or_default().push(p.test_loss);
        }
    }
    let per_step: Vec<StepSigma> = by_step
        .into_iter()
        .filter(|(_, v)| v.len() == traces.len())
        .map(|(step, v)| StepSigma {
            step,
            sigma: population_sigma(&v),
        })
        .collect();
    let sigma_max = if traces.iter().any(|t| t.diverged_at.is_some()) {
        f64::INFINITY
    } else {
        per_step.iter().map(|s| s.sigma).fold(0.0, f64::max)
    };
    SigmaMaxReport {
        per_step,
        sigma_max,
        threshold,
        traces,
    }
}

enum VariantRun {
    Done(Vec<TracePoint>),
    Diverged(Vec<TracePoint>, usize),
    Crashed(String),
}

/// Runs a CNN training relation: one training per variant, each on the
/// transformed training and test sets, then the `sigma_max` statistic of
/// the test-loss curves. Variants train in parallel; results are assembled
/// in variant order.
pub fn run_cnn_training_mr(
    spec: &MrSpec,
    split: &DatasetSplit<LabeledImageSet>,
    subject: &dyn CnnSubject,
) -> Result<MrVerdict> {
    spec.validate()?;
    if spec.id.family != Family::Cnn || !spec.id.is_training() {
        return Err(Error::Config(format!(
            "{} is not a CNN training relation",
            spec.id
        )));
    }
    let runs: Vec<Result<(String, VariantRun)>> = spec
        .variants
        .par_iter()
        .map(|t| {
            let variant = DatasetSplit {
                train: t.apply_images(&split.train)?,
                test: t.apply_images(&split.test)?,
            };
            let outcome = match subject.train(&variant) {
                Ok(s) => VariantRun::Done(s.run.trace),
                Err(Error::Diverged { step, trace, .. }) => VariantRun::Diverged(trace, step),
                Err(e) => VariantRun::Crashed(e.to_string()),
            };
            Ok((t.variant_id(), outcome))
        })
        .collect();
    let mut traces = Vec::new();
    for r in runs {
        let (variant, outcome) = r?;
        match outcome {
            VariantRun::Done(trace) => traces.push(VariantTrace {
                variant,
                trace,
                diverged_at: None,
            }),
            VariantRun::Diverged(trace, step) => traces.push(VariantTrace {
                variant,
                trace,
                diverged_at: Some(step),
            }),
            VariantRun::Crashed(msg) => {
                log::warn!("{}: variant {variant} crashed: {msg}", spec.id);
                return Ok(MrVerdict::inconclusive(
                    spec.id,
                    spec.threshold,
                    format!("variant {variant}: {msg}"),
                ));
            }
        }
    }
    let report = sigma_report(traces, spec.threshold);
    let killed = report.killed_at(spec.threshold);
    let triggered_by = if killed {
        outliers(&report)
    } else {
        Vec::new()
    };
    Ok(MrVerdict {
        mr: spec.id,
        status: if killed {
            MrStatus::Killed
        } else {
            MrStatus::Pass
        },
        evidence: report.sigma_max,
        threshold: spec.threshold,
        variants: Vec::new(),
        triggered_by,
        sigma: Some(report),
        diagnostics: None,
    })
}

/// Diverged variants, or else the variant farthest from the mean at the
/// step of maximal spread.
fn outliers(report: &SigmaMaxReport) -> Vec<String> {
    let diverged: Vec<String> = report
        .traces
        .iter()
        .filter(|t| t.diverged_at.is_some())
        .map(|t| t.variant.clone())
        .collect();
    if !diverged.is_empty() {
        return diverged;
    }
    let Some(worst) = report
        .per_step
        .iter()
        .max_by(|a, b| a.sigma.total_cmp(&b.sigma))
    else {
        return Vec::new();
    };
    let losses: Vec<(String, f64)> = report
        .traces
        .iter()
        .filter_map(|t| {
            t.trace
                .iter()
                .find(|p| p.step == worst.step)
                .map(|p| (t.variant.clone(), p.test_loss))
        })
        .collect();
    let mean = losses.iter().map(|l| l.1).sum::<f64>() / losses.len() as f64;
    losses
        .into_iter()
        .max_by(|a, b| (a.1 - mean).abs().total_cmp(&(b.1 - mean).abs()))
        .map(|(v, _)| vec![v])
        .unwrap_or_default()
}

/// Runs a test-only CNN relation on an already trained model.
///
/// Each variant transforms the test images; every instance's class and
/// loss are compared with the untransformed evaluation. A class flip or a
/// loss deviation of at least the threshold kills. Constant images cannot
/// be standardized and are skipped (reported in the diagnostics).
pub fn run_cnn_test_only_mr(
    spec: &MrSpec,
    model: &CnnModel<f32>,
    test: &LabeledImageSet,
) -> Result<MrVerdict> {
    spec.validate()?;
    if spec.id.family != Family::Cnn || spec.id.is_training() {
        return Err(Error::Config(format!(
            "{} is not a CNN test-only relation",
            spec.id
        )));
    }
    let usable: Vec<usize> = (0..test.len())
        .filter(|&i| prepare_image(test.image(i), test.height(), &model.preprocess).is_ok())
        .collect();
    let skipped = test.len() - usable.len();
    if usable.is_empty() {
        return Ok(MrVerdict::inconclusive(
            spec.id,
            spec.threshold,
            "no test image can be standardized".into(),
        ));
    }
    let test = test.select(&usable);
    let base = match evaluate(model, &test) {
        Ok(e) => e,
        Err(e) => {
            return Ok(MrVerdict::inconclusive(
                spec.id,
                spec.threshold,
                format!("base evaluation: {e}"),
            ))
        }
    };
    let mut variants = Vec::new();
    for t in &spec.variants {
        let follow = match t.apply_images(&test).and_then(|s| evaluate(model, &s)) {
            Ok(e) => e,
            Err(e) => {
                return Ok(MrVerdict::inconclusive(
                    spec.id,
                    spec.threshold,
                    format!("variant {}: {e}", t.variant_id()),
                ))
            }
        };
        let mut ev = VariantEvidence {
            variant: t.variant_id(),
            deviation: 0.0,
            output_deviation: 0.0,
            class_flips: 0,
            compared: test.len(),
        };
        for (a, b) in base.instances.iter().zip(&follow.instances) {
            ev.output_deviation = ev.output_deviation.max((a.loss - b.loss).abs());
            if a.class != b.class {
                ev.class_flips += 1;
            }
        }
        ev.deviation = if ev.class_flips > 0 {
            f64::INFINITY
        } else {
            ev.output_deviation
        };
        variants.push(ev);
    }
    let evidence = variants.iter().map(|v| v.deviation).fold(0.0, f64::max);
    let triggered_by: Vec<String> = variants
        .iter()
        .filter(|v| v.deviation >= spec.threshold)
        .map(|v| v.variant.clone())
        .collect();
    Ok(MrVerdict {
        mr: spec.id,
        status: if triggered_by.is_empty() {
            MrStatus::Pass
        } else {
            MrStatus::Killed
        },
        evidence,
        threshold: spec.threshold,
        variants,
        triggered_by,
        sigma: None,
        diagnostics: (skipped > 0).then(|| format!("skipped {skipped} constant test images")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(variant: &str, losses: &[f64]) -> VariantTrace {
        VariantTrace {
            variant: variant.into(),
            trace: losses
                .iter()
                .enumerate()
                .map(|(i, &l)| TracePoint {
                    step: i * 10,
                    test_loss: l,
                    test_accuracy: 0.5,
                })
                .collect(),
            diverged_at: None,
        }
    }

    #[test]
    fn sigma_is_population_spread_per_step() {
        let r = sigma_report(vec![trace("a", &[1.0, 2.0]), trace("b", &[1.0, 4.0])], 0.5);
        assert_eq!(r.per_step.len(), 2);
        assert_eq!(r.per_step[0].sigma, 0.0);
        assert_eq!(r.per_step[1].sigma, 1.0);
        assert_eq!(r.sigma_max, 1.0);
        assert!(r.killed_at(0.5) && !r.killed_at(1.0));
        assert_eq!(outliers(&r).len(), 1);
    }

    #[test]
    fn divergence_makes_sigma_infinite() {
        let mut b = trace("b", &[1.0]);
        b.diverged_at = Some(13);
        let r = sigma_report(vec![trace("a", &[1.0, 2.0]), b], 9.0);
        assert_eq!(r.per_step.len(), 1);
        assert!(r.sigma_max.is_infinite());
        assert_eq!(outliers(&r), vec!["b".to_string()]);
    }

    #[test]
    fn sigma_max_is_the_largest_step_sigma() {
        let r = sigma_report(
            vec![
                trace("a", &[2.0, 1.0, 3.0]),
                trace("b", &[2.5, 1.0, 0.0]),
                trace("c", &[1.5, 1.2, 1.0]),
            ],
            1.0,
        );
        let m = r.per_step.iter().map(|s| s.sigma).fold(0.0, f64::max);
        assert_eq!(r.sigma_max, m);
    }
}
