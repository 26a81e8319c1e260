use crate::dataset::{DatasetSplit, LabeledVectorSet};
use crate::error::{Error, Result};
use crate::svm::{DecisionReport, SvmModel};

use super::{
    scale_instance, Family, MrId, MrSpec, MrStatus, MrVerdict, SvmSubject, TransformSpec,
    VariantEvidence,
};

fn predict_all(model: &SvmModel, set: &LabeledVectorSet) -> Result<Vec<DecisionReport>> {
    set.rows().map(|x| model.predict(x)).collect()
}

/// Largest pairwise decision-value gap; a class flip or a differing pair
/// layout counts as infinite.
fn compare_reports(
    variant: String,
    base: &[DecisionReport],
    follow: &[DecisionReport],
    same_classes: bool,
) -> VariantEvidence {
    let mut ev = VariantEvidence {
        variant,
        deviation: 0.0,
        output_deviation: 0.0,
        class_flips: 0,
        compared: base.len(),
    };
    for (a, b) in base.iter().zip(follow) {
        if a.class != b.class {
            ev.class_flips += 1;
        }
        if !same_classes || a.pairwise.len() != b.pairwise.len() {
            ev.output_deviation = f64::INFINITY;
            continue;
        }
        for (x, y) in a.pairwise.iter().zip(&b.pairwise) {
            ev.output_deviation = ev.output_deviation.max((x - y).abs());
        }
    }
    ev.deviation = if ev.class_flips > 0 {
        f64::INFINITY
    } else {
        ev.output_deviation
    };
    ev
}

fn verdict(spec: &MrSpec, variants: Vec<VariantEvidence>) -> MrVerdict {
    let evidence = variants.iter().map(|v| v.deviation).fold(0.0, f64::max);
    let triggered_by: Vec<String> = variants
        .iter()
        .filter(|v| v.deviation > spec.threshold)
        .map(|v| v.variant.clone())
        .collect();
    MrVerdict {
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
        diagnostics: None,
    }
}

/// Runs one SVM relation against `subject`.
///
/// Retraining relations fit a base model on the original training set and a
/// follow-up model per variant on the transformed one, then compare class
/// and every pairwise decision value on the (consistently transformed) test
/// set. The scale relation trains once and checks that decision values are
/// affine in the input scale. A subject error yields an inconclusive
/// verdict; an inapplicable relation is a configuration error.
pub fn run_svm_mr(
    spec: &MrSpec,
    split: &DatasetSplit<LabeledVectorSet>,
    subject: &dyn SvmSubject,
) -> Result<MrVerdict> {
    spec.validate()?;
    if spec.id.family != Family::Svm {
        return Err(Error::Config(format!("{} is not an SVM relation", spec.id)));
    }
    let linear = subject.kernel_is_linear();
    if !spec.id.applies_to_kernel(linear) {
        return Err(Error::Config(format!(
            "{} does not apply to the {} kernel",
            spec.id,
            if linear { "linear" } else { "rbf" }
        )));
    }
    let crashed = |stage: &str, e: Error| {
        log::warn!("{}: subject failed during {stage}: {e}", spec.id);
        MrVerdict::inconclusive(spec.id, spec.threshold, format!("{stage}: {e}"))
    };
    let base_model = match subject.fit(&split.train) {
        Ok(m) => m,
        Err(e) => return Ok(crashed("base training", e)),
    };
    let base = match predict_all(&base_model, &split.test) {
        Ok(r) => r,
        Err(e) => return Ok(crashed("base prediction", e)),
    };

    if spec.id == MrId::SVM_SCALE {
        let ks: Vec<f64> = spec
            .variants
            .iter()
            .map(|v| match v {
                TransformSpec::InstanceScale { k } => *k,
                _ => unreachable!("validated"),
            })
            .collect();
        let mut ev = VariantEvidence {
            variant: format!("scale_{}_{}", ks[0], ks[1]),
            deviation: 0.0,
            output_deviation: 0.0,
            class_flips: 0,
            compared: split.test.len(),
        };
        for (x, r1) in split.test.rows().zip(&base) {
            let r2 = base_model.predict(&scale_instance(x, ks[0]));
            let r3 = base_model.predict(&scale_instance(x, ks[1]));
            let (r2, r3) = match (r2, r3) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return Ok(crashed("scaled prediction", e)),
            };
            for ((d1, d2), d3) in r1.pairwise.iter().zip(&r2.pairwise).zip(&r3.pairwise) {
                let gap = ((d2 - d1) - (d3 - d2)).abs();
                ev.output_deviation = ev.output_deviation.max(gap);
            }
        }
        ev.deviation = ev.output_deviation;
        return Ok(verdict(spec, vec![ev]));
    }

    let mut variants = Vec::new();
    for t in &spec.variants {
        let train = t.apply_vectors(&split.train)?;
        // Row order of the test set is irrelevant to the relation, so only
        // feature-level transforms are carried over to it.
        let test = match t {
            TransformSpec::InstanceShuffle { .. } => split.test.clone(),
            _ => t.apply_vectors(&split.test)?,
        };
        let model = match subject.fit(&train) {
            Ok(m) => m,
            Err(e) => return Ok(crashed(&format!("training variant {}", t.variant_id()), e)),
        };
        let follow = match predict_all(&model, &test) {
            Ok(r) => r,
            Err(e) => return Ok(crashed("follow-up prediction", e)),
        };
        variants.push(compare_reports(
            t.variant_id(),
            &base,
            &follow,
            model.classes == base_model.classes,
        ));
    }
    Ok(verdict(spec, variants))
}
