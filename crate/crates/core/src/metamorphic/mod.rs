//! Metamorphic relations for the two classifiers.
//!
//! SVM relations retrain (or re-query) the subject on transformed inputs and
//! demand identical outputs up to `1e-6`. CNN training relations compare the
//! test-loss curves of all variants through the across-variant spread
//! `sigma_max`; the test-only relations compare per-instance losses and
//! classes of one trained model on transformed test inputs.

mod cnn_mr;
mod equivariance;
mod svm_mr;
mod transforms;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cnn::{TracePoint, TrainedSubject};
use crate::dataset::{DatasetSplit, LabeledImageSet, LabeledVectorSet};
use crate::error::{Error, Result};
use crate::grid::Dihedral;
use crate::svm::SvmModel;

pub use cnn_mr::{run_cnn_test_only_mr, run_cnn_training_mr, sigma_report};
pub use equivariance::{
    check_conv_equivariance, permute_model_input_channels, transport_model, EquivarianceReport,
};
pub use svm_mr::run_svm_mr;
pub use transforms::{
    check_bijection, dihedral_transform, inverse_permutation, normalize_images, permute_channels,
    permute_features, scale_images, scale_instance, shift_features, shuffle_instances,
    ChannelOrder, Permutation, TransformSpec,
};

/// Exact-match tolerance of the SVM relations.
pub const SVM_TOLERANCE: f64 = 1e-6;

/// Per-instance loss deviation at which a test-only CNN relation fails.
pub const TEST_ONLY_LOSS_THRESHOLD: f64 = 0.1;

/// `sigma_max` threshold for the CNN training relations on the desk-scale
/// configuration: three times the largest clean `sigma_max` seen over seeds
/// 0, 1 and 2 on both training relations (see [`calibrate_threshold`]).
pub const DESK_SIGMA_THRESHOLD: f64 = 0.83;

/// `factor * max(clean sigma_max)`.
pub fn calibrate_threshold(clean_sigma_max: &[f64], factor: f64) -> f64 {
    factor * clean_sigma_max.iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Svm,
    Cnn,
}

/// Relation identifier, written `svm-mr1` .. `cnn-mr4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MrId {
    pub family: Family,
    pub index: u8,
}

impl MrId {
    pub const SVM_PERMUTE: MrId = MrId::new_const(Family::Svm, 1);
    pub const SVM_SHUFFLE: MrId = MrId::new_const(Family::Svm, 2);
    pub const SVM_SHIFT: MrId = MrId::new_const(Family::Svm, 3);
    pub const SVM_SCALE: MrId = MrId::new_const(Family::Svm, 4);
    pub const CNN_CHANNELS: MrId = MrId::new_const(Family::Cnn, 1);
    pub const CNN_DIHEDRAL: MrId = MrId::new_const(Family::Cnn, 2);
    pub const CNN_NORMALIZE: MrId = MrId::new_const(Family::Cnn, 3);
    pub const CNN_SCALE: MrId = MrId::new_const(Family::Cnn, 4);

    const fn new_const(family: Family, index: u8) -> Self {
        Self { family, index }
    }

    pub fn new(family: Family, index: u8) -> Result<Self> {
        if !(1..=4).contains(&index) {
            return Err(Error::Config(format!(
                "relation index {index} outside 1..4"
            )));
        }
        Ok(Self { family, index })
    }

    pub fn all(family: Family) -> [MrId; 4] {
        [1, 2, 3, 4].map(|index| MrId { family, index })
    }

    /// Whether the relation holds for a kernel of the given kind: the shift
    /// relation needs a translation-invariant kernel, the scale relation a
    /// linear one.
    pub fn applies_to_kernel(self, linear: bool) -> bool {
        match (self.family, self.index) {
            (Family::Svm, 3) => !linear,
            (Family::Svm, 4) => linear,
            (Family::Svm, _) => true,
            (Family::Cnn, _) => false,
        }
    }

    /// Training relations retrain one model per variant.
    pub fn is_training(self) -> bool {
        match self.family {
            Family::Svm => self.index != 4,
            Family::Cnn => self.index <= 2,
        }
    }
}

impl fmt::Display for MrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            Family::Svm => "svm",
            Family::Cnn => "cnn",
        };
        write!(f, "{family}-mr{}", self.index)
    }
}

impl FromStr for MrId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown relation id `{s}`"));
        let (family, rest) = s.split_once("-mr").ok_or_else(bad)?;
        let family = match family {
            "svm" => Family::Svm,
            "cnn" => Family::Cnn,
            _ => return Err(bad()),
        };
        let index = rest.parse::<u8>().map_err(|_| bad())?;
        MrId::new(family, index).map_err(|_| bad())
    }
}

impl TryFrom<String> for MrId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MrId> for String {
    fn from(id: MrId) -> String {
        id.to_string()
    }
}

/// JSON has no infinities, so non-finite values travel as strings.
pub(crate) mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrStatus {
    Pass,
    Killed,
    /// The subject crashed; nothing can be concluded.
    Inconclusive,
}

/// Comparison outcome of one follow-up variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEvidence {
    pub variant: String,
    /// The relation's deviation measure; a class flip counts as infinite.
    #[serde(with = "extended_float")]
    pub deviation: f64,
    /// Largest raw output difference (decision value or loss), ignoring flips.
    #[serde(with = "extended_float")]
    pub output_deviation: f64,
    pub class_flips: usize,
    pub compared: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSigma {
    pub step: usize,
    #[serde(with = "extended_float")]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTrace {
    pub variant: String,
    pub trace: Vec<TracePoint>,
    /// Step at which training diverged, if it did.
    pub diverged_at: Option<usize>,
}

/// Across-variant spread of the test loss over training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaMaxReport {
    /// Population standard deviation over variants at every step all
    /// variants reached.
    pub per_step: Vec<StepSigma>,
    /// Maximum of `per_step`, or infinity when a variant diverged.
    #[serde(with = "extended_float")]
    pub sigma_max: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
    pub traces: Vec<VariantTrace>,
}

impl SigmaMaxReport {
    pub fn killed_at(&self, threshold: f64) -> bool {
        self.sigma_max > threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrVerdict {
    pub mr: MrId,
    pub status: MrStatus,
    /// Largest variant deviation, or `sigma_max` for training CNN relations.
    #[serde(with = "extended_float")]
    pub evidence: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
    pub variants: Vec<VariantEvidence>,
    /// Variants whose deviation crossed the threshold.
    pub triggered_by: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<SigmaMaxReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

impl MrVerdict {
    pub fn inconclusive(mr: MrId, threshold: f64, diagnostics: String) -> Self {
        Self {
            mr,
            status: MrStatus::Inconclusive,
            evidence: f64::NAN,
            threshold,
            variants: Vec::new(),
            triggered_by: Vec::new(),
            sigma: None,
            diagnostics: Some(diagnostics),
        }
    }

    pub fn is_killed(&self) -> bool {
        self.status == MrStatus::Killed
    }
}

/// One relation with its follow-up variants and failure threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSpec {
    pub id: MrId,
    pub variants: Vec<TransformSpec>,
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

impl MrSpec {
    /// The standard variant set of a relation. `sigma_threshold` applies to
    /// the CNN training relations only.
    pub fn standard(id: MrId, sigma_threshold: f64) -> Self {
        let (variants, threshold) = match (id.family, id.index) {
            (Family::Svm, 1) => (
                vec![TransformSpec::FeaturePermutation {
                    order: Permutation::Cycle { shift: 1 },
                }],
                SVM_TOLERANCE,
            ),
            (Family::Svm, 2) => (
                vec![TransformSpec::InstanceShuffle {
                    order: Permutation::Derangement { seed: 1 },
                }],
                SVM_TOLERANCE,
            ),
            (Family::Svm, 3) => (vec![TransformSpec::FeatureShift { k: 3.0 }], SVM_TOLERANCE),
            (Family::Svm, _) => (
                vec![
                    TransformSpec::InstanceScale { k: 2.0 },
                    TransformSpec::InstanceScale { k: 3.0 },
                ],
                SVM_TOLERANCE,
            ),
            (Family::Cnn, 1) => (
                ChannelOrder::ALL
                    .iter()
                    .map(|&order| TransformSpec::ChannelOrder { order })
                    .collect(),
                sigma_threshold,
            ),
            (Family::Cnn, 2) => (
                Dihedral::ALL
                    .iter()
                    .map(|&variant| TransformSpec::Dihedral { variant })
                    .collect(),
                sigma_threshold,
            ),
            (Family::Cnn, 3) => (vec![TransformSpec::Normalize], TEST_ONLY_LOSS_THRESHOLD),
            (Family::Cnn, _) => (
                [0.5, 2.0, 29.0]
                    .iter()
                    .map(|&k| TransformSpec::InstanceScale { k })
                    .collect(),
                TEST_ONLY_LOSS_THRESHOLD,
            ),
        };
        Self {
            id,
            variants,
            threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config(format!("{} has no variants", self.id)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!(
                "{} threshold must be non-negative",
                self.id
            )));
        }
        let kinds_ok = self
            .variants
            .iter()
            .all(|v| match (self.id.family, self.id.index) {
                (Family::Svm, 1) => matches!(v, TransformSpec::FeaturePermutation { .. }),
                (Family::Svm, 2) => matches!(v, TransformSpec::InstanceShuffle { .. }),
                (Family::Svm, 3) => matches!(v, TransformSpec::FeatureShift { .. }),
                (Family::Svm, _) => matches!(v, TransformSpec::InstanceScale { .. }),
                (Family::Cnn, 1) => matches!(v, TransformSpec::ChannelOrder { .. }),
                (Family::Cnn, 2) => matches!(v, TransformSpec::Dihedral { .. }),
                (Family::Cnn, 3) => matches!(v, TransformSpec::Normalize),
                (Family::Cnn, _) => matches!(v, TransformSpec::InstanceScale { k } if *k > 0.0),
            });
        if !kinds_ok {
            return Err(Error::Config(format!(
                "{} has a variant of the wrong kind",
                self.id
            )));
        }
        if self.id == MrId::SVM_SCALE {
            let ks: Vec<f64> = self
                .variants
                .iter()
                .map(|v| match v {
                    TransformSpec::InstanceScale { k } => *k,
                    _ => unreachable!(),
                })
                .collect();
            // 1, kb, kc must be equally spaced for the differences to agree.
            if ks.len() != 2 || ks[1] - ks[0] != ks[0] - 1.0 {
                return Err(Error::Config(
                    "svm-mr4 needs two scales kb, kc with kc - kb = kb - 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A relation suite, as read from or written to a suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSuite {
    pub relations: Vec<MrSpec>,
}

impl MrSuite {
    pub fn standard(family: Family, sigma_threshold: f64) -> Self {
        Self {
            relations: MrId::all(family)
                .into_iter()
                .map(|id| MrSpec::standard(id, sigma_threshold))
                .collect(),
        }
    }

    pub fn get(&self, id: MrId) -> Option<&MrSpec> {
        self.relations.iter().find(|r| r.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.relations {
            r.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// A trainable SVM implementation under test.
pub trait SvmSubject: Sync {
    fn kernel_is_linear(&self) -> bool;
    fn fit(&self, train: &LabeledVectorSet) -> Result<SvmModel>;
}

/// A trainable CNN implementation under test.
pub trait CnnSubject: Sync {
    fn train(&self, split: &DatasetSplit<LabeledImageSet>) -> Result<TrainedSubject>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ids_round_trip_through_text() {
        for f in [Family::Svm, Family::Cnn] {
            for id in MrId::all(f) {
                assert_eq!(id.to_string().parse::<MrId>().unwrap(), id);
            }
        }
        assert_eq!(MrId::SVM_SHIFT.to_string(), "svm-mr3");
        assert!("svm-mr5".parse::<MrId>().is_err());
        assert!("nn-mr1".parse::<MrId>().is_err());
    }

    #[test]
    fn kernel_applicability() {
        assert!(MrId::SVM_SHIFT.applies_to_kernel(false));
        assert!(!MrId::SVM_SHIFT.applies_to_kernel(true));
        assert!(MrId::SVM_SCALE.applies_to_kernel(true));
        assert!(!MrId::SVM_SCALE.applies_to_kernel(false));
        assert!(
            MrId::SVM_PERMUTE.applies_to_kernel(true) && MrId::SVM_PERMUTE.applies_to_kernel(false)
        );
    }

    #[test]
    fn standard_suites_validate_and_serialize() {
        for f in [Family::Svm, Family::Cnn] {
            let s = MrSuite::standard(f, DESK_SIGMA_THRESHOLD);
            s.validate().unwrap();
            assert_eq!(MrSuite::from_json(&s.to_json().unwrap()).unwrap(), s);
        }
        let cnn = MrSuite::standard(Family::Cnn, 1.0);
        assert_eq!(cnn.get(MrId::CNN_CHANNELS).unwrap().variants.len(), 6);
        assert_eq!(cnn.get(MrId::CNN_DIHEDRAL).unwrap().variants.len(), 8);
        assert_eq!(cnn.get(MrId::CNN_SCALE).unwrap().variants.len(), 3);
    }

    #[test]
    fn bad_scale_pair_rejected() {
        let mut s = MrSpec::standard(MrId::SVM_SCALE, 0.0);
        s.variants[1] = TransformSpec::InstanceScale { k: 4.0 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn infinite_evidence_survives_json() {
        let v = MrVerdict {
            mr: MrId::CNN_CHANNELS,
            status: MrStatus::Killed,
            evidence: f64::INFINITY,
            threshold: 0.5,
            variants: vec![],
            triggered_by: vec!["bgr".into()],
            sigma: None,
            diagnostics: None,
        };
        let text = serde_json::to_string(&v).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<MrVerdict>(&text).unwrap(), v);
    }

    #[test]
    fn calibration_is_a_multiple_of_the_worst_clean_run() {
        assert_eq!(calibrate_threshold(&[0.01, 0.04, 0.02], 3.0), 0.12);
    }

    proptest! {
        #[test]
        fn raising_the_threshold_never_kills(sigma in 0.0f64..10.0, t in 0.0f64..10.0, dt in 0.0f64..10.0) {
            let r = SigmaMaxReport { per_step: vec![], sigma_max: sigma, threshold: t, traces: vec![] };
            if !r.killed_at(t) {
                prop_assert!(!r.killed_at(t + dt));
            }
        }
    }
}
