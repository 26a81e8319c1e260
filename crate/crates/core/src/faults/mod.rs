//! Registry of injectable faults and the subjects that carry them.
//!
//! Each mutant is a behavior flag on the reference implementations rather
//! than an edit of their source text. Exactly one deviation is switched on
//! per mutant; with no mutant the subjects run the unmodified code paths.

mod subject;

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::cnn::{LossMode, TrainConfig};
use crate::error::{Error, Result};
use crate::metamorphic::Family;
use crate::svm::SvmTrainConfig;

pub use subject::{build_cnn_subject, build_svm_subject, CnnSubjectImpl, SvmSubjectImpl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutantCategory {
    WrongLabelColumn,
    ReduceTrainingData,
    ChangeLossFunction,
    ChangeLearningRateDecay,
    InterchangeTrainTest,
    ChangeArchitecture,
    PadWrongChannels,
    RuntimeException,
}

impl MutantCategory {
    pub fn name(self) -> &'static str {
        match self {
            Self::WrongLabelColumn => "wrong label column",
            Self::ReduceTrainingData => "reduce the training data files",
            Self::ChangeLossFunction => "change the loss function",
            Self::ChangeLearningRateDecay => "change the learning rate decay",
            Self::InterchangeTrainTest => "interchange training and testing",
            Self::ChangeArchitecture => "change the architecture",
            Self::PadWrongChannels => "pad the wrong channels",
            Self::RuntimeException => "run-time exception",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
}

/// The single behavioral deviation a mutant switches on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Labels are read from column `column` of the `[features..., label]`
    /// table instead of the last one. Features are left as they are.
    LabelColumn {
        column: usize,
    },
    /// The training set is cut into `shards` contiguous files and the listed
    /// ones are never loaded.
    DropShards {
        shards: usize,
        dropped: Vec<usize>,
    },
    Loss {
        mode: LossMode,
    },
    LearningRateScale {
        factor: f64,
    },
    DecayFromStart,
    GeometricLearningRate {
        per_step: f64,
    },
    SwapTrainTest,
    /// Batch-norm statistics are calibrated on test instances.
    CalibrateOnTest,
    RemoveSkipConnections,
    BlocksPerStage {
        blocks: usize,
    },
    /// Channel `channel` is overwritten with `value` before standardization.
    FillChannel {
        channel: usize,
        value: f32,
    },
    /// A zero plane is appended to every input, widening the stem.
    ExtraZeroChannel,
    Crash,
}

impl Fault {
    /// Name of the code site the fault alters.
    pub fn site(&self) -> &'static str {
        match self {
            Fault::LabelColumn { .. } => "svm.label_extraction",
            Fault::DropShards { .. } => "cnn.data_loading",
            Fault::Loss { .. } => "cnn.loss",
            Fault::LearningRateScale { .. }
            | Fault::DecayFromStart
            | Fault::GeometricLearningRate { .. } => "cnn.learning_rate",
            Fault::SwapTrainTest => "cnn.data_roles",
            Fault::CalibrateOnTest => "cnn.batch_norm_calibration",
            Fault::RemoveSkipConnections | Fault::BlocksPerStage { .. } => "cnn.architecture",
            Fault::FillChannel { .. } | Fault::ExtraZeroChannel => "cnn.input_channels",
            Fault::Crash => "cnn.entry",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutantSpec {
    pub id: String,
    pub target: Family,
    /// SVM mutants belong to one kernel's program.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelKind>,
    pub category: MutantCategory,
    pub description: String,
    /// The source-level mutant this flag stands in for.
    pub analogue: String,
    pub fault: Fault,
}

fn svm_mutants(out: &mut Vec<MutantSpec>) {
    for (kernel, prefix) in [(KernelKind::Linear, "l"), (KernelKind::Rbf, "r")] {
        for (num, column) in [(2, 1), (5, 4), (8, 10), (11, 21), (22, 29), (31, 2)] {
            out.push(MutantSpec {
                id: format!("{prefix}{num}"),
                target: Family::Svm,
                kernel: Some(kernel),
                category: MutantCategory::WrongLabelColumn,
                description: format!(
                    "labels read from feature column {column} instead of the label column"
                ),
                analogue: format!(
                    "{} digits classifier, label slice pointing at column {column}",
                    if kernel == KernelKind::Linear {
                        "linear"
                    } else {
                        "rbf"
                    }
                ),
                fault: Fault::LabelColumn { column },
            });
        }
    }
}

fn cnn_mutants(out: &mut Vec<MutantSpec>) {
    use MutantCategory::*;
    let mut add = |id: &str, category, description: &str, analogue: &str, fault| {
        out.push(MutantSpec {
            id: id.into(),
            target: Family::Cnn,
            kernel: None,
            category,
            description: description.into(),
            analogue: analogue.into(),
            fault,
        })
    };
    add(
        "c9",
        ReduceTrainingData,
        "second of five training shards is skipped",
        "training file list loses one entry",
        Fault::DropShards {
            shards: 5,
            dropped: vec![1],
        },
    );
    add(
        "c30",
        ReduceTrainingData,
        "only the first of five training shards is loaded",
        "training file range truncated to one file",
        Fault::DropShards {
            shards: 5,
            dropped: vec![1, 2, 3, 4],
        },
    );
    add(
        "c116",
        ReduceTrainingData,
        "last of five training shards is skipped",
        "off-by-one in the training file range",
        Fault::DropShards {
            shards: 5,
            dropped: vec![4],
        },
    );
    add(
        "c29",
        ChangeLossFunction,
        "weight-decay term subtracted from the cross-entropy",
        "loss = cross_entropy - weight_decay",
        Fault::Loss {
            mode: LossMode::MinusWeightDecay,
        },
    );
    add(
        "c31",
        ChangeLossFunction,
        "cross-entropy summed over the batch instead of averaged",
        "reduce_mean replaced in the cross-entropy",
        Fault::Loss {
            mode: LossMode::SummedCrossEntropy,
        },
    );
    add(
        "c32",
        ChangeLossFunction,
        "weight-decay term not halved",
        "constant in the l2 penalty altered",
        Fault::Loss {
            mode: LossMode::UnhalvedWeightDecay,
        },
    );
    add(
        "c45",
        ChangeLossFunction,
        "weight-decay term dropped",
        "l2 penalty removed from the loss",
        Fault::Loss {
            mode: LossMode::NoWeightDecay,
        },
    );
    add(
        "c43",
        ChangeLearningRateDecay,
        "initial learning rate ten times too large",
        "learning-rate multiplier altered",
        Fault::LearningRateScale { factor: 10.0 },
    );
    add(
        "c44",
        ChangeLearningRateDecay,
        "decay boundaries shifted so decay starts at epoch zero",
        "boundary comparison altered",
        Fault::DecayFromStart,
    );
    add(
        "c221",
        ChangeLearningRateDecay,
        "learning rate grows geometrically every step",
        "decay factor inverted",
        Fault::GeometricLearningRate { per_step: 1.08 },
    );
    add(
        "c49",
        InterchangeTrainTest,
        "model trained on the test set and evaluated on the training set",
        "train and test file lists swapped",
        Fault::SwapTrainTest,
    );
    add(
        "r67",
        InterchangeTrainTest,
        "batch-norm statistics calibrated on test instances",
        "is_training flag inverted for the statistics pass",
        Fault::CalibrateOnTest,
    );
    add(
        "r6",
        ChangeArchitecture,
        "residual skip connections removed",
        "shortcut addition dropped",
        Fault::RemoveSkipConnections,
    );
    add(
        "r49",
        ChangeArchitecture,
        "two residual blocks per stage instead of one",
        "block count altered",
        Fault::BlocksPerStage { blocks: 2 },
    );
    add(
        "c50",
        PadWrongChannels,
        "blue channel overwritten with a constant before standardization",
        "padding applied to the channel axis",
        Fault::FillChannel {
            channel: 2,
            value: 128.0,
        },
    );
    add(
        "r48",
        PadWrongChannels,
        "a zero depth channel appended to every input",
        "depth axis padded",
        Fault::ExtraZeroChannel,
    );
    add(
        "crash",
        RuntimeException,
        "training raises before the first step",
        "representative of the discarded exception-raising mutants",
        Fault::Crash,
    );
}

/// The immutable mutant catalog.
pub fn list_mutants() -> &'static [MutantSpec] {
    static CATALOG: OnceLock<Vec<MutantSpec>> = OnceLock::new();
    CATALOG.get_or_init(|| {
        let mut v = Vec::new();
        svm_mutants(&mut v);
        cnn_mutants(&mut v);
        v
    })
}

pub fn find_mutant(id: &str) -> Result<&'static MutantSpec> {
    list_mutants()
        .iter()
        .find(|m| m.id == id)
        .ok_or_else(|| Error::UnknownMutant(id.to_string()))
}

pub fn catalog_json() -> Result<String> {
    Ok(serde_json::to_string_pretty(list_mutants())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SvmKernelChoice {
    Linear,
    /// `gamma: None` uses `1 / (n_features * Var(features))` of the
    /// training set.
    Rbf {
        #[serde(default)]
        gamma: Option<f64>,
    },
}

impl SvmKernelChoice {
    pub fn kind(self) -> KernelKind {
        match self {
            Self::Linear => KernelKind::Linear,
            Self::Rbf { .. } => KernelKind::Rbf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SubjectKind {
    Svm {
        kernel: SvmKernelChoice,
        #[serde(default)]
        train: SvmTrainConfig,
    },
    Cnn {
        train: TrainConfig,
    },
}

/// A classifier family, its hyperparameters and at most one active mutant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectConfig {
    pub subject: SubjectKind,
    #[serde(default)]
    pub mutant: Option<String>,
}

impl SubjectConfig {
    pub fn clean(subject: SubjectKind) -> Self {
        Self {
            subject,
            mutant: None,
        }
    }

    pub fn family(&self) -> Family {
        match self.subject {
            SubjectKind::Svm { .. } => Family::Svm,
            SubjectKind::Cnn { .. } => Family::Cnn,
        }
    }

    /// The active mutant, checked against the catalog and this family.
    pub fn active_mutant(&self) -> Result<Option<&'static MutantSpec>> {
        let Some(id) = &self.mutant else {
            return Ok(None);
        };
        let spec = find_mutant(id)?;
        if spec.target != self.family() {
            return Err(Error::Config(format!(
                "mutant {id} targets {:?}, subject is {:?}",
                spec.target,
                self.family()
            )));
        }
        if let (Some(k), SubjectKind::Svm { kernel, .. }) = (spec.kernel, &self.subject) {
            if k != kernel.kind() {
                return Err(Error::Config(format!(
                    "mutant {id} belongs to the {k:?} kernel program"
                )));
            }
        }
        Ok(Some(spec))
    }
}

/// Returns `cfg` with mutant `id` switched on.
pub fn apply_mutant(cfg: &SubjectConfig, id: &str) -> Result<SubjectConfig> {
    if let Some(active) = &cfg.mutant {
        return Err(Error::Config(format!(
            "mutant {active} already active; at most one per subject"
        )));
    }
    let out = SubjectConfig {
        subject: cfg.subject.clone(),
        mutant: Some(id.to_string()),
    };
    out.active_mutant()?;
    Ok(out)
}

impl fmt::Display for SubjectConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match &self.subject {
            SubjectKind::Svm { kernel, .. } => match kernel.kind() {
                KernelKind::Linear => "svm-linear",
                KernelKind::Rbf => "svm-rbf",
            },
            SubjectKind::Cnn { .. } => "cnn",
        };
        match &self.mutant {
            Some(m) => write!(f, "{base}/{m}"),
            None => write!(f, "{base}/clean"),
        }
    }
}
