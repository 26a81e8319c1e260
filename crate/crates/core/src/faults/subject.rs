use std::collections::BTreeSet;
use std::sync::Mutex;

use crate::cnn::{self, CalibrationSource, LrPolicy, TrainConfig, TrainedSubject};
use crate::dataset::{DatasetSplit, LabeledImageSet, LabeledVectorSet};
use crate::error::{Error, Result};
use crate::metamorphic::{CnnSubject, SvmSubject};
use crate::svm::{default_gamma, train_multiclass, KernelSpec, SvmModel, SvmTrainConfig};

use super::{Fault, SubjectConfig, SubjectKind, SvmKernelChoice};

/// Fault sites whose altered code actually ran.
#[derive(Debug, Default)]
struct ActivationLog(Mutex<BTreeSet<&'static str>>);

impl ActivationLog {
    fn hit(&self, fault: &Option<Fault>) {
        if let Some(f) = fault {
            self.0.lock().expect("log poisoned").insert(f.site());
        }
    }

    fn sites(&self) -> Vec<&'static str> {
        self.0
            .lock()
            .expect("log poisoned")
            .iter()
            .copied()
            .collect()
    }
}

#[derive(Debug)]
pub struct SvmSubjectImpl {
    kernel: SvmKernelChoice,
    config: SvmTrainConfig,
    fault: Option<Fault>,
    log: ActivationLog,
}

impl SvmSubjectImpl {
    pub fn activated_sites(&self) -> Vec<&'static str> {
        self.log.sites()
    }
}

pub fn build_svm_subject(cfg: &SubjectConfig) -> Result<SvmSubjectImpl> {
    let SubjectKind::Svm { kernel, train } = &cfg.subject else {
        return Err(Error::Config(format!("{cfg} is not an SVM subject")));
    };
    train.validate()?;
    Ok(SvmSubjectImpl {
        kernel: *kernel,
        config: *train,
        fault: cfg.active_mutant()?.map(|m| m.fault.clone()),
        log: ActivationLog::default(),
    })
}

impl SvmSubject for SvmSubjectImpl {
    fn kernel_is_linear(&self) -> bool {
        matches!(self.kernel, SvmKernelChoice::Linear)
    }

    fn fit(&self, train: &LabeledVectorSet) -> Result<SvmModel> {
        let rows: Vec<&[f64]> = train.rows().collect();
        let labels: Vec<i64> = match &self.fault {
            Some(Fault::LabelColumn { column }) => {
                self.log.hit(&self.fault);
                let width = train.n_features();
                rows.iter()
                    .zip(train.labels())
                    .map(|(r, &l)| {
                        if *column < width {
                            r[*column].round() as i64
                        } else {
                            l as i64
                        }
                    })
                    .collect()
            }
            _ => train.labels().iter().map(|&l| l as i64).collect(),
        };
        let kernel = match self.kernel {
            SvmKernelChoice::Linear => KernelSpec::Linear,
            SvmKernelChoice::Rbf { gamma: Some(g) } => KernelSpec::rbf(g)?,
            SvmKernelChoice::Rbf { gamma: None } => {
                KernelSpec::rbf(default_gamma(rows.iter().copied())?)?
            }
        };
        train_multiclass(&rows, &labels, &kernel, &self.config)
    }
}

#[derive(Debug)]
pub struct CnnSubjectImpl {
    config: TrainConfig,
    fault: Option<Fault>,
    log: ActivationLog,
}

impl CnnSubjectImpl {
    /// Training configuration with any configuration-level fault folded in.
    pub fn effective_config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn activated_sites(&self) -> Vec<&'static str> {
        self.log.sites()
    }
}

pub fn build_cnn_subject(cfg: &SubjectConfig) -> Result<CnnSubjectImpl> {
    let SubjectKind::Cnn { train } = &cfg.subject else {
        return Err(Error::Config(format!("{cfg} is not a CNN subject")));
    };
    let fault = cfg.active_mutant()?.map(|m| m.fault.clone());
    let mut config = train.clone();
    match &fault {
        Some(Fault::Loss { mode }) => config.loss.mode = *mode,
        Some(Fault::LearningRateScale { factor }) => config.lr.initial *= factor,
        Some(Fault::DecayFromStart) => config.lr.policy = LrPolicy::DecayFromStart,
        Some(Fault::GeometricLearningRate { per_step }) => {
            config.lr.policy = LrPolicy::Geometric {
                per_step: *per_step,
            }
        }
        Some(Fault::CalibrateOnTest) => config.calibration_source = CalibrationSource::Test,
        Some(Fault::RemoveSkipConnections) => config.architecture.skip_connections = false,
        Some(Fault::BlocksPerStage { blocks }) => config.architecture.blocks_per_stage = *blocks,
        Some(Fault::FillChannel { channel, value }) => {
            config.preprocess.fill_channel = Some((*channel, *value))
        }
        Some(Fault::ExtraZeroChannel) => {
            config.preprocess.extra_zero_channel = true;
            config.architecture.input_channels += 1;
        }
        Some(Fault::LabelColumn { .. }) => {
            return Err(Error::Config(
                "label-column faults apply to SVM subjects".into(),
            ))
        }
        Some(Fault::DropShards { .. } | Fault::SwapTrainTest | Fault::Crash) | None => {}
    }
    config.validate()?;
    Ok(CnnSubjectImpl {
        config,
        fault,
        log: ActivationLog::default(),
    })
}

fn drop_shards(set: &LabeledImageSet, shards: usize, dropped: &[usize]) -> LabeledImageSet {
    let n = set.len();
    let shards = shards.max(1);
    let keep: Vec<usize> = (0..n)
        .filter(|i| !dropped.contains(&(i * shards / n)))
        .collect();
    set.select(&keep)
}

impl CnnSubject for CnnSubjectImpl {
    fn train(&self, split: &DatasetSplit<LabeledImageSet>) -> Result<TrainedSubject> {
        self.log.hit(&self.fault);
        let altered;
        let split = match &self.fault {
            Some(Fault::Crash) => {
                return Err(Error::Training(
                    "injected failure before the first step".into(),
                ))
            }
            Some(Fault::SwapTrainTest) => {
                altered = DatasetSplit {
                    train: split.test.clone(),
                    test: split.train.clone(),
                };
                &altered
            }
            Some(Fault::DropShards { shards, dropped }) => {
                altered = DatasetSplit {
                    train: drop_shards(&split.train, *shards, dropped),
                    test: split.test.clone(),
                };
                &altered
            }
            _ => split,
        };
        cnn::train(&self.config, split)
    }
}
