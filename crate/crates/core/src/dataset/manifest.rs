use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    load_cifar_binary, load_digits_csv, split_stratified, subsample_stratified, DatasetSplit,
    LabeledImageSet, LabeledVectorSet, NUM_CLASSES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    DigitsCsv,
    CifarBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// JSON description of where a corpus lives and how to cut it.
///
/// Relative paths are resolved against the manifest's own directory. When
/// `test` is empty the (subsampled) training files are split with `split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: DatasetFormat,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub subsample: Option<SubsampleSpec>,
    #[serde(default)]
    pub test_subsample: Option<SubsampleSpec>,
}

fn default_classes() -> usize {
    NUM_CLASSES
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedDataset {
    Digits(DatasetSplit<LabeledVectorSet>),
    Images(DatasetSplit<LabeledImageSet>),
}

impl DatasetManifest {
    pub fn from_file(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > NUM_CLASSES {
            return Err(Error::Config(format!(
                "class count {} outside 1..={NUM_CLASSES}",
                self.classes
            )));
        }
        if self.train.is_empty() {
            return Err(Error::Config("manifest names no training files".into()));
        }
        if self.test.is_empty() && self.split.is_none() {
            return Err(Error::Config(
                "manifest needs either test files or a split".into(),
            ));
        }
        Ok(())
    }

    pub fn load(&self, base: &Path) -> Result<LoadedDataset> {
        self.validate()?;
        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        };
        match self.format {
            DatasetFormat::DigitsCsv => {
                let load_all = |paths: &[PathBuf]| -> Result<LabeledVectorSet> {
                    let mut rows = Vec::new();
                    let mut labels = Vec::new();
                    for p in paths {
                        let set = load_digits_csv(resolve(p))?;
                        rows.extend(set.rows().map(<[f64]>::to_vec));
                        labels.extend_from_slice(set.labels());
                    }
                    LabeledVectorSet::from_rows(&rows, labels)
                };
                let split = self.cut(load_all(&self.train)?, || load_all(&self.test))?;
                self.check_classes(split.train.labels())?;
                Ok(LoadedDataset::Digits(split))
            }
            DatasetFormat::CifarBinary => {
                let load_all = |paths: &[PathBuf]| -> Result<LabeledImageSet> {
                    let parts = paths
                        .iter()
                        .map(|p| load_cifar_binary(resolve(p)))
                        .collect::<Result<Vec<_>>>()?;
                    LabeledImageSet::concat(&parts)
                };
                let split = self.cut(load_all(&self.train)?, || load_all(&self.test))?;
                self.check_classes(split.train.labels())?;
                Ok(LoadedDataset::Images(split))
            }
        }
    }

    fn cut<S: super::Stratify>(
        &self,
        train: S,
        load_test: impl FnOnce() -> Result<S>,
    ) -> Result<DatasetSplit<S>> {
        let train = match self.subsample {
            Some(s) => subsample_stratified(&train, s.fraction, s.seed)?,
            None => train,
        };
        if self.test.is_empty() {
            let spec = self.split.expect("validated");
            split_stratified(&train, spec.test_fraction, spec.seed)
        } else {
            let test = load_test()?;
            let test = match self.test_subsample.or(self.subsample) {
                Some(s) => subsample_stratified(&test, s.fraction, s.seed)?,
                None => test,
            };
            DatasetSplit::new(train, test)
        }
    }

    fn check_classes(&self, labels: &[u8]) -> Result<()> {
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Validation(format!(
                "label {l} outside the declared {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}
