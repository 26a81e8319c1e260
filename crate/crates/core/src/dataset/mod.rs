//! Labeled corpora: 8x8 gray digit vectors and 32x32 RGB images.
//!
//! Two on-disk formats are supported:
//!
//! * digits CSV: no header, 65 comma-separated numeric fields per row, the
//!   first 64 are pixel intensities and the last one is the class label;
//! * CIFAR-10 binary: fixed 3073-byte records, one label byte followed by the
//!   1024-byte R, G and B planes (row-major within each plane).
//!
//! Images are kept channel-planar in memory as well, so channel permutation
//! is a plane swap.

mod manifest;
mod subsample;
pub mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{DatasetFormat, DatasetManifest, LoadedDataset, SplitSpec, SubsampleSpec};
pub use subsample::{split_stratified, stratified_counts, subsample_stratified, Stratify};

/// Number of pixel columns in a digits row.
pub const DIGIT_FEATURES: usize = 64;
/// Index of the label column in a digits row.
pub const DIGIT_LABEL_COLUMN: usize = DIGIT_FEATURES;
/// Side of a CIFAR-10 image.
pub const CIFAR_SIDE: usize = 32;
/// Bytes per CIFAR-10 record: label plus three 32x32 planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
/// Class count shared by both corpora.
pub const NUM_CLASSES: usize = 10;

/// Row-major `m x n` feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVectorSet {
    n_features: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledVectorSet {
    pub fn new(n_features: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Validation(
                "feature dimension must be positive".into(),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Validation("no instances".into()));
        }
        if features.len() != n_features * labels.len() {
            return Err(Error::Validation(format!(
                "{} feature values do not fill {} rows of {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature in row {}",
                pos / n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "label {bad} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        Ok(Self {
            n_features,
            features,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u8>) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(i) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::Validation(format!("row {i} has a different width")));
        }
        Self::new(n, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.n_features)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Applies `f` to every feature value, keeping labels.
    pub fn map_features(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n_features: self.n_features,
            features: self.features.iter().map(|&v| f(v)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// The raw application table: features followed by the label column.
    pub fn to_table(&self) -> Vec<Vec<f64>> {
        self.rows()
            .zip(&self.labels)
            .map(|(row, &label)| {
                let mut r = row.to_vec();
                r.push(label as f64);
                r
            })
            .collect()
    }

    pub(crate) fn from_parts_unchecked(
        n_features: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Self {
        Self {
            n_features,
            features,
            labels,
        }
    }
}

/// `m` channel-planar RGB images of `height x width`, values on the raw
/// `[0, 255]` pixel scale until a transform moves them off it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImageSet {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl LabeledImageSet {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(
                "image dimensions must be positive".into(),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Validation("no instances".into()));
        }
        if pixels.len() != labels.len() * Self::CHANNELS * height * width {
            return Err(Error::Validation(format!(
                "{} pixel values do not fill {} images of 3x{}x{}",
                pixels.len(),
                labels.len(),
                height,
                width
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite pixel value".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "label {bad} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        Self::CHANNELS * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.pixels.chunks_exact(self.image_len())
    }

    /// One channel plane (0 = R, 1 = G, 2 = B) of image `i`.
    pub fn channel_plane(&self, i: usize, channel: usize) -> &[f32] {
        let plane = self.height * self.width;
        let img = self.image(i);
        &img[channel * plane..(channel + 1) * plane]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Rebuilds the set with each image replaced by `f(image)`; the output
    /// images may have a different (square) side.
    pub fn map_images(
        &self,
        height: usize,
        width: usize,
        mut f: impl FnMut(&[f32]) -> Vec<f32>,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(self.len() * Self::CHANNELS * height * width);
        for img in self.images() {
            let out = f(img);
            if out.len() != Self::CHANNELS * height * width {
                return Err(Error::Argument(format!(
                    "mapped image has {} values, expected {}",
                    out.len(),
                    Self::CHANNELS * height * width
                )));
            }
            pixels.extend_from_slice(&out);
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels: self.labels.clone(),
        })
    }

    /// Selects instances by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates sets of identical geometry.
    pub fn concat(parts: &[LabeledImageSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.height != first.height || p.width != first.width {
                return Err(Error::Argument("image sets differ in geometry".into()));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}

/// Training and test partitions of one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<S> {
    pub train: S,
    pub test: S,
}

impl<S: Stratify> DatasetSplit<S> {
    pub fn new(train: S, test: S) -> Result<Self> {
        if train.len() == 0 || test.len() == 0 {
            return Err(Error::Validation(
                "train and test must both be nonempty".into(),
            ));
        }
        Ok(Self { train, test })
    }
}

fn parse_field(field: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        row,
        message: format!("column {col}: `{}` is not numeric", field.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            message: format!("column {col}: non-finite value"),
        });
    }
    Ok(v)
}

/// Parses digits CSV text into raw 65-column rows without interpreting any
/// column as the label.
pub fn parse_digits_table(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != DIGIT_FEATURES + 1 {
            return Err(Error::Parse {
                row,
                message: format!(
                    "expected {} fields, found {}",
                    DIGIT_FEATURES + 1,
                    fields.len()
                ),
            });
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(col, f)| parse_field(f, row, col))
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Validation("no instances".into()));
    }
    Ok(rows)
}

/// Parses digits CSV text; the label is the last column.
pub fn parse_digits_csv(text: &str) -> Result<LabeledVectorSet> {
    let table = parse_digits_table(text)?;
    let mut features = Vec::with_capacity(table.len() * DIGIT_FEATURES);
    let mut labels = Vec::with_capacity(table.len());
    for (row, values) in table.iter().enumerate() {
        let raw = values[DIGIT_LABEL_COLUMN];
        if raw.fract() != 0.0 || !(0.0..NUM_CLASSES as f64).contains(&raw) {
            return Err(Error::Validation(format!(
                "row {row}: label {raw} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        features.extend_from_slice(&values[..DIGIT_FEATURES]);
        labels.push(raw as u8);
    }
    LabeledVectorSet::new(DIGIT_FEATURES, features, labels)
}

pub fn load_digits_csv(path: impl AsRef<Path>) -> Result<LabeledVectorSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_digits_csv(&text)
}

/// Renders a set as digits CSV, using the shortest exact float text.
pub fn digits_csv_string(set: &LabeledVectorSet) -> String {
    let mut out = String::new();
    for row in set.to_table() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Decodes a CIFAR-10 binary payload.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<LabeledImageSet> {
    let remainder = bytes.len() % CIFAR_RECORD_BYTES;
    if remainder != 0 {
        return Err(Error::Format {
            offset: bytes.len() - remainder,
            message: format!(
                "trailing partial record of {remainder} bytes (records are {CIFAR_RECORD_BYTES} bytes)"
            ),
        });
    }
    if bytes.is_empty() {
        return Err(Error::Validation("no instances".into()));
    }
    let m = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(m);
    let mut pixels = Vec::with_capacity(m * (CIFAR_RECORD_BYTES - 1));
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::Validation(format!(
                "record {i} (byte offset {}): label {label} outside 0..{}",
                i * CIFAR_RECORD_BYTES,
                NUM_CLASSES - 1
            )));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f32));
    }
    LabeledImageSet::new(CIFAR_SIDE, CIFAR_SIDE, pixels, labels)
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes)
}

/// Encodes a set in CIFAR-10 binary layout. Pixels must be integers in
/// `[0, 255]` and images 32x32.
pub fn cifar_binary_bytes(set: &LabeledImageSet) -> Result<Vec<u8>> {
    if set.height() != CIFAR_SIDE || set.width() != CIFAR_SIDE {
        return Err(Error::Argument(format!(
            "CIFAR records are {CIFAR_SIDE}x{CIFAR_SIDE}, set is {}x{}",
            set.height(),
            set.width()
        )));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in set.images().zip(set.labels()) {
        out.push(label);
        for &v in img {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Argument(format!("pixel value {v} is not a byte")));
            }
            out.push(v as u8);
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = cifar_binary_bytes(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
