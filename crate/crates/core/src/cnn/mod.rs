//! Desk-scale residual CNN with hand-written forward and backward passes.
//!
//! Weights and activations are `f32`; every routine is generic over
//! [`Real`] so the same code runs in `f64` for finite-difference checks.

pub mod layers;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{BatchNorm, ConvLayer, Dense};
pub use model::{
    loss_and_grad, Architecture, CnnModel, DecayScope, ForwardCache, Gradients, LossMode, LossSpec,
    Mode, Preprocess, ResidualBlock,
};
pub use train::{
    evaluate, prepare_image, train, CalibrationSource, Evaluation, InstanceResult, LrPolicy,
    LrSchedule, TracePoint, TrainConfig, TrainRun, TrainedSubject,
};

/// Scalar type of the network.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + Serialize
    + for<'de> Deserialize<'de>
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn widen(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

/// Dense tensor, either `(channels, height, width)` or `(units)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Argument(format!(
                "unsupported tensor rank {}",
                shape.len()
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} holds {count} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite tensor value".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn image(channels: usize, side: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![channels, side, side], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// Per-instance standardization `(x - mean(x)) / std(x)` over every value
/// of the instance (population standard deviation).
pub fn normalize_values<T: Real>(values: &[T]) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::Normalization("empty instance".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.widen()).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v.widen() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Normalization(
            "instance has zero standard deviation".into(),
        ));
    }
    Ok(values
        .iter()
        .map(|v| T::from_f64((v.widen() - mean) / std))
        .collect())
}

pub fn normalize_instance<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor {
        shape: image.shape.clone(),
        data: normalize_values(&image.data)?,
    })
}

/// Applies one conv layer to a single `(in_ch, side, side)` tensor.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let &[ch, h, w] = input.shape() else {
        return Err(Error::Argument(
            "conv input must be (channels, height, width)".into(),
        ));
    };
    if ch != layer.in_ch {
        return Err(Error::Argument(format!(
            "input has {ch} channels, layer expects {}",
            layer.in_ch
        )));
    }
    if h != w {
        return Err(Error::Argument(format!(
            "conv input must be square, got {h}x{w}"
        )));
    }
    if layer.weights.len() != layer.out_ch * layer.in_ch * layer.kernel * layer.kernel {
        return Err(Error::Argument(
            "weight buffer does not match layer shape".into(),
        ));
    }
    if layer.output_side(h).is_none() {
        return Err(Error::Argument(format!(
            "kernel {} does not fit input {h} with padding {}",
            layer.kernel, layer.padding
        )));
    }
    let (data, side) = layer.forward(input.data(), 1, h);
    Tensor::new(vec![layer.out_ch, side, side], data)
}
