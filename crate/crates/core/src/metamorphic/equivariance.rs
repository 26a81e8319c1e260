use serde::{Deserialize, Serialize};

use crate::cnn::{
    conv2d_forward, Architecture, CnnModel, ConvLayer, Mode, Preprocess, Real, Tensor,
};
use crate::error::{Error, Result};
use crate::grid::Dihedral;
use crate::rng::SeededRng;

use super::ChannelOrder;

const LAYER_TOLERANCE: f64 = 1e-6;
const NETWORK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub trials: usize,
    pub seed: u64,
    /// The 3x3 input / 2x2 kernel worked example and its transposed twin.
    pub worked_example: bool,
    pub layer_checks: usize,
    pub layer_failures: usize,
    pub layer_max_relative_error: f64,
    pub network_checks: usize,
    pub network_failures: usize,
    pub network_max_relative_error: f64,
}

impl EquivarianceReport {
    pub fn passed(&self) -> bool {
        self.worked_example && self.layer_failures == 0 && self.network_failures == 0
    }
}

/// Applies `d` to every spatial kernel plane of a conv layer.
fn transform_conv<T: Real>(layer: &ConvLayer<T>, d: Dihedral) -> ConvLayer<T> {
    let mut out = layer.clone();
    out.weights = d
        .apply_planes(&layer.weights, layer.kernel)
        .expect("square kernels");
    out
}

fn permute_in_channels<T: Real>(layer: &ConvLayer<T>, order: ChannelOrder) -> ConvLayer<T> {
    let k2 = layer.kernel * layer.kernel;
    let mut out = layer.clone();
    for o in 0..layer.out_ch {
        for c in 0..layer.in_ch {
            let src = if c < 3 { order.0[c] } else { c };
            let from = (o * layer.in_ch + src) * k2;
            let to = (o * layer.in_ch + c) * k2;
            out.weights[to..to + k2].copy_from_slice(&layer.weights[from..from + k2]);
        }
    }
    out
}

/// The model that computes on `d`-transformed inputs what `model` computes
/// on the originals: every conv kernel transformed by `d`. Batch-norm,
/// pooling and the dense head carry no spatial layout and stay as they are.
pub fn transport_model<T: Real>(model: &CnnModel<T>, d: Dihedral) -> CnnModel<T> {
    let mut out = model.clone();
    out.stem = transform_conv(&model.stem, d);
    for (b, src) in out.blocks.iter_mut().zip(&model.blocks) {
        b.conv1 = transform_conv(&src.conv1, d);
        b.conv2 = transform_conv(&src.conv2, d);
        b.projection = src.projection.as_ref().map(|p| transform_conv(p, d));
    }
    out
}

/// The model for inputs whose first three planes are reordered by `order`.
pub fn permute_model_input_channels<T: Real>(
    model: &CnnModel<T>,
    order: ChannelOrder,
) -> CnnModel<T> {
    let mut out = model.clone();
    out.stem = permute_in_channels(&model.stem, order);
    out
}

fn max_relative_error(a: &[f32], b: &[f32]) -> f64 {
    let scale = b
        .iter()
        .map(|v| v.abs() as f64)
        .fold(0.0, f64::max)
        .max(1e-30);
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
        / scale
}

fn worked_example() -> Result<bool> {
    let input = Tensor::image(1, 3, vec![1.0f32, 2.0, 3.0, 1.0, 1.0, 2.0, 2.0, 0.0, 1.0])?;
    let mut layer = ConvLayer::zeros(1, 1, 2, 1, 0);
    layer.weights = vec![1.0, 0.0, 2.0, 3.0];
    let plain = conv2d_forward(&input, &layer)?;
    let t = Dihedral::Transpose;
    let input_t = Tensor::image(1, 3, t.apply_plane(input.data(), 3))?;
    let transposed = conv2d_forward(&input_t, &transform_conv(&layer, t))?;
    Ok(plain.data() == [6.0, 10.0, 5.0, 4.0] && transposed.data() == [6.0, 5.0, 10.0, 4.0])
}

fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.normal() as f32).collect()
}

/// Checks that a conv layer commutes with every non-identity square-grid
/// symmetry (transforming input and kernels alike) and with every
/// reordering of the three input channels (reordering the kernels' input
/// axis alike), over `trials` random inputs and layers. Tolerance is
/// `1e-6` relative to the largest output magnitude. The same identities
/// are then checked end to end on randomly initialized networks, in both
/// batch-norm modes, at `1e-5`.
pub fn check_conv_equivariance(trials: usize, seed: u64) -> Result<EquivarianceReport> {
    if trials == 0 {
        return Err(Error::Argument("at least one trial is required".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut report = EquivarianceReport {
        trials,
        seed,
        worked_example: worked_example()?,
        layer_checks: 0,
        layer_failures: 0,
        layer_max_relative_error: 0.0,
        network_checks: 0,
        network_failures: 0,
        network_max_relative_error: 0.0,
    };
    let record = |err: f64, tol: f64, checks: &mut usize, failures: &mut usize, max: &mut f64| {
        *checks += 1;
        if !(err <= tol) {
            *failures += 1;
        }
        *max = max.max(err);
    };

    for _ in 0..trials {
        let side = 4 + rng.below(6);
        let kernel = [1, 3, 5][rng.below(3)];
        let out_ch = 1 + rng.below(4);
        let mut layer = ConvLayer::zeros(3, out_ch, kernel, 1, kernel / 2);
        layer.weights = random_vec(&mut rng, layer.weights.len());
        let input = Tensor::image(3, side, random_vec(&mut rng, 3 * side * side))?;
        let base = conv2d_forward(&input, &layer)?;
        let out_side = base.shape()[1];
        for d in Dihedral::ALL.into_iter().skip(1) {
            let ti = Tensor::image(3, side, d.apply_planes(input.data(), side)?)?;
            let y = conv2d_forward(&ti, &transform_conv(&layer, d))?;
            let expected = d.apply_planes(base.data(), out_side)?;
            let err = max_relative_error(y.data(), &expected);
            record(
                err,
                LAYER_TOLERANCE,
                &mut report.layer_checks,
                &mut report.layer_failures,
                &mut report.layer_max_relative_error,
            );
        }
        for order in ChannelOrder::ALL {
            let plane = side * side;
            let permuted: Vec<f32> = order
                .0
                .iter()
                .flat_map(|&c| input.data()[c * plane..(c + 1) * plane].iter().copied())
                .collect();
            let pi = Tensor::image(3, side, permuted)?;
            let y = conv2d_forward(&pi, &permute_in_channels(&layer, order))?;
            let err = max_relative_error(y.data(), base.data());
            record(
                err,
                LAYER_TOLERANCE,
                &mut report.layer_checks,
                &mut report.layer_failures,
                &mut report.layer_max_relative_error,
            );
        }
    }

    let networks = (trials / 25).max(1);
    for _ in 0..networks {
        let arch = Architecture {
            input_side: 8,
            ..Architecture::default()
        };
        let pre = Preprocess {
            crop_side: 8,
            fill_channel: None,
            extra_zero_channel: false,
        };
        let mut model = CnnModel::<f32>::init(&arch, pre, &mut rng)?;
        for bn in model.batch_norms_mut() {
            for v in bn
                .gamma
                .iter_mut()
                .chain(bn.beta.iter_mut())
                .chain(bn.running_mean.iter_mut())
            {
                *v += 0.3 * rng.normal() as f32;
            }
            for v in bn.running_var.iter_mut() {
                *v = 0.5 + rng.uniform() as f32;
            }
        }
        let n = 4;
        let side = arch.input_side;
        let x = random_vec(&mut rng, n * model.input_len());
        for mode in [Mode::Train, Mode::Eval] {
            let (base, _) = model.forward(&x, n, mode)?;
            for d in Dihedral::ALL.into_iter().skip(1) {
                let tx = d.apply_planes(&x, side)?;
                let (y, _) = transport_model(&model, d).forward(&tx, n, mode)?;
                let err = max_relative_error(&y, &base);
                record(
                    err,
                    NETWORK_TOLERANCE,
                    &mut report.network_checks,
                    &mut report.network_failures,
                    &mut report.network_max_relative_error,
                );
            }
            for order in ChannelOrder::ALL {
                let plane = side * side;
                let mut px = Vec::with_capacity(x.len());
                for img in x.chunks_exact(3 * plane) {
                    for &c in &order.0 {
                        px.extend_from_slice(&img[c * plane..(c + 1) * plane]);
                    }
                }
                let (y, _) = permute_model_input_channels(&model, order).forward(&px, n, mode)?;
                let err = max_relative_error(&y, &base);
                record(
                    err,
                    NETWORK_TOLERANCE,
                    &mut report.network_checks,
                    &mut report.network_failures,
                    &mut report.network_max_relative_error,
                );
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_holds() {
        assert!(worked_example().unwrap());
    }

    #[test]
    fn small_run_passes() {
        let r = check_conv_equivariance(5, 3).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.layer_checks, 5 * (7 + 6));
        assert_eq!(r.network_checks, 2 * (7 + 6));
    }

    #[test]
    fn broken_kernel_transport_is_detected() {
        // Rotating the input without rotating the kernel is not a symmetry.
        let mut rng = SeededRng::new(9);
        let mut layer = ConvLayer::zeros(1, 1, 3, 1, 1);
        layer.weights = random_vec(&mut rng, 9);
        let x = Tensor::image(1, 5, random_vec(&mut rng, 25)).unwrap();
        let base = conv2d_forward(&x, &layer).unwrap();
        let d = Dihedral::Rot90;
        let tx = Tensor::image(1, 5, d.apply_plane(x.data(), 5)).unwrap();
        let y = conv2d_forward(&tx, &layer).unwrap();
        assert!(max_relative_error(y.data(), &d.apply_plane(base.data(), 5)) > 1e-3);
    }

    #[test]
    fn channel_permutation_of_extra_channel_model_keeps_the_fourth_plane() {
        let mut layer = ConvLayer::<f32>::zeros(4, 1, 1, 1, 0);
        layer.weights = vec![1.0, 2.0, 3.0, 4.0];
        let p = permute_in_channels(&layer, ChannelOrder([2, 0, 1]));
        assert_eq!(p.weights, vec![3.0, 1.0, 2.0, 4.0]);
    }
}
