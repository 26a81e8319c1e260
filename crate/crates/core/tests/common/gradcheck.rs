//! Central finite differences against backpropagated gradients, in `f64`.

use mtverify_core::cnn::{loss_and_grad, Architecture, CnnModel, LossSpec, Mode, Preprocess};
use mtverify_core::rng::SeededRng;

const EPS: f64 = 1e-3;
/// Smallest step tried when a probe straddles a ReLU kink.
const MIN_EPS: f64 = 1e-7;

pub fn toy(skip: bool, blocks: usize) -> (CnnModel<f64>, Vec<f64>, Vec<u8>) {
    let arch = Architecture {
        input_channels: 3,
        input_side: 4,
        widths: vec![2, 3],
        blocks_per_stage: blocks,
        skip_connections: skip,
        classes: 3,
    };
    let pre = Preprocess {
        crop_side: 4,
        fill_channel: None,
        extra_zero_channel: false,
    };
    let mut rng = SeededRng::new(11);
    let mut model = CnnModel::<f64>::init(&arch, pre, &mut rng).unwrap();
    // Move batch-norm affine parameters off their trivial init.
    for bn in model.batch_norms_mut() {
        for g in bn.gamma.iter_mut() {
            *g = 1.0 + 0.3 * rng.normal();
        }
        for b in bn.beta.iter_mut() {
            *b = 0.2 * rng.normal();
        }
    }
    for b in model.dense.bias.iter_mut() {
        *b = 0.1 * rng.normal();
    }
    let x: Vec<f64> = (0..3 * model.input_len()).map(|_| rng.normal()).collect();
    (model, x, vec![0, 2, 1])
}

fn pattern(model: &CnnModel<f64>, x: &[f64], n: usize) -> Vec<bool> {
    model.forward(x, n, Mode::Train).unwrap().1.relu_pattern()
}

/// Central difference in one coordinate. When the two probes land on
/// different sides of a ReLU kink the step shrinks until they agree.
fn central_difference(
    model: &CnnModel<f64>,
    t: usize,
    i: usize,
    x: &[f64],
    y: &[u8],
    spec: &LossSpec,
) -> f64 {
    let mut eps = EPS;
    loop {
        let mut plus = model.clone();
        plus.params_mut()[t][i] += eps;
        let mut minus = model.clone();
        minus.params_mut()[t][i] -= eps;
        if eps > MIN_EPS && pattern(&plus, x, y.len()) != pattern(&minus, x, y.len()) {
            eps /= 10.0;
            continue;
        }
        let lp = loss_and_grad(&plus, x, y, spec).unwrap().0;
        let lm = loss_and_grad(&minus, x, y, spec).unwrap().0;
        return (lp - lm) / (2.0 * eps);
    }
}

/// Norm-relative error of the analytic gradient of every parameter tensor.
pub fn check(model: &CnnModel<f64>, x: &[f64], y: &[u8], spec: &LossSpec) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_grad(model, x, y, spec).unwrap();
    let names: Vec<String> = model.params().into_iter().map(|p| p.0).collect();
    let mut report = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let len = grads.tensors[t].len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            numeric[i] = central_difference(model, t, i, x, y, spec);
        }
        let analytic = &grads.tensors[t];
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-8);
        report.push((name.clone(), diff / scale));
    }
    report
}
