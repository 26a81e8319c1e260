use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, LabeledImageSet};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::layers;
use super::model::{loss_and_grad, Architecture, CnnModel, LossSpec, Mode, Preprocess};
use super::{normalize_values, Real};

/// How the learning rate evolves over steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    /// Multiply by `decay_factor` at each boundary in `decay_epochs`.
    Piecewise,
    /// Same boundaries, shifted so the first decay lands on epoch 0.
    DecayFromStart,
    /// `initial * per_step^step`, ignoring the boundaries.
    Geometric { per_step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub policy: LrPolicy,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            decay_epochs: Vec::new(),
            decay_factor: 1.0,
            policy: LrPolicy::Piecewise,
        }
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn rate(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let epoch = step / steps_per_epoch.max(1);
        let decays = |shift: usize| {
            self.decay_epochs
                .iter()
                .filter(|&&b| epoch + shift >= b)
                .count() as i32
        };
        match &self.policy {
            LrPolicy::Piecewise => self.initial * self.decay_factor.powi(decays(0)),
            LrPolicy::DecayFromStart => {
                let shift = self.decay_epochs.iter().copied().min().unwrap_or(0);
                self.initial * self.decay_factor.powi(decays(shift))
            }
            LrPolicy::Geometric { per_step } => self.initial * per_step.powi(step as i32),
        }
    }
}

/// Which data set supplies the batch-norm calibration instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub preprocess: Preprocess,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr: LrSchedule,
    pub loss: LossSpec,
    /// Evaluate on the test set every this many steps (and at steps 0 and last).
    pub trace_every: usize,
    /// Leading training instances whose batch statistics set the
    /// evaluation-mode batch-norm statistics.
    pub bn_calibration: usize,
    #[serde(default)]
    pub calibration_source: CalibrationSource,
    /// Training loss above this (or non-finite) aborts the run.
    pub divergence_threshold: f64,
}

impl TrainConfig {
    /// The small reference configuration used by the test suites.
    pub fn desk(seed: u64) -> Self {
        Self {
            architecture: Architecture::default(),
            preprocess: Preprocess {
                crop_side: 16,
                fill_channel: None,
                extra_zero_channel: false,
            },
            seed,
            epochs: 8,
            batch_size: 20,
            momentum: 0.9,
            lr: LrSchedule {
                initial: 0.2,
                decay_epochs: vec![7],
                decay_factor: 0.1,
                policy: LrPolicy::Piecewise,
            },
            loss: LossSpec::standard(1e-2),
            trace_every: 10,
            bn_calibration: 100,
            calibration_source: CalibrationSource::Train,
            divergence_threshold: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.trace_every == 0 {
            return Err(Error::Config(
                "batch size, epochs and trace cadence must be positive".into(),
            ));
        }
        if !(self.lr.initial >= 0.0) || !self.lr.decay_factor.is_finite() {
            return Err(Error::Config(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !self.loss.weight_decay.is_finite() || self.loss.weight_decay < 0.0 {
            return Err(Error::Config(
                "weight decay must be finite and non-negative".into(),
            ));
        }
        let channels = 3 + usize::from(self.preprocess.extra_zero_channel);
        if self.architecture.input_channels != channels {
            return Err(Error::Config(format!(
                "preprocessing yields {channels} channels, network expects {}",
                self.architecture.input_channels
            )));
        }
        if self.architecture.input_side != self.preprocess.crop_side {
            return Err(Error::Config(
                "crop side must equal the network input side".into(),
            ));
        }
        Ok(())
    }
}

/// Test-set evaluation after `step` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub config: TrainConfig,
    pub steps: usize,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedSubject {
    pub model: CnnModel<f32>,
    pub run: TrainRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub class: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub instances: Vec<InstanceResult>,
}

/// Turns one raw `(3, side, side)` image into network input: centered crop,
/// optional constant channel fill, per-instance standardization, optional
/// trailing zero channel.
pub fn prepare_image(image: &[f32], side: usize, pre: &Preprocess) -> Result<Vec<f32>> {
    let channels = LabeledImageSet::CHANNELS;
    if image.len() != channels * side * side {
        return Err(Error::Argument(format!(
            "image of {} values is not 3x{side}x{side}",
            image.len()
        )));
    }
    let crop = pre.crop_side;
    if crop == 0 || crop > side || (side - crop) % 2 != 0 {
        return Err(Error::Config(format!(
            "cannot center-crop {side} to {crop}"
        )));
    }
    let off = (side - crop) / 2;
    let mut out = Vec::with_capacity((channels + 1) * crop * crop);
    for c in 0..channels {
        let plane = &image[c * side * side..][..side * side];
        for y in off..off + crop {
            out.extend_from_slice(&plane[y * side + off..][..crop]);
        }
    }
    if let Some((c, value)) = pre.fill_channel {
        if c >= channels {
            return Err(Error::Config(format!("fill channel {c} out of range")));
        }
        out[c * crop * crop..][..crop * crop].fill(value);
    }
    let mut out = normalize_values(&out)?;
    if pre.extra_zero_channel {
        out.resize(out.len() + crop * crop, 0.0);
    }
    Ok(out)
}

fn prepare_set(set: &LabeledImageSet, pre: &Preprocess) -> Result<Vec<f32>> {
    if set.height() != set.width() {
        return Err(Error::Argument("images must be square".into()));
    }
    let mut out = Vec::new();
    for img in set.images() {
        out.extend(prepare_image(img, set.height(), pre)?);
    }
    Ok(out)
}

/// Sets evaluation-mode batch-norm statistics to the average of training-mode
/// batch statistics over consecutive `batch`-sized chunks of `inputs`.
fn calibrate_batch_norm<T: Real>(
    model: &mut CnnModel<T>,
    inputs: &[T],
    n: usize,
    batch: usize,
) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let len = model.input_len();
    let mut sums: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
    let mut chunks = 0usize;
    for start in (0..n).step_by(batch.max(1)) {
        let count = batch.min(n - start);
        let (_, cache) = model.forward(
            &inputs[start * len..(start + count) * len],
            count,
            Mode::Train,
        )?;
        let stats = cache.batch_stats();
        let acc = sums.get_or_insert_with(|| {
            stats
                .iter()
                .map(|(m, _)| (vec![0.0; m.len()], vec![0.0; m.len()]))
                .collect()
        });
        for ((sm, sv), (m, v)) in acc.iter_mut().zip(&stats) {
            for (a, b) in sm.iter_mut().zip(m.iter()) {
                *a += b.widen();
            }
            for (a, b) in sv.iter_mut().zip(v.iter()) {
                *a += b.widen();
            }
        }
        chunks += 1;
    }
    let sums = sums.unwrap_or_default();
    for (bn, (sm, sv)) in model.batch_norms_mut().into_iter().zip(sums) {
        bn.running_mean = sm.iter().map(|v| T::from_f64(v / chunks as f64)).collect();
        bn.running_var = sv.iter().map(|v| T::from_f64(v / chunks as f64)).collect();
    }
    Ok(())
}

fn evaluate_prepared(model: &CnnModel<f32>, inputs: &[f32], labels: &[u8]) -> Result<Evaluation> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Argument("empty test set".into()));
    }
    let k = model.architecture.classes;
    let len = model.input_len();
    let mut instances = Vec::with_capacity(n);
    const CHUNK: usize = 50;
    for start in (0..n).step_by(CHUNK) {
        let count = CHUNK.min(n - start);
        let (logits, _) = model.forward(
            &inputs[start * len..(start + count) * len],
            count,
            Mode::Eval,
        )?;
        let logp = layers::log_softmax(&logits, k);
        for i in 0..count {
            let row = &logits[i * k..(i + 1) * k];
            let mut class = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[class] {
                    class = j;
                }
            }
            let label = labels[start + i] as usize;
            instances.push(InstanceResult {
                class,
                loss: -logp[i * k + label].widen(),
            });
        }
    }
    let correct = instances
        .iter()
        .zip(labels)
        .filter(|(r, &l)| r.class == l as usize)
        .count();
    let mean_loss = instances.iter().map(|r| r.loss).sum::<f64>() / n as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss,
        instances,
    })
}

/// Evaluation-mode predictions and cross-entropy for every test instance.
pub fn evaluate(model: &CnnModel<f32>, test: &LabeledImageSet) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    if let Some(&l) = test
        .labels()
        .iter()
        .find(|&&l| l as usize >= model.architecture.classes)
    {
        return Err(Error::Argument(format!(
            "label {l} outside the model's classes"
        )));
    }
    let inputs = prepare_set(test, &model.preprocess)?;
    evaluate_prepared(model, &inputs, test.labels())
}

/// Seeded minibatch SGD with momentum.
///
/// The update is `v = momentum * v + g; w -= lr * v`. Batch order is a fresh
/// seeded permutation each epoch. The model is evaluated on the test set at
/// step 0, every `trace_every` steps and after the last step; before each
/// evaluation the batch-norm statistics are recomputed from the calibration
/// subset.
pub fn train(
    config: &TrainConfig,
    split: &DatasetSplit<LabeledImageSet>,
) -> Result<TrainedSubject> {
    config.validate()?;
    let classes = config.architecture.classes;
    for set in [&split.train, &split.test] {
        if let Some(&l) = set.labels().iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Argument(format!(
                "label {l} outside {classes} classes"
            )));
        }
    }
    let train_x = prepare_set(&split.train, &config.preprocess)?;
    let test_x = prepare_set(&split.test, &config.preprocess)?;
    let train_y = split.train.labels();
    let m = train_y.len();

    let mut init_rng = SeededRng::derive(config.seed, 0);
    let mut order_rng = SeededRng::derive(config.seed, 1);
    let mut model = CnnModel::<f32>::init(
        &config.architecture,
        config.preprocess.clone(),
        &mut init_rng,
    )?;
    let len = model.input_len();
    let calib_x = match config.calibration_source {
        CalibrationSource::Train => &train_x,
        CalibrationSource::Test => &test_x,
    };
    let calib = config.bn_calibration.min(calib_x.len() / len);

    let steps_per_epoch = m.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut velocity: Vec<Vec<f32>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.1.len()])
        .collect();
    let mut trace = Vec::new();

    let record =
        |model: &mut CnnModel<f32>, step: usize, trace: &mut Vec<TracePoint>| -> Result<()> {
            calibrate_batch_norm(model, &calib_x[..calib * len], calib, config.batch_size)?;
            let eval = evaluate_prepared(model, &test_x, split.test.labels())?;
            if !eval.mean_loss.is_finite() || eval.mean_loss > config.divergence_threshold {
                return Err(Error::Diverged {
                    step,
                    loss: eval.mean_loss,
                    trace: trace.clone(),
                });
            }
            trace.push(TracePoint {
                step,
                test_loss: eval.mean_loss,
                test_accuracy: eval.accuracy,
            });
            Ok(())
        };
    let diverged = |step: usize, loss: f64, trace: &[TracePoint]| Error::Diverged {
        step,
        loss,
        trace: trace.to_vec(),
    };

    record(&mut model, 0, &mut trace)?;
    let mut step = 0;
    let mut batch_x = Vec::with_capacity(config.batch_size * len);
    let mut batch_y = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        let order = order_rng.permutation(m);
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&train_x[i * len..(i + 1) * len]);
                batch_y.push(train_y[i]);
            }
            let (loss, grads) = match loss_and_grad(&model, &batch_x, &batch_y, &config.loss) {
                Ok(v) => v,
                Err(Error::Numerical { .. }) => return Err(diverged(step + 1, f64::NAN, &trace)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > config.divergence_threshold {
                return Err(diverged(step + 1, loss, &trace));
            }
            let lr = config.lr.rate(step, steps_per_epoch) as f32;
            let mu = config.momentum as f32;
            for ((w, v), g) in model
                .params_mut()
                .into_iter()
                .zip(&mut velocity)
                .zip(&grads.tensors)
            {
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi + *gi;
                    *wi -= lr * *vi;
                }
            }
            step += 1;
            if step % config.trace_every == 0 || step == total_steps {
                record(&mut model, step, &mut trace)?;
            }
        }
    }
    Ok(TrainedSubject {
        model,
        run: TrainRun {
            seed: config.seed,
            config: config.clone(),
            steps: step,
            trace,
        },
    })
}

impl CnnModel<f32> {
    /// Versioned JSON checkpoint.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        c.model.architecture.validate()?;
        Ok(c.model)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: CnnModel<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_stratified;
    use crate::dataset::synth::synthetic_images;

    fn small_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::desk(seed);
        c.architecture.input_side = 8;
        c.architecture.widths = vec![4, 6];
        c.preprocess.crop_side = 8;
        c.epochs = 1;
        c.batch_size = 10;
        c.trace_every = 2;
        c.bn_calibration = 20;
        c
    }

    fn small_split() -> DatasetSplit<LabeledImageSet> {
        let set = synthetic_images(6, 3);
        split_stratified(&set, 0.5, 1).unwrap()
    }

    #[test]
    fn schedule_policies() {
        let mut s = LrSchedule {
            initial: 1.0,
            decay_epochs: vec![2, 4],
            decay_factor: 0.1,
            policy: LrPolicy::Piecewise,
        };
        let at = |s: &LrSchedule, epoch: usize| s.rate(epoch * 10, 10);
        assert_eq!([at(&s, 0), at(&s, 1)], [1.0, 1.0]);
        assert!((at(&s, 2) - 0.1).abs() < 1e-15 && (at(&s, 5) - 0.01).abs() < 1e-15);
        s.policy = LrPolicy::DecayFromStart;
        assert!((at(&s, 0) - 0.1).abs() < 1e-15 && (at(&s, 2) - 0.01).abs() < 1e-15);
        s.policy = LrPolicy::Geometric { per_step: 2.0 };
        assert_eq!(s.rate(3, 10), 8.0);
    }

    #[test]
    fn crop_and_normalize() {
        let side = 4;
        let img: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let pre = Preprocess {
            crop_side: 2,
            fill_channel: None,
            extra_zero_channel: true,
        };
        let out = prepare_image(&img, side, &pre).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out[12..].iter().all(|&v| v == 0.0));
        // Red plane crop is pixels 5, 6, 9, 10.
        let raw = [
            5.0, 6.0, 9.0, 10.0, 21.0, 22.0, 25.0, 26.0, 37.0, 38.0, 41.0, 42.0,
        ];
        let expect = normalize_values(&raw).unwrap();
        assert_eq!(&out[..12], expect.as_slice());
        assert!(prepare_image(
            &img,
            side,
            &Preprocess {
                crop_side: 3,
                ..pre
            }
        )
        .is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let split = small_split();
        let a = train(&small_config(7), &split).unwrap();
        let b = train(&small_config(7), &split).unwrap();
        assert_eq!(a.run.trace, b.run.trace);
        assert_eq!(a.model, b.model);
        assert!(a.run.trace.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn zero_learning_rate_keeps_trace_constant() {
        let mut cfg = small_config(2);
        cfg.lr = LrSchedule::constant(0.0);
        let run = train(&cfg, &small_split()).unwrap().run;
        assert!(run.trace.len() > 2);
        for p in &run.trace {
            assert_eq!(p.test_loss.to_bits(), run.trace[0].test_loss.to_bits());
        }
    }

    #[test]
    fn exploding_rate_reports_divergence() {
        let mut cfg = small_config(2);
        cfg.lr = LrSchedule::constant(1e6);
        cfg.loss.mode = super::super::LossMode::MinusWeightDecay;
        match train(&cfg, &small_split()) {
            Err(Error::Diverged { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.run.trace)),
        }
    }

    #[test]
    fn per_instance_losses_average_to_mean() {
        let split = small_split();
        let t = train(&small_config(1), &split).unwrap();
        let e = evaluate(&t.model, &split.test).unwrap();
        let mean = e.instances.iter().map(|r| r.loss).sum::<f64>() / e.instances.len() as f64;
        assert_eq!(mean, e.mean_loss);
        assert_eq!(e, evaluate(&t.model, &split.test).unwrap());
        let last = t.run.trace.last().unwrap();
        assert_eq!(last.test_loss, e.mean_loss);
    }

    #[test]
    fn uniform_logits_pick_class_zero() {
        let split = small_split();
        let mut model = train(&small_config(1), &split).unwrap().model;
        model.dense.weights.fill(0.0);
        model.dense.bias.fill(0.0);
        let e = evaluate(&model, &split.test).unwrap();
        let zeros = split.test.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(e.accuracy, zeros as f64 / split.test.len() as f64);
    }

    #[test]
    fn checkpoint_round_trip() {
        let split = small_split();
        let model = train(&small_config(4), &split).unwrap().model;
        let back = CnnModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let mut cfg = small_config(1);
        cfg.preprocess.extra_zero_channel = true;
        assert!(matches!(train(&cfg, &small_split()), Err(Error::Config(_))));
    }
}
