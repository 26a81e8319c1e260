use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::layers::{self, BatchNorm, BnCache, ConvLayer, Dense};
use super::Real;

/// Shape of the network.
///
/// A 3x3 stem conv, then one stage per entry of `widths`. Every stage after
/// the first starts with 2x2 average pooling and a block whose shortcut is a
/// 1x1 projection. Blocks are pre-activation: BN, ReLU, conv, BN, ReLU,
/// conv, plus the skip path. A final BN + ReLU, global average pooling and a
/// dense layer produce the logits. All convs are stride 1 with symmetric zero
/// padding, so the whole net commutes with the square-grid symmetries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_side: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub skip_connections: bool,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_side: 16,
            widths: vec![8, 16],
            blocks_per_stage: 1,
            skip_connections: true,
            classes: 10,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "architecture needs nonzero stage widths".into(),
            ));
        }
        if self.blocks_per_stage == 0 || self.classes < 2 || self.input_channels == 0 {
            return Err(Error::Config("degenerate architecture".into()));
        }
        let shrink = 1usize << (self.widths.len() - 1);
        if self.input_side == 0 || self.input_side % shrink != 0 {
            return Err(Error::Config(format!(
                "input side {} must be divisible by {shrink}",
                self.input_side
            )));
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> usize {
        let projections = self.widths.len() - 1;
        1 + 2 * self.blocks_per_stage * self.widths.len() + projections
    }
}

/// Input pipeline applied to raw `[0, 255]` images before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Side of the centered crop fed to the network.
    pub crop_side: usize,
    /// Overwrites one channel plane with a constant before standardization.
    #[serde(default)]
    pub fill_channel: Option<(usize, f32)>,
    /// Appends an all-zero channel after standardization.
    #[serde(default)]
    pub extra_zero_channel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock<T> {
    /// 2x2 average pooling before the block.
    pub downsample: bool,
    pub skip: bool,
    pub bn1: BatchNorm<T>,
    pub conv1: ConvLayer<T>,
    pub bn2: BatchNorm<T>,
    pub conv2: ConvLayer<T>,
    pub projection: Option<ConvLayer<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel<T = f32> {
    pub architecture: Architecture,
    pub preprocess: Preprocess,
    pub stem: ConvLayer<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub final_bn: BatchNorm<T>,
    pub dense: Dense<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Stored running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `mean CE + wd * 1/2 sum |W|^2`
    Standard,
    /// `mean CE - wd * 1/2 sum |W|^2`
    MinusWeightDecay,
    /// `mean CE + wd * sum |W|^2`
    UnhalvedWeightDecay,
    /// `sum CE + wd * 1/2 sum |W|^2`
    SummedCrossEntropy,
    /// `mean CE`
    NoWeightDecay,
}

/// Which parameter tensors the weight-decay term covers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    /// Every trainable tensor, batch-norm scale and shift included.
    #[default]
    All,
    /// Conv and dense weights only.
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub weight_decay: f64,
    pub mode: LossMode,
    #[serde(default)]
    pub scope: DecayScope,
}

impl LossSpec {
    pub fn standard(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            mode: LossMode::Standard,
            scope: DecayScope::All,
        }
    }
}

fn he_normal<T: Real>(rng: &mut SeededRng, count: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..count)
        .map(|_| T::from_f64(std * rng.normal()))
        .collect()
}

fn init_conv<T: Real>(
    rng: &mut SeededRng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    padding: usize,
) -> ConvLayer<T> {
    let mut c = ConvLayer::zeros(in_ch, out_ch, kernel, 1, padding);
    c.weights = he_normal(rng, c.weights.len(), in_ch * kernel * kernel);
    c
}

impl<T: Real> CnnModel<T> {
    /// Fan-in scaled normal initialization from `rng`, drawn in layer order.
    pub fn init(
        architecture: &Architecture,
        preprocess: Preprocess,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        architecture.validate()?;
        let a = architecture;
        let stem = init_conv(rng, a.input_channels, a.widths[0], 3, 1);
        let mut blocks = Vec::new();
        let mut width = a.widths[0];
        for (s, &w) in a.widths.iter().enumerate() {
            for b in 0..a.blocks_per_stage {
                let first = b == 0 && s > 0;
                let conv1 = init_conv(rng, width, w, 3, 1);
                let conv2 = init_conv(rng, w, w, 3, 1);
                let projection = (width != w).then(|| init_conv(rng, width, w, 1, 0));
                blocks.push(ResidualBlock {
                    downsample: first,
                    skip: a.skip_connections,
                    bn1: BatchNorm::new(width),
                    conv1,
                    bn2: BatchNorm::new(w),
                    conv2,
                    projection,
                });
                width = w;
            }
        }
        let mut dense = Dense::zeros(width, a.classes);
        dense.weights = (0..dense.weights.len())
            .map(|_| T::from_f64((1.0 / width as f64).sqrt() * rng.normal()))
            .collect();
        Ok(Self {
            architecture: a.clone(),
            preprocess,
            stem,
            blocks,
            final_bn: BatchNorm::new(width),
            dense,
        })
    }

    pub fn input_len(&self) -> usize {
        let a = &self.architecture;
        a.input_channels * a.input_side * a.input_side
    }

    /// Parameter tensors in a fixed order, with a flag marking conv and
    /// dense weights.
    pub fn params(&self) -> Vec<(String, &[T], bool)> {
        let mut out: Vec<(String, &[T], bool)> = vec![("stem.w".into(), &self.stem.weights, true)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn1.gamma"), &b.bn1.gamma, false));
            out.push((format!("block{i}.bn1.beta"), &b.bn1.beta, false));
            out.push((format!("block{i}.conv1.w"), &b.conv1.weights, true));
            out.push((format!("block{i}.bn2.gamma"), &b.bn2.gamma, false));
            out.push((format!("block{i}.bn2.beta"), &b.bn2.beta, false));
            out.push((format!("block{i}.conv2.w"), &b.conv2.weights, true));
            if let Some(p) = &b.projection {
                out.push((format!("block{i}.proj.w"), &p.weights, true));
            }
        }
        out.push(("final_bn.gamma".into(), &self.final_bn.gamma, false));
        out.push(("final_bn.beta".into(), &self.final_bn.beta, false));
        out.push(("dense.w".into(), &self.dense.weights, true));
        out.push(("dense.b".into(), &self.dense.bias, false));
        out
    }

    /// Mutable parameter tensors, same order as [`CnnModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.stem.weights];
        for b in &mut self.blocks {
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.conv1.weights);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
            out.push(&mut b.conv2.weights);
            if let Some(p) = &mut b.projection {
                out.push(&mut p.weights);
            }
        }
        out.push(&mut self.final_bn.gamma);
        out.push(&mut self.final_bn.beta);
        out.push(&mut self.dense.weights);
        out.push(&mut self.dense.bias);
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.bn1);
            out.push(&mut b.bn2);
        }
        out.push(&mut self.final_bn);
        out
    }

    /// `1/2 sum |W|^2` over the tensors in `scope`.
    pub fn half_squared_norm(&self, scope: DecayScope) -> f64 {
        self.params()
            .iter()
            .filter(|p| p.2 || scope == DecayScope::All)
            .flat_map(|p| p.1.iter())
            .map(|v| {
                let v = v.widen();
                v * v
            })
            .sum::<f64>()
            * 0.5
    }

    /// Forward pass over a batch of `n` preprocessed inputs laid out
    /// back-to-back.
    pub fn forward(&self, inputs: &[T], n: usize, mode: Mode) -> Result<(Vec<T>, ForwardCache<T>)> {
        if n == 0 || inputs.len() != n * self.input_len() {
            return Err(Error::Argument(format!(
                "batch of {} values is not {n} inputs of {}",
                inputs.len(),
                self.input_len()
            )));
        }
        let mut side = self.architecture.input_side;
        let (mut h, s) = self.stem.forward(inputs, n, side);
        debug_assert_eq!(s, side);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut ch = block.bn1.channels;
            if block.downsample {
                h = layers::avg_pool2(&h, n * ch, side);
                side /= 2;
            }
            let plane = side * side;
            let (a1, bn1) = bn_forward(&block.bn1, &h, n, plane, mode);
            let r1 = layers::relu(&a1);
            let (c1, _) = block.conv1.forward(&r1, n, side);
            let (a2, bn2) = bn_forward(&block.bn2, &c1, n, plane, mode);
            let r2 = layers::relu(&a2);
            let (mut out, _) = block.conv2.forward(&r2, n, side);
            if block.skip {
                let shortcut = match &block.projection {
                    Some(p) => p.forward(&h, n, side).0,
                    None => h.clone(),
                };
                for (o, s) in out.iter_mut().zip(&shortcut) {
                    *o = *o + *s;
                }
            }
            ch = block.conv2.out_ch;
            let _ = ch;
            block_caches.push(BlockCache {
                input: h,
                side,
                a1,
                bn1,
                r1,
                a2,
                bn2,
                r2,
            });
            h = out;
        }
        let plane = side * side;
        let width = self.final_bn.channels;
        let (fa, fbn) = bn_forward(&self.final_bn, &h, n, plane, mode);
        let fr = layers::relu(&fa);
        let pooled = layers::global_avg_pool(&fr, n * width, plane);
        let logits = self.dense.forward(&pooled, n);
        Ok((
            logits,
            ForwardCache {
                n,
                input: inputs.to_vec(),
                blocks: block_caches,
                trunk: h,
                final_side: side,
                fa,
                fbn,
                pooled,
            },
        ))
    }

    /// Backpropagates `dlogits` through a cached training-mode forward.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Gradients<T> {
        let n = cache.n;
        let width = self.final_bn.channels;
        let side = cache.final_side;
        let plane = side * side;
        let (dpooled, d_dense_w, d_dense_b) = self.dense.backward(&cache.pooled, n, dlogits);
        let dfr = layers::global_avg_pool_backward(&dpooled, plane);
        let dfa = layers::relu_backward(&cache.fa, &dfr);
        let fbn = cache
            .fbn
            .as_ref()
            .expect("backward needs a training-mode forward");
        let (mut dh, d_fgamma, d_fbeta) = self.final_bn.backward(fbn, n, plane, &dfa);
        let _ = width;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let side = bc.side;
            let plane = side * side;
            let dout = dh;
            let (dr2, dconv2) = block.conv2.backward(&bc.r2, n, side, &dout);
            let da2 = layers::relu_backward(&bc.a2, &dr2);
            let bn2 = bc.bn2.as_ref().expect("training-mode cache");
            let (dc1, dg2, db2) = block.bn2.backward(bn2, n, plane, &da2);
            let (dr1, dconv1) = block.conv1.backward(&bc.r1, n, side, &dc1);
            let da1 = layers::relu_backward(&bc.a1, &dr1);
            let bn1 = bc.bn1.as_ref().expect("training-mode cache");
            let (mut dinput, dg1, db1) = block.bn1.backward(bn1, n, plane, &da1);
            let mut dproj = None;
            if block.skip {
                match &block.projection {
                    Some(p) => {
                        let (dx, dw) = p.backward(&bc.input, n, side, &dout);
                        for (a, b) in dinput.iter_mut().zip(&dx) {
                            *a = *a + *b;
                        }
                        dproj = Some(dw);
                    }
                    None => {
                        for (a, b) in dinput.iter_mut().zip(&dout) {
                            *a = *a + *b;
                        }
                    }
                }
            } else if let Some(p) = &block.projection {
                dproj = Some(vec![T::zero(); p.weights.len()]);
            }
            if block.downsample {
                dinput = layers::avg_pool2_backward(&dinput, n * block.bn1.channels, side * 2);
            }
            block_grads.push((dg1, db1, dconv1, dg2, db2, dconv2, dproj));
            dh = dinput;
        }
        block_grads.reverse();

        let (_, dstem) = self
            .stem
            .backward(&cache.input, n, self.architecture.input_side, &dh);
        let mut tensors = vec![dstem];
        for (dg1, db1, dconv1, dg2, db2, dconv2, dproj) in block_grads {
            tensors.extend([dg1, db1, dconv1, dg2, db2, dconv2]);
            if let Some(p) = dproj {
                tensors.push(p);
            }
        }
        tensors.extend([d_fgamma, d_fbeta, d_dense_w, d_dense_b]);
        Gradients { tensors }
    }
}

fn bn_forward<T: Real>(
    bn: &BatchNorm<T>,
    x: &[T],
    n: usize,
    plane: usize,
    mode: Mode,
) -> (Vec<T>, Option<BnCache<T>>) {
    match mode {
        Mode::Train => {
            let (y, c) = bn.forward_train(x, n, plane);
            (y, Some(c))
        }
        Mode::Eval => (bn.forward_eval(x, n, plane), None),
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Vec<T>,
    side: usize,
    a1: Vec<T>,
    bn1: Option<BnCache<T>>,
    r1: Vec<T>,
    a2: Vec<T>,
    bn2: Option<BnCache<T>>,
    r2: Vec<T>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    n: usize,
    input: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    trunk: Vec<T>,
    final_side: usize,
    fa: Vec<T>,
    fbn: Option<BnCache<T>>,
    pooled: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Batch statistics of every batch-norm layer, in
    /// [`CnnModel::batch_norms_mut`] order (training-mode passes only).
    pub fn batch_stats(&self) -> Vec<(&[T], &[T])> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for c in [&b.bn1, &b.bn2] {
                if let Some(c) = c {
                    out.push((c.mean.as_slice(), c.var.as_slice()));
                }
            }
        }
        if let Some(c) = &self.fbn {
            out.push((c.mean.as_slice(), c.var.as_slice()));
        }
        out
    }

    /// On/off state of every ReLU unit in the pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.a1.iter().chain(&b.a2))
            .chain(&self.fa)
            .map(|v| *v > T::zero())
            .collect()
    }

    /// Named activations, for locating the first non-finite layer.
    fn named_outputs(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.input"), b.input.as_slice()));
            out.push((format!("block{i}.bn1"), b.a1.as_slice()));
            out.push((format!("block{i}.bn2"), b.a2.as_slice()));
        }
        out.push(("trunk".into(), self.trunk.as_slice()));
        out.push(("final_bn".into(), self.fa.as_slice()));
        out.push(("pool".into(), self.pooled.as_slice()));
        out
    }
}

/// Gradient tensors aligned with [`CnnModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

/// Training objective over one batch and its gradient for every parameter.
///
/// Returns the objective (cross-entropy term plus the signed weight-decay
/// term dictated by `spec.mode`) and the gradients.
pub fn loss_and_grad<T: Real>(
    model: &CnnModel<T>,
    inputs: &[T],
    labels: &[u8],
    spec: &LossSpec,
) -> Result<(f64, Gradients<T>)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let k = model.architecture.classes;
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Argument(format!("label {l} outside {k} classes")));
    }
    let (logits, cache) = model.forward(inputs, n, Mode::Train)?;
    let logp = layers::log_softmax(&logits, k);
    let mut ce_sum = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        ce_sum -= logp[i * k + l as usize].widen();
    }
    let (ce, ce_scale) = match spec.mode {
        LossMode::SummedCrossEntropy => (ce_sum, 1.0),
        _ => (ce_sum / n as f64, 1.0 / n as f64),
    };
    let decay_coef = match spec.mode {
        LossMode::Standard | LossMode::SummedCrossEntropy => spec.weight_decay,
        LossMode::MinusWeightDecay => -spec.weight_decay,
        LossMode::UnhalvedWeightDecay => 2.0 * spec.weight_decay,
        LossMode::NoWeightDecay => 0.0,
    };
    let loss = ce + decay_coef * model.half_squared_norm(spec.scope);
    if !loss.is_finite() {
        let layer = if logits.iter().any(|v| !v.is_finite()) {
            cache
                .named_outputs()
                .into_iter()
                .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
                .map(|(name, _)| name)
                .unwrap_or_else(|| "dense".into())
        } else {
            "loss".into()
        };
        return Err(Error::Numerical {
            layer,
            message: format!("non-finite loss {loss}"),
        });
    }
    // d(CE)/d(logits) = softmax - onehot, scaled per reduction.
    let mut dlogits = Vec::with_capacity(logits.len());
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..k {
            let p = logp[i * k + j].exp();
            let t = if j == l as usize { T::one() } else { T::zero() };
            dlogits.push((p - t) * T::from_f64(ce_scale));
        }
    }
    let mut grads = model.backward(&cache, &dlogits);
    if decay_coef != 0.0 {
        let c = T::from_f64(decay_coef);
        for (g, (_, w, decayed)) in grads.tensors.iter_mut().zip(model.params()) {
            if decayed || spec.scope == DecayScope::All {
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi = *gi + c * *wi;
                }
            }
        }
    }
    Ok((loss, grads))
}
