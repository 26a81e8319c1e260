//! Layer kernels over batched, channel-planar `(N, C, H, W)` buffers.
//!
//! Every reduction runs as a plain sequential loop in a fixed index order,
//! so results are reproducible bit-for-bit on one platform.

use serde::{Deserialize, Serialize};

use super::Real;

/// Output columns `lo..hi` whose input column `ox * stride + kx - padding`
/// falls inside `0..side`.
#[inline]
fn valid_columns(
    out_side: usize,
    side: usize,
    stride: usize,
    kx: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).div_ceil(stride);
    // Largest ox with ox * stride + kx <= side - 1 + padding.
    let hi = match (side + padding).checked_sub(kx + 1) {
        Some(v) => (v / stride + 1).min(out_side),
        None => 0,
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Square kernel side.
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding, applied equally on all four sides.
    pub padding: usize,
    /// `(out_ch, in_ch, kernel, kernel)`, row-major.
    pub weights: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weights: vec![T::zero(); out_ch * in_ch * kernel * kernel],
        }
    }

    pub fn output_side(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    #[inline]
    fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> T {
        let k = self.kernel;
        self.weights[((o * self.in_ch + c) * k + ky) * k + kx]
    }

    /// Cross-correlation of a batch of `n` square `side x side` inputs.
    pub fn forward(&self, x: &[T], n: usize, side: usize) -> (Vec<T>, usize) {
        let out_side = self
            .output_side(side)
            .expect("kernel larger than padded input");
        let (s, p, k) = (self.stride, self.padding as isize, self.kernel);
        let in_plane = side * side;
        let out_plane = out_side * out_side;
        let mut y = vec![T::zero(); n * self.out_ch * out_plane];
        for b in 0..n {
            for o in 0..self.out_ch {
                let out = &mut y[(b * self.out_ch + o) * out_plane..][..out_plane];
                for c in 0..self.in_ch {
                    let inp = &x[(b * self.in_ch + c) * in_plane..][..in_plane];
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = self.w(o, c, ky, kx);
                            for oy in 0..out_side {
                                let iy = (oy * s) as isize + ky as isize - p;
                                if iy < 0 || iy >= side as isize {
                                    continue;
                                }
                                let row = &inp[iy as usize * side..][..side];
                                let orow = &mut out[oy * out_side..][..out_side];
                                let (lo, hi) = valid_columns(out_side, side, s, kx, self.padding);
                                if s == 1 {
                                    let src = &row[lo + kx - self.padding..][..hi - lo];
                                    for (o, v) in orow[lo..hi].iter_mut().zip(src) {
                                        *o = *o + w * *v;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        orow[ox] = orow[ox] + w * row[ox * s + kx - self.padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (y, out_side)
    }

    /// Gradients w.r.t. input and weights, given upstream `dy`.
    pub fn backward(&self, x: &[T], n: usize, side: usize, dy: &[T]) -> (Vec<T>, Vec<T>) {
        let out_side = self.output_side(side).expect("validated in forward");
        let (s, p, k) = (self.stride, self.padding as isize, self.kernel);
        let in_plane = side * side;
        let out_plane = out_side * out_side;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); self.weights.len()];
        for b in 0..n {
            for o in 0..self.out_ch {
                let g = &dy[(b * self.out_ch + o) * out_plane..][..out_plane];
                for c in 0..self.in_ch {
                    let base = (b * self.in_ch + c) * in_plane;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((o * self.in_ch + c) * k + ky) * k + kx;
                            let w = self.weights[widx];
                            let mut acc = T::zero();
                            for oy in 0..out_side {
                                let iy = (oy * s) as isize + ky as isize - p;
                                if iy < 0 || iy >= side as isize {
                                    continue;
                                }
                                let row_off = base + iy as usize * side;
                                let (lo, hi) = valid_columns(out_side, side, s, kx, self.padding);
                                let grow = &g[oy * out_side..][..out_side];
                                if s == 1 {
                                    let start = row_off + lo + kx - self.padding;
                                    let xs = &x[start..][..hi - lo];
                                    let gs = &grow[lo..hi];
                                    for (gv, xv) in gs.iter().zip(xs) {
                                        acc = acc + *gv * *xv;
                                    }
                                    for (d, gv) in dx[start..][..hi - lo].iter_mut().zip(gs) {
                                        *d = *d + w * *gv;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        let gv = grow[ox];
                                        let xi = row_off + ox * s + kx - self.padding;
                                        acc = acc + gv * x[xi];
                                        dx[xi] = dx[xi] + w * gv;
                                    }
                                }
                            }
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
}

/// What batch-norm backward needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: 1e-5,
        }
    }

    /// Normalizes with the batch's own per-channel statistics.
    pub fn forward_train(&self, x: &[T], n: usize, plane: usize) -> (Vec<T>, BnCache<T>) {
        let ch = self.channels;
        let count = T::from_f64((n * plane) as f64);
        let eps = T::from_f64(self.eps);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for c in 0..ch {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &x[(b * ch + c) * plane..][..plane] {
                    s = s + v;
                }
            }
            mean[c] = s / count;
            let mut q = T::zero();
            for b in 0..n {
                for &v in &x[(b * ch + c) * plane..][..plane] {
                    let d = v - mean[c];
                    q = q + d * d;
                }
            }
            var[c] = q / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let h = (x[i] - mean[c]) * inv_std[c];
                    x_hat[i] = h;
                    y[i] = self.gamma[c] * h + self.beta[c];
                }
            }
        }
        (
            y,
            BnCache {
                x_hat,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Normalizes with the stored running statistics.
    pub fn forward_eval(&self, x: &[T], n: usize, plane: usize) -> Vec<T> {
        let ch = self.channels;
        let eps = T::from_f64(self.eps);
        let scale: Vec<T> = (0..ch)
            .map(|c| self.gamma[c] / (self.running_var[c] + eps).sqrt())
            .collect();
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    y[i] = (x[i] - self.running_mean[c]) * scale[c] + self.beta[c];
                }
            }
        }
        y
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        n: usize,
        plane: usize,
        dy: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let ch = self.channels;
        let count = T::from_f64((n * plane) as f64);
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        for c in 0..ch {
            for b in 0..n {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    dgamma[c] = dgamma[c] + dy[i] * cache.x_hat[i];
                    dbeta[c] = dbeta[c] + dy[i];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        for c in 0..ch {
            // dx = gamma * inv_std / N * (N dy - sum dy - x_hat sum(dy x_hat))
            let k = self.gamma[c] * cache.inv_std[c] / count;
            for b in 0..n {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    dx[i] = k * (count * dy[i] - dbeta[c] - cache.x_hat[i] * dgamma[c]);
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `(outputs, inputs)`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(n * self.outputs);
        for b in 0..n {
            let xi = &x[b * self.inputs..][..self.inputs];
            for o in 0..self.outputs {
                let w = &self.weights[o * self.inputs..][..self.inputs];
                let mut s = self.bias[o];
                for (wi, v) in w.iter().zip(xi) {
                    s = s + *wi * *v;
                }
                y.push(s);
            }
        }
        y
    }

    /// Returns `(dx, dweights, dbias)`.
    pub fn backward(&self, x: &[T], n: usize, dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); self.weights.len()];
        let mut db = vec![T::zero(); self.outputs];
        for b in 0..n {
            let xi = &x[b * self.inputs..][..self.inputs];
            for o in 0..self.outputs {
                let g = dy[b * self.outputs + o];
                db[o] = db[o] + g;
                for i in 0..self.inputs {
                    dw[o * self.inputs + i] = dw[o * self.inputs + i] + g * xi[i];
                    dx[b * self.inputs + i] =
                        dx[b * self.inputs + i] + g * self.weights[o * self.inputs + i];
                }
            }
        }
        (dx, dw, db)
    }
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

/// ReLU backward, gated on the forward input.
pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Non-overlapping 2x2 average pooling over `planes` planes of even `side`.
pub fn avg_pool2<T: Real>(x: &[T], planes: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64(0.25);
    let mut y = Vec::with_capacity(planes * half * half);
    for p in 0..planes {
        let src = &x[p * side * side..][..side * side];
        for oy in 0..half {
            for ox in 0..half {
                let (r0, r1) = (2 * oy * side, (2 * oy + 1) * side);
                let s = src[r0 + 2 * ox]
                    + src[r0 + 2 * ox + 1]
                    + src[r1 + 2 * ox]
                    + src[r1 + 2 * ox + 1];
                y.push(s * quarter);
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], planes: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); planes * side * side];
    for p in 0..planes {
        for oy in 0..half {
            for ox in 0..half {
                let g = dy[(p * half + oy) * half + ox] * quarter;
                let base = p * side * side;
                dx[base + 2 * oy * side + 2 * ox] = g;
                dx[base + 2 * oy * side + 2 * ox + 1] = g;
                dx[base + (2 * oy + 1) * side + 2 * ox] = g;
                dx[base + (2 * oy + 1) * side + 2 * ox + 1] = g;
            }
        }
    }
    dx
}

/// Global average pooling: one value per plane.
pub fn global_avg_pool<T: Real>(x: &[T], planes: usize, plane: usize) -> Vec<T> {
    let count = T::from_f64(plane as f64);
    (0..planes)
        .map(|p| {
            let mut s = T::zero();
            for &v in &x[p * plane..][..plane] {
                s = s + v;
            }
            s / count
        })
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], plane: usize) -> Vec<T> {
    let count = T::from_f64(plane as f64);
    dy.iter()
        .flat_map(|&g| std::iter::repeat(g / count).take(plane))
        .collect()
}

/// Row-wise log-softmax of `n x k` logits.
pub fn log_softmax<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &v in row {
            s = s + (v - max).exp();
        }
        let lse = max + s.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
