//! Layer states for training: approximated convolution, max-pool, batch
//! norm, the multi-activation bank, flatten, and the full-precision dense
//! classifier head.
//!
//! Block ordering follows conv -> max-pool -> batch-norm -> activation. The
//! conv weight gradient is Σ_m α_m g_{B_m} with the straight-through
//! estimator over each sign, which collapses to (Σ_m α_m²) times the plain
//! conv weight gradient evaluated at the reconstructed weights.

use crate::activation::{binarize_grad_mask, combine, multi_binarize, ActivationBank};
use crate::approx::{approximate, WeightBaseSet};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{conv2d_ref, conv_out_extent, Tensor};

pub struct ConvCache {
    pub padded_input: Tensor,
    pub input_dims: [usize; 4],
    pub eff_weights: Tensor,
    pub base_set: Option<WeightBaseSet>,
    pub alpha_sq_sum: f32,
    pub pad_value: f32,
}

pub struct ConvLayer {
    pub weights: Tensor, // [out, in, kh, kw]
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// None = full-precision bypass.
    pub m: Option<usize>,
    pub shifts_u: Vec<f32>,
    pub ridge: f32,
    pub grad_w: Option<Tensor>,
    /// Gradient of the loss w.r.t. the constant padding value; belongs to the
    /// activation bank that produced this layer's input.
    pub grad_pad_value: f32,
    pub vel_w: Tensor,
    pub cache: Option<ConvCache>,
}

impl ConvLayer {
    pub fn new(
        weights: Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
        m: Option<usize>,
        shifts_u: Vec<f32>,
        ridge: f32,
    ) -> Self {
        let vel_w = Tensor::zeros(weights.dims().to_vec());
        ConvLayer {
            weights,
            stride,
            padding,
            m,
            shifts_u,
            ridge,
            grad_w: None,
            grad_pad_value: 0.0,
            vel_w,
            cache: None,
        }
    }

    /// Fits the current weight bases (whole-tensor mode). Full-precision
    /// layers return None.
    pub fn fit_bases(&self) -> Result<Option<WeightBaseSet>> {
        match self.m {
            Some(_) => Ok(Some(approximate(&self.weights, &self.shifts_u, self.ridge)?)),
            None => Ok(None),
        }
    }

    pub fn forward(&mut self, x: &Tensor, pad_value: f32, training: bool) -> Result<Tensor> {
        let input_dims = x.dims4()?;
        let base_set = self.fit_bases()?;
        let (eff_weights, alpha_sq_sum) = match &base_set {
            Some(set) => (
                set.reconstruct(),
                set.alphas.iter().map(|a| a * a).sum::<f32>(),
            ),
            None => (self.weights.clone(), 1.0),
        };
        let padded = x.pad_spatial(self.padding.0, self.padding.1, pad_value)?;
        let out = conv2d_ref(&padded, &eff_weights, self.stride, (0, 0))?;
        if training {
            self.cache = Some(ConvCache {
                padded_input: padded,
                input_dims,
                eff_weights,
                base_set,
                alpha_sq_sum,
                pad_value,
            });
        }
        Ok(out)
    }

    pub fn backward(&mut self, g_out: &Tensor, layer_index: usize) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::MissingCache { layer: layer_index })?;
        let [b, c_in, h, w] = cache.input_dims;
        let [_, c_out, oh, ow] = g_out.dims4()?;
        let [_, _, kh, kw] = self.weights.dims4()?;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (ih, iw) = (h + 2 * ph, w + 2 * pw);
        let padded = cache.padded_input.data();
        let g = g_out.data();

        // weight gradient at the reconstructed weights, one chunk per filter
        let mut g_eff = vec![0.0f32; c_out * c_in * kh * kw];
        parallel::fill_chunks(&mut g_eff, c_in * kh * kw, |oc, chunk| {
            for ci in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f64;
                        for bi in 0..b {
                            let g_base = (bi * c_out + oc) * oh * ow;
                            let in_base = (bi * c_in + ci) * ih * iw;
                            for oy in 0..oh {
                                let row = in_base + (oy * sh + ky) * iw + kx;
                                let grow = g_base + oy * ow;
                                for ox in 0..ow {
                                    acc += g[grow + ox] as f64
                                        * padded[row + ox * sw] as f64;
                                }
                            }
                        }
                        chunk[(ci * kh + ky) * kw + kx] = acc as f32;
                    }
                }
            }
        });
        let scale = cache.alpha_sq_sum;
        self.grad_w = Some(Tensor::new(
            self.weights.dims().to_vec(),
            g_eff.iter().map(|v| v * scale).collect(),
        )?);

        // gradient w.r.t. the padded input (gather form), per (batch, in-ch)
        let eff = cache.eff_weights.data();
        let mut g_padded = vec![0.0f32; b * c_in * ih * iw];
        parallel::fill_chunks(&mut g_padded, ih * iw, |plane, chunk| {
            let bi = plane / c_in;
            let ci = plane % c_in;
            for y in 0..ih {
                for x in 0..iw {
                    let mut acc = 0.0f64;
                    for ky in 0..kh {
                        if y < ky || (y - ky) % sh != 0 {
                            continue;
                        }
                        let oy = (y - ky) / sh;
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            if x < kx || (x - kx) % sw != 0 {
                                continue;
                            }
                            let ox = (x - kx) / sw;
                            if ox >= ow {
                                continue;
                            }
                            for oc in 0..c_out {
                                acc += g[((bi * c_out + oc) * oh + oy) * ow + ox] as f64
                                    * eff[((oc * c_in + ci) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    chunk[y * iw + x] = acc as f32;
                }
            }
        });

        // split interior from padding; padding contributions sum into the
        // scalar pad-value gradient
        let mut g_in = Tensor::zeros(vec![b, c_in, h, w]);
        let mut pad_grad = 0.0f64;
        {
            let dst = g_in.data_mut();
            for bi in 0..b {
                for ci in 0..c_in {
                    let plane = (bi * c_in + ci) * ih * iw;
                    for y in 0..ih {
                        for x in 0..iw {
                            let v = g_padded[plane + y * iw + x];
                            let interior =
                                y >= ph && y < h + ph && x >= pw && x < w + pw;
                            if interior {
                                dst[((bi * c_in + ci) * h + (y - ph)) * w + (x - pw)] = v;
                            } else {
                                pad_grad += v as f64;
                            }
                        }
                    }
                }
            }
        }
        self.grad_pad_value = pad_grad as f32;
        Ok(g_in)
    }

    /// ∂c/∂α_m = <g_out, Conv(B_m, input)> given the cached forward; used by
    /// gradient checks on the α-linear path.
    pub fn alpha_grads(&self, g_out: &Tensor) -> Result<Vec<f32>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache { layer: 0 })?;
        let set = cache
            .base_set
            .as_ref()
            .ok_or_else(|| Error::Config("alpha_grads on full-precision layer".into()))?;
        set.bases
            .iter()
            .map(|base| {
                let conv = conv2d_ref(&cache.padded_input, base, self.stride, (0, 0))?;
                Ok(conv
                    .data()
                    .iter()
                    .zip(g_out.data())
                    .map(|(&c, &g)| c as f64 * g as f64)
                    .sum::<f64>() as f32)
            })
            .collect()
    }
}

pub struct PoolCache {
    pub input_dims: [usize; 4],
    pub argmax: Vec<usize>,
}

pub struct PoolLayer {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub cache: Option<PoolCache>,
}

impl PoolLayer {
    pub fn new(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        PoolLayer {
            kernel,
            stride,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let [b, c, h, w] = x.dims4()?;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (oh, ow) = match (conv_out_extent(h, kh, sh, 0), conv_out_extent(w, kw, sw, 0)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "pool kernel {:?} does not fit input {:?}",
                    self.kernel,
                    x.dims()
                )))
            }
        };
        let src = x.data();
        let mut out = Tensor::zeros(vec![b, c, oh, ow]);
        let mut argmax = vec![0usize; b * c * oh * ow];
        let dst = out.data_mut();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let idx = base + (oy * sh + ky) * w + ox * sw + kx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    dst[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        if training {
            self.cache = Some(PoolCache {
                input_dims: [b, c, h, w],
                argmax,
            });
        }
        Ok(out)
    }

    pub fn backward(&mut self, g_out: &Tensor, layer_index: usize) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::MissingCache { layer: layer_index })?;
        let [b, c, h, w] = cache.input_dims;
        let mut g_in = Tensor::zeros(vec![b, c, h, w]);
        let dst = g_in.data_mut();
        for (o, &src_idx) in cache.argmax.iter().enumerate() {
            dst[src_idx] += g_out.data()[o];
        }
        Ok(g_in)
    }
}

pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

pub struct BnLayer {
    pub gamma: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub stat_momentum: f32,
    pub grad_gamma: Vec<f32>,
    pub grad_shift: Vec<f32>,
    pub vel_gamma: Vec<f32>,
    pub vel_shift: Vec<f32>,
    pub cache: Option<BnCache>,
}

impl BnLayer {
    pub fn new(channels: usize) -> Self {
        BnLayer {
            gamma: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            stat_momentum: 0.9,
            grad_gamma: vec![0.0; channels],
            grad_shift: vec![0.0; channels],
            vel_gamma: vec![0.0; channels],
            vel_shift: vec![0.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Run-time affine form y = a·x + b from the running statistics.
    pub fn inference_affine(&self) -> (Vec<f32>, Vec<f32>) {
        let a: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let b: Vec<f32> = a
            .iter()
            .zip(&self.running_mean)
            .zip(&self.shift)
            .map(|((&a, &m), &s)| s - a * m)
            .collect();
        (a, b)
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let [b, c, h, w] = x.dims4()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                context: "batchnorm channel count".into(),
                lhs: x.dims().to_vec(),
                rhs: vec![self.channels()],
            });
        }
        let count = (b * h * w) as f64;
        let src = x.data();
        let mut out = Tensor::zeros(x.dims().to_vec());

        if training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for bi in 0..b {
                #[allow(clippy::needless_range_loop)] // ci also forms the plane offset
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..h * w {
                        mean[ci] += src[base + i] as f64;
                    }
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..h * w {
                        let d = src[base + i] as f64 - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= count;
            }
            let inv_std: Vec<f32> = var
                .iter()
                .map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
                .collect();
            let mut xhat = Tensor::zeros(x.dims().to_vec());
            {
                let xh = xhat.data_mut();
                let dst = out.data_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        for i in 0..h * w {
                            let v = (src[base + i] - mean[ci] as f32) * inv_std[ci];
                            xh[base + i] = v;
                            dst[base + i] = self.gamma[ci] * v + self.shift[ci];
                        }
                    }
                }
            }
            let mom = self.stat_momentum;
            for ci in 0..c {
                self.running_mean[ci] = mom * self.running_mean[ci] + (1.0 - mom) * mean[ci] as f32;
                self.running_var[ci] = mom * self.running_var[ci] + (1.0 - mom) * var[ci] as f32;
            }
            self.cache = Some(BnCache { xhat, inv_std });
        } else {
            let (a, bia) = self.inference_affine();
            let dst = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..h * w {
                        dst[base + i] = a[ci] * src[base + i] + bia[ci];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, g_out: &Tensor, layer_index: usize) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::MissingCache { layer: layer_index })?;
        let [b, c, h, w] = g_out.dims4()?;
        let count = (b * h * w) as f64;
        let g = g_out.data();
        let xh = cache.xhat.data();

        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    sum_g[ci] += g[base + i] as f64;
                    sum_gx[ci] += g[base + i] as f64 * xh[base + i] as f64;
                }
            }
        }
        for ci in 0..c {
            self.grad_gamma[ci] = sum_gx[ci] as f32;
            self.grad_shift[ci] = sum_g[ci] as f32;
        }
        let mut g_in = Tensor::zeros(g_out.dims().to_vec());
        let dst = g_in.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let k = self.gamma[ci] * cache.inv_std[ci];
                let mg = (sum_g[ci] / count) as f32;
                let mgx = (sum_gx[ci] / count) as f32;
                for i in 0..h * w {
                    dst[base + i] = k * (g[base + i] - mg - xh[base + i] * mgx);
                }
            }
        }
        Ok(g_in)
    }
}

pub struct ActCache {
    pub binaries: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

pub struct ActLayer {
    pub bank: ActivationBank,
    pub grad_v: Vec<f32>,
    pub grad_beta: Vec<f32>,
    pub vel_v: Vec<f32>,
    pub vel_beta: Vec<f32>,
    pub cache: Option<ActCache>,
}

impl ActLayer {
    pub fn new(bank: ActivationBank) -> Self {
        let n = bank.len();
        ActLayer {
            bank,
            grad_v: vec![0.0; n],
            grad_beta: vec![0.0; n],
            vel_v: vec![0.0; n],
            vel_beta: vec![0.0; n],
            cache: None,
        }
    }

    /// -Σ β_n: padding each binary branch with -1 equals padding the combined
    /// activation with this constant.
    pub fn pad_value(&self) -> f32 {
        -self.bank.betas.iter().sum::<f32>()
    }

    pub fn forward(&mut self, r: &Tensor, training: bool) -> Result<Tensor> {
        let binaries = multi_binarize(r, &self.bank);
        let out = combine(&binaries, &self.bank.betas)?;
        if training {
            let masks = self
                .bank
                .shifts_v
                .iter()
                .map(|&v| binarize_grad_mask(r, v))
                .collect();
            self.cache = Some(ActCache { binaries, masks });
        }
        Ok(out)
    }

    pub fn backward(&mut self, g_out: &Tensor, layer_index: usize) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::MissingCache { layer: layer_index })?;
        let mut g_in = Tensor::zeros(g_out.dims().to_vec());
        for (n, ((a, mask), (&beta, _v))) in cache
            .binaries
            .iter()
            .zip(&cache.masks)
            .zip(self.bank.betas.iter().zip(&self.bank.shifts_v))
            .enumerate()
        {
            // β gradient is exact (linear path)
            self.grad_beta[n] = g_out
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &av)| g as f64 * av as f64)
                .sum::<f64>() as f32;
            // v gradient through the same STE window as the R gradient
            self.grad_v[n] = g_out
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&g, &m)| beta as f64 * g as f64 * m as f64)
                .sum::<f64>() as f32;
            let dst = g_in.data_mut();
            for ((d, &g), &m) in dst.iter_mut().zip(g_out.data()).zip(mask.data()) {
                *d += beta * g * m;
            }
        }
        Ok(g_in)
    }

    /// Folds the conv-padding gradient into β: each padded cell contributed
    /// -β_n per branch, so ∂pad/∂β_n = -1.
    pub fn add_pad_grad(&mut self, g_pad: f32) {
        for g in &mut self.grad_beta {
            *g -= g_pad;
        }
    }
}

pub struct FlattenLayer {
    pub cache_dims: Option<Vec<usize>>,
}

impl FlattenLayer {
    pub fn new() -> Self {
        FlattenLayer { cache_dims: None }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let batch = dims[0];
        let rest: usize = dims[1..].iter().product();
        if training {
            self.cache_dims = Some(dims);
        }
        x.reshape(vec![batch, rest])
    }

    pub fn backward(&mut self, g_out: &Tensor, layer_index: usize) -> Result<Tensor> {
        let dims = self
            .cache_dims
            .take()
            .ok_or(Error::MissingCache { layer: layer_index })?;
        g_out.reshape(dims)
    }
}

impl Default for FlattenLayer {
    fn default() -> Self {
        Self::new()
    }
}

pub struct DenseLayer {
    pub weights: Tensor, // [out, in]
    pub bias: Vec<f32>,
    pub grad_w: Option<Tensor>,
    pub grad_b: Vec<f32>,
    pub vel_w: Tensor,
    pub vel_b: Vec<f32>,
    pub cache_input: Option<Tensor>,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Vec<f32>) -> Self {
        let vel_w = Tensor::zeros(weights.dims().to_vec());
        let vel_b = vec![0.0; bias.len()];
        DenseLayer {
            weights,
            bias,
            grad_w: None,
            grad_b: vec![0.0; vel_b.len()],
            vel_w,
            vel_b,
            cache_input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (batch, n_in) = match x.dims() {
            &[b, n] => (b, n),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "dense expects rank-2 input, got {:?}",
                    x.dims()
                )))
            }
        };
        let n_out = self.weights.dims()[0];
        if self.weights.dims()[1] != n_in {
            return Err(Error::ShapeMismatch {
                context: "dense input width".into(),
                lhs: x.dims().to_vec(),
                rhs: self.weights.dims().to_vec(),
            });
        }
        let w = self.weights.data();
        let src = x.data();
        let mut out = Tensor::zeros(vec![batch, n_out]);
        {
            let dst = out.data_mut();
            parallel::fill_chunks(dst, n_out, |bi, row| {
                for (o, slot) in row.iter_mut().enumerate() {
                    let mut acc = self.bias[o] as f64;
                    let wrow = &w[o * n_in..(o + 1) * n_in];
                    let xrow = &src[bi * n_in..(bi + 1) * n_in];
                    for (wv, xv) in wrow.iter().zip(xrow) {
                        acc += *wv as f64 * *xv as f64;
                    }
                    *slot = acc as f32;
                }
            });
        }
        if training {
            self.cache_input = Some(x.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, g_out: &Tensor, layer_index: usize) -> Result<Tensor> {
        let x = self
            .cache_input
            .take()
            .ok_or(Error::MissingCache { layer: layer_index })?;
        let (batch, n_in) = (x.dims()[0], x.dims()[1]);
        let n_out = self.weights.dims()[0];
        let g = g_out.data();
        let src = x.data();

        let mut gw = vec![0.0f32; n_out * n_in];
        parallel::fill_chunks(&mut gw, n_in, |o, row| {
            for (i, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for bi in 0..batch {
                    acc += g[bi * n_out + o] as f64 * src[bi * n_in + i] as f64;
                }
                *slot = acc as f32;
            }
        });
        self.grad_w = Some(Tensor::new(vec![n_out, n_in], gw)?);
        for o in 0..n_out {
            self.grad_b[o] =
                (0..batch).map(|bi| g[bi * n_out + o] as f64).sum::<f64>() as f32;
        }

        let w = self.weights.data();
        let mut g_in = Tensor::zeros(vec![batch, n_in]);
        {
            let dst = g_in.data_mut();
            parallel::fill_chunks(dst, n_in, |bi, row| {
                for o in 0..n_out {
                    let gv = g[bi * n_out + o];
                    let wrow = &w[o * n_in..(o + 1) * n_in];
                    for (slot, wv) in row.iter_mut().zip(wrow) {
                        *slot += gv * wv;
                    }
                }
            });
        }
        Ok(g_in)
    }
}

/// v <- momentum·v - lr·g; p <- p + v
pub fn sgd_momentum_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}
