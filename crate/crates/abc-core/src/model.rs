//! Layer stack assembly, the training-graph forward/backward passes, and the
//! ABCM checkpoint format.

use std::io::{Read, Write};

use crate::activation::ActivationBank;
use crate::config::{default_act_shifts, LayerSpec, ModelSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::layers::{
    sgd_momentum_step, ActLayer, BnLayer, ConvLayer, DenseLayer, FlattenLayer, PoolLayer,
};
use crate::tensor::{Rng, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ABCM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub enum LayerState {
    Conv(ConvLayer),
    MaxPool(PoolLayer),
    BatchNorm(BnLayer),
    MultiAct(ActLayer),
    Flatten(FlattenLayer),
    Dense(DenseLayer),
}

impl LayerState {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerState::Conv(_) => "conv",
            LayerState::MaxPool(_) => "maxpool",
            LayerState::BatchNorm(_) => "batchnorm",
            LayerState::MultiAct(_) => "act",
            LayerState::Flatten(_) => "flatten",
            LayerState::Dense(_) => "dense",
        }
    }
}

pub struct Model {
    pub layers: Vec<LayerState>,
    pub input: [usize; 3],
    pub classes: usize,
}

impl Model {
    /// Builds a freshly initialized model. Conv and dense weights use scaled
    /// normal init (std = sqrt(2 / fan_in)); activation banks start from
    /// their configured or default shift/beta values.
    pub fn from_spec(spec: &ModelSpec, cfg: &TrainConfig, rng: &mut Rng) -> Result<Model> {
        let mut layers = Vec::new();
        let mut channels = spec.input[0];
        let mut first_conv = true;
        for layer in &spec.layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    m,
                    shifts_u,
                } => {
                    let fan_in = channels * kernel.0 * kernel.1;
                    let std = (2.0 / fan_in as f32).sqrt();
                    let weights = rng.normal_tensor(
                        vec![*out_channels, channels, kernel.0, kernel.1],
                        std,
                    );
                    let m = if first_conv && !cfg.binarize_first_conv {
                        None
                    } else {
                        *m
                    };
                    let shifts = match (&m, shifts_u) {
                        (Some(_), Some(u)) => u.clone(),
                        (Some(m), None) => crate::approx::default_shifts(*m),
                        (None, _) => Vec::new(),
                    };
                    layers.push(LayerState::Conv(ConvLayer::new(
                        weights, *stride, *padding, m, shifts, cfg.ridge,
                    )));
                    channels = *out_channels;
                    first_conv = false;
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    layers.push(LayerState::MaxPool(PoolLayer::new(*kernel, *stride)));
                }
                LayerSpec::BatchNorm => {
                    layers.push(LayerState::BatchNorm(BnLayer::new(channels)));
                }
                LayerSpec::MultiAct { n, shifts_v, betas } => {
                    let v = shifts_v.clone().unwrap_or_else(|| default_act_shifts(*n));
                    let b = betas.clone().unwrap_or_else(|| vec![1.0; *n]);
                    layers.push(LayerState::MultiAct(ActLayer::new(ActivationBank::new(
                        v, b,
                    )?)));
                }
                LayerSpec::Flatten => layers.push(LayerState::Flatten(FlattenLayer::new())),
                LayerSpec::Dense { out } => {
                    // flatten width is determined at first forward; defer by
                    // computing from the spec shape walk
                    let width = dense_input_width(spec, layers.len())?;
                    let std = (2.0 / width as f32).sqrt();
                    let weights = rng.normal_tensor(vec![*out, width], std);
                    layers.push(LayerState::Dense(DenseLayer::new(weights, vec![0.0; *out])));
                    channels = *out;
                }
            }
        }
        Ok(Model {
            layers,
            input: spec.input,
            classes: spec.classes,
        })
    }

    /// Training-graph forward pass. Conv layers consuming a binarized bank
    /// pad with -Σβ (each binary branch padded with -1); all other conv
    /// inputs pad with 0. Non-finite outputs abort with the layer index.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut cur = x.clone();
        let mut pad_value = 0.0f32;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = match layer {
                LayerState::Conv(conv) => {
                    let out = conv.forward(&cur, pad_value, training)?;
                    pad_value = 0.0;
                    out
                }
                LayerState::MaxPool(pool) => {
                    pad_value = 0.0;
                    pool.forward(&cur, training)?
                }
                LayerState::BatchNorm(bn) => {
                    pad_value = 0.0;
                    bn.forward(&cur, training)?
                }
                LayerState::MultiAct(act) => {
                    let out = act.forward(&cur, training)?;
                    pad_value = act.pad_value();
                    out
                }
                LayerState::Flatten(fl) => {
                    pad_value = 0.0;
                    fl.forward(&cur, training)?
                }
                LayerState::Dense(dense) => {
                    pad_value = 0.0;
                    dense.forward(&cur, training)?
                }
            };
            if cur.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    context: format!("{} output", layer.kind()),
                });
            }
        }
        Ok(cur)
    }

    /// Forward pass recording every layer output (inference mode).
    pub fn forward_collect(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut pad_value = 0.0f32;
        for layer in self.layers.iter_mut() {
            cur = match layer {
                LayerState::Conv(conv) => {
                    let out = conv.forward(&cur, pad_value, false)?;
                    pad_value = 0.0;
                    out
                }
                LayerState::MaxPool(pool) => pool.forward(&cur, false)?,
                LayerState::BatchNorm(bn) => bn.forward(&cur, false)?,
                LayerState::MultiAct(act) => {
                    let out = act.forward(&cur, false)?;
                    pad_value = act.pad_value();
                    out
                }
                LayerState::Flatten(fl) => fl.forward(&cur, false)?,
                LayerState::Dense(dense) => dense.forward(&cur, false)?,
            };
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    /// Backward pass; parameter gradients are left on each layer. Conv
    /// padding gradients flow into the β's of the activation bank that
    /// produced the conv input.
    pub fn backward(&mut self, g_logits: &Tensor) -> Result<()> {
        let mut g = g_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let mut conv_pad_grad: Option<f32> = None;
            g = match &mut self.layers[i] {
                LayerState::Conv(conv) => {
                    let g_in = conv.backward(&g, i)?;
                    if conv.padding != (0, 0) {
                        conv_pad_grad = Some(conv.grad_pad_value);
                    }
                    g_in
                }
                LayerState::MaxPool(pool) => pool.backward(&g, i)?,
                LayerState::BatchNorm(bn) => bn.backward(&g, i)?,
                LayerState::MultiAct(act) => act.backward(&g, i)?,
                LayerState::Flatten(fl) => fl.backward(&g, i)?,
                LayerState::Dense(dense) => dense.backward(&g, i)?,
            };
            if let Some(g_pad) = conv_pad_grad {
                if i > 0 {
                    if let LayerState::MultiAct(act) = &mut self.layers[i - 1] {
                        act.add_pad_grad(g_pad);
                    }
                }
            }
        }
        Ok(())
    }

    /// SGD-with-momentum update on every trainable parameter.
    pub fn step(&mut self, lr: f32, momentum: f32) {
        for layer in &mut self.layers {
            match layer {
                LayerState::Conv(conv) => {
                    if let Some(g) = conv.grad_w.take() {
                        sgd_momentum_step(
                            conv.weights.data_mut(),
                            g.data(),
                            conv.vel_w.data_mut(),
                            lr,
                            momentum,
                        );
                    }
                }
                LayerState::BatchNorm(bn) => {
                    let (gg, gs) = (bn.grad_gamma.clone(), bn.grad_shift.clone());
                    sgd_momentum_step(&mut bn.gamma, &gg, &mut bn.vel_gamma, lr, momentum);
                    sgd_momentum_step(&mut bn.shift, &gs, &mut bn.vel_shift, lr, momentum);
                }
                LayerState::MultiAct(act) => {
                    let (gv, gb) = (act.grad_v.clone(), act.grad_beta.clone());
                    sgd_momentum_step(&mut act.bank.shifts_v, &gv, &mut act.vel_v, lr, momentum);
                    sgd_momentum_step(&mut act.bank.betas, &gb, &mut act.vel_beta, lr, momentum);
                }
                LayerState::Dense(dense) => {
                    if let Some(g) = dense.grad_w.take() {
                        sgd_momentum_step(
                            dense.weights.data_mut(),
                            g.data(),
                            dense.vel_w.data_mut(),
                            lr,
                            momentum,
                        );
                    }
                    let gb = dense.grad_b.clone();
                    sgd_momentum_step(&mut dense.bias, &gb, &mut dense.vel_b, lr, momentum);
                }
                LayerState::MaxPool(_) | LayerState::Flatten(_) => {}
            }
        }
    }

    /// Copies weights and batch-norm state from a full-precision model with
    /// matching topology; this model's M/N structure and activation init are
    /// kept.
    pub fn adopt_weights_from(&mut self, source: &Model) -> Result<()> {
        if self.layers.len() != source.layers.len() {
            return Err(Error::TopologyMismatch(format!(
                "layer counts differ: {} vs {}",
                self.layers.len(),
                source.layers.len()
            )));
        }
        for (i, (dst, src)) in self.layers.iter_mut().zip(&source.layers).enumerate() {
            match (dst, src) {
                (LayerState::Conv(d), LayerState::Conv(s)) => {
                    if d.weights.dims() != s.weights.dims() {
                        return Err(Error::TopologyMismatch(format!(
                            "layer {i}: conv weight dims {:?} vs {:?}",
                            d.weights.dims(),
                            s.weights.dims()
                        )));
                    }
                    d.weights = s.weights.clone();
                }
                (LayerState::BatchNorm(d), LayerState::BatchNorm(s)) => {
                    if d.channels() != s.channels() {
                        return Err(Error::TopologyMismatch(format!(
                            "layer {i}: batchnorm channels {} vs {}",
                            d.channels(),
                            s.channels()
                        )));
                    }
                    d.gamma = s.gamma.clone();
                    d.shift = s.shift.clone();
                    d.running_mean = s.running_mean.clone();
                    d.running_var = s.running_var.clone();
                }
                (LayerState::Dense(d), LayerState::Dense(s)) => {
                    if d.weights.dims() != s.weights.dims() {
                        return Err(Error::TopologyMismatch(format!(
                            "layer {i}: dense weight dims {:?} vs {:?}",
                            d.weights.dims(),
                            s.weights.dims()
                        )));
                    }
                    d.weights = s.weights.clone();
                    d.bias = s.bias.clone();
                }
                (LayerState::MaxPool(_), LayerState::MaxPool(_))
                | (LayerState::MultiAct(_), LayerState::MultiAct(_))
                | (LayerState::Flatten(_), LayerState::Flatten(_)) => {}
                (d, s) => {
                    return Err(Error::TopologyMismatch(format!(
                        "layer {i}: kind {} vs {}",
                        d.kind(),
                        s.kind()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        io::write_u32(w, CHECKPOINT_VERSION)?;
        for &d in &self.input {
            io::write_u32(w, d as u32)?;
        }
        io::write_u32(w, self.classes as u32)?;
        io::write_u32(w, self.layers.len() as u32)?;
        for layer in &self.layers {
            match layer {
                LayerState::Conv(c) => {
                    w.write_all(&[0u8])?;
                    io::write_u32(w, c.stride.0 as u32)?;
                    io::write_u32(w, c.stride.1 as u32)?;
                    io::write_u32(w, c.padding.0 as u32)?;
                    io::write_u32(w, c.padding.1 as u32)?;
                    io::write_u32(w, c.m.map(|m| m as u32).unwrap_or(0))?;
                    io::write_u32(w, c.shifts_u.len() as u32)?;
                    for &u in &c.shifts_u {
                        io::write_f32(w, u)?;
                    }
                    io::write_f32(w, c.ridge)?;
                    c.weights.write_to(w)?;
                }
                LayerState::MaxPool(p) => {
                    w.write_all(&[1u8])?;
                    io::write_u32(w, p.kernel.0 as u32)?;
                    io::write_u32(w, p.kernel.1 as u32)?;
                    io::write_u32(w, p.stride.0 as u32)?;
                    io::write_u32(w, p.stride.1 as u32)?;
                }
                LayerState::BatchNorm(bn) => {
                    w.write_all(&[2u8])?;
                    io::write_u32(w, bn.channels() as u32)?;
                    io::write_f32(w, bn.eps)?;
                    io::write_f32(w, bn.stat_momentum)?;
                    for list in [&bn.gamma, &bn.shift, &bn.running_mean, &bn.running_var] {
                        for &v in list {
                            io::write_f32(w, v)?;
                        }
                    }
                }
                LayerState::MultiAct(a) => {
                    w.write_all(&[3u8])?;
                    a.bank.write_to(w)?;
                }
                LayerState::Flatten(_) => w.write_all(&[4u8])?,
                LayerState::Dense(d) => {
                    w.write_all(&[5u8])?;
                    d.weights.write_to(w)?;
                    io::write_u32(w, d.bias.len() as u32)?;
                    for &v in &d.bias {
                        io::write_f32(w, v)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Model> {
        io::expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = io::read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let input = [
            io::read_u32(r)? as usize,
            io::read_u32(r)? as usize,
            io::read_u32(r)? as usize,
        ];
        let classes = io::read_u32(r)? as usize;
        let n_layers = io::read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let layer = match tag[0] {
                0 => {
                    let stride = (io::read_u32(r)? as usize, io::read_u32(r)? as usize);
                    let padding = (io::read_u32(r)? as usize, io::read_u32(r)? as usize);
                    let m_raw = io::read_u32(r)?;
                    let m = if m_raw == 0 { None } else { Some(m_raw as usize) };
                    let n_shifts = io::read_u32(r)? as usize;
                    let mut shifts = Vec::with_capacity(n_shifts);
                    for _ in 0..n_shifts {
                        shifts.push(io::read_f32(r)?);
                    }
                    let ridge = io::read_f32(r)?;
                    let weights = Tensor::read_from(r)?;
                    LayerState::Conv(ConvLayer::new(weights, stride, padding, m, shifts, ridge))
                }
                1 => {
                    let kernel = (io::read_u32(r)? as usize, io::read_u32(r)? as usize);
                    let stride = (io::read_u32(r)? as usize, io::read_u32(r)? as usize);
                    LayerState::MaxPool(PoolLayer::new(kernel, stride))
                }
                2 => {
                    let channels = io::read_u32(r)? as usize;
                    let eps = io::read_f32(r)?;
                    let stat_momentum = io::read_f32(r)?;
                    let mut bn = BnLayer::new(channels);
                    bn.eps = eps;
                    bn.stat_momentum = stat_momentum;
                    for list in [
                        &mut bn.gamma,
                        &mut bn.shift,
                        &mut bn.running_mean,
                        &mut bn.running_var,
                    ] {
                        for v in list.iter_mut() {
                            *v = io::read_f32(r)?;
                        }
                    }
                    LayerState::BatchNorm(bn)
                }
                3 => LayerState::MultiAct(ActLayer::new(ActivationBank::read_from(r)?)),
                4 => LayerState::Flatten(FlattenLayer::new()),
                5 => {
                    let weights = Tensor::read_from(r)?;
                    let n_bias = io::read_u32(r)? as usize;
                    let mut bias = Vec::with_capacity(n_bias);
                    for _ in 0..n_bias {
                        bias.push(io::read_f32(r)?);
                    }
                    LayerState::Dense(DenseLayer::new(weights, bias))
                }
                t => {
                    return Err(Error::Parse {
                        offset: 0,
                        message: format!("unknown layer tag {t}"),
                    })
                }
            };
            layers.push(layer);
        }
        Ok(Model {
            layers,
            input,
            classes,
        })
    }
}

/// Activation width feeding the dense layer at position `upto` in the spec.
fn dense_input_width(spec: &ModelSpec, upto: usize) -> Result<usize> {
    let [mut c, mut h, mut w] = spec.input;
    let mut flat: Option<usize> = None;
    for layer in spec.layers.iter().take(upto) {
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                h = crate::tensor::conv_out_extent(h, kernel.0, stride.0, padding.0)
                    .ok_or_else(|| Error::Config("conv does not fit input".into()))?;
                w = crate::tensor::conv_out_extent(w, kernel.1, stride.1, padding.1)
                    .ok_or_else(|| Error::Config("conv does not fit input".into()))?;
                c = *out_channels;
            }
            LayerSpec::MaxPool { kernel, stride } => {
                h = crate::tensor::conv_out_extent(h, kernel.0, stride.0, 0)
                    .ok_or_else(|| Error::Config("pool does not fit input".into()))?;
                w = crate::tensor::conv_out_extent(w, kernel.1, stride.1, 0)
                    .ok_or_else(|| Error::Config("pool does not fit input".into()))?;
            }
            LayerSpec::Flatten => flat = Some(c * h * w),
            LayerSpec::Dense { out } => flat = Some(*out),
            LayerSpec::BatchNorm | LayerSpec::MultiAct { .. } => {}
        }
    }
    flat.ok_or_else(|| Error::Config("dense layer requires a preceding flatten".into()))
}
