//! Dense NCHW/KCRS tensors, the reference convolution, and seeded randomness.
//!
//! `std` is the population standard deviation (divide by n, not n-1). Every
//! statistic downstream of weight binarization assumes this convention.

use std::io::{Read, Write};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io;

pub const TENSOR_MAGIC: &[u8; 4] = b"ABCT";

/// Dense row-major f32 tensor with explicit extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(format!("extents must be >= 1, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} imply {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n]).expect("zeros: invalid dims")
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("filled: invalid dims")
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("from_vec: empty data")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Arithmetic mean over all elements, accumulated in f64.
    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&x| x as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Population standard deviation (divide by n).
    pub fn std(&self) -> f32 {
        let n = self.data.len() as f64;
        let mean: f64 = self.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = self
            .data
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        var.sqrt() as f32
    }

    /// Row-major flatten to rank 1.
    pub fn vec(&self) -> Tensor {
        Tensor {
            dims: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                lhs: self.dims.clone(),
                rhs: dims,
            });
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise a + s*b.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                context: "add_scaled".into(),
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Spatially pads a rank-4 [b, c, h, w] tensor with a constant value.
    pub fn pad_spatial(&self, pad_h: usize, pad_w: usize, value: f32) -> Result<Tensor> {
        let [b, c, h, w] = self.dims4()?;
        if pad_h == 0 && pad_w == 0 {
            return Ok(self.clone());
        }
        let (ph, pw) = (h + 2 * pad_h, w + 2 * pad_w);
        let mut out = Tensor::filled(vec![b, c, ph, pw], value);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    let src = ((bi * c + ci) * h + y) * w;
                    let dst = ((bi * c + ci) * ph + y + pad_h) * pw + pad_w;
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.dims.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::InvalidShape(format!(
                "expected rank-4 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        io::write_u32(w, self.dims.len() as u32)?;
        for &d in &self.dims {
            io::write_u32(w, d as u32)?;
        }
        for &x in &self.data {
            io::write_f32(w, x)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        io::expect_magic(r, TENSOR_MAGIC)?;
        let rank = io::read_u32(r)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported tensor rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(io::read_u32(r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(io::read_f32(r)?);
        }
        Tensor::new(dims, data)
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Reference 2-D cross-correlation: input [b, c_in, h, w], weights
/// [c_out, c_in, kh, kw], zero padding, f64 accumulation per output element.
pub fn conv2d_ref(
    input: &Tensor,
    weights: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    conv2d_ref_padded(input, weights, stride, padding, 0.0)
}

/// Same as [`conv2d_ref`] with an explicit constant padding value. The binary
/// pipeline pads with -1 since a ±1 algebra has no zero.
pub fn conv2d_ref_padded(
    input: &Tensor,
    weights: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    pad_value: f32,
) -> Result<Tensor> {
    let [b, c_in, h, w] = input.dims4()?;
    let [c_out, wc_in, kh, kw] = weights.dims4()?;
    if c_in != wc_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d: input/weight channel count".into(),
            lhs: input.dims.clone(),
            rhs: weights.dims.clone(),
        });
    }
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let (oh, ow) = match (conv_out_extent(h, kh, sh, ph), conv_out_extent(w, kw, sw, pw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::ShapeMismatch {
                context: "conv2d: kernel larger than padded input".into(),
                lhs: input.dims.clone(),
                rhs: weights.dims.clone(),
            })
        }
    };

    let padded = input.pad_spatial(ph, pw, pad_value)?;
    let (ih, iw) = (h + 2 * ph, w + 2 * pw);
    let pdata = padded.data();
    let wdata = weights.data();

    let mut out = vec![0.0f32; b * c_out * oh * ow];
    // One chunk per (batch, out-channel) plane.
    crate::parallel::fill_chunks(&mut out, oh * ow, |plane, chunk| {
        let bi = plane / c_out;
        let oc = plane % c_out;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..c_in {
                    let in_base = (bi * c_in + ci) * ih * iw;
                    let w_base = ((oc * c_in + ci) * kh) * kw;
                    for ky in 0..kh {
                        let row = in_base + (oy * sh + ky) * iw + ox * sw;
                        let wrow = w_base + ky * kw;
                        for kx in 0..kw {
                            acc += pdata[row + kx] as f64 * wdata[wrow + kx] as f64;
                        }
                    }
                }
                chunk[oy * ow + ox] = acc as f32;
            }
        }
    });

    Tensor::new(vec![b, c_out, oh, ow], out)
}

/// Deterministic seeded generator (ChaCha8). Identical seeds give identical
/// draw sequences on every platform.
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn standard_normal(&mut self) -> f32 {
        self.0.sample(StandardNormal)
    }

    pub fn normal_tensor(&mut self, dims: Vec<usize>, std: f32) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.standard_normal() * std).collect();
        Tensor::new(dims, data).expect("normal_tensor: invalid dims")
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.0.gen_range(lo..hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.0.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// Derives an independent stream for a sub-task.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.0.gen())
    }
}
