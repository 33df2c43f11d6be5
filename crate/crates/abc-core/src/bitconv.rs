//! Bit-packed ±1 tensors, xnor/popcount convolution kernels, the M×N
//! combined convolution, and run-time batch-norm/threshold folding.
//!
//! Encoding: +1 -> bit 1, -1 -> bit 0, element i at bit (i mod 64) of word
//! (i / 64), LSB first. Padding bits in the last word are always 0 and are
//! masked out of every popcount. Spatial padding for binary convolution uses
//! -1 (bit 0): a ±1 algebra has no zero, and -1 keeps the xnor dot product
//! closed. The float reference must pad decoded operands with -1 to match.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io;
use crate::parallel;
use crate::tensor::{conv_out_extent, Tensor};

pub const BITPLANE_MAGIC: &[u8; 4] = b"ABCB";

/// Bit-packed {-1,+1} tensor, 1 bit per element.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlane {
    dims: Vec<usize>,
    words: Vec<u64>,
}

impl BitPlane {
    /// Packs a ±1 tensor. Any element that is not exactly +1 or -1 is an error.
    pub fn pack(t: &Tensor) -> Result<BitPlane> {
        let len = t.len();
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &x) in t.data().iter().enumerate() {
            if x == 1.0 {
                words[i / 64] |= 1u64 << (i % 64);
            } else if x != -1.0 {
                return Err(Error::NonBinaryElement { index: i, value: x });
            }
        }
        Ok(BitPlane {
            dims: t.dims().to_vec(),
            words,
        })
    }

    pub fn unpack(&self) -> Tensor {
        let len = self.len();
        let data = (0..len)
            .map(|i| if self.get_bit(i) { 1.0 } else { -1.0 })
            .collect();
        Tensor::new(self.dims.clone(), data).expect("packed dims are valid")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Number of zero-padding bits in the last word.
    pub fn pad_count(&self) -> usize {
        self.words.len() * 64 - self.len()
    }

    #[inline]
    pub fn get_bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BITPLANE_MAGIC)?;
        io::write_u32(w, self.dims.len() as u32)?;
        for &d in &self.dims {
            io::write_u32(w, d as u32)?;
        }
        io::write_u64(w, self.words.len() as u64)?;
        for &word in &self.words {
            io::write_u64(w, word)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<BitPlane> {
        io::expect_magic(r, BITPLANE_MAGIC)?;
        let rank = io::read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(io::read_u32(r)? as usize);
        }
        let n_words = io::read_u64(r)? as usize;
        let len: usize = dims.iter().product();
        if n_words != len.div_ceil(64) {
            return Err(Error::Parse {
                offset: 0,
                message: format!("word count {n_words} inconsistent with dims {dims:?}"),
            });
        }
        let mut words = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            words.push(io::read_u64(r)?);
        }
        Ok(BitPlane { dims, words })
    }
}

/// Mask keeping the low `n mod 64` bits of the last word (all bits if aligned).
#[inline]
fn tail_mask(significant: usize) -> u64 {
    let rem = significant % 64;
    if rem == 0 {
        u64::MAX
    } else {
        (1u64 << rem) - 1
    }
}

/// ±1 inner product: 2*popcount(xnor) - n over the significant bits.
pub fn xnor_dot(a: &BitPlane, b: &BitPlane) -> Result<i64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::ShapeMismatch {
            context: "xnor_dot: logical lengths differ".into(),
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut pop = 0u64;
    let last = a.words.len() - 1;
    for (i, (&wa, &wb)) in a.words.iter().zip(&b.words).enumerate() {
        let mut x = !(wa ^ wb);
        if i == last {
            x &= tail_mask(n);
        }
        pop += x.count_ones() as u64;
    }
    Ok(2 * pop as i64 - n as i64)
}

/// Rows of packed patch bits, each word-aligned.
struct PackedRows {
    words_per_row: Vec<u64>,
    row_words: usize,
}

impl PackedRows {
    fn new(rows: usize, bits: usize) -> Self {
        let row_words = bits.div_ceil(64);
        PackedRows {
            words_per_row: vec![0u64; rows * row_words],
            row_words,
        }
    }

    #[inline]
    fn set(&mut self, row: usize, bit: usize) {
        self.words_per_row[row * self.row_words + bit / 64] |= 1u64 << (bit % 64);
    }

    #[inline]
    fn row(&self, row: usize) -> &[u64] {
        &self.words_per_row[row * self.row_words..(row + 1) * self.row_words]
    }
}

/// xnor/popcount dot of two word rows holding `bits` significant bits each.
#[inline]
fn row_dot(a: &[u64], b: &[u64], bits: usize) -> i32 {
    let mask = tail_mask(bits);
    let last = a.len() - 1;
    let mut pop = 0u32;
    for i in 0..a.len() {
        let mut x = !(a[i] ^ b[i]);
        if i == last {
            x &= mask;
        }
        pop += x.count_ones();
    }
    2 * pop as i32 - bits as i32
}

/// Repacks each filter of a [c_out, c_in, kh, kw] plane into its own
/// word-aligned row of c_in*kh*kw bits.
fn repack_filters(weights: &BitPlane) -> Result<PackedRows> {
    let dims = weights.dims();
    if dims.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "binary weights must be rank 4, got {dims:?}"
        )));
    }
    let (c_out, patch) = (dims[0], dims[1] * dims[2] * dims[3]);
    let mut rows = PackedRows::new(c_out, patch);
    for oc in 0..c_out {
        for p in 0..patch {
            if weights.get_bit(oc * patch + p) {
                rows.set(oc, p);
            }
        }
    }
    Ok(rows)
}

/// Binary convolution on packed ±1 operands: integer-exact, equal to
/// [`crate::tensor::conv2d_ref`] on the decoded operands with -1 padding.
///
/// Strategy: im2row the packed activation at word granularity, then each
/// output element is a run of word-wise xnor+popcounts against the matching
/// repacked filter row, with a tail mask on the last word.
pub fn binconv2d(
    input: &BitPlane,
    weights: &BitPlane,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let in_dims = input.dims().to_vec();
    let w_dims = weights.dims().to_vec();
    if in_dims.len() != 4 || w_dims.len() != 4 || in_dims[1] != w_dims[1] {
        return Err(Error::ShapeMismatch {
            context: "binconv2d: operand shapes".into(),
            lhs: in_dims,
            rhs: w_dims,
        });
    }
    let (b, c_in, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let (c_out, kh, kw) = (w_dims[0], w_dims[2], w_dims[3]);
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let (oh, ow) = match (conv_out_extent(h, kh, sh, ph), conv_out_extent(w, kw, sw, pw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::ShapeMismatch {
                context: "binconv2d: kernel larger than padded input".into(),
                lhs: in_dims,
                rhs: w_dims,
            })
        }
    };

    let filters = repack_filters(weights)?;
    let patch = c_in * kh * kw;
    let n_pixels = b * oh * ow;

    // Per output pixel: build the packed patch row (pad positions stay 0,
    // i.e. -1) and dot it against every filter row.
    let per_pixel: Vec<Vec<i32>> = parallel::map_indexed(n_pixels, |pix| {
        let bi = pix / (oh * ow);
        let oy = (pix / ow) % oh;
        let ox = pix % ow;
        let mut row = PackedRows::new(1, patch);
        for ci in 0..c_in {
            for ky in 0..kh {
                let y = (oy * sh + ky) as isize - ph as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let x = (ox * sw + kx) as isize - pw as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let src = ((bi * c_in + ci) * h + y as usize) * w + x as usize;
                    if input.get_bit(src) {
                        row.set(0, (ci * kh + ky) * kw + kx);
                    }
                }
            }
        }
        (0..c_out)
            .map(|oc| row_dot(row.row(0), filters.row(oc), patch))
            .collect()
    });

    let mut out = Tensor::zeros(vec![b, c_out, oh, ow]);
    let data = out.data_mut();
    for (pix, per_oc) in per_pixel.iter().enumerate() {
        let bi = pix / (oh * ow);
        let within = pix % (oh * ow);
        for (oc, &v) in per_oc.iter().enumerate() {
            data[(bi * c_out + oc) * oh * ow + within] = v as f32;
        }
    }
    Ok(out)
}

/// Σ_{m,n} α_m β_n BinConv(A_n, B_m): the M·N binary convolutions are
/// independent and run in parallel; the final reduction follows fixed (m, n)
/// order with f64 accumulation, so the result is order-deterministic.
pub fn approx_conv(
    input_bank: &[BitPlane],
    betas: &[f32],
    weight_bases: &[BitPlane],
    alphas: &[f32],
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    assert_eq!(input_bank.len(), betas.len());
    assert_eq!(weight_bases.len(), alphas.len());
    let (m, n) = (weight_bases.len(), input_bank.len());

    let partials: Vec<Result<Tensor>> = parallel::map_indexed(m * n, |idx| {
        let (mi, ni) = (idx / n, idx % n);
        binconv2d(&input_bank[ni], &weight_bases[mi], stride, padding)
    });

    let mut acc: Option<Vec<f64>> = None;
    let mut dims = Vec::new();
    for (idx, part) in partials.into_iter().enumerate() {
        let part = part?;
        let (mi, ni) = (idx / n, idx % n);
        let scale = alphas[mi] as f64 * betas[ni] as f64;
        let acc = acc.get_or_insert_with(|| {
            dims = part.dims().to_vec();
            vec![0.0f64; part.len()]
        });
        for (a, &p) in acc.iter_mut().zip(part.data()) {
            *a += scale * p as f64;
        }
    }
    let acc = acc.expect("at least one (m, n) pair");
    Tensor::new(dims, acc.into_iter().map(|x| x as f32).collect())
}

/// Batch norm folded into the binarization comparator (per channel).
///
/// τ_c = (0.5 - v - b_c)/a_c, held in f64 so the comparator agrees bit-exactly
/// with the unfolded affine-then-threshold pipeline evaluated in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedThreshold {
    pub taus: Vec<f64>,
    /// true where a_c > 0: output +1 iff R >= τ_c; flipped scale reverses it.
    pub positive: Vec<bool>,
}

pub fn fold_bn_threshold(bn_scale: &[f32], bn_shift: &[f32], v: f32) -> Result<FoldedThreshold> {
    assert_eq!(bn_scale.len(), bn_shift.len());
    let mut taus = Vec::with_capacity(bn_scale.len());
    let mut positive = Vec::with_capacity(bn_scale.len());
    for (c, (&a, &b)) in bn_scale.iter().zip(bn_shift).enumerate() {
        if a == 0.0 {
            return Err(Error::ZeroScale { channel: c });
        }
        taus.push((0.5 - v as f64 - b as f64) / a as f64);
        positive.push(a > 0.0);
    }
    Ok(FoldedThreshold { taus, positive })
}

/// Binarizes with the folded comparator; bit-exact with
/// binarize(a·R + b, v) computed in f64. Channel axis is dim 1.
pub fn apply_folded(r: &Tensor, f: &FoldedThreshold) -> Result<Tensor> {
    let dims = r.dims();
    if dims.len() < 2 || dims[1] != f.taus.len() {
        return Err(Error::ShapeMismatch {
            context: "apply_folded: channel count".into(),
            lhs: dims.to_vec(),
            rhs: vec![f.taus.len()],
        });
    }
    let channels = dims[1];
    let inner: usize = dims[2..].iter().product();
    let mut out = Tensor::zeros(dims.to_vec());
    let src = r.data();
    let dst = out.data_mut();
    for (i, &x) in src.iter().enumerate() {
        let c = (i / inner) % channels;
        let fire = if f.positive[c] {
            x as f64 >= f.taus[c]
        } else {
            x as f64 <= f.taus[c]
        };
        dst[i] = if fire { 1.0 } else { -1.0 };
    }
    Ok(out)
}
