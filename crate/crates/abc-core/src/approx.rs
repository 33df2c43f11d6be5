//! Weight approximation: M binary bases from shifted signs of the centered
//! weights, combination coefficients solved by ridge-regularized least squares.
//!
//! Whole-tensor and channel-wise fits share the same base construction; the
//! channel-wise variant solves an independent M-coefficient regression per
//! output channel.

use std::io::{Read, Write};

use crate::bitconv::BitPlane;
use crate::error::{Error, Result};
use crate::io;
use crate::parallel;
use crate::tensor::Tensor;

/// Ridge strength applied by default. Small enough that its bias sits below
/// the approximation error, large enough to keep correlated bases solvable.
pub const DEFAULT_RIDGE_LAMBDA: f32 = 1e-4;

/// Condition-estimate ceiling above which an unregularized solve is rejected.
const SINGULAR_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproxMode {
    Whole,
    Channelwise,
}

/// M binary bases with their combination coefficients and shift parameters.
///
/// In `Whole` mode `alphas` holds M scalars. In `Channelwise` mode it holds
/// `c_out * M` scalars, channel-major: channel i's coefficients occupy
/// `alphas[i*M .. (i+1)*M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBaseSet {
    pub mode: ApproxMode,
    pub bases: Vec<Tensor>,
    pub alphas: Vec<f32>,
    pub shifts_u: Vec<f32>,
}

impl WeightBaseSet {
    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    /// Σ α_m B_m (per output channel in channel-wise mode).
    pub fn reconstruct(&self) -> Tensor {
        let dims = self.bases[0].dims().to_vec();
        let mut out = Tensor::zeros(dims.clone());
        match self.mode {
            ApproxMode::Whole => {
                for (alpha, base) in self.alphas.iter().zip(&self.bases) {
                    out.add_scaled(base, *alpha).expect("base dims match W dims");
                }
            }
            ApproxMode::Channelwise => {
                let m = self.bases.len();
                let c_out = dims[0];
                let slice = out.len() / c_out;
                for ch in 0..c_out {
                    for (mi, base) in self.bases.iter().enumerate() {
                        let alpha = self.alphas[ch * m + mi];
                        let dst = &mut out.data_mut()[ch * slice..(ch + 1) * slice];
                        let src = &base.data()[ch * slice..(ch + 1) * slice];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += alpha * s;
                        }
                    }
                }
            }
        }
        out
    }

    /// Per layer: u32 M, mode byte, shifts, alphas, bit-packed bases.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u32(w, self.bases.len() as u32)?;
        w.write_all(&[match self.mode {
            ApproxMode::Whole => 0u8,
            ApproxMode::Channelwise => 1u8,
        }])?;
        for &s in &self.shifts_u {
            io::write_f32(w, s)?;
        }
        io::write_u32(w, self.alphas.len() as u32)?;
        for &a in &self.alphas {
            io::write_f32(w, a)?;
        }
        for base in &self.bases {
            BitPlane::pack(base)?.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let m = io::read_u32(r)? as usize;
        let mut mode_byte = [0u8; 1];
        r.read_exact(&mut mode_byte)?;
        let mode = match mode_byte[0] {
            0 => ApproxMode::Whole,
            1 => ApproxMode::Channelwise,
            b => {
                return Err(Error::Parse {
                    offset: 5,
                    message: format!("unknown approximation mode byte {b}"),
                })
            }
        };
        let mut shifts_u = Vec::with_capacity(m);
        for _ in 0..m {
            shifts_u.push(io::read_f32(r)?);
        }
        let n_alpha = io::read_u32(r)? as usize;
        let mut alphas = Vec::with_capacity(n_alpha);
        for _ in 0..n_alpha {
            alphas.push(io::read_f32(r)?);
        }
        let mut bases = Vec::with_capacity(m);
        for _ in 0..m {
            bases.push(BitPlane::read_from(r)?.unpack());
        }
        Ok(Self {
            mode,
            bases,
            alphas,
            shifts_u,
        })
    }
}

/// Evenly spaced shift grid on [-1, 1]; the degenerate M=1 grid is [0].
pub fn default_shifts(m: usize) -> Vec<f32> {
    assert!(m >= 1, "need at least one base");
    if m == 1 {
        return vec![0.0];
    }
    (0..m)
        .map(|i| -1.0 + i as f32 * 2.0 / (m - 1) as f32)
        .collect()
}

/// sign with sign(0) = +1, keeping binarization deterministic.
#[inline]
pub fn sign_pm1(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// B_i = sign(W - mean(W) + u_i * std(W)) elementwise.
pub fn make_bases(w: &Tensor, shifts_u: &[f32]) -> Vec<Tensor> {
    let mean = w.mean();
    let std = w.std();
    shifts_u
        .iter()
        .map(|&u| {
            let offset = u * std - mean;
            w.map(|x| sign_pm1(x + offset))
        })
        .collect()
}

/// Solves an m-by-m symmetric positive system by Gaussian elimination with
/// partial pivoting. Returns the solution and a crude condition estimate
/// (ratio of extreme pivots).
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> (Vec<f64>, f64) {
    let m = b.len();
    for col in 0..m {
        let pivot_row = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let pivot = a[col][col];
        if pivot == 0.0 {
            return (vec![f64::NAN; m], f64::INFINITY);
        }
        for row in col + 1..m {
            let factor = a[row][col] / pivot;
            #[allow(clippy::needless_range_loop)] // k indexes two distinct rows of `a`
            for k in col..m {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let pivots: Vec<f64> = (0..m).map(|i| a[i][i].abs()).collect();
    let cond = pivots.iter().cloned().fold(0.0, f64::max)
        / pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut x = vec![0.0; m];
    for col in (0..m).rev() {
        let mut s = b[col];
        for k in col + 1..m {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    (x, cond)
}

/// Least-squares coefficients for w ≈ Σ α_m B_m via the M×M normal equations
/// (BᵀB + λI)α = Bᵀw, accumulated in f64.
pub fn solve_alphas(w: &Tensor, bases: &[Tensor], ridge_lambda: f32) -> Result<Vec<f32>> {
    let m = bases.len();
    for base in bases {
        if base.dims() != w.dims() {
            return Err(Error::ShapeMismatch {
                context: "solve_alphas: base vs weight dims".into(),
                lhs: base.dims().to_vec(),
                rhs: w.dims().to_vec(),
            });
        }
    }
    let mut gram = vec![vec![0.0f64; m]; m];
    let mut rhs = vec![0.0f64; m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = bases[i]
                .data()
                .iter()
                .zip(bases[j].data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
        rhs[i] = bases[i]
            .data()
            .iter()
            .zip(w.data())
            .map(|(&b, &x)| b as f64 * x as f64)
            .sum();
        gram[i][i] += ridge_lambda as f64;
    }
    let (alphas, cond) = solve_small(gram, rhs);
    if ridge_lambda == 0.0 && (!cond.is_finite() || cond > SINGULAR_COND_LIMIT) {
        return Err(Error::SingularSystem { cond });
    }
    Ok(alphas.into_iter().map(|x| x as f32).collect())
}

/// Whole-tensor fit: bases from the shift grid, alphas by least squares.
pub fn approximate(w: &Tensor, shifts_u: &[f32], ridge_lambda: f32) -> Result<WeightBaseSet> {
    let bases = make_bases(w, shifts_u);
    let alphas = solve_alphas(w, &bases, ridge_lambda)?;
    Ok(WeightBaseSet {
        mode: ApproxMode::Whole,
        bases,
        alphas,
        shifts_u: shifts_u.to_vec(),
    })
}

/// Channel-wise fit on a rank-4 [c_out, c_in, kh, kw] weight: each output
/// channel gets its own bases and coefficients, fitted independently (and in
/// parallel) then concatenated along the output-channel dimension.
pub fn approximate_channelwise(
    w: &Tensor,
    shifts_u: &[f32],
    ridge_lambda: f32,
) -> Result<WeightBaseSet> {
    let [c_out, c_in, kh, kw] = w.dims4()?;
    let m = shifts_u.len();
    let slice_len = c_in * kh * kw;

    let per_channel: Vec<Result<(Vec<Tensor>, Vec<f32>)>> = parallel::map_indexed(c_out, |ch| {
        let slice = Tensor::new(
            vec![1, c_in, kh, kw],
            w.data()[ch * slice_len..(ch + 1) * slice_len].to_vec(),
        )?;
        let bases = make_bases(&slice, shifts_u);
        let alphas = solve_alphas(&slice, &bases, ridge_lambda)?;
        Ok((bases, alphas))
    });

    let mut bases = vec![Tensor::zeros(w.dims().to_vec()); m];
    let mut alphas = vec![0.0f32; c_out * m];
    for (ch, res) in per_channel.into_iter().enumerate() {
        let (ch_bases, ch_alphas) = res?;
        for (mi, cb) in ch_bases.into_iter().enumerate() {
            bases[mi].data_mut()[ch * slice_len..(ch + 1) * slice_len]
                .copy_from_slice(cb.data());
        }
        alphas[ch * m..(ch + 1) * m].copy_from_slice(&ch_alphas);
    }
    Ok(WeightBaseSet {
        mode: ApproxMode::Channelwise,
        bases,
        alphas,
        shifts_u: shifts_u.to_vec(),
    })
}

/// sqrt(mean((a-b)^2))
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            context: "rmse".into(),
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.len() as f64).sqrt() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_shift_grids() {
        assert_eq!(default_shifts(3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(default_shifts(5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(default_shifts(1), vec![0.0]);
    }

    #[test]
    fn bases_sign_of_centered() {
        let w = Tensor::from_vec(vec![1.0, -1.0]);
        let b = make_bases(&w, &[0.0]);
        assert_eq!(b[0].data(), &[1.0, -1.0]);
    }

    #[test]
    fn bases_four_point_sample() {
        // mean = 0.125, std ≈ 0.48153 (population); signs checked by hand
        // against the centered-plus-shift values.
        let w = Tensor::from_vec(vec![0.3, -0.5, 0.8, -0.1]);
        let b = make_bases(&w, &[-1.0, 0.0, 1.0]);
        assert_eq!(b[0].data(), &[-1.0, -1.0, 1.0, -1.0]);
        assert_eq!(b[1].data(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(b[2].data(), &[1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn bases_constant_weight() {
        // Constant W has zero centered values and zero std, so every base is
        // all +1 under sign(0) = +1 regardless of the shift.
        let w = Tensor::from_vec(vec![0.7; 6]);
        for base in make_bases(&w, &[-1.0, 0.0, 1.0]) {
            assert!(base.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn bases_scale_invariant() {
        let mut rng = Rng::new(5);
        let w = rng.normal_tensor(vec![64], 1.0);
        let scaled = w.map(|x| 3.7 * x);
        assert_eq!(
            make_bases(&w, &default_shifts(3)),
            make_bases(&scaled, &default_shifts(3))
        );
    }

    #[test]
    fn alphas_exactly_representable() {
        let w = Tensor::from_vec(vec![0.5, -0.5, 0.5, -0.5]);
        let b = vec![Tensor::from_vec(vec![1.0, -1.0, 1.0, -1.0])];
        let a = solve_alphas(&w, &b, 0.0).unwrap();
        assert_abs_diff_eq!(a[0], 0.5, epsilon = 1e-7);
        let set = WeightBaseSet {
            mode: ApproxMode::Whole,
            bases: b,
            alphas: a,
            shifts_u: vec![0.0],
        };
        assert!(rmse(&set.reconstruct(), &w).unwrap() < 1e-7);
    }

    // Independent normal-equations oracle: 3x3 solve via explicit cofactor
    // inverse in f64.
    fn oracle_alphas_3(w: &Tensor, bases: &[Tensor]) -> Vec<f64> {
        let mut g = [[0.0f64; 3]; 3];
        let mut r = [0.0f64; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = bases[i]
                    .data()
                    .iter()
                    .zip(bases[j].data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
            }
            r[i] = bases[i]
                .data()
                .iter()
                .zip(w.data())
                .map(|(&b, &x)| b as f64 * x as f64)
                .sum();
        }
        let det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1])
            - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
            + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
        let inv = |i: usize, j: usize| -> f64 {
            // cofactor expansion, transposed
            let (r0, r1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = g[r0][c0] * g[r1][c1] - g[r0][c1] * g[r1][c0];
            let sign = if (i + j).is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * minor / det
        };
        (0..3)
            .map(|i| (0..3).map(|j| inv(j, i) * r[j]).sum())
            .collect()
    }

    #[test]
    fn alphas_match_normal_equations_oracle() {
        let w = Tensor::from_vec(vec![0.3, -0.5, 0.8, -0.1]);
        let bases = make_bases(&w, &[-1.0, 0.0, 1.0]);
        let got = solve_alphas(&w, &bases, 0.0).unwrap();
        let want = oracle_alphas_3(&w, &bases);
        for (g, w) in got.iter().zip(&want) {
            assert_abs_diff_eq!(*g as f64, *w, epsilon = 1e-6);
        }
    }

    #[test]
    fn duplicated_bases_need_ridge() {
        let w = Tensor::from_vec(vec![0.4, -0.2, 0.9, -0.7]);
        let b = Tensor::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let dup = vec![b.clone(), b];
        assert!(matches!(
            solve_alphas(&w, &dup, 0.0),
            Err(Error::SingularSystem { .. })
        ));
        let a = solve_alphas(&w, &dup, 1e-4).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn normal_equations_residual_orthogonality() {
        let mut rng = Rng::new(9);
        let w = rng.normal_tensor(vec![256], 1.0);
        let bases = make_bases(&w, &default_shifts(3));
        let alphas = solve_alphas(&w, &bases, 0.0).unwrap();
        // ||Bᵀ(w - Bα)|| ≤ 1e-4 ||Bᵀw||
        let mut resid = w.clone();
        for (a, b) in alphas.iter().zip(&bases) {
            resid.add_scaled(b, -a).unwrap();
        }
        let proj = |t: &Tensor| -> f64 {
            bases
                .iter()
                .map(|b| {
                    let d: f64 = b
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&x, &y)| x as f64 * y as f64)
                        .sum();
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        assert!(proj(&resid) <= 1e-4 * proj(&w));
    }

    #[test]
    fn reconstruct_basics() {
        let set = WeightBaseSet {
            mode: ApproxMode::Whole,
            bases: vec![Tensor::from_vec(vec![1.0, -1.0])],
            alphas: vec![0.5],
            shifts_u: vec![0.0],
        };
        assert_eq!(set.reconstruct().data(), &[0.5, -0.5]);

        let zeroed = WeightBaseSet {
            alphas: vec![0.0],
            ..set
        };
        assert_eq!(zeroed.reconstruct().data(), &[0.0, 0.0]);
    }

    #[test]
    fn rmse_basics() {
        let a = Tensor::from_vec(vec![1.0, 1.0]);
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
        let c = Tensor::from_vec(vec![1.0, 0.0]);
        assert_abs_diff_eq!(rmse(&c, &b).unwrap(), 0.5f32.sqrt(), epsilon = 1e-7);
        assert!(rmse(&a, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn rmse_decreases_with_more_bases() {
        let mut rng = Rng::new(1234);
        let w = rng.normal_tensor(vec![1000], 1.0);
        let mut last = f32::INFINITY;
        for m in [1usize, 2, 3, 5] {
            let set = approximate(&w, &default_shifts(m), 0.0).unwrap();
            let e = rmse(&set.reconstruct(), &w).unwrap();
            assert!(e < last, "rmse not decreasing at M={m}: {e} >= {last}");
            last = e;
        }
    }

    #[test]
    fn refit_of_representable_weight_is_idempotent() {
        let mut rng = Rng::new(21);
        let w = rng.normal_tensor(vec![500], 1.0);
        let shifts = default_shifts(3);
        let first = approximate(&w, &shifts, 0.0).unwrap().reconstruct();
        let second = approximate(&first, &shifts, 0.0).unwrap().reconstruct();
        assert!(rmse(&first, &second).unwrap() < 1e-6);
    }

    #[test]
    fn channelwise_single_channel_matches_whole() {
        let mut rng = Rng::new(2);
        let w = rng.normal_tensor(vec![1, 3, 3, 3], 0.5);
        let shifts = default_shifts(3);
        let whole = approximate(&w, &shifts, 0.0).unwrap();
        let chw = approximate_channelwise(&w, &shifts, 0.0).unwrap();
        assert_eq!(whole.bases, chw.bases);
        for (a, b) in whole.alphas.iter().zip(&chw.alphas) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn channelwise_m1_is_scalar_regression() {
        let mut rng = Rng::new(3);
        let w = rng.normal_tensor(vec![4, 2, 3, 3], 0.5);
        let set = approximate_channelwise(&w, &[0.0], 0.0).unwrap();
        let slice_len = 2 * 3 * 3;
        for ch in 0..4 {
            let wd = &w.data()[ch * slice_len..(ch + 1) * slice_len];
            let bd = &set.bases[0].data()[ch * slice_len..(ch + 1) * slice_len];
            // closed-form scalar least squares: α = Bᵀw / n
            let want: f64 = wd
                .iter()
                .zip(bd)
                .map(|(&x, &b)| x as f64 * b as f64)
                .sum::<f64>()
                / slice_len as f64;
            assert_abs_diff_eq!(set.alphas[ch] as f64, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn channelwise_residual_not_worse_than_whole() {
        let mut rng = Rng::new(17);
        let w = rng.normal_tensor(vec![6, 4, 3, 3], 0.8);
        let shifts = default_shifts(3);
        let whole = approximate(&w, &shifts, 0.0).unwrap();
        let chw = approximate_channelwise(&w, &shifts, 0.0).unwrap();
        let e_whole = rmse(&whole.reconstruct(), &w).unwrap();
        let e_chw = rmse(&chw.reconstruct(), &w).unwrap();
        assert!(e_chw <= e_whole + 1e-6, "{e_chw} > {e_whole}");
    }

    #[test]
    fn base_set_serialization_round_trip() {
        let mut rng = Rng::new(8);
        let w = rng.normal_tensor(vec![2, 2, 3, 3], 0.5);
        let set = approximate_channelwise(&w, &default_shifts(3), 1e-4).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = WeightBaseSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }
}
