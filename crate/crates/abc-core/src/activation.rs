//! Bounded clipping, thresholded binarization, and the N-way trainable
//! activation bank.
//!
//! Binarization thresholds at h_v(x) >= 0.5, i.e. the comparator x >= 0.5 - v
//! with the boundary included. The straight-through window for gradients is
//! the closed interval 0 <= x - v <= 1.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// N trainable threshold shifts and combination scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBank {
    pub shifts_v: Vec<f32>,
    pub betas: Vec<f32>,
}

impl ActivationBank {
    pub fn new(shifts_v: Vec<f32>, betas: Vec<f32>) -> Result<Self> {
        if shifts_v.is_empty() || shifts_v.len() != betas.len() {
            return Err(Error::Config(format!(
                "activation bank needs matching non-empty shifts/betas, got {} and {}",
                shifts_v.len(),
                betas.len()
            )));
        }
        if shifts_v.iter().chain(&betas).any(|x| !x.is_finite()) {
            return Err(Error::Config("activation bank parameters must be finite".into()));
        }
        Ok(Self { shifts_v, betas })
    }

    /// Single-threshold identity bank: v = 0, beta = 1.
    pub fn single() -> Self {
        Self {
            shifts_v: vec![0.0],
            betas: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.shifts_v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts_v.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u32(w, self.shifts_v.len() as u32)?;
        for &v in &self.shifts_v {
            io::write_f32(w, v)?;
        }
        for &b in &self.betas {
            io::write_f32(w, b)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = io::read_u32(r)? as usize;
        let mut shifts_v = Vec::with_capacity(n);
        for _ in 0..n {
            shifts_v.push(io::read_f32(r)?);
        }
        let mut betas = Vec::with_capacity(n);
        for _ in 0..n {
            betas.push(io::read_f32(r)?);
        }
        ActivationBank::new(shifts_v, betas)
    }
}

/// h_v(x) = clip(x + v, 0, 1)
pub fn h_clip(x: &Tensor, v: f32) -> Tensor {
    x.map(|e| (e + v).clamp(0.0, 1.0))
}

/// H_v(R): +1 where h_v(R) >= 0.5, else -1. Comparator form: R >= 0.5 - v.
pub fn binarize(r: &Tensor, v: f32) -> Tensor {
    let threshold = 0.5 - v;
    r.map(|e| if e >= threshold { 1.0 } else { -1.0 })
}

/// STE pass-through window: 1 where 0 <= R - v <= 1, else 0 (closed bounds).
pub fn binarize_grad_mask(r: &Tensor, v: f32) -> Tensor {
    r.map(|e| {
        let d = e - v;
        if (0.0..=1.0).contains(&d) {
            1.0
        } else {
            0.0
        }
    })
}

/// A_n = H_{v_n}(R) for every threshold in the bank.
pub fn multi_binarize(r: &Tensor, bank: &ActivationBank) -> Vec<Tensor> {
    bank.shifts_v.iter().map(|&v| binarize(r, v)).collect()
}

/// Σ β_n A_n elementwise.
pub fn combine(binaries: &[Tensor], betas: &[f32]) -> Result<Tensor> {
    assert_eq!(binaries.len(), betas.len());
    let mut out = Tensor::zeros(binaries[0].dims().to_vec());
    for (b, &beta) in binaries.iter().zip(betas) {
        out.add_scaled(b, beta).map_err(|_| Error::ShapeMismatch {
            context: "combine: branch dims differ".into(),
            lhs: out.dims().to_vec(),
            rhs: b.dims().to_vec(),
        })?;
    }
    Ok(out)
}
