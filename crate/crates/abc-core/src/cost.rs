//! Static cost model: binary weight storage versus 32-bit floats, binary
//! convolution counts (M·N per conv layer), word-level xnor/popcount work,
//! and the float multiplies that work replaces.

use std::fmt::Write as _;

use crate::config::{LayerSpec, ModelSpec};
use crate::tensor::conv_out_extent;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    /// Weight element count (conv/dense only).
    pub weight_elems: usize,
    /// Bits to store the layer's weights in this scheme.
    pub weight_bits: u64,
    /// Bits a 32-bit float model would use.
    pub fp_weight_bits: u64,
    /// Number of binary convolutions executed (M·N).
    pub binconvs: usize,
    /// 64-bit xnor+popcount word operations per single-sample forward pass.
    pub xnor_word_ops: u64,
    /// Float multiplies the full-precision layer would need per sample.
    pub float_muls_avoided: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_binconvs: usize,
    pub total_xnor_word_ops: u64,
    pub total_float_muls_avoided: u64,
    /// 32·|W| / stored bits over the binarized conv layers (32/M for uniform M).
    pub binary_weight_memory_ratio: f64,
}

/// Walks the topology, tracking activation shape and the N of the most recent
/// activation bank (1 before any bank exists).
pub fn estimate_costs(model: &ModelSpec) -> CostReport {
    let [mut c, mut h, mut w] = model.input;
    let mut bank_n = 1usize;
    let mut layers = Vec::new();
    let mut bin_bits = 0u64;
    let mut bin_fp_bits = 0u64;

    for (index, layer) in model.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                m,
                ..
            } => {
                let weight_elems = out_channels * c * kernel.0 * kernel.1;
                let oh = conv_out_extent(h, kernel.0, stride.0, padding.0).unwrap_or(0);
                let ow = conv_out_extent(w, kernel.1, stride.1, padding.1).unwrap_or(0);
                let out_elems = (out_channels * oh * ow) as u64;
                let patch = c * kernel.0 * kernel.1;
                let fp_bits = 32 * weight_elems as u64;
                let cost = match m {
                    Some(m) => {
                        let bits = (*m as u64) * weight_elems as u64;
                        bin_bits += bits;
                        bin_fp_bits += fp_bits;
                        let binconvs = m * bank_n;
                        LayerCost {
                            index,
                            kind: "conv",
                            weight_elems,
                            weight_bits: bits,
                            fp_weight_bits: fp_bits,
                            binconvs,
                            xnor_word_ops: binconvs as u64
                                * out_elems
                                * patch.div_ceil(64) as u64,
                            float_muls_avoided: out_elems * patch as u64,
                        }
                    }
                    None => LayerCost {
                        index,
                        kind: "conv",
                        weight_elems,
                        weight_bits: fp_bits,
                        fp_weight_bits: fp_bits,
                        binconvs: 0,
                        xnor_word_ops: 0,
                        float_muls_avoided: 0,
                    },
                };
                layers.push(cost);
                (c, h, w) = (*out_channels, oh, ow);
            }
            LayerSpec::MaxPool { kernel, stride } => {
                h = conv_out_extent(h, kernel.0, stride.0, 0).unwrap_or(0);
                w = conv_out_extent(w, kernel.1, stride.1, 0).unwrap_or(0);
            }
            LayerSpec::BatchNorm => {}
            LayerSpec::MultiAct { n, .. } => bank_n = *n,
            LayerSpec::Flatten => {}
            LayerSpec::Dense { out } => {
                let weight_elems = out * c * h.max(1) * w.max(1);
                let bits = 32 * weight_elems as u64;
                layers.push(LayerCost {
                    index,
                    kind: "dense",
                    weight_elems,
                    weight_bits: bits,
                    fp_weight_bits: bits,
                    binconvs: 0,
                    xnor_word_ops: 0,
                    float_muls_avoided: 0,
                });
                (c, h, w) = (*out, 1, 1);
            }
        }
    }

    CostReport {
        total_binconvs: layers.iter().map(|l| l.binconvs).sum(),
        total_xnor_word_ops: layers.iter().map(|l| l.xnor_word_ops).sum(),
        total_float_muls_avoided: layers.iter().map(|l| l.float_muls_avoided).sum(),
        binary_weight_memory_ratio: if bin_bits > 0 {
            bin_fp_bits as f64 / bin_bits as f64
        } else {
            1.0
        },
        layers,
    }
}

impl CostReport {
    /// Flat key=value block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let p = format!("layer{}.{}", l.index, l.kind);
            let _ = writeln!(s, "{p}.weight_elems={}", l.weight_elems);
            let _ = writeln!(s, "{p}.weight_bits={}", l.weight_bits);
            let _ = writeln!(s, "{p}.fp_weight_bits={}", l.fp_weight_bits);
            let _ = writeln!(s, "{p}.binconvs={}", l.binconvs);
            let _ = writeln!(s, "{p}.xnor_word_ops={}", l.xnor_word_ops);
            let _ = writeln!(s, "{p}.float_muls_avoided={}", l.float_muls_avoided);
        }
        let _ = writeln!(s, "total.binconvs={}", self.total_binconvs);
        let _ = writeln!(s, "total.xnor_word_ops={}", self.total_xnor_word_ops);
        let _ = writeln!(s, "total.float_muls_avoided={}", self.total_float_muls_avoided);
        let _ = writeln!(
            s,
            "total.binary_weight_memory_ratio={}",
            self.binary_weight_memory_ratio
        );
        s
    }

    /// Machine-readable rows, one per layer plus a total row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,kind,weight_elems,weight_bits,fp_weight_bits,binconvs,xnor_word_ops,float_muls_avoided\n",
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                l.index,
                l.kind,
                l.weight_elems,
                l.weight_bits,
                l.fp_weight_bits,
                l.binconvs,
                l.xnor_word_ops,
                l.float_muls_avoided
            );
        }
        let _ = writeln!(
            s,
            "total,,,,,{},{},{}",
            self.total_binconvs, self.total_xnor_word_ops, self.total_float_muls_avoided
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize, m: Option<usize>) -> LayerSpec {
        LayerSpec::Conv {
            out_channels: out,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            m,
            shifts_u: None,
        }
    }

    fn act(n: usize) -> LayerSpec {
        LayerSpec::MultiAct {
            n,
            shifts_v: None,
            betas: None,
        }
    }

    #[test]
    fn m1_model_gives_32x_memory() {
        let model = ModelSpec {
            input: [1, 8, 8],
            classes: 2,
            layers: vec![conv(4, Some(1)), LayerSpec::BatchNorm, act(1), conv(4, Some(1))],
        };
        let r = estimate_costs(&model);
        assert_eq!(r.binary_weight_memory_ratio, 32.0);
    }

    #[test]
    fn binconv_counts_are_m_times_n() {
        let model = ModelSpec {
            input: [1, 8, 8],
            classes: 2,
            layers: vec![
                conv(4, Some(3)),
                LayerSpec::BatchNorm,
                act(3),
                conv(8, Some(3)),
                LayerSpec::BatchNorm,
                act(5),
                conv(8, Some(5)),
            ],
        };
        let r = estimate_costs(&model);
        // first conv sees real input (N=1): 3 binconvs; second M=3,N=3: 9;
        // third M=5,N=5: 25
        assert_eq!(r.layers[0].binconvs, 3);
        assert_eq!(r.layers[1].binconvs, 9);
        assert_eq!(r.layers[2].binconvs, 25);
    }

    #[test]
    fn dense_only_model_has_no_binconvs() {
        let model = ModelSpec {
            input: [1, 4, 4],
            classes: 2,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out: 2 }],
        };
        let r = estimate_costs(&model);
        assert_eq!(r.total_binconvs, 0);
        assert_eq!(r.binary_weight_memory_ratio, 1.0);
        assert!(r.to_csv().lines().count() >= 2);
    }
}
