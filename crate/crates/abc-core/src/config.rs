//! Model topology and training configuration: flat key=value text with
//! `[layer]` blocks, named hyperparameter presets, and validation that lists
//! every violation at once.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Number of weight bases for a conv layer; `None` keeps the layer
/// full-precision (the bypass sentinel).
pub type BaseCount = Option<usize>;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        /// None = full precision.
        m: BaseCount,
        /// Overrides the default shift grid when set.
        shifts_u: Option<Vec<f32>>,
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    BatchNorm,
    MultiAct {
        n: usize,
        shifts_v: Option<Vec<f32>>,
        betas: Option<Vec<f32>>,
    },
    Flatten,
    Dense {
        out: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Input extents [channels, height, width].
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub lr_decay: f32,
    pub momentum: f32,
    pub ridge: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Binarize the first conv layer too (the default); set false to keep it
    /// full-precision as some binary-net work does.
    pub binarize_first_conv: bool,
    /// Fraction of samples held out for validation.
    pub val_fraction: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            lr_decay: 0.95,
            momentum: 0.9,
            ridge: crate::approx::DEFAULT_RIDGE_LAMBDA,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            binarize_first_conv: true,
            val_fraction: 0.2,
        }
    }
}

/// Full run description: topology, training hyperparameters, dataset spec.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Dataset location: `synth:blobs:<n>` or `idx:<images>:<labels>`.
    pub dataset: String,
}

/// Hyperparameter presets (u shifts, v shifts, betas) by name.
pub fn preset(name: &str) -> Option<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let (u, v): (Vec<f32>, Vec<f32>) = match name {
        "m1n1" => (vec![0.0], vec![0.0]),
        "m3n1" => (vec![-1.0, 0.0, 1.0], vec![0.0]),
        "m3n3" => (vec![-1.0, 0.0, 1.0], vec![-1.5, 0.0, 1.5]),
        "m3n5" => (vec![-1.0, 0.0, 1.0], vec![-3.5, -2.5, -1.5, 0.0, 2.5]),
        "m5n1" => (vec![-2.0, -1.0, 0.0, 1.0, 2.0], vec![0.0]),
        "m5n3" => (vec![-2.0, -1.0, 0.0, 1.0, 2.0], vec![-0.9, 0.0, 0.9]),
        "m5n5" => (
            vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            vec![-3.5, -2.5, -1.5, 0.0, 2.5],
        ),
        _ => return None,
    };
    let betas = vec![1.0; v.len()];
    Some((u, v, betas))
}

/// Default activation-shift initialization for a bank of size n.
pub fn default_act_shifts(n: usize) -> Vec<f32> {
    match n {
        1 => vec![0.0],
        3 => vec![-1.5, 0.0, 1.5],
        5 => vec![-3.5, -2.5, -1.5, 0.0, 2.5],
        _ => crate::approx::default_shifts(n),
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    if let Some((a, b)) = s.split_once('x') {
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    } else {
        let v: usize = s.trim().parse().ok()?;
        Some((v, v))
    }
}

fn parse_f32_list(s: &str) -> Option<Vec<f32>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn fmt_pair(p: (usize, usize)) -> String {
    if p.0 == p.1 {
        p.0.to_string()
    } else {
        format!("{}x{}", p.0, p.1)
    }
}

fn fmt_f32_list(v: &[f32]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses the flat key=value format. `#` starts a comment; `[layer]`
    /// opens a new layer block. Errors carry the byte offset of the bad line.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut train = TrainConfig::default();
        let mut dataset = String::from("synth:blobs:2000");
        let mut input = [1usize, 8, 8];
        let mut classes = 2usize;
        let mut preset_u: Option<Vec<f32>> = None;
        let mut preset_v: Option<Vec<f32>> = None;
        let mut preset_b: Option<Vec<f32>> = None;

        // raw key/value maps per layer block, resolved after the scan
        let mut blocks: Vec<Vec<(String, String)>> = Vec::new();
        let mut in_block = false;

        let mut offset = 0u64;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() as u64 + 1;
            let stripped = line.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            if stripped == "[layer]" {
                blocks.push(Vec::new());
                in_block = true;
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| Error::Parse {
                offset: line_offset,
                message: format!("expected key=value, got {stripped:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if in_block {
                blocks
                    .last_mut()
                    .unwrap()
                    .push((key.to_string(), value.to_string()));
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                offset: line_offset,
                message: format!("{key}: {msg}"),
            };
            match key {
                "lr" => train.lr = value.parse().map_err(|_| bad("not a number"))?,
                "lr_decay" => train.lr_decay = value.parse().map_err(|_| bad("not a number"))?,
                "momentum" => train.momentum = value.parse().map_err(|_| bad("not a number"))?,
                "ridge" => train.ridge = value.parse().map_err(|_| bad("not a number"))?,
                "batch_size" => {
                    train.batch_size = value.parse().map_err(|_| bad("not an integer"))?
                }
                "epochs" => train.epochs = value.parse().map_err(|_| bad("not an integer"))?,
                "seed" => train.seed = value.parse().map_err(|_| bad("not an integer"))?,
                "val_fraction" => {
                    train.val_fraction = value.parse().map_err(|_| bad("not a number"))?
                }
                "binarize_first_conv" => {
                    train.binarize_first_conv =
                        value.parse().map_err(|_| bad("expected true/false"))?
                }
                "dataset" => dataset = value.to_string(),
                "classes" => classes = value.parse().map_err(|_| bad("not an integer"))?,
                "input" => {
                    let parts: Vec<usize> = value
                        .split('x')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("expected CxHxW"))?;
                    if parts.len() != 3 {
                        return Err(bad("expected CxHxW"));
                    }
                    input = [parts[0], parts[1], parts[2]];
                }
                "preset" => {
                    let (u, v, b) =
                        preset(value).ok_or_else(|| bad("unknown preset name"))?;
                    preset_u = Some(u);
                    preset_v = Some(v);
                    preset_b = Some(b);
                }
                _ => return Err(bad("unknown key")),
            }
        }

        let mut layers = Vec::new();
        for block in &blocks {
            let get = |k: &str| -> Option<&str> {
                block.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str())
            };
            let kind = get("kind").ok_or_else(|| Error::Parse {
                offset: 0,
                message: "[layer] block without kind=".into(),
            })?;
            let block_err = |msg: String| Error::Parse {
                offset: 0,
                message: format!("layer kind={kind}: {msg}"),
            };
            let layer = match kind {
                "conv" => {
                    let out_channels = get("out")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| block_err("missing/bad out=".into()))?;
                    let kernel = get("kernel")
                        .and_then(parse_pair)
                        .ok_or_else(|| block_err("missing/bad kernel=".into()))?;
                    let stride = get("stride").and_then(parse_pair).unwrap_or((1, 1));
                    let padding = get("pad").and_then(parse_pair).unwrap_or((0, 0));
                    let m = match get("m") {
                        None => Some(1),
                        Some("fp") => None,
                        Some(v) => Some(v.parse().map_err(|_| block_err("bad m=".into()))?),
                    };
                    let shifts_u = match get("shifts_u") {
                        Some(v) => Some(
                            parse_f32_list(v)
                                .ok_or_else(|| block_err("bad shifts_u=".into()))?,
                        ),
                        None => preset_u
                            .as_ref()
                            .filter(|u| Some(u.len()) == m)
                            .cloned(),
                    };
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        m,
                        shifts_u,
                    }
                }
                "maxpool" => {
                    let kernel = get("kernel").and_then(parse_pair).unwrap_or((2, 2));
                    let stride = get("stride").and_then(parse_pair).unwrap_or(kernel);
                    LayerSpec::MaxPool { kernel, stride }
                }
                "batchnorm" => LayerSpec::BatchNorm,
                "act" => {
                    let n = get("n")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| block_err("missing/bad n=".into()))?;
                    let shifts_v = match get("shifts_v") {
                        Some(v) => Some(
                            parse_f32_list(v)
                                .ok_or_else(|| block_err("bad shifts_v=".into()))?,
                        ),
                        None => preset_v.as_ref().filter(|v| v.len() == n).cloned(),
                    };
                    let betas = match get("betas") {
                        Some(v) => {
                            Some(parse_f32_list(v).ok_or_else(|| block_err("bad betas=".into()))?)
                        }
                        None => preset_b.as_ref().filter(|b| b.len() == n).cloned(),
                    };
                    LayerSpec::MultiAct { n, shifts_v, betas }
                }
                "flatten" => LayerSpec::Flatten,
                "dense" => {
                    let out = get("out")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| block_err("missing/bad out=".into()))?;
                    LayerSpec::Dense { out }
                }
                other => return Err(block_err(format!("unknown layer kind {other:?}"))),
            };
            layers.push(layer);
        }

        Ok(RunConfig {
            model: ModelSpec {
                input,
                classes,
                layers,
            },
            train,
            dataset,
        })
    }

    /// Canonical serialization; parse(serialize(c)) == c.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "input={}x{}x{}", self.model.input[0], self.model.input[1], self.model.input[2]);
        let _ = writeln!(s, "classes={}", self.model.classes);
        let _ = writeln!(s, "dataset={}", self.dataset);
        let _ = writeln!(s, "lr={}", t.lr);
        let _ = writeln!(s, "lr_decay={}", t.lr_decay);
        let _ = writeln!(s, "momentum={}", t.momentum);
        let _ = writeln!(s, "ridge={}", t.ridge);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "val_fraction={}", t.val_fraction);
        let _ = writeln!(s, "binarize_first_conv={}", t.binarize_first_conv);
        for layer in &self.model.layers {
            let _ = writeln!(s, "\n[layer]");
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    m,
                    shifts_u,
                } => {
                    let _ = writeln!(s, "kind=conv");
                    let _ = writeln!(s, "out={out_channels}");
                    let _ = writeln!(s, "kernel={}", fmt_pair(*kernel));
                    let _ = writeln!(s, "stride={}", fmt_pair(*stride));
                    let _ = writeln!(s, "pad={}", fmt_pair(*padding));
                    match m {
                        None => {
                            let _ = writeln!(s, "m=fp");
                        }
                        Some(m) => {
                            let _ = writeln!(s, "m={m}");
                        }
                    }
                    if let Some(u) = shifts_u {
                        let _ = writeln!(s, "shifts_u={}", fmt_f32_list(u));
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let _ = writeln!(s, "kind=maxpool");
                    let _ = writeln!(s, "kernel={}", fmt_pair(*kernel));
                    let _ = writeln!(s, "stride={}", fmt_pair(*stride));
                }
                LayerSpec::BatchNorm => {
                    let _ = writeln!(s, "kind=batchnorm");
                }
                LayerSpec::MultiAct { n, shifts_v, betas } => {
                    let _ = writeln!(s, "kind=act");
                    let _ = writeln!(s, "n={n}");
                    if let Some(v) = shifts_v {
                        let _ = writeln!(s, "shifts_v={}", fmt_f32_list(v));
                    }
                    if let Some(b) = betas {
                        let _ = writeln!(s, "betas={}", fmt_f32_list(b));
                    }
                }
                LayerSpec::Flatten => {
                    let _ = writeln!(s, "kind=flatten");
                }
                LayerSpec::Dense { out } => {
                    let _ = writeln!(s, "kind=dense");
                    let _ = writeln!(s, "out={out}");
                }
            }
        }
        s
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let t = &self.train;
        if t.lr <= 0.0 || t.lr.is_nan() {
            errs.push(format!("lr must be > 0, got {}", t.lr));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            errs.push(format!("lr_decay must be in (0, 1], got {}", t.lr_decay));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            errs.push(format!("momentum must be in [0, 1), got {}", t.momentum));
        }
        if t.ridge < 0.0 {
            errs.push(format!("ridge must be >= 0, got {}", t.ridge));
        }
        if t.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if t.epochs == 0 {
            errs.push("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            errs.push(format!("val_fraction must be in [0, 1), got {}", t.val_fraction));
        }

        // shape composition check
        let mut shape = ShapeState::Image {
            c: self.model.input[0],
            h: self.model.input[1],
            w: self.model.input[2],
        };
        for (i, layer) in self.model.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    m,
                    shifts_u,
                } => {
                    if let Some(m) = m {
                        if *m == 0 {
                            errs.push(format!("layer {i}: m must be >= 1 (use m=fp for full precision)"));
                        } else if *m > 8 {
                            errs.push(format!("layer {i}: m must be <= 8, got {m}"));
                        }
                        if let Some(u) = shifts_u {
                            if u.len() != *m {
                                errs.push(format!(
                                    "layer {i}: shifts_u has {} entries for m={m}",
                                    u.len()
                                ));
                            }
                        }
                    }
                    match shape {
                        ShapeState::Image { c: _, h, w } => {
                            match (
                                crate::tensor::conv_out_extent(h, kernel.0, stride.0, padding.0),
                                crate::tensor::conv_out_extent(w, kernel.1, stride.1, padding.1),
                            ) {
                                (Some(oh), Some(ow)) => {
                                    shape = ShapeState::Image {
                                        c: *out_channels,
                                        h: oh,
                                        w: ow,
                                    }
                                }
                                _ => errs.push(format!(
                                    "layer {i}: conv kernel {kernel:?} does not fit {h}x{w} input"
                                )),
                            }
                        }
                        ShapeState::Flat(_) => {
                            errs.push(format!("layer {i}: conv after flatten"));
                        }
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => match shape {
                    ShapeState::Image { c, h, w } => {
                        match (
                            crate::tensor::conv_out_extent(h, kernel.0, stride.0, 0),
                            crate::tensor::conv_out_extent(w, kernel.1, stride.1, 0),
                        ) {
                            (Some(oh), Some(ow)) => shape = ShapeState::Image { c, h: oh, w: ow },
                            _ => errs.push(format!(
                                "layer {i}: pool kernel {kernel:?} does not fit {h}x{w} input"
                            )),
                        }
                    }
                    ShapeState::Flat(_) => errs.push(format!("layer {i}: maxpool after flatten")),
                },
                LayerSpec::BatchNorm => {}
                LayerSpec::MultiAct { n, shifts_v, betas } => {
                    if *n == 0 {
                        errs.push(format!("layer {i}: n must be >= 1"));
                    }
                    if let Some(v) = shifts_v {
                        if v.len() != *n {
                            errs.push(format!("layer {i}: shifts_v has {} entries for n={n}", v.len()));
                        }
                    }
                    if let Some(b) = betas {
                        if b.len() != *n {
                            errs.push(format!("layer {i}: betas has {} entries for n={n}", b.len()));
                        }
                    }
                }
                LayerSpec::Flatten => {
                    if let ShapeState::Image { c, h, w } = shape {
                        shape = ShapeState::Flat(c * h * w);
                    }
                }
                LayerSpec::Dense { out } => match shape {
                    ShapeState::Flat(_) => shape = ShapeState::Flat(*out),
                    ShapeState::Image { .. } => {
                        errs.push(format!("layer {i}: dense requires a flatten first"));
                    }
                },
            }
        }
        match shape {
            ShapeState::Flat(n) if n == self.model.classes => {}
            ShapeState::Flat(n) => errs.push(format!(
                "final layer emits {n} values but classes={}",
                self.model.classes
            )),
            ShapeState::Image { .. } => errs.push("model must end in a dense classifier".into()),
        }
        errs
    }
}

enum ShapeState {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# miniature net
input=1x8x8
classes=2
dataset=synth:blobs:512
lr=0.01
epochs=3
seed=7

[layer]
kind=conv
out=4
kernel=3
pad=1
m=3

[layer]
kind=maxpool
kernel=2

[layer]
kind=batchnorm

[layer]
kind=act
n=3

[layer]
kind=flatten

[layer]
kind=dense
out=2
";

    #[test]
    fn parse_sample() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.model.layers.len(), 6);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
    }

    #[test]
    fn round_trip_identity() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let again = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg, again);
        // serialize is canonical: a second cycle is textually stable
        assert_eq!(cfg.serialize(), again.serialize());
    }

    #[test]
    fn preset_values() {
        let (u, v, b) = preset("m5n5").unwrap();
        assert_eq!(u, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(v, vec![-3.5, -2.5, -1.5, 0.0, 2.5]);
        assert_eq!(b, vec![1.0; 5]);
        assert!(preset("nope").is_none());
    }

    #[test]
    fn preset_populates_matching_layers() {
        let text = format!("preset=m3n3\n{SAMPLE}");
        let cfg = RunConfig::parse(&text).unwrap();
        match &cfg.model.layers[0] {
            LayerSpec::Conv { shifts_u, .. } => {
                assert_eq!(shifts_u.as_deref(), Some(&[-1.0, 0.0, 1.0][..]))
            }
            other => panic!("unexpected {other:?}"),
        }
        match &cfg.model.layers[3] {
            LayerSpec::MultiAct { shifts_v, .. } => {
                assert_eq!(shifts_v.as_deref(), Some(&[-1.5, 0.0, 1.5][..]))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_lists_every_violation() {
        let mut cfg = RunConfig::parse(SAMPLE).unwrap();
        cfg.train.lr = 0.0;
        cfg.train.batch_size = 0;
        cfg.model.classes = 5;
        let errs = cfg.validate();
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn parse_error_carries_offset() {
        let bad = "lr=0.01\nthis is not a kv line\n";
        match RunConfig::parse(bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fp_sentinel_round_trips() {
        let text = SAMPLE.replace("m=3", "m=fp");
        let cfg = RunConfig::parse(&text).unwrap();
        match &cfg.model.layers[0] {
            LayerSpec::Conv { m: None, .. } => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }
}
