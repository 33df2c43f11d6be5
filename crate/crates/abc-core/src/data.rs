//! Dataset handling: MNIST-layout IDX ingestion and a built-in synthetic
//! two-class blob generator for desk-scale runs.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sample extents [channels, height, width].
    pub shape: [usize; 3],
    /// n * c*h*w values, row-major per sample.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Assembles a [batch, c, h, w] tensor plus labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * sl..(i + 1) * sl]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(
            vec![indices.len(), self.shape[0], self.shape[1], self.shape[2]],
            data,
        )
        .expect("batch dims");
        (t, labels)
    }

    /// Prefix split: the first (1-f)·n samples train, the rest validate.
    pub fn split(&self, val_fraction: f32) -> (Dataset, Dataset) {
        let n_val = ((self.len() as f32) * val_fraction).round() as usize;
        let n_train = self.len() - n_val;
        let sl = self.sample_len();
        let train = Dataset {
            shape: self.shape,
            pixels: self.pixels[..n_train * sl].to_vec(),
            labels: self.labels[..n_train].to_vec(),
            classes: self.classes,
        };
        let val = Dataset {
            shape: self.shape,
            pixels: self.pixels[n_train * sl..].to_vec(),
            labels: self.labels[n_train..].to_vec(),
            classes: self.classes,
        };
        (train, val)
    }
}

/// Two Gaussian bumps rendered as 8x8 single-channel images: class 0 centers
/// near the top-left, class 1 near the bottom-right, plus mild pixel noise.
/// Linearly separable by construction.
pub fn synth_blobs(n: usize, seed: u64) -> Dataset {
    let (h, w) = (8usize, 8usize);
    let mut rng = Rng::new(seed);
    let mut pixels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.index(2);
        let (cy, cx) = if class == 0 { (2.5f32, 2.5f32) } else { (5.5, 5.5) };
        let cy = cy + rng.uniform(-0.5, 0.5);
        let cx = cx + rng.uniform(-0.5, 0.5);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let v = (-d2 / (2.0 * 1.5 * 1.5)).exp() + 0.05 * rng.standard_normal();
                pixels.push(v);
            }
        }
        labels.push(class);
    }
    Dataset {
        shape: [1, h, w],
        pixels,
        labels,
        classes: 2,
    }
}

fn read_be_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// IDX image file (magic 0x00000803): u8 pixels scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<(Vec<f32>, [usize; 3], usize)> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_be_u32(&mut f)?;
    if magic != 0x0000_0803 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX image magic {magic:#010x}"),
        });
    }
    let n = read_be_u32(&mut f)? as usize;
    let h = read_be_u32(&mut f)? as usize;
    let w = read_be_u32(&mut f)? as usize;
    let mut raw = vec![0u8; n * h * w];
    f.read_exact(&mut raw)?;
    let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((pixels, [1, h, w], n))
}

/// IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_be_u32(&mut f)?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let n = read_be_u32(&mut f)? as usize;
    let mut raw = vec![0u8; n];
    f.read_exact(&mut raw)?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (pixels, shape, n) = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{n} images but {} labels", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    Ok(Dataset {
        shape,
        pixels,
        labels,
        classes,
    })
}

/// Resolves a dataset spec string: `synth:blobs:<n>` or `idx:<images>:<labels>`.
pub fn load_spec(spec: &str, seed: u64) -> Result<Dataset> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["synth", "blobs", n] => {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad synth sample count in {spec:?}")))?;
            Ok(synth_blobs(n, seed))
        }
        ["idx", images, labels] => load_idx(Path::new(images), Path::new(labels)),
        _ => Err(Error::Config(format!(
            "unknown dataset spec {spec:?}; expected synth:blobs:<n> or idx:<images>:<labels>"
        ))),
    }
}
