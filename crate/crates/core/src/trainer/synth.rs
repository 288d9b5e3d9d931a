//! Seeded synthetic segmentation data: disks and rectangles on a background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::{LabelMask, VOID_BYTE};
use crate::real::Real;
use crate::tensor::Tensor;

use super::TrainError;

/// Keeps the split shuffle independent of the generator stream.
const SPLIT_STREAM: u64 = 0x5eed_0000_5b11_7000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Background plus shape classes.
    pub classes: usize,
    pub images: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Smallest and largest shape extent (disk diameter, rectangle side).
    pub min_size: usize,
    pub max_size: usize,
    pub kinds: Vec<ShapeKind>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            classes: 5,
            images: 250,
            min_shapes: 3,
            max_shapes: 8,
            min_size: 8,
            max_size: 40,
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle],
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(format!("synthetic spec: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("empty image");
        }
        if !(2..VOID_BYTE as usize).contains(&self.classes) {
            return bad("class count must be in 2..255");
        }
        if self.min_shapes > self.max_shapes || self.min_size == 0 || self.min_size > self.max_size {
            return bad("empty shape count or size range");
        }
        if self.kinds.is_empty() {
            return bad("no shape kinds");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }
}

/// Images with their label masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub masks: Vec<LabelMask>,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Vec<Tensor<T>>, masks: Vec<LabelMask>) -> Result<Self, TrainError> {
        if images.len() != masks.len() {
            return Err(TrainError::InvalidData(format!("{} images but {} masks", images.len(), masks.len())));
        }
        for (img, m) in images.iter().zip(&masks) {
            match *img.shape() {
                [3, h, w] if h == m.height() && w == m.width() => {}
                _ => {
                    return Err(TrainError::InvalidData(format!(
                        "image {:?} does not match a {}x{} mask",
                        img.shape(),
                        m.height(),
                        m.width()
                    )))
                }
            }
        }
        if masks.windows(2).any(|p| p[0].classes() != p[1].classes()) {
            return Err(TrainError::InvalidData("masks disagree on the class count".into()));
        }
        Ok(Self { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> Option<usize> {
        self.masks.first().map(LabelMask::classes)
    }

    /// Splits off a validation set of `round(fraction * len)` images chosen
    /// by a seeded shuffle. Returns `(train, validation)`.
    pub fn split(self, fraction: f64, seed: u64) -> (Self, Self) {
        let n = self.len();
        let n_val = ((n as f64) * fraction).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let mut is_val = vec![false; n];
        for &i in &order[..n_val.min(n)] {
            is_val[i] = true;
        }
        let mut train = Self { images: Vec::new(), masks: Vec::new() };
        let mut val = Self { images: Vec::new(), masks: Vec::new() };
        for ((img, m), v) in self.images.into_iter().zip(self.masks).zip(is_val) {
            let dst = if v { &mut val } else { &mut train };
            dst.images.push(img);
            dst.masks.push(m);
        }
        (train, val)
    }
}

/// Base colour of class `k`, in `[0, 1]^3`. Background is mid grey and the
/// shape classes sit on a ring around it.
pub fn palette(k: usize, classes: usize) -> [f64; 3] {
    if k == 0 {
        return [0.5, 0.5, 0.5];
    }
    let angle = std::f64::consts::TAU * (k - 1) as f64 / (classes - 1) as f64;
    let r = 0.3;
    [0.5 + r * angle.cos(), 0.5 + r * angle.sin(), 0.5 + r * (angle * 2.0).cos() * 0.5]
}

/// Renders `spec.images` images. Image pixels are the class colour, centred
/// on zero, plus Gaussian noise.
pub fn generate_synthetic<T: Real>(spec: &SynthSpec) -> Result<Dataset<T>, TrainError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let (w, h) = (spec.width, spec.height);
    let mut images = Vec::with_capacity(spec.images);
    let mut masks = Vec::with_capacity(spec.images);
    for _ in 0..spec.images {
        let mut labels = vec![0u8; w * h];
        let shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
        for _ in 0..shapes {
            let class = rng.random_range(1..spec.classes) as u8;
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            let ci = rng.random_range(0..h) as f64;
            let cj = rng.random_range(0..w) as f64;
            match kind {
                ShapeKind::Disk => {
                    let r = rng.random_range(spec.min_size..=spec.max_size) as f64 / 2.0;
                    for i in 0..h {
                        for j in 0..w {
                            let (di, dj) = (i as f64 - ci, j as f64 - cj);
                            if di * di + dj * dj <= r * r {
                                labels[i * w + j] = class;
                            }
                        }
                    }
                }
                ShapeKind::Rectangle => {
                    let sh = rng.random_range(spec.min_size..=spec.max_size) as f64;
                    let sw = rng.random_range(spec.min_size..=spec.max_size) as f64;
                    let (i0, i1) = ((ci - sh / 2.0).max(0.0) as usize, ((ci + sh / 2.0) as usize).min(h));
                    let (j0, j1) = ((cj - sw / 2.0).max(0.0) as usize, ((cj + sw / 2.0) as usize).min(w));
                    for i in i0..i1 {
                        labels[i * w + j0..i * w + j1].fill(class);
                    }
                }
            }
        }
        let mut pixels = vec![T::zero(); 3 * w * h];
        for ch in 0..3 {
            for p in 0..w * h {
                let base = palette(labels[p] as usize, spec.classes)[ch] - 0.5;
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels[ch * w * h + p] = T::of(base + n);
            }
        }
        images.push(Tensor::from_vec(vec![3, h, w], pixels).unwrap());
        masks.push(LabelMask::new(w, h, spec.classes, labels, Some(VOID_BYTE)).expect("labels are in range"));
    }
    Ok(Dataset { images, masks })
}
