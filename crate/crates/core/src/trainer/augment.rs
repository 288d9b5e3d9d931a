//! Random crops and flips applied identically to image and labels.

use rand::Rng;

use crate::raster::{FieldStack, LabelMask};
use crate::real::Real;
use crate::tensor::Tensor;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Side of the square crop, in pixels.
    pub crop: usize,
    /// Probability of each independent flip.
    pub flip_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mirror left/right (columns reversed).
    Horizontal,
    /// Mirror top/bottom (rows reversed).
    Vertical,
}

pub fn crop_image<T: Real>(image: &Tensor<T>, top: usize, left: usize, size: usize) -> Tensor<T> {
    let (c, _, w) = image.dims3();
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in top..top + size {
            let row = (ch * image.shape()[1] + i) * w;
            data.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    Tensor::from_vec(vec![c, size, size], data).unwrap()
}

pub fn crop_mask(mask: &LabelMask, top: usize, left: usize, size: usize) -> LabelMask {
    LabelMask::from_fn(size, size, mask.classes(), mask.void_index(), |i, j| mask.get(top + i, left + j))
}

pub fn flip_image<T: Real>(image: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let (c, h, w) = image.dims3();
    let mut data = Vec::with_capacity(image.len());
    for ch in 0..c {
        for i in 0..h {
            let si = if axis == Axis::Vertical { h - 1 - i } else { i };
            let row = &image.data()[(ch * h + si) * w..(ch * h + si + 1) * w];
            match axis {
                Axis::Horizontal => data.extend(row.iter().rev()),
                Axis::Vertical => data.extend_from_slice(row),
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], data).unwrap()
}

pub fn flip_mask(mask: &LabelMask, axis: Axis) -> LabelMask {
    let (w, h) = (mask.width(), mask.height());
    LabelMask::from_fn(w, h, mask.classes(), mask.void_index(), |i, j| match axis {
        Axis::Horizontal => mask.get(i, w - 1 - j),
        Axis::Vertical => mask.get(h - 1 - i, j),
    })
}

pub fn flip_stack<T: Real>(stack: &FieldStack<T>, axis: Axis) -> FieldStack<T> {
    FieldStack::from_tensor(&flip_image(&stack.to_tensor(), axis)).expect("flip keeps the shape")
}

/// Random square crop followed by independent horizontal and vertical flips.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mask: &LabelMask,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<(Tensor<T>, LabelMask), TrainError> {
    let (_, h, w) = image.dims3();
    if (h, w) != (mask.height(), mask.width()) {
        return Err(TrainError::InvalidData(format!(
            "image is {h}x{w}, mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let size = params.crop;
    if size == 0 || size > h || size > w {
        return Err(TrainError::InvalidConfig(format!("crop {size} does not fit a {h}x{w} image")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let mut img = crop_image(image, top, left, size);
    let mut lab = crop_mask(mask, top, left, size);
    for axis in [Axis::Horizontal, Axis::Vertical] {
        if rng.random_bool(params.flip_prob) {
            img = flip_image(&img, axis);
            lab = flip_mask(&lab, axis);
        }
    }
    Ok((img, lab))
}
