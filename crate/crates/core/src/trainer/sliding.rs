//! Overlapping-window inference over images larger than the training crop.

use rayon::prelude::*;

use crate::network::NetworkState;
use crate::raster::{LabelMask, VOID_BYTE};
use crate::real::Real;
use crate::tensor::Tensor;

use super::augment::crop_image;
use super::TrainError;

/// `window * (1 - overlap)`, rounded, at least one pixel.
pub fn window_stride(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Window offsets along one axis. The last window is clamped to the border,
/// so every pixel is covered.
pub fn window_positions(size: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window <= size && stride > 0);
    let last = size - window;
    let mut pos: Vec<usize> = (0..=last).step_by(stride).collect();
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    pos
}

/// Per-pixel class probabilities averaged over every window covering the
/// pixel, and their argmax (ties go to the lowest class index).
pub fn sliding_window_infer<T: Real>(
    state: &NetworkState<T>,
    image: &Tensor<T>,
    window: usize,
    overlap: f64,
) -> Result<(Tensor<T>, LabelMask), TrainError> {
    let (_, h, w) = image.dims3();
    if !(0.0..1.0).contains(&overlap) {
        return Err(TrainError::InvalidConfig(format!("overlap {overlap} outside [0, 1)")));
    }
    if window == 0 || window > h || window > w {
        return Err(TrainError::InvalidConfig(format!("window {window} does not fit a {h}x{w} image")));
    }
    let stride = window_stride(window, overlap);
    let rows = window_positions(h, window, stride);
    let cols = window_positions(w, window, stride);
    let offsets: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();

    let outputs = offsets
        .par_iter()
        .map(|&(top, left)| state.predict(&crop_image(image, top, left, window)).map(|(_, z)| z))
        .collect::<Result<Vec<_>, _>>()?;

    let classes = state.classes();
    let mut sum = vec![T::zero(); classes * h * w];
    let mut hits = vec![0u32; h * w];
    for (&(top, left), z) in offsets.iter().zip(&outputs) {
        for i in 0..window {
            for j in 0..window {
                hits[(top + i) * w + left + j] += 1;
            }
        }
        for k in 0..classes {
            for i in 0..window {
                let src = &z.data()[(k * window + i) * window..(k * window + i + 1) * window];
                let dst = &mut sum[(k * h + top + i) * w + left..(k * h + top + i) * w + left + window];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    let n = h * w;
    for k in 0..classes {
        for p in 0..n {
            sum[k * n + p] /= T::of(hits[p] as f64);
        }
    }
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..classes {
                if sum[k * n + p] > sum[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    let mask = LabelMask::new(w, h, classes, labels, Some(VOID_BYTE)).map_err(|e| TrainError::InvalidData(e.to_string()))?;
    Ok((Tensor::from_vec(vec![classes, h, w], sum).unwrap(), mask))
}
