//! Exact signed Euclidean distance transforms of label masks.
//!
//! Distances are measured between pixel centres on the integer lattice. The
//! squared transform is separable: a 1-D lower envelope of parabolas along
//! every row, then the same pass along every column, both linear in the
//! number of pixels. Rows and columns are processed in parallel; each line is
//! independent so the result does not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, FieldStack, LabelMask, ScalarField};
use crate::real::Real;

/// Stand-in for an unbounded distance (empty site set). Any finite clip
/// radius saturates it to exactly ±1.
pub const UNBOUNDED: f64 = f64::MAX;

/// Default clip radius in pixels.
pub const DEFAULT_CLIP: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EdtError {
    #[error("empty site set")]
    EmptySiteSet,
    #[error("invalid clip radius {0}: must be finite and >= 1")]
    InvalidClip(f64),
    #[error("mask declares {mask} classes, parameters expect {params}")]
    ClassCountMismatch { mask: usize, params: usize },
}

/// How void pixels enter the regression loss. For distance computation they
/// are always background of every class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoidPolicy {
    /// Void pixels keep their (background) distance targets in the loss.
    Background,
    /// Void pixels are masked out of every loss term.
    #[default]
    ExcludeFromLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdtParams {
    pub clip: f64,
    pub classes: usize,
    pub void_policy: VoidPolicy,
}

impl SdtParams {
    pub fn new(clip: f64, classes: usize, void_policy: VoidPolicy) -> Result<Self, EdtError> {
        if !(clip.is_finite() && clip >= 1.0) {
            return Err(EdtError::InvalidClip(clip));
        }
        Ok(Self { clip, classes, void_policy })
    }
}

/// Identity on `[-1, 1]`, constant outside.
#[inline]
pub fn hardtanh<T: Real>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}

/// `out[i] = min_j (i - j)^2 + f[j]`.
///
/// Non-finite entries of `f` are treated as "no site". If no entry is finite
/// every output is `+inf`.
pub fn squared_edt_1d<T: Real>(f: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); f.len()];
    let mut scratch = Envelope::with_capacity(f.len());
    lower_envelope(f, &mut out, &mut scratch);
    out
}

struct Envelope<T> {
    vertices: Vec<usize>,
    bounds: Vec<T>,
}

impl<T: Real> Envelope<T> {
    fn with_capacity(n: usize) -> Self {
        Self { vertices: Vec::with_capacity(n), bounds: Vec::with_capacity(n + 1) }
    }
}

/// Lower envelope of the parabolas `(x - j)^2 + f[j]` sampled at integers.
fn lower_envelope<T: Real>(f: &[T], out: &mut [T], env: &mut Envelope<T>) {
    debug_assert_eq!(f.len(), out.len());
    let n = f.len();
    let v = &mut env.vertices;
    let z = &mut env.bounds;
    v.clear();
    z.clear();

    let two = T::one() + T::one();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = T::of(q as f64);
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(T::neg_infinity());
                break;
            };
            let pf = T::of(p as f64);
            // abscissa where parabola q overtakes parabola p
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (two * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }

    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = T::infinity());
        return;
    }
    z.push(T::infinity());
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate().take(n) {
        let xf = T::of(x as f64);
        while z[k + 1] < xf {
            k += 1;
        }
        let d = xf - T::of(v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest `true` pixel.
pub fn binary_sqdist(mask: &BinaryMask) -> Result<ScalarField<f64>, EdtError> {
    if !mask.data().iter().any(|&b| b) {
        return Err(EdtError::EmptySiteSet);
    }
    let data = sqdist_unchecked(mask.data(), mask.width(), mask.height());
    Ok(ScalarField::new(mask.width(), mask.height(), data).expect("non-empty site set gives finite distances"))
}

/// Per pixel, the distance along its column to the nearest pixel of the
/// opposite kind (`inf` if the column has none). Two sweeps in row order.
fn column_distances(sites: &[bool], width: usize, height: usize, grid: &mut Vec<f64>) {
    grid.clear();
    grid.resize(width * height, f64::INFINITY);
    for i in 1..height {
        let (done, rest) = grid.split_at_mut(i * width);
        let above = &done[(i - 1) * width..];
        let (kinds, kinds_above) = (&sites[i * width..(i + 1) * width], &sites[(i - 1) * width..i * width]);
        for (j, g) in rest[..width].iter_mut().enumerate() {
            *g = if kinds[j] == kinds_above[j] { above[j] + 1.0 } else { 1.0 };
        }
    }
    for i in (0..height.saturating_sub(1)).rev() {
        let (head, tail) = grid.split_at_mut((i + 1) * width);
        let below = &tail[..width];
        let (kinds, kinds_below) = (&sites[i * width..(i + 1) * width], &sites[(i + 1) * width..(i + 2) * width]);
        for (j, g) in head[i * width..].iter_mut().enumerate() {
            let from_below = if kinds[j] == kinds_below[j] { below[j] + 1.0 } else { 1.0 };
            *g = g.min(from_below);
        }
    }
}

fn sqdist_unchecked(sites: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut grid = Vec::new();
    column_distances(sites, width, height, &mut grid);
    grid.par_chunks_mut(width).zip(sites.par_chunks(width)).for_each_init(
        || (Vec::with_capacity(width), Envelope::with_capacity(width)),
        |(f, env), (row, kinds)| {
            f.clear();
            f.extend(row.iter().zip(kinds).map(|(&g, &site)| if site { 0.0 } else { g * g }));
            lower_envelope(f, row, env);
        },
    );
    grid
}

/// Signed distance: positive distance to the nearest `false` pixel inside
/// the mask, negative distance to the nearest `true` pixel outside.
///
/// A grid with no `false` pixel is `+UNBOUNDED` everywhere, and one with no
/// `true` pixel is `-UNBOUNDED` everywhere.
pub fn signed_dt(mask: &BinaryMask) -> ScalarField<f64> {
    let mut data = Vec::new();
    signed_dt_into(mask, &mut data);
    ScalarField::new(mask.width(), mask.height(), data).expect("signed distances are finite")
}

/// [`signed_dt`] into a reused buffer, row-major, resized to the mask.
pub fn signed_dt_into(mask: &BinaryMask, out: &mut Vec<f64>) {
    let (w, h) = (mask.width(), mask.height());
    let sites = mask.data();
    let any_true = sites.iter().any(|&b| b);
    let any_false = sites.iter().any(|&b| !b);
    match (any_true, any_false) {
        (true, false) | (false, true) => {
            out.clear();
            out.resize(w * h, if any_true { UNBOUNDED } else { -UNBOUNDED });
        }
        (false, false) => unreachable!("masks have at least one pixel"),
        (true, true) => {
            // inside pixels hold the column distance to the background, outside ones to the foreground
            column_distances(sites, w, h, out);
            out.par_chunks_mut(w).zip(sites.par_chunks(w)).for_each_init(
                || {
                    let buf = || (Vec::with_capacity(w), vec![0.0; w]);
                    (buf(), buf(), Envelope::with_capacity(w))
                },
                |((f_fg, to_fg), (f_bg, to_bg), env), (row, kinds)| {
                    f_fg.clear();
                    f_bg.clear();
                    for (&g, &inside) in row.iter().zip(kinds) {
                        f_fg.push(if inside { 0.0 } else { g * g });
                        f_bg.push(if inside { g * g } else { 0.0 });
                    }
                    lower_envelope(f_fg, to_fg, env);
                    lower_envelope(f_bg, to_bg, env);
                    for (j, (o, &inside)) in row.iter_mut().zip(kinds).enumerate() {
                        *o = if inside { to_bg[j].sqrt() } else { -to_fg[j].sqrt() };
                    }
                },
            );
        }
    }
}

/// Exhaustive signed distance, quadratic in the pixel count. Same
/// degenerate-grid rule as [`signed_dt`].
pub fn brute_force_sdt(mask: &BinaryMask) -> ScalarField<f64> {
    let (w, h) = (mask.width(), mask.height());
    let mut data = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let inside = mask.get(i, j);
            let mut best: Option<i64> = None;
            for a in 0..h {
                for b in 0..w {
                    if mask.get(a, b) != inside {
                        let (di, dj) = (a as i64 - i as i64, b as i64 - j as i64);
                        let d = di * di + dj * dj;
                        best = Some(best.map_or(d, |m: i64| m.min(d)));
                    }
                }
            }
            let dist = best.map_or(UNBOUNDED, |d| (d as f64).sqrt());
            data.push(if inside { dist } else { -dist });
        }
    }
    ScalarField::new(w, h, data).expect("signed distances are finite")
}

/// One normalized signed distance channel per class:
/// `hardtanh(signed_dt(mask == k) / clip)`.
pub fn class_sdt_stack<T: Real>(mask: &LabelMask, params: &SdtParams) -> Result<FieldStack<T>, EdtError> {
    if !(params.clip.is_finite() && params.clip >= 1.0) {
        return Err(EdtError::InvalidClip(params.clip));
    }
    if mask.classes() != params.classes {
        return Err(EdtError::ClassCountMismatch { mask: mask.classes(), params: params.classes });
    }
    let mut data = Vec::with_capacity(params.classes * mask.width() * mask.height());
    for k in 0..params.classes {
        let sdt = signed_dt(&mask.class_mask(k));
        data.extend(sdt.data().iter().map(|&d| T::of(hardtanh(d / params.clip))));
    }
    Ok(FieldStack::new(params.classes, mask.height(), mask.width(), data).expect("normalized values lie in [-1, 1]"))
}
