//! Forward and backward kernels on `C x H x W` tensors.

use crate::real::{matmul, MatRef, Real};
use crate::tensor::Tensor;

use super::ConvSpec;

/// Output height/width of a convolution.
pub(crate) fn conv_out_dims(spec: &ConvSpec, h: usize, w: usize) -> Option<(usize, usize)> {
    let (kh, kw) = spec.kernel;
    let ph = h + 2 * spec.padding;
    let pw = w + 2 * spec.padding;
    if ph < kh || pw < kw || spec.stride == 0 {
        return None;
    }
    Some(((ph - kh) / spec.stride + 1, (pw - kw) / spec.stride + 1))
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
}

/// Unfolds input patches into a `(C*kh*kw) x (H'*W')` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let (oh, ow) = conv_out_dims(spec, h, w).expect("validated by caller");
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut col = vec![T::zero(); c * kh * kw * oh * ow];
    let mut rows = col.chunks_exact_mut(oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = rows.next().unwrap();
                for oi in 0..oh {
                    let ii = oi as isize * s + ki as isize - p;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if s == 1 {
                        // contiguous run of valid columns
                        let lo = (p - kj as isize).max(0) as usize;
                        let hi = ((w as isize + p - kj as isize).min(ow as isize)).max(lo as isize) as usize;
                        let off = lo as isize + kj as isize - p;
                        dst[lo..hi].copy_from_slice(&src[off as usize..off as usize + (hi - lo)]);
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = oj as isize * s + kj as isize - p;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds a column matrix back, summing overlaps.
pub(crate) fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let (oh, ow) = conv_out_dims(spec, h, w).expect("validated by caller");
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut x = vec![T::zero(); c * h * w];
    let mut rows = col.chunks_exact(oh * ow);
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = rows.next().unwrap();
                for oi in 0..oh {
                    let ii = oi as isize * s + ki as isize - p;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let src = &row[oi * ow..(oi + 1) * ow];
                    for (oj, &g) in src.iter().enumerate() {
                        let jj = oj as isize * s + kj as isize - p;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += g;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward. Returns the output and the column matrix that the
/// backward pass needs (`None` for pointwise convolutions, whose column
/// matrix is the input itself).
pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Tensor<T>, Option<Vec<T>>) {
    let (c, h, w) = x.dims3();
    let (oh, ow) = conv_out_dims(spec, h, w).expect("validated by caller");
    let k = c * spec.kernel.0 * spec.kernel.1;
    let n = oh * ow;
    let mut out = vec![T::zero(); spec.out_ch * n];
    for (o, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(bias.data()[o]);
    }
    let col = if is_pointwise(spec) { None } else { Some(im2col(x.data(), c, h, w, spec)) };
    let col_ref = col.as_deref().unwrap_or(x.data());
    matmul(MatRef::new(weight.data(), spec.out_ch, k), MatRef::new(col_ref, k, n), T::one(), &mut out);
    (Tensor::from_vec(vec![spec.out_ch, oh, ow], out).unwrap(), col)
}

pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Convolution backward given the forward input (or its column matrix).
pub(crate) fn conv_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    col: Option<&[T]>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
) -> ConvGrads<T> {
    let (c, h, w) = input.dims3();
    let (_, oh, ow) = grad_out.dims3();
    let k = c * spec.kernel.0 * spec.kernel.1;
    let n = oh * ow;
    let col_ref = col.unwrap_or(input.data());
    let g = MatRef::new(grad_out.data(), spec.out_ch, n);

    let mut gw = vec![T::zero(); spec.out_ch * k];
    matmul(g, MatRef::new(col_ref, k, n).t(), T::zero(), &mut gw);
    let gb: Vec<T> = grad_out.data().chunks_exact(n).map(|r| r.iter().copied().sum()).collect();

    let mut gcol = vec![T::zero(); k * n];
    matmul(MatRef::new(weight.data(), spec.out_ch, k).t(), g, T::zero(), &mut gcol);
    let gx = if is_pointwise(spec) { gcol } else { col2im(&gcol, c, h, w, spec) };

    ConvGrads {
        input: Tensor::from_vec(vec![c, h, w], gx).unwrap(),
        weight: Tensor::from_vec(weight.shape().to_vec(), gw).unwrap(),
        bias: Tensor::from_vec(vec![spec.out_ch], gb).unwrap(),
    }
}

pub(crate) fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward<T: Real>(grad: &Tensor<T>, out: &Tensor<T>) -> Tensor<T> {
    let data = grad.data().iter().zip(out.data()).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(grad.shape().to_vec(), data).unwrap()
}

pub(crate) fn hardtanh_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(crate::edt::hardtanh)
}

/// Gradient through hardtanh given its input; zero where saturated.
pub(crate) fn hardtanh_backward<T: Real>(grad: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let data = grad
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > -one && x < one { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad.shape().to_vec(), data).unwrap()
}

/// 2x2 max pooling with stride 2. Returns the output and, for every output
/// cell, the flat input index of the winning element (first maximum wins).
pub(crate) fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (c, h, w) = x.dims3();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let base = (ch * h + 2 * oi) * w + 2 * oj;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_vec(vec![c, oh, ow], out).unwrap(), arg)
}

pub(crate) fn maxpool2_backward<T: Real>(grad: &Tensor<T>, arg: &[usize], input_shape: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&g, &idx) in grad.data().iter().zip(arg) {
        data[idx] += g;
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            let src = &x.data()[(ch * h + oi / 2) * w..(ch * h + oi / 2 + 1) * w];
            out.extend((0..ow).map(|oj| src[oj / 2]));
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out).unwrap()
}

pub(crate) fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = grad.dims3();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oi in 0..oh {
            let row = &grad.data()[(ch * oh + oi) * ow..(ch * oh + oi + 1) * ow];
            let dst = &mut gx[(ch * h + oi / 2) * w..(ch * h + oi / 2 + 1) * w];
            for (oj, &g) in row.iter().enumerate() {
                dst[oj / 2] += g;
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], gx).unwrap()
}

/// Per-pixel softmax over the channel axis.
pub(crate) fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let n = h * w;
    let d = x.data();
    let mut out = vec![T::zero(); c * n];
    for p in 0..n {
        let max = (0..c).map(|k| d[k * n + p]).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for k in 0..c {
            let e = (d[k * n + p] - max).exp();
            out[k * n + p] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * n + p] /= sum;
        }
    }
    Tensor::from_vec(vec![c, h, w], out).unwrap()
}

/// Stacks two tensors along the channel axis.
pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ca, h, w) = a.dims3();
    let (cb, hb, wb) = b.dims3();
    assert_eq!((h, w), (hb, wb), "concat operands differ in size");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(vec![ca + cb, h, w], data).unwrap()
}

/// Inverse of [`concat_channels`] for gradients.
pub(crate) fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = x.dims3();
    let cut = first * h * w;
    (
        Tensor::from_vec(vec![first, h, w], x.data()[..cut].to_vec()).unwrap(),
        Tensor::from_vec(vec![c - first, h, w], x.data()[cut..].to_vec()).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = x.dims3();
        let (oh, ow) = conv_out_dims(spec, h, w).unwrap();
        let (kh, kw) = spec.kernel;
        let mut out = Tensor::zeros(&[spec.out_ch, oh, ow]);
        for o in 0..spec.out_ch {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                                let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += wt.data()[((o * c + ch) * kh + ki) * kw + kj] * x.at3(ch, ii as usize, jj as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * oh + oi) * ow + oj] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (kernel, stride, padding) in [((3, 3), 1, 1), ((1, 1), 1, 0), ((5, 5), 1, 2), ((3, 3), 2, 1), ((3, 1), 1, 1)] {
            let spec = ConvSpec { in_ch: 3, out_ch: 4, kernel, stride, padding };
            let x = random(&[3, 7, 6], &mut rng);
            let wt = random(&[4, 3, kernel.0, kernel.1], &mut rng);
            let b = random(&[4], &mut rng);
            let (fast, _) = conv_forward(&x, &spec, &wt, &b);
            let slow = naive_conv(&x, &spec, &wt, &b);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (kernel, stride, padding) in [((3, 3), 1, 1), ((3, 3), 2, 1), ((5, 3), 1, 2)] {
            let spec = ConvSpec { in_ch: 2, out_ch: 1, kernel, stride, padding };
            let x = random(&[2, 6, 5], &mut rng);
            let col = im2col(x.data(), 2, 6, 5, &spec);
            let y: Vec<f64> = (0..col.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let back = col2im(&y, 2, 6, 5, &spec);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = Tensor::from_vec(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 2.0, 7.0]).unwrap();
        let (p, arg) = maxpool2(&x);
        assert_eq!(p.data(), &[5.0, 7.0]);
        assert_eq!(arg, vec![1, 7]);
        let g = maxpool2_backward(&Tensor::from_vec(vec![1, 1, 2], vec![1.0, 2.0]).unwrap(), &arg, &[1, 2, 4]);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);

        let u = upsample2(&p);
        assert_eq!(u.shape(), &[1, 2, 4]);
        assert_eq!(u.data(), &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]);
        assert_eq!(upsample2_backward(&u).data(), &[20.0, 28.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 3, 3], &mut rng).map(|v| v * 40.0);
        let s = softmax_channels(&x);
        for p in 0..9 {
            let sum: f64 = (0..5).map(|k| s.data()[k * 9 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::<f32>::filled(&[2, 2, 2], 1.0);
        let b = Tensor::<f32>::filled(&[1, 2, 2], 2.0);
        let c = concat_channels(&a, &b);
        assert_eq!(c.shape(), &[3, 2, 2]);
        let (x, y) = split_channels(&c, 2);
        assert_eq!((x, y), (a, b));
    }
}
