//! Small fully-convolutional network with a cascaded distance head.
//!
//! ```text
//! image ─ trunk ─┬───────────────────────────┐
//!                └─ sdt_head (1x1) ─ hardtanh ─┴─ concat ─ fusion (1x1) ─ softmax
//!                                  │                                     │
//!                                z_dist                                z_seg
//! ```
//!
//! The predicted distances feed the classifier, so the distance head receives
//! gradient from both loss terms. Forward and backward passes are written by
//! hand on top of the kernels in [`layers`].

mod gradcheck;
mod layers;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::Tensor;

pub use gradcheck::{
    check_gradients, finite_difference_gradients, relative_error, GradcheckReport, GradientTamper, DEFAULT_STEP,
    DEFAULT_TOLERANCE, GRADIENT_FLOOR,
};
pub use loss::{loss, LossInputs, LossValue, PROB_FLOOR};

/// Channels of the input image.
pub const IMAGE_CHANNELS: usize = 3;
/// Trunk width used when none is given.
pub const DEFAULT_TRUNK_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Shape-preserving convolution with a square odd kernel.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { in_ch, out_ch, kernel: (kernel, kernel), stride: 1, padding: kernel / 2 }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let (kh, kw) = self.kernel;
        if self.in_ch == 0 || self.out_ch == 0 || self.stride == 0 {
            return Err(NetworkError::InvalidConfig(format!("degenerate convolution {self:?}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NetworkError::InvalidConfig(format!("kernel {kh}x{kw} must be odd-sized")));
        }
        if kh != kw || self.padding != kh / 2 {
            return Err(NetworkError::InvalidConfig(format!("convolution {self:?} is not shape-preserving")));
        }
        Ok(())
    }

    fn fan_in(&self) -> usize {
        self.in_ch * self.kernel.0 * self.kernel.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Relu,
    Maxpool2,
    Upsample2,
    Hardtanh,
    SoftmaxOverChannels,
    Concat,
}

/// Convolution weights `out x in x kh x kw` and biases `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    fn he_init(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive standard deviation");
        let shape = [spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1];
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        Self {
            spec,
            weight: Tensor::from_vec(shape.to_vec(), data).unwrap(),
            bias: Tensor::zeros(&[spec.out_ch]),
        }
    }
}

/// One trunk layer. Only convolutions carry parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TrunkLayer<T> {
    Conv(Conv<T>),
    Relu,
    Maxpool2,
    Upsample2,
    Hardtanh,
}

impl<T: Real> TrunkLayer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            TrunkLayer::Conv(c) => LayerSpec::Conv(c.spec),
            TrunkLayer::Relu => LayerSpec::Relu,
            TrunkLayer::Maxpool2 => LayerSpec::Maxpool2,
            TrunkLayer::Upsample2 => LayerSpec::Upsample2,
            TrunkLayer::Hardtanh => LayerSpec::Hardtanh,
        }
    }
}

/// Default trunk: conv3x3 relu maxpool2 conv3x3 relu upsample2 conv3x3 relu.
pub fn default_trunk(width: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv(ConvSpec::same(IMAGE_CHANNELS, width, 3)),
        LayerSpec::Relu,
        LayerSpec::Maxpool2,
        LayerSpec::Conv(ConvSpec::same(width, width, 3)),
        LayerSpec::Relu,
        LayerSpec::Upsample2,
        LayerSpec::Conv(ConvSpec::same(width, width, 3)),
        LayerSpec::Relu,
    ]
}

/// Learnable state of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    classes: usize,
    in_channels: usize,
    trunk: Vec<TrunkLayer<T>>,
    sdt_head: Conv<T>,
    fusion: Conv<T>,
    seed: u64,
}

/// Parameter gradients, in the order of [`NetworkState::named_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(state: &NetworkState<T>) -> Self {
        Self { blocks: state.named_params().into_iter().map(|(n, t)| (n, Tensor::zeros_like(t))).collect() }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for ((_, a), (_, b)) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|(_, t)| t.all_finite())
    }
}

/// Activations saved by [`NetworkState::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of every trunk layer.
    inputs: Vec<Tensor<T>>,
    /// Per-layer extra state: column matrices and pooling winners.
    cols: Vec<Option<Vec<T>>>,
    argmax: Vec<Option<Vec<usize>>>,
    features: Tensor<T>,
    sdt_pre: Tensor<T>,
    fused: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub z_dist: Tensor<T>,
    pub z_seg: Tensor<T>,
    pub cache: ForwardCache<T>,
}

/// Builds the default network with He-initialized weights.
pub fn init_network<T: Real>(classes: usize, trunk_width: usize, seed: u64) -> Result<NetworkState<T>, NetworkError> {
    if trunk_width < 4 {
        return Err(NetworkError::InvalidConfig(format!("trunk width {trunk_width} < 4")));
    }
    NetworkState::with_trunk(classes, IMAGE_CHANNELS, &default_trunk(trunk_width), seed)
}

impl<T: Real> NetworkState<T> {
    /// Network with a custom trunk. Weights are drawn in layer order from a
    /// generator seeded with `seed`.
    pub fn with_trunk(classes: usize, in_channels: usize, trunk: &[LayerSpec], seed: u64) -> Result<Self, NetworkError> {
        if classes < 2 {
            return Err(NetworkError::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = in_channels;
        let mut depth = 0i32;
        let mut layers = Vec::with_capacity(trunk.len());
        for spec in trunk {
            layers.push(match *spec {
                LayerSpec::Conv(c) => {
                    c.validate()?;
                    if c.in_ch != channels {
                        return Err(NetworkError::InvalidConfig(format!(
                            "convolution expects {} channels, trunk provides {channels}",
                            c.in_ch
                        )));
                    }
                    if c.stride != 1 {
                        return Err(NetworkError::InvalidConfig("trunk convolutions must have stride 1".into()));
                    }
                    channels = c.out_ch;
                    TrunkLayer::Conv(Conv::he_init(c, &mut rng))
                }
                LayerSpec::Relu => TrunkLayer::Relu,
                LayerSpec::Maxpool2 => {
                    depth += 1;
                    TrunkLayer::Maxpool2
                }
                LayerSpec::Upsample2 => {
                    depth -= 1;
                    TrunkLayer::Upsample2
                }
                LayerSpec::Hardtanh => TrunkLayer::Hardtanh,
                LayerSpec::SoftmaxOverChannels | LayerSpec::Concat => {
                    return Err(NetworkError::InvalidConfig(format!("{spec:?} is reserved for the fusion head")))
                }
            });
            if depth < 0 {
                return Err(NetworkError::InvalidConfig("upsampling above input resolution".into()));
            }
        }
        if depth != 0 {
            return Err(NetworkError::InvalidConfig("trunk must return to input resolution".into()));
        }
        let sdt_head = Conv::he_init(ConvSpec::same(channels, classes, 1), &mut rng);
        let fusion = Conv::he_init(ConvSpec::same(channels + classes, classes, 1), &mut rng);
        Ok(Self { classes, in_channels, trunk: layers, sdt_head, fusion, seed })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trunk(&self) -> &[TrunkLayer<T>] {
        &self.trunk
    }

    pub fn sdt_head(&self) -> &Conv<T> {
        &self.sdt_head
    }

    pub fn fusion(&self) -> &Conv<T> {
        &self.fusion
    }

    pub fn fusion_mut(&mut self) -> &mut Conv<T> {
        &mut self.fusion
    }

    pub fn sdt_head_mut(&mut self) -> &mut Conv<T> {
        &mut self.sdt_head
    }

    /// Channel count of the trunk output.
    pub fn trunk_channels(&self) -> usize {
        self.sdt_head.spec.in_ch
    }

    /// Every layer, trunk first, then the distance and fusion heads.
    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<_> = self.trunk.iter().map(TrunkLayer::spec).collect();
        specs.extend([
            LayerSpec::Conv(self.sdt_head.spec),
            LayerSpec::Hardtanh,
            LayerSpec::Concat,
            LayerSpec::Conv(self.fusion.spec),
            LayerSpec::SoftmaxOverChannels,
        ]);
        specs
    }

    /// Side, in input pixels, of the window an output pixel depends on.
    /// The heads are pointwise, so this is the trunk's receptive field.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1.0f64, 1.0f64);
        for l in &self.trunk {
            match l {
                TrunkLayer::Conv(c) => rf += (c.spec.kernel.0 - 1) as f64 * jump,
                TrunkLayer::Maxpool2 => {
                    rf += jump;
                    jump *= 2.0;
                }
                TrunkLayer::Upsample2 => jump /= 2.0,
                TrunkLayer::Relu | TrunkLayer::Hardtanh => {}
            }
        }
        rf.ceil() as usize
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        let mut depth = 0u32;
        let mut max_depth = 0u32;
        for l in &self.trunk {
            match l {
                TrunkLayer::Maxpool2 => {
                    depth += 1;
                    max_depth = max_depth.max(depth);
                }
                TrunkLayer::Upsample2 => depth = depth.saturating_sub(1),
                _ => {}
            }
        }
        1 << max_depth
    }

    /// Parameters as `(name, tensor)`: `trunk.<layer>.w`, `trunk.<layer>.b`,
    /// `sdt_head.w`, `sdt_head.b`, `fusion.w`, `fusion.b`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            if let TrunkLayer::Conv(c) = layer {
                out.push((format!("trunk.{i}.w"), &c.weight));
                out.push((format!("trunk.{i}.b"), &c.bias));
            }
        }
        out.push(("sdt_head.w".into(), &self.sdt_head.weight));
        out.push(("sdt_head.b".into(), &self.sdt_head.bias));
        out.push(("fusion.w".into(), &self.fusion.weight));
        out.push(("fusion.b".into(), &self.fusion.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<(bool, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &mut self.trunk {
            if let TrunkLayer::Conv(c) = layer {
                out.push((true, &mut c.weight));
                out.push((false, &mut c.bias));
            }
        }
        out.push((true, &mut self.sdt_head.weight));
        out.push((false, &mut self.sdt_head.bias));
        out.push((true, &mut self.fusion.weight));
        out.push((false, &mut self.fusion.bias));
        out
    }

    /// Mutable access to one parameter tensor by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let idx = names.iter().position(|n| n == name)?;
        self.params_mut().into_iter().nth(idx).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named tensors for the weights container.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuilds a default-architecture network from named tensors, inferring
    /// the class count and trunk width from the tensor shapes.
    pub fn from_named_tensors(tensors: &[(String, Tensor<T>)]) -> Result<Self, NetworkError> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| NetworkError::Weights(format!("missing tensor {name}")))
        };
        let classes = find("fusion.b")?.len();
        let width = *find("trunk.0.w")?.shape().first().unwrap_or(&0);
        let mut state = init_network::<T>(classes, width, 0)?;
        state.load_named_tensors(tensors)?;
        Ok(state)
    }

    /// Overwrites every parameter from named tensors with matching shapes.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<(), NetworkError> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != names.len() {
            return Err(NetworkError::Weights(format!("expected {} tensors, found {}", names.len(), tensors.len())));
        }
        for (name, (_, dst)) in names.iter().zip(self.params_mut()) {
            let src = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| NetworkError::Weights(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(NetworkError::Weights(format!(
                    "{name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<(), NetworkError> {
        let m = self.size_multiple();
        match *image.shape() {
            [c, h, w] if c == self.in_channels && h > 0 && w > 0 && h % m == 0 && w % m == 0 => Ok(()),
            _ => Err(NetworkError::ShapeMismatch(format!(
                "input {:?} must be {}xHxW with H and W divisible by {m}",
                image.shape(),
                self.in_channels
            ))),
        }
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>, NetworkError> {
        self.check_input(image)?;
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut cols = Vec::with_capacity(self.trunk.len());
        let mut argmax = Vec::with_capacity(self.trunk.len());
        let mut x = image.clone();
        for layer in &self.trunk {
            let (y, col, arg) = match layer {
                TrunkLayer::Conv(c) => {
                    let (y, col) = layers::conv_forward(&x, &c.spec, &c.weight, &c.bias);
                    (y, col, None)
                }
                TrunkLayer::Relu => (layers::relu(&x), None, None),
                TrunkLayer::Maxpool2 => {
                    let (y, arg) = layers::maxpool2(&x);
                    (y, None, Some(arg))
                }
                TrunkLayer::Upsample2 => (layers::upsample2(&x), None, None),
                TrunkLayer::Hardtanh => (layers::hardtanh_forward(&x), None, None),
            };
            inputs.push(std::mem::replace(&mut x, y));
            cols.push(col);
            argmax.push(arg);
        }
        let features = x;
        let (sdt_pre, _) = layers::conv_forward(&features, &self.sdt_head.spec, &self.sdt_head.weight, &self.sdt_head.bias);
        let z_dist = layers::hardtanh_forward(&sdt_pre);
        let fused = layers::concat_channels(&features, &z_dist);
        let (logits, _) = layers::conv_forward(&fused, &self.fusion.spec, &self.fusion.weight, &self.fusion.bias);
        let z_seg = layers::softmax_channels(&logits);
        if !z_seg.all_finite() || !z_dist.all_finite() {
            return Err(NetworkError::NonFinite("forward activations".into()));
        }
        Ok(ForwardOutput { z_dist, z_seg, cache: ForwardCache { inputs, cols, argmax, features, sdt_pre, fused } })
    }

    /// `(z_dist, z_seg)` without keeping the cache.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetworkError> {
        let out = self.forward(image)?;
        Ok((out.z_dist, out.z_seg))
    }

    /// Exact gradients of the total loss for the forward pass in `cache`.
    pub fn backward(&self, cache: &ForwardCache<T>, inputs: &LossInputs<'_, T>) -> Result<Gradients<T>, NetworkError> {
        let out_grads = loss::output_grads(inputs)?;
        Ok(self.backward_from_outputs(cache, out_grads.logits, out_grads.z_dist))
    }

    fn backward_from_outputs(&self, cache: &ForwardCache<T>, g_logits: Tensor<T>, g_dist_l1: Tensor<T>) -> Gradients<T> {
        let fusion = layers::conv_backward(&g_logits, &cache.fused, None, &self.fusion.spec, &self.fusion.weight);
        let (g_feat_fusion, g_dist_fusion) = layers::split_channels(&fusion.input, self.trunk_channels());

        // the distance output receives gradient from the regression term and
        // through the fusion layer
        let mut g_dist = g_dist_l1;
        for (a, &b) in g_dist.data_mut().iter_mut().zip(g_dist_fusion.data()) {
            *a += b;
        }
        let g_pre = layers::hardtanh_backward(&g_dist, &cache.sdt_pre);
        let head = layers::conv_backward(&g_pre, &cache.features, None, &self.sdt_head.spec, &self.sdt_head.weight);

        let mut g = head.input;
        for (a, &b) in g.data_mut().iter_mut().zip(g_feat_fusion.data()) {
            *a += b;
        }

        let mut trunk_grads: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; self.trunk.len()];
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            g = match layer {
                TrunkLayer::Conv(c) => {
                    let r = layers::conv_backward(&g, input, cache.cols[i].as_deref(), &c.spec, &c.weight);
                    trunk_grads[i] = Some((r.weight, r.bias));
                    if i == 0 {
                        // gradient w.r.t. the image is not needed
                        break;
                    }
                    r.input
                }
                TrunkLayer::Relu => {
                    let out = if i + 1 < self.trunk.len() { &cache.inputs[i + 1] } else { &cache.features };
                    layers::relu_backward(&g, out)
                }
                TrunkLayer::Maxpool2 => {
                    layers::maxpool2_backward(&g, cache.argmax[i].as_deref().unwrap(), input.shape())
                }
                TrunkLayer::Upsample2 => layers::upsample2_backward(&g),
                TrunkLayer::Hardtanh => layers::hardtanh_backward(&g, input),
            };
        }

        let mut blocks = Vec::new();
        for (i, grads) in trunk_grads.into_iter().enumerate() {
            if let Some((w, b)) = grads {
                blocks.push((format!("trunk.{i}.w"), w));
                blocks.push((format!("trunk.{i}.b"), b));
            }
        }
        blocks.push(("sdt_head.w".into(), head.weight));
        blocks.push(("sdt_head.b".into(), head.bias));
        blocks.push(("fusion.w".into(), fusion.weight));
        blocks.push(("fusion.b".into(), fusion.bias));
        Gradients { blocks }
    }

    /// Plain SGD with decoupled-from-bias weight decay:
    /// `w <- w - lr * (g + weight_decay * w)`, biases undecayed.
    ///
    /// A non-finite gradient aborts the step and leaves `self` untouched.
    pub fn sgd_step(&self, grads: &Gradients<T>, lr: T, weight_decay: T) -> Result<Self, NetworkError> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        if grads.blocks.len() != names.len() || grads.blocks.iter().zip(&names).any(|((n, _), m)| n != m) {
            return Err(NetworkError::ShapeMismatch("gradient layout does not match the network".into()));
        }
        if !grads.all_finite() {
            return Err(NetworkError::NonFinite("gradients".into()));
        }
        let mut next = self.clone();
        for ((decay, w), (name, g)) in next.params_mut().into_iter().zip(&grads.blocks) {
            if w.shape() != g.shape() {
                return Err(NetworkError::ShapeMismatch(format!("gradient {name}")));
            }
            let wd = if decay { weight_decay } else { T::zero() };
            for (x, &d) in w.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * (d + wd * *x);
            }
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edt::{class_sdt_stack, SdtParams, VoidPolicy};
    use crate::raster::LabelMask;
    use rand::Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network::<f64>(4, 8, 42).unwrap();
        let b = init_network::<f64>(4, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = init_network::<f64>(4, 8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn receptive_field_matches_impulse_response() {
        let s = init_network::<f64>(3, 8, 5).unwrap();
        assert_eq!(s.receptive_field(), 10);
        // widest spread of output changes caused by poking one input pixel
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut widest = 0;
        for trial in 0..40 {
            let base = random_image(&mut rng, 32, 32);
            let p = 15 + trial % 2;
            let mut poked = base.clone();
            for c in 0..3 {
                poked.data_mut()[(c * 32 + p) * 32 + p] += 3.0;
            }
            let (_, a) = s.predict(&base).unwrap();
            let (_, b) = s.predict(&poked).unwrap();
            let rows: Vec<usize> = (0..32)
                .filter(|&i| (0..3 * 32).any(|cj| a.data()[((cj / 32) * 32 + i) * 32 + cj % 32] != b.data()[((cj / 32) * 32 + i) * 32 + cj % 32]))
                .collect();
            if let (Some(lo), Some(hi)) = (rows.first(), rows.last()) {
                widest = widest.max(hi - lo + 1);
            }
        }
        assert_eq!(widest, s.receptive_field());
    }

    #[test]
    fn fusion_sees_trunk_and_distance_channels() {
        let s = init_network::<f32>(4, 8, 1).unwrap();
        assert_eq!(s.fusion().spec.in_ch, 12);
        assert_eq!(s.fusion().spec.out_ch, 4);
        assert_eq!(s.sdt_head().spec.out_ch, 4);
        let names: Vec<_> = s.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["trunk.0.w", "trunk.0.b", "trunk.3.w", "trunk.3.b", "trunk.6.w", "trunk.6.b", "sdt_head.w", "sdt_head.b", "fusion.w", "fusion.b"]
        );
    }

    #[test]
    fn he_variance() {
        // 3x3 kernel over 64 channels: variance 2 / 576
        let s = NetworkState::<f64>::with_trunk(2, 64, &[LayerSpec::Conv(ConvSpec::same(64, 64, 3))], 7).unwrap();
        let TrunkLayer::Conv(c) = &s.trunk()[0] else { unreachable!() };
        let n = c.weight.len() as f64;
        let mean = c.weight.data().iter().sum::<f64>() / n;
        let var = c.weight.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 576.0;
        assert!((var - expected).abs() / expected < 0.2, "variance {var}");
        assert!(c.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_configs() {
        assert!(init_network::<f64>(1, 8, 0).is_err());
        assert!(init_network::<f64>(3, 3, 0).is_err());
        let even = [LayerSpec::Conv(ConvSpec { in_ch: 3, out_ch: 4, kernel: (2, 2), stride: 1, padding: 1 })];
        assert!(NetworkState::<f64>::with_trunk(2, 3, &even, 0).is_err());
        assert!(NetworkState::<f64>::with_trunk(2, 3, &[LayerSpec::Maxpool2], 0).is_err());
    }

    #[test]
    fn outputs_are_valid_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = init_network::<f64>(5, 8, 3).unwrap();
        let img = random_image(&mut rng, 8, 12).map(|v| v * 10.0);
        let out = s.forward(&img).unwrap();
        assert_eq!(out.z_seg.shape(), &[5, 8, 12]);
        for p in 0..96 {
            let sum: f64 = (0..5).map(|k| out.z_seg.data()[k * 96 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(out.z_dist.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(s.forward(&random_image(&mut rng, 7, 8)).is_err());
        assert!(s.forward(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn zero_image_gives_uniform_prediction() {
        let s = init_network::<f64>(4, 8, 9).unwrap();
        let out = s.forward(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(out.z_seg.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(out.z_dist.data().iter().all(|&v| v == 0.0));
    }

    fn instance(rng: &mut ChaCha8Rng, classes: usize) -> (Tensor<f64>, LabelMask, crate::raster::FieldStack<f64>) {
        let img = random_image(rng, 8, 8);
        let data = (0..64).map(|_| rng.random_range(0..classes as u8)).collect();
        let mask = LabelMask::new(8, 8, classes, data, None).unwrap();
        let params = SdtParams::new(3.0, classes, VoidPolicy::ExcludeFromLoss).unwrap();
        let y_dist = class_sdt_stack(&mask, &params).unwrap();
        (img, mask, y_dist)
    }

    #[test]
    fn zero_lambda_still_trains_distance_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = init_network::<f64>(3, 6, 4).unwrap();
        let (img, mask, y_dist) = instance(&mut rng, 3);
        let out = s.forward(&img).unwrap();
        let w = [1.0; 3];
        let inputs = LossInputs {
            z_seg: &out.z_seg,
            z_dist: &out.z_dist,
            y_seg: &mask,
            y_dist: &y_dist,
            class_weights: &w,
            lambda: 0.0,
            void_policy: VoidPolicy::ExcludeFromLoss,
        };
        let g = s.backward(&out.cache, &inputs).unwrap();
        assert!(g.get("sdt_head.w").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn saturated_distance_unit_blocks_regression_gradient() {
        // fusion weights on the distance channels are zero, so the only path
        // into the distance head is the L1 term, which hardtanh cuts
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = init_network::<f64>(2, 4, 5).unwrap();
        {
            let head = s.sdt_head_mut();
            head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            head.bias.data_mut().copy_from_slice(&[5.0, -5.0]);
        }
        let trunk_ch = s.trunk_channels();
        {
            let f = s.fusion_mut();
            let in_ch = f.spec.in_ch;
            for o in 0..2 {
                for k in trunk_ch..in_ch {
                    f.weight.data_mut()[o * in_ch + k] = 0.0;
                }
            }
        }
        let (img, mask, y_dist) = instance(&mut rng, 2);
        let out = s.forward(&img).unwrap();
        let w = [1.0; 2];
        let inputs = LossInputs {
            z_seg: &out.z_seg,
            z_dist: &out.z_dist,
            y_seg: &mask,
            y_dist: &y_dist,
            class_weights: &w,
            lambda: 2.0,
            void_policy: VoidPolicy::ExcludeFromLoss,
        };
        let g = s.backward(&out.cache, &inputs).unwrap();
        assert_eq!(g.get("sdt_head.w").unwrap().max_abs(), 0.0);
        assert_eq!(g.get("sdt_head.b").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn sgd_arithmetic() {
        let s = init_network::<f64>(2, 4, 0).unwrap();
        let mut g = Gradients::zeros_like(&s);
        assert_eq!(s.sgd_step(&g, 0.0, 0.0005).unwrap(), s);

        let mut one = s.clone();
        for (_, t) in one.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let next = one.sgd_step(&g, 0.01, 0.0005).unwrap();
        assert!((next.fusion().weight.data()[0] - 0.999995).abs() < 1e-15);
        assert_eq!(next.fusion().bias.data()[0], 1.0);

        g.blocks[0].1.data_mut()[0] = f64::NAN;
        assert!(matches!(s.sgd_step(&g, 0.01, 0.0), Err(NetworkError::NonFinite(_))));
    }

    #[test]
    fn small_step_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = init_network::<f64>(3, 8, 8).unwrap();
        let (img, mask, y_dist) = instance(&mut rng, 3);
        let w = [1.0; 3];
        let eval = |st: &NetworkState<f64>| {
            let out = st.forward(&img).unwrap();
            let inputs = LossInputs {
                z_seg: &out.z_seg,
                z_dist: &out.z_dist,
                y_seg: &mask,
                y_dist: &y_dist,
                class_weights: &w,
                lambda: 2.0,
                void_policy: VoidPolicy::ExcludeFromLoss,
            };
            (loss(&inputs).unwrap().total, st.backward(&out.cache, &inputs).unwrap())
        };
        let (before, g) = eval(&s);
        let next = s.sgd_step(&g, 1e-3, 0.0).unwrap();
        let (after, _) = eval(&next);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn named_tensors_round_trip() {
        let s = init_network::<f32>(5, 6, 11).unwrap();
        let back = NetworkState::<f32>::from_named_tensors(&s.to_named_tensors()).unwrap();
        assert_eq!(back.named_params(), s.named_params());
        let mut tensors = s.to_named_tensors();
        tensors.pop();
        assert!(NetworkState::<f32>::from_named_tensors(&tensors).is_err());
    }
}
