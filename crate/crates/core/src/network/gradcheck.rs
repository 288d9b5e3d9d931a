//! Central finite-difference check of [`NetworkState::backward`].
//!
//! The numerical side only calls `forward` and `loss`, never the backward
//! pass, so the two routes stay independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edt::{class_sdt_stack, SdtParams, VoidPolicy};
use crate::raster::{LabelMask, VOID_BYTE};
use crate::tensor::Tensor;

use super::{init_network, loss, Gradients, LossInputs, NetworkError, NetworkState};

/// Gradients smaller than this are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Test hook that perturbs the analytic gradient before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientTamper {
    #[default]
    None,
    /// Adds a small offset to one fusion weight gradient.
    Corrupt,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub seed: u64,
    pub lambda: f64,
    /// Largest relative error per parameter block.
    pub blocks: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

/// Central differences of `objective` w.r.t. every parameter of `state`.
pub fn finite_difference_gradients(
    state: &NetworkState<f64>,
    h: f64,
    objective: impl Fn(&NetworkState<f64>) -> f64,
) -> Gradients<f64> {
    let names: Vec<String> = state.named_params().into_iter().map(|(n, _)| n).collect();
    let mut probe = state.clone();
    let mut blocks = Vec::with_capacity(names.len());
    for name in names {
        let len = probe.param_mut(&name).unwrap().len();
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.param_mut(&name).unwrap().data()[i];
            probe.param_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = objective(&probe);
            probe.param_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = objective(&probe);
            probe.param_mut(&name).unwrap().data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        let shape = probe.param_mut(&name).unwrap().shape().to_vec();
        blocks.push((name, Tensor::from_vec(shape, g).unwrap()));
    }
    Gradients { blocks }
}

/// Compares analytic and numerical gradients on a seeded `3x8x8` instance
/// with three classes, trunk width 4, small random biases, random class
/// weights and a few void pixels.
pub fn check_gradients(seed: u64, lambda: f64, tamper: GradientTamper) -> Result<GradcheckReport, NetworkError> {
    const CLASSES: usize = 3;
    const SIZE: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = init_network::<f64>(CLASSES, 4, seed)?;
    // zero biases put units with an all-zero receptive field exactly on the
    // relu kink, where central differences are meaningless
    let biases: Vec<String> = state.named_params().into_iter().map(|(n, _)| n).filter(|n| n.ends_with(".b")).collect();
    for name in biases {
        state.param_mut(&name).unwrap().data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let image = Tensor::from_vec(
        vec![3, SIZE, SIZE],
        (0..3 * SIZE * SIZE).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels = (0..SIZE * SIZE)
        .map(|_| if rng.random_bool(0.05) { VOID_BYTE } else { rng.random_range(0..CLASSES as u8) })
        .collect();
    let mask = LabelMask::new(SIZE, SIZE, CLASSES, labels, Some(VOID_BYTE)).unwrap();
    let params = SdtParams::new(3.0, CLASSES, VoidPolicy::ExcludeFromLoss).unwrap();
    let y_dist = class_sdt_stack::<f64>(&mask, &params).expect("valid parameters");
    let weights: Vec<f64> = (0..CLASSES).map(|_| rng.random_range(0.5..2.0)).collect();

    let objective = |s: &NetworkState<f64>| {
        let out = s.forward(&image).expect("shapes fixed above");
        let inputs = LossInputs {
            z_seg: &out.z_seg,
            z_dist: &out.z_dist,
            y_seg: &mask,
            y_dist: &y_dist,
            class_weights: &weights,
            lambda,
            void_policy: VoidPolicy::ExcludeFromLoss,
        };
        loss(&inputs).expect("shapes fixed above").total
    };

    let out = state.forward(&image)?;
    let inputs = LossInputs {
        z_seg: &out.z_seg,
        z_dist: &out.z_dist,
        y_seg: &mask,
        y_dist: &y_dist,
        class_weights: &weights,
        lambda,
        void_policy: VoidPolicy::ExcludeFromLoss,
    };
    let mut analytic = state.backward(&out.cache, &inputs)?;
    if tamper == GradientTamper::Corrupt {
        let (_, t) = analytic.blocks.iter_mut().find(|(n, _)| n == "fusion.w").unwrap();
        t.data_mut()[0] += 1e-2;
    }
    let numeric = finite_difference_gradients(&state, DEFAULT_STEP, objective);

    let blocks: Vec<(String, f64)> = analytic
        .blocks
        .iter()
        .zip(&numeric.blocks)
        .map(|((name, a), (_, n))| {
            let worst = a.data().iter().zip(n.data()).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max);
            (name.clone(), worst)
        })
        .collect();
    let max_rel_error = blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradcheckReport { seed, lambda, blocks, max_rel_error })
}
