//! Training protocol: seeded crops and flips, per-crop distance targets,
//! mini-batch SGD with a step schedule, and sliding-window validation.

mod augment;
mod balance;
mod sliding;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edt::{class_sdt_stack, EdtError, SdtParams, VoidPolicy, DEFAULT_CLIP};
use crate::metrics::{ConfusionMatrix, MetricsError};
use crate::network::{
    init_network, loss, Gradients, LossInputs, LossValue, NetworkError, NetworkState, TrunkLayer,
    DEFAULT_TRUNK_WIDTH,
};
use crate::raster::LabelMask;
use crate::real::Real;
use crate::tensor::Tensor;

pub use augment::{augment, crop_image, crop_mask, flip_image, flip_mask, flip_stack, AugmentParams, Axis};
pub use balance::{median_frequency_weights, weights_from_frequencies};
pub use sliding::{sliding_window_infer, window_positions, window_stride};
pub use synth::{generate_synthetic, palette, Dataset, ShapeKind, SynthSpec};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Edt(#[from] EdtError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        /// Log of the completed epochs.
        log: Vec<EpochLog>,
        /// State after the last completed epoch (the initial state if none).
        last_good: Box<NetworkState<f64>>,
    },
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub lambda: f64,
    /// Distance clip radius in pixels.
    pub clip: f64,
    /// Training crop side in pixels; also the inference window.
    pub crop: usize,
    pub seed: u64,
    /// Median-frequency class balancing for both loss terms.
    pub balance: bool,
    pub trunk_width: usize,
    pub flip_prob: f64,
    pub void_policy: VoidPolicy,
    /// Sliding-window overlap used for validation.
    pub val_overlap: f64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 10,
            lr: 0.01,
            lr_milestones: vec![25, 45],
            weight_decay: 0.0005,
            lambda: 2.0,
            clip: DEFAULT_CLIP,
            crop: 64,
            seed: 1,
            balance: false,
            trunk_width: DEFAULT_TRUNK_WIDTH,
            flip_prob: 0.5,
            void_policy: VoidPolicy::ExcludeFromLoss,
            val_overlap: 0.75,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {}", self.weight_decay));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip probability {}", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.val_overlap) {
            return bad(format!("validation overlap {}", self.val_overlap));
        }
        if self.val_every == 0 {
            return bad("val_every must be positive".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(2) {
            return bad(format!("crop {} must be a positive even size", self.crop));
        }
        SdtParams::new(self.clip, 2, self.void_policy)?;
        Ok(())
    }
}

/// Learning rate at `epoch`: the base rate divided by 10 for every
/// milestone already reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = config.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    (0..drops).fold(config.lr, |lr, _| lr / 10.0)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    pub nll: f64,
    pub l1: f64,
    pub total: f64,
    pub val_oa: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: NetworkState<T>,
    pub log: Vec<EpochLog>,
}

/// Seed of the generator for one sample of one step.
fn sample_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (slot as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order in which training images are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX, 0)));
    order
}

/// Crop and labels of one training sample; a pure function of
/// `(seed, epoch, step, slot)`.
pub fn training_sample<T: Real>(
    data: &Dataset<T>,
    index: usize,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
    slot: usize,
) -> Result<(Tensor<T>, LabelMask), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch, step, slot));
    let params = AugmentParams { crop: config.crop, flip_prob: config.flip_prob };
    augment(&data.images[index], &data.masks[index], &params, &mut rng)
}

/// Loss and gradients of one crop. Distance targets are computed from the
/// augmented crop.
pub fn sample_gradients<T: Real>(
    state: &NetworkState<T>,
    image: &Tensor<T>,
    mask: &LabelMask,
    class_weights: &[T],
    config: &TrainConfig,
) -> Result<(LossValue<T>, Gradients<T>), TrainError> {
    let params = SdtParams::new(config.clip, mask.classes(), config.void_policy)?;
    let y_dist = class_sdt_stack::<T>(mask, &params)?;
    let out = state.forward(image)?;
    let inputs = LossInputs {
        z_seg: &out.z_seg,
        z_dist: &out.z_dist,
        y_seg: mask,
        y_dist: &y_dist,
        class_weights,
        lambda: T::of(config.lambda),
        void_policy: config.void_policy,
    };
    let value = loss(&inputs)?;
    let grads = state.backward(&out.cache, &inputs)?;
    Ok((value, grads))
}

/// Confusion matrix of sliding-window predictions over a dataset.
pub fn evaluate<T: Real>(
    state: &NetworkState<T>,
    data: &Dataset<T>,
    window: usize,
    overlap: f64,
) -> Result<ConfusionMatrix, TrainError> {
    let classes = state.classes();
    if let Some(c) = data.classes() {
        if c != classes {
            return Err(TrainError::InvalidData(format!("network predicts {classes} classes, data has {c}")));
        }
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (img, truth) in data.images.iter().zip(&data.masks) {
        let w = window.min(truth.width()).min(truth.height());
        let (_, pred) = sliding_window_infer(state, img, w, overlap)?;
        cm.accumulate(truth, &pred)?;
    }
    Ok(cm)
}

/// Class weights for training: median-frequency when `balance`, else ones.
pub fn class_weights(config: &TrainConfig, masks: &[LabelMask], classes: usize) -> Result<Vec<f64>, TrainError> {
    if config.balance {
        median_frequency_weights(masks, classes)
    } else {
        Ok(vec![1.0; classes])
    }
}

/// Trains a fresh network. `on_epoch` runs after every epoch with the log
/// line and the current state (checkpointing, logging).
///
/// On divergence the error carries the state after the last completed epoch.
pub fn train<T: Real>(
    config: &TrainConfig,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    mut on_epoch: impl FnMut(&EpochLog, &NetworkState<T>) -> Result<(), String>,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::InvalidData("empty training set".into()));
    }
    let classes = train_set.classes().unwrap();
    if val_set.classes().is_some_and(|c| c != classes) {
        return Err(TrainError::InvalidData("training and validation class counts differ".into()));
    }
    let weights: Vec<T> = class_weights(config, &train_set.masks, classes)?.into_iter().map(T::of).collect();

    let mut state = init_network::<T>(classes, config.trunk_width, config.seed)?;
    let mut last_good = state.clone();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let n = train_set.len();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let order = epoch_order(config.seed, epoch, n);
        let (mut sum_total, mut sum_nll, mut sum_l1, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let (img, mask) = training_sample(train_set, idx, config, epoch, step, slot)?;
                    sample_gradients(&state, &img, &mask, &weights, config)
                })
                .collect::<Result<Vec<_>, TrainError>>();
            let diverged = |_e| TrainError::Diverged {
                epoch,
                step,
                log: log.clone(),
                last_good: Box::new(to_f64(&last_good)),
            };
            let results = match results {
                Ok(r) => r,
                Err(TrainError::Network(NetworkError::NonFinite(_))) => return Err(diverged(())),
                Err(e) => return Err(e),
            };
            // fixed-order reduction keeps the step bit-reproducible
            let scale = T::one() / T::of(results.len() as f64);
            let mut grads = Gradients::zeros_like(&state);
            let (mut total, mut nll, mut l1) = (T::zero(), T::zero(), T::zero());
            for (value, g) in &results {
                grads.add_scaled(g, scale);
                total += value.total * scale;
                nll += value.nll * scale;
                l1 += value.l1 * scale;
            }
            if !total.is_finite() {
                return Err(diverged(()));
            }
            state = match state.sgd_step(&grads, T::of(lr), T::of(config.weight_decay)) {
                Ok(s) => s,
                Err(NetworkError::NonFinite(_)) => return Err(diverged(())),
                Err(e) => return Err(e.into()),
            };
            step += 1;
            sum_total += total.as_f64();
            sum_nll += nll.as_f64();
            sum_l1 += l1.as_f64();
            batches += 1;
        }

        let validate = !val_set.is_empty() && ((epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs);
        let val_oa = if validate {
            Some(evaluate(&state, val_set, config.crop, config.val_overlap)?.overall_accuracy()?)
        } else {
            None
        };
        let line = EpochLog {
            epoch,
            step,
            lr,
            nll: sum_nll / batches as f64,
            l1: sum_l1 / batches as f64,
            total: sum_total / batches as f64,
            val_oa,
        };
        log::info!(
            "epoch {epoch} lr {lr:e} total {:.5} nll {:.5} l1 {:.5} val_oa {:?}",
            line.total,
            line.nll,
            line.l1,
            line.val_oa
        );
        on_epoch(&line, &state).map_err(TrainError::Callback)?;
        log.push(line);
        last_good = state.clone();
    }
    Ok(TrainOutcome { state, log })
}

fn to_f64<T: Real>(state: &NetworkState<T>) -> NetworkState<f64> {
    let tensors: Vec<(String, Tensor<f64>)> = state.to_named_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect();
    let mut s = NetworkState::<f64>::with_trunk(
        state.classes(),
        state.in_channels(),
        &state.trunk().iter().map(TrunkLayer::spec).collect::<Vec<_>>(),
        state.seed(),
    )
    .expect("architecture was valid");
    s.load_named_tensors(&tensors).expect("same layout");
    s
}
