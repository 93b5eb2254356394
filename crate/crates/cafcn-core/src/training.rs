//! Weighted cross-entropy loss, SGD with momentum and weight decay, the
//! stepped learning-rate schedule and the epoch loop with checkpointing.

use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::metrics::{GroundTruthMask, SaliencyMap};
use crate::network::{forward_backward_pair, save_checkpoint, NetworkParams};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::io::Write;
use std::path::PathBuf;

/// Loss hyperparameters: the foreground/background weighting `eta` and the
/// clamp applied to predictions before the logarithms.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub eta: f64,
    pub clamp_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { eta: 0.3, clamp_epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.eta && self.eta < 1.0) {
            return Err(Error::Validation(format!("eta {} must lie in (0, 1)", self.eta)));
        }
        if !(0.0 < self.clamp_epsilon && self.clamp_epsilon < 0.5) {
            return Err(Error::Validation(format!(
                "clamp epsilon {} must lie in (0, 0.5)",
                self.clamp_epsilon
            )));
        }
        Ok(())
    }
}

/// Asymmetric weighted binary cross-entropy:
/// `-(1/N) * sum((1-eta) * g * ln p + eta * (1-g) * ln(1-p))`
/// with predictions clamped to `[eps, 1-eps]`. Returns the loss and its exact
/// gradient with respect to the (unclamped) predictions; the sigmoid
/// composition is the caller's business.
pub fn weighted_bce(
    p: &SaliencyMap,
    g: &GroundTruthMask,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    if p.height() != g.height() || p.width() != g.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            p.height(),
            p.width(),
            g.height(),
            g.width()
        )));
    }
    let n = p.values().len() as f64;
    let eps = cfg.clamp_epsilon;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[p.height(), p.width()]);
    for (idx, (&pv, &gv)) in p.values().iter().zip(g.values()).enumerate() {
        let clamped = pv.clamp(eps, 1.0 - eps);
        let target = f64::from(gv);
        loss -= (1.0 - cfg.eta) * target * clamped.ln()
            + cfg.eta * (1.0 - target) * (1.0 - clamped).ln();
        // The clamp zeroes the derivative outside its range.
        if pv > eps && pv < 1.0 - eps {
            grad.values_mut()[idx] =
                -((1.0 - cfg.eta) * target / clamped - cfg.eta * (1.0 - target) / (1.0 - clamped))
                    / n;
        }
    }
    Ok((loss / n, grad))
}

/// SGD state: hyperparameters, the velocity accumulator mirroring the
/// parameter shapes, and the epoch counter driving the schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Initial learning rate; the schedule decays it by `decay_factor`.
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub velocity: NetworkParams,
    pub epoch: usize,
}

impl OptimizerState {
    /// Optimizer with the training defaults: lr 1e-4, momentum 0.9, weight
    /// decay 0.005, decayed by 0.1 every 50 epochs.
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 0.005,
            decay_factor: 0.1,
            decay_every_epochs: 50,
            velocity: params.zeros_like(),
            epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Validation("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: `initial * decay_factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, state: &OptimizerState) -> f64 {
    state.learning_rate * state.decay_factor.powi((epoch / state.decay_every_epochs) as i32)
}

/// One SGD step with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
/// The learning rate follows the schedule at the state's current epoch.
pub fn sgd_step(params: &mut NetworkParams, grads: &NetworkParams, state: &mut OptimizerState) {
    let lr = lr_at(state.epoch, state);
    let momentum = state.momentum;
    let wd = state.weight_decay;
    let p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let v_tensors = state.velocity.tensors_mut();
    debug_assert_eq!(p_tensors.len(), g_tensors.len());
    debug_assert_eq!(p_tensors.len(), v_tensors.len());
    for ((p, g), v) in p_tensors.into_iter().zip(g_tensors).zip(v_tensors) {
        debug_assert_eq!(p.len(), g.len());
        for ((pv, &gv), vv) in p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(v.values_mut())
        {
            *vv = momentum * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
}

/// Knobs of the epoch loop.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Writes `epoch_%04d.cafcn` here after every epoch when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// First epoch index, nonzero when resuming from a checkpoint.
    pub start_epoch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 4, seed: 0, checkpoint_dir: None, start_epoch: 0 }
    }
}

/// One run-log line per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

impl EpochRecord {
    /// The tab-separated run-log format: `epoch<TAB>lr<TAB>meanLoss`.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6e}\t{:.6e}", self.epoch, self.lr, self.mean_loss)
    }
}

/// Trains over shuffled mini-batches of pairs, averaging gradients within
/// each batch. The shuffle for epoch `e` is derived from `(seed, e)` alone,
/// so runs are reproducible and resumable. Returns the per-epoch loss log.
pub fn train(
    params: &mut NetworkParams,
    dataset: &[PairSample],
    loss_cfg: &LossConfig,
    state: &mut OptimizerState,
    opts: &TrainOptions,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    if dataset.is_empty() {
        return Err(Error::Usage("training dataset is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Usage("batch size must be >= 1".into()));
    }
    loss_cfg.validate()?;
    state.validate()?;

    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        if opts.start_epoch == 0 {
            save_checkpoint(params, &dir.join("epoch_0000.cafcn"))?;
        }
    }

    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in opts.start_epoch..opts.start_epoch + opts.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(epoch_seed(opts.seed, epoch));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut batch_grads = params.zeros_like();
            let mut batch_flat = vec![0.0; params.param_count()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &dataset[idx];
                let (loss, grads) = forward_backward_pair(
                    &sample.image1,
                    &sample.image2,
                    &sample.mask1,
                    &sample.mask2,
                    params,
                    loss_cfg,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Validation(format!(
                        "loss became non-finite ({loss}) at epoch {epoch}"
                    )));
                }
                batch_loss += loss;
                for (acc, g) in batch_flat.iter_mut().zip(grads.flatten()) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for acc in batch_flat.iter_mut() {
                *acc *= scale;
            }
            batch_grads.assign_from_flat(&batch_flat)?;
            loss_sum += batch_loss;
            sgd_step(params, &batch_grads, state);
        }

        let record = EpochRecord {
            epoch,
            lr: lr_at(epoch, state),
            mean_loss: loss_sum / dataset.len() as f64,
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            writeln!(sink, "{}", record.log_line())?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(params, &dir.join(format!("epoch_{:04}.cafcn", epoch + 1)))?;
        }
        log.push(record);
    }
    Ok(log)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0xD1B54A32D192ED03)
}
