//! Training protocol: teacher pre-training on `L_seg`, baseline student
//! training, frozen-teacher distillation on `L_d`, and evaluation.
//!
//! Every step is a pure function of the seed, the configs and the data.
//! Per-sample gradients may be computed on any number of threads through a
//! [`Runner`]; they are summed in sample order.

use alloc::vec::Vec;

use crate::data::{iou, predict_mask, ReferringSample};
use crate::distill::{total_loss, DistillOptions, LossBundle};
use crate::error::{Error, Result};
use crate::exec::Runner;
use crate::graph::{Gradients, Graph};
use crate::optim::{adamw_step, clip_grad_norm, lr_at, AdamState, AdamWConfig};
use crate::rng::CounterRng;
use crate::segmenter::{EncoderConfig, ModelOptions, RelationTargets, Segmenter};
use crate::tensor::Real;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5417;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay_epoch: 20,
            decay_factor: 0.1,
            epochs: 30,
            batch_size: 16,
            lambda1: 0.5,
            lambda2: 0.5,
            weight_decay: 1e-2,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 < 0.0 {
            return Err(Error::InvalidConfig("lr0 must be non-negative".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidConfig("decay_factor must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig("lambda1 and lambda2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr0, self.decay_epoch, self.decay_factor)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn distill_options(&self, gram_normalize: bool, count_padded: bool) -> DistillOptions {
        DistillOptions {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gram_normalize,
            count_padded,
        }
    }

    /// Seed used to initialise model weights.
    pub fn init_seed(&self) -> u64 {
        CounterRng::keyed(self.seed, INIT_STREAM).next_u64()
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch loss terms.
    pub losses: LossBundle,
    pub lr: f64,
    pub val_miou: f64,
}

/// Model, optimiser and shuffle stream; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<R: Real> {
    pub model: Segmenter<R>,
    pub opt: AdamState<R>,
    /// Keyed by the training seed; the counter is the next epoch index.
    pub rng: CounterRng,
}

impl<R: Real> TrainState<R> {
    pub fn new(model: Segmenter<R>, cfg: &TrainConfig) -> Self {
        let opt = AdamState::new(&model.params);
        TrainState {
            model,
            opt,
            rng: CounterRng::keyed(cfg.seed, SHUFFLE_STREAM),
        }
    }

    /// Fresh model initialised from the training seed.
    pub fn fresh(cfg: &EncoderConfig, options: ModelOptions, train: &TrainConfig) -> Result<Self> {
        Ok(Self::new(Segmenter::new(cfg.clone(), options, train.init_seed())?, train))
    }

    pub fn next_epoch(&self) -> usize {
        self.rng.counter() as usize
    }
}

/// Sample order for `epoch`.
pub fn epoch_order(rng: &CounterRng, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::keyed(rng.key(), epoch as u64).shuffle(&mut order);
    order
}

/// Loss and gradients of one sample.
pub fn sample_gradients<R: Real>(
    model: &Segmenter<R>,
    sample: &ReferringSample,
    teacher: Option<&RelationTargets<R>>,
    opts: &DistillOptions,
) -> Result<(Gradients<R>, LossBundle)> {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, sample)?;
    let (nodes, bundle) = total_loss(&mut g, &out, teacher, &sample.mask, opts)?;
    Ok((g.backward(nodes.objective)?, bundle))
}

/// Runs epochs `state.next_epoch()..until_epoch`, returning one record each.
///
/// `teacher` holds precomputed targets aligned with `train`; `None` trains on
/// the segmentation loss alone.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<R: Real>(
    state: &mut TrainState<R>,
    train: &[ReferringSample],
    val: &[ReferringSample],
    teacher: Option<&[RelationTargets<R>]>,
    cfg: &TrainConfig,
    opts: &DistillOptions,
    until_epoch: usize,
    runner: &impl Runner,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(t) = teacher {
        if t.len() != train.len() {
            return Err(Error::IncompatibleTeacher("teacher targets do not cover the training set".into()));
        }
    }
    let adamw = cfg.adamw();
    let mut records = Vec::new();
    while state.next_epoch() < until_epoch {
        let epoch = state.next_epoch();
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(&state.rng, epoch, train.len());
        let mut totals = LossBundle::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let model = &state.model;
            let results = runner.map(batch.len(), |k| {
                let i = batch[k];
                sample_gradients(model, &train[i], teacher.map(|t| &t[i]), opts)
            });
            let mut grads = Gradients::empty(model.params.len());
            let mut losses = LossBundle::default();
            for r in results {
                let (g, l) = r?;
                grads.merge(g);
                losses.accumulate(&l);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(R::from_f64(inv));
            totals.accumulate(&losses.scaled(inv));
            batches += 1;

            let params = &mut state.model.params;
            params.zero_grads();
            params.accumulate(&grads);
            clip_grad_norm(params, cfg.grad_clip);
            adamw_step(params, &mut state.opt, lr, &adamw)?;
        }
        let val_miou = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(&state.model, val, runner)?.miou
        };
        records.push(EpochRecord {
            epoch,
            losses: totals.scaled(1.0 / batches as f64),
            lr,
            val_miou,
        });
        state.rng.next_u64();
    }
    Ok(records)
}

/// Pre-trains a teacher on `L_seg`.
pub fn train_teacher<R: Real>(
    train: &[ReferringSample],
    val: &[ReferringSample],
    cfg: &EncoderConfig,
    options: ModelOptions,
    train_cfg: &TrainConfig,
    runner: &impl Runner,
) -> Result<(Segmenter<R>, Vec<EpochRecord>)> {
    let mut state = TrainState::fresh(cfg, options, train_cfg)?;
    let opts = train_cfg.distill_options(false, false);
    let trace = train_epochs(&mut state, train, val, None, train_cfg, &opts, train_cfg.epochs, runner)?;
    Ok((state.model, trace))
}

/// Trains a student on `L_seg` only, with no teacher.
pub fn train_baseline<R: Real>(
    train: &[ReferringSample],
    val: &[ReferringSample],
    cfg: &EncoderConfig,
    options: ModelOptions,
    train_cfg: &TrainConfig,
    runner: &impl Runner,
) -> Result<(Segmenter<R>, Vec<EpochRecord>)> {
    train_teacher(train, val, cfg, options, train_cfg, runner)
}

/// Untracked teacher outputs for every training sample.
pub fn teacher_targets<R: Real>(teacher: &Segmenter<R>, data: &[ReferringSample], runner: &impl Runner) -> Result<Vec<RelationTargets<R>>> {
    runner.map(data.len(), |i| teacher.relation_targets(&data[i])).into_iter().collect()
}

/// Distils a fresh student from a frozen teacher with the full objective.
#[allow(clippy::too_many_arguments)]
pub fn distill_student<R: Real>(
    train: &[ReferringSample],
    val: &[ReferringSample],
    teacher: &Segmenter<R>,
    cfg: &EncoderConfig,
    options: ModelOptions,
    train_cfg: &TrainConfig,
    opts: &DistillOptions,
    runner: &impl Runner,
) -> Result<(Segmenter<R>, Vec<EpochRecord>)> {
    let mut state = TrainState::fresh(cfg, options, train_cfg)?;
    let trace = distill_into(&mut state, train, val, teacher, train_cfg, opts, train_cfg.epochs, runner)?;
    Ok((state.model, trace))
}

/// Distillation from an existing [`TrainState`], up to `until_epoch`.
#[allow(clippy::too_many_arguments)]
pub fn distill_into<R: Real>(
    state: &mut TrainState<R>,
    train: &[ReferringSample],
    val: &[ReferringSample],
    teacher: &Segmenter<R>,
    train_cfg: &TrainConfig,
    opts: &DistillOptions,
    until_epoch: usize,
    runner: &impl Runner,
) -> Result<Vec<EpochRecord>> {
    teacher.cfg.compatible_with(&state.model.cfg)?;
    if teacher.options != state.model.options {
        return Err(Error::IncompatibleTeacher("fusion normalisation differs".into()));
    }
    let targets = teacher_targets(teacher, train, runner)?;
    train_epochs(state, train, val, Some(&targets), train_cfg, opts, until_epoch, runner)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub miou: f64,
    pub per_sample: Vec<f64>,
}

/// mIoU of thresholded predictions; never touches the parameters.
pub fn evaluate<R: Real>(model: &Segmenter<R>, data: &[ReferringSample], runner: &impl Runner) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_sample = runner
        .map(data.len(), |i| {
            let logits = model.predict(&data[i])?;
            iou(&predict_mask(&logits), &data[i].mask)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let miou = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(Evaluation { miou, per_sample })
}
