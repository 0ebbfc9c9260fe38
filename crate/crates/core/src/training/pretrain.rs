use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at_step, OptimConfig, Trainer};
use super::runlog::RunLog;
use crate::data::{derive_seed, Dataset, MixtureSampler, WindowBatch};
use crate::error::{CtError, Result};
use crate::model::{is_momentum, Checkpoint, ControlTransformer, ForwardCtx, ModelConfig, ProvenanceEntry, Stage};
use crate::objectives::{
    draw_plans, mask_sizes, total_pretrain_loss, BatchTensors, ObjectiveConfig, ScheduleState, Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass worth of windows.
    pub steps_per_epoch: Option<usize>,
    pub optim: OptimConfig,
    /// Per-task sampling weights in dataset task order; `None` is uniform.
    pub task_proportions: Option<Vec<f64>>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            steps_per_epoch: None,
            optim: OptimConfig::default(),
            task_proportions: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(CtError::Config("epochs, batch_size and steps_per_epoch must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

/// Random streams of a run, each derived from the run seed.
pub(crate) mod streams {
    pub const DATA: u64 = 11;
    pub const MASK: u64 = 12;
    pub const DROPOUT: u64 = 13;
}

pub(crate) fn check_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.manifest.image_shape != cfg.image_shape {
        return Err(CtError::Config(format!(
            "dataset images {:?} but model expects {:?}",
            ds.manifest.image_shape, cfg.image_shape
        )));
    }
    if ds.max_action_dim() > cfg.a_max {
        return Err(CtError::Config(format!(
            "dataset action dim {} exceeds a_max {}",
            ds.max_action_dim(),
            cfg.a_max
        )));
    }
    Ok(())
}

pub(crate) fn steps_per_epoch(explicit: Option<usize>, windows: u64, batch: usize) -> usize {
    explicit.unwrap_or_else(|| (windows as usize).div_ceil(batch).max(1))
}

/// Self-supervised pretraining on a reward-free view of `ds`.
pub fn pretrain(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    objectives: &ObjectiveConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_dataset(ds, model_cfg)?;
    let pairs = model_cfg.context_pairs;
    let mut model = ControlTransformer::new(model_cfg.clone(), seed, DType::F32)?;
    if objectives.variant == Some(Variant::MaskedStatePred) {
        model.add_mask_state_head(seed)?;
    }
    let sampler = MixtureSampler::new(ds, pairs, cfg.task_proportions.as_deref())?;
    let per_epoch = steps_per_epoch(cfg.steps_per_epoch, sampler.num_windows(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let warmup = cfg.optim.warmup_steps(total);
    let mut trainer = Trainer::new(model.params(), |n| !is_momentum(n), &cfg.optim)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::DATA));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::MASK));
    let mut log = RunLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let sizes = mask_sizes(objectives, ScheduleState::new(epoch, cfg.epochs)?, pairs);
        for _ in 0..per_epoch {
            let lr = lr_at_step(step, total, warmup, cfg.optim.base_lr);
            trainer.set_learning_rate(lr);
            let picks = sampler.draw_batch(cfg.batch_size, &mut data_rng);
            let batch = WindowBatch::gather(ds, &picks, pairs, model_cfg.a_max, false)?;
            let inputs = BatchTensors::from_batch(&model, &batch)?;
            let plans = draw_plans(&mut mask_rng, objectives, cfg.batch_size, pairs, sizes)?;
            let mut ctx = ForwardCtx::train(
                model_cfg.dropout,
                derive_seed(derive_seed(seed, streams::DROPOUT), step as u64),
            );
            let loss = total_pretrain_loss(&model, &inputs, &plans, objectives, &mut ctx)?;
            let breakdown = loss.breakdown()?;
            trainer.step(loss.total.backward()?)?;
            model.update_momentum(model_cfg.momentum_tau)?;
            log.push_losses(step, epoch, &breakdown, lr)?;
            step += 1;
        }
        log::info!(
            "pretrain epoch {epoch}: k={} k'={} mean loss {:.5}",
            sizes.0,
            sizes.1,
            log.epoch_mean(epoch).unwrap_or(f64::NAN)
        );
    }
    let mut checkpoint = Checkpoint::new(model);
    checkpoint.record(ProvenanceEntry {
        stage: Stage::Pretrain,
        epoch: cfg.epochs,
        seed,
        tasks: ds.tasks().iter().map(|t| t.name().to_string()).collect(),
        dataset_hashes: vec![ds.content_hash()],
        note: String::new(),
    });
    Ok(PretrainOutcome { checkpoint, log })
}
