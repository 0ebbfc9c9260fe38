use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at_step, OptimConfig, Trainer};
use super::pretrain::{check_dataset, steps_per_epoch, streams};
use super::runlog::{EvalSnapshot, RunLog};
use crate::data::{derive_seed, Dataset, MixtureSampler, WindowBatch};
use crate::error::{CtError, Result};
use crate::eval::{evaluate_policy_with, EvalConfig};
use crate::model::{
    build_attention_mask, is_backbone, is_momentum, split_positions, Checkpoint, ControlTransformer,
    ForwardCtx, MaskKind, ModelConfig, PolicyHead, ProvenanceEntry, Stage,
};
use crate::objectives::BatchTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Scratch,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: PolicyHead,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: Option<usize>,
    pub optim: OptimConfig,
    pub freeze_backbone: bool,
    pub init: InitMode,
    /// Evaluate after every this many epochs; `0` disables evaluation.
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: PolicyHead::Bc,
            epochs: 20,
            batch_size: 256,
            steps_per_epoch: None,
            optim: OptimConfig::default(),
            freeze_backbone: false,
            init: InitMode::Checkpoint,
            eval_every: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(CtError::Config("epochs, batch_size and steps_per_epoch must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters after the last epoch.
    pub checkpoint: Checkpoint,
    /// Snapshot with the highest evaluation return, if any evaluation ran.
    pub best: Option<Checkpoint>,
    pub log: RunLog,
}

/// Policy-learning parameters and the starting model. With
/// `InitMode::Scratch` the model is drawn fresh from `seed` exactly as
/// pretraining would draw it, so the two starts differ only in values.
pub fn initial_policy_model(
    start: Option<&Checkpoint>,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let mut ck = match (cfg.init, start) {
        (InitMode::Checkpoint, Some(ck)) => {
            let mut ck = ck.clone();
            ck.model = ck.model.deep_clone()?;
            ck
        }
        (InitMode::Checkpoint, None) => {
            return Err(CtError::Config("init = checkpoint but no checkpoint given".into()))
        }
        (InitMode::Scratch, _) => {
            let cfg = start.map_or(model_cfg, |c| c.config()).clone();
            Checkpoint::new(ControlTransformer::new(cfg, seed, DType::F32)?)
        }
    };
    ck.model.remove_pretraining_heads();
    ck.model.add_policy_head(cfg.mode, seed)?;
    Ok(ck)
}

/// Action regression loss on valid action dims, under the causal mask.
pub fn policy_loss(
    model: &ControlTransformer,
    inputs: &BatchTensors,
    batch: &WindowBatch,
    mode: PolicyHead,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let (b, t, a) = inputs.actions.dims3()?;
    let x = model.tokenize_and_embed(&inputs.obs, &inputs.actions)?;
    let phi = model.encode(&x, &build_attention_mask(MaskKind::Causal, t)?, ctx)?;
    let (po, _) = split_positions(&phi)?;
    let rtg = match mode {
        PolicyHead::Rtg => {
            let r = batch
                .rtg
                .as_ref()
                .ok_or_else(|| CtError::Config("RTG finetuning needs return-to-go targets".into()))?;
            Some(Tensor::from_slice(r, (b, t), model.device())?.to_dtype(model.dtype())?)
        }
        PolicyHead::Bc => None,
    };
    let pred = model.predict_action(mode, &po, rtg.as_ref())?;
    let mut valid = vec![0f32; b * a];
    for (row, &dims) in batch.action_valid_dims.iter().enumerate() {
        valid[row * a..row * a + dims].fill(1.0);
    }
    let count = t as f64 * batch.action_valid_dims.iter().sum::<usize>() as f64;
    let valid = Tensor::from_vec(valid, (b, 1, a), model.device())?.to_dtype(model.dtype())?;
    let sq = (pred - &inputs.actions)?.sqr()?.broadcast_mul(&valid)?.sum_all()?;
    Ok((sq / count)?)
}

pub fn finetune(
    ds: &Dataset,
    start: Option<&Checkpoint>,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    eval: Option<&EvalConfig>,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.mode == PolicyHead::Rtg && !ds.has_rewards() {
        return Err(CtError::Config("RTG finetuning on a dataset without rewards".into()));
    }
    let mut ck = initial_policy_model(start, model_cfg, cfg, seed)?;
    let mc = ck.config().clone();
    check_dataset(ds, &mc)?;
    let tasks = ds.tasks();
    let eval_task = match (eval, cfg.eval_every, tasks.as_slice()) {
        (Some(_), e, [task]) if e > 0 => Some(*task),
        (Some(_), e, _) if e > 0 => {
            return Err(CtError::Config("evaluation during finetuning needs a single-task dataset".into()))
        }
        _ => None,
    };
    let pairs = mc.context_pairs;
    let sampler = MixtureSampler::new(ds, pairs, None)?;
    let per_epoch = steps_per_epoch(cfg.steps_per_epoch, sampler.num_windows(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let warmup = cfg.optim.warmup_steps(total);
    let freeze = cfg.freeze_backbone;
    let mut trainer = Trainer::new(
        ck.model.params(),
        |n| !is_momentum(n) && !(freeze && is_backbone(n)),
        &cfg.optim,
    )?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::DATA));
    let mut log = RunLog::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let with_rtg = cfg.mode == PolicyHead::Rtg;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let lr = lr_at_step(step, total, warmup, cfg.optim.base_lr);
            trainer.set_learning_rate(lr);
            let picks = sampler.draw_batch(cfg.batch_size, &mut data_rng);
            let batch = WindowBatch::gather(ds, &picks, pairs, mc.a_max, with_rtg)?;
            let inputs = BatchTensors::from_batch(&ck.model, &batch)?;
            let mut ctx = ForwardCtx::train(mc.dropout, derive_seed(derive_seed(seed, streams::DROPOUT), step as u64));
            let loss = policy_loss(&ck.model, &inputs, &batch, cfg.mode, &mut ctx)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            trainer.step(loss.backward()?)?;
            log.push(super::runlog::LogRow {
                step,
                epoch,
                l_fwd: 0.0,
                l_inv: 0.0,
                l_mask_inv: 0.0,
                total: value,
                lr,
            })?;
            step += 1;
        }
        let done = epoch + 1;
        if let (Some(task), Some(ecfg)) = (eval_task, eval) {
            if done % cfg.eval_every == 0 {
                let r = evaluate_policy_with(&ck, task, cfg.mode, ecfg, |_| {})?;
                log::info!("finetune epoch {done}: return {:.2} ({:.3})", r.mean, r.normalized_mean);
                log.push_eval(EvalSnapshot {
                    epoch: done,
                    mean_return: r.mean,
                    normalized_mean: r.normalized_mean,
                });
                if best.as_ref().is_none_or(|(m, _)| r.mean > *m) {
                    let mut snap = ck.clone();
                    snap.model = ck.model.deep_clone()?;
                    best = Some((r.mean, snap));
                }
            }
        }
    }
    let entry = ProvenanceEntry {
        stage: Stage::Finetune,
        epoch: cfg.epochs,
        seed,
        tasks: tasks.iter().map(|t| t.name().to_string()).collect(),
        dataset_hashes: vec![ds.content_hash()],
        note: format!("{:?} init, {:?} head", cfg.init, cfg.mode).to_lowercase(),
    };
    ck.record(entry.clone());
    let best = best.map(|(_, mut b)| {
        b.record(entry);
        b
    });
    Ok(FinetuneOutcome {
        checkpoint: ck,
        best,
        log,
    })
}

/// Re-draws the action tokenizer and every action-emitting head from the
/// seeded initializer; everything else is copied.
pub fn adapt_action_space(ck: &Checkpoint, new_action_dim: usize, seed: u64) -> Result<Checkpoint> {
    let a_max = ck.config().a_max;
    if new_action_dim == 0 || new_action_dim > a_max {
        return Err(CtError::Config(format!(
            "action dim {new_action_dim} outside [1, a_max = {a_max}]"
        )));
    }
    let mut out = ck.clone();
    out.model = ck.model.deep_clone()?;
    out.model.reinit_action_interfaces(seed)?;
    out.record(ProvenanceEntry {
        stage: Stage::AdaptActionSpace,
        epoch: 0,
        seed,
        tasks: Vec::new(),
        dataset_hashes: Vec::new(),
        note: format!("action_dim={new_action_dim}"),
    });
    Ok(out)
}
