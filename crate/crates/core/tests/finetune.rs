use candle_core::DType;
use ct_core::data::{collect_dataset, Dataset};
use ct_core::env::{EnvConfig, PolicyKind, TaskId};
use ct_core::eval::{evaluate_policy_with, EvalConfig};
use ct_core::model::{
    is_backbone, Checkpoint, ControlTransformer, ModelConfig, PolicyHead, Stage, ACT_TOK, HEAD_BC,
    HEAD_FWD, HEAD_INV, HEAD_MASK_INV,
};
use ct_core::training::{
    adapt_action_space, finetune, initial_policy_model, FinetuneConfig, InitMode, OptimConfig,
};
use ct_core::CtError;

const ENV: EnvConfig = EnvConfig {
    image_size: 8,
    episode_length: 20,
};

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_embed: 16,
        context_pairs: 4,
        image_shape: [8, 8, 3],
        conv_channels: [4, 8, 8],
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn data(steps: usize) -> Dataset {
    collect_dataset(&[TaskId::PointmassReachCenter], PolicyKind::Expert, steps, 4, ENV).unwrap()
}

fn pretrained() -> Checkpoint {
    Checkpoint::new(ControlTransformer::new(cfg(), 99, DType::F32).unwrap())
}

fn short(init: InitMode) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 2,
        batch_size: 4,
        steps_per_epoch: Some(5),
        init,
        eval_every: 0,
        ..FinetuneConfig::default()
    }
}

fn hash(ck: &Checkpoint, pred: impl Fn(&str) -> bool) -> String {
    ck.model.params().hash_where(pred).unwrap()
}

#[test]
fn scratch_start_is_the_pretraining_draw() {
    let ck = initial_policy_model(None, &cfg(), &short(InitMode::Scratch), 5).unwrap();
    let fresh = Checkpoint::new(ControlTransformer::new(cfg(), 5, DType::F32).unwrap());
    assert_eq!(hash(&ck, is_backbone), hash(&fresh, is_backbone));
    assert!(ck.model.has_head(PolicyHead::Bc));
    for head in [HEAD_FWD, HEAD_INV, HEAD_MASK_INV] {
        assert!(!ck.model.params().has_prefix(head));
    }
}

#[test]
fn checkpoint_start_copies_the_backbone() {
    let pre = pretrained();
    let ck = initial_policy_model(Some(&pre), &cfg(), &short(InitMode::Checkpoint), 5).unwrap();
    assert_eq!(hash(&ck, is_backbone), hash(&pre, is_backbone));
    assert!(pre.model.params().has_prefix(HEAD_FWD), "source checkpoint untouched");
    assert!(!ck.model.params().has_prefix(HEAD_FWD));
    assert!(matches!(
        initial_policy_model(None, &cfg(), &short(InitMode::Checkpoint), 5),
        Err(CtError::Config(_))
    ));
}

#[test]
fn frozen_backbone_only_moves_the_head() {
    let pre = pretrained();
    let fc = FinetuneConfig {
        freeze_backbone: true,
        ..short(InitMode::Checkpoint)
    };
    let start = initial_policy_model(Some(&pre), &cfg(), &fc, 1).unwrap();
    let out = finetune(&data(40), Some(&pre), &cfg(), &fc, None, 1).unwrap();
    assert_eq!(hash(&out.checkpoint, is_backbone), hash(&pre, is_backbone));
    let head = |n: &str| n.starts_with(HEAD_BC);
    assert_ne!(hash(&out.checkpoint, head), hash(&start, head));

    let unfrozen = finetune(&data(40), Some(&pre), &cfg(), &short(InitMode::Checkpoint), None, 1).unwrap();
    assert_ne!(hash(&unfrozen.checkpoint, is_backbone), hash(&pre, is_backbone));
}

#[test]
fn memorizes_one_episode() {
    let ds = data(20);
    let fc = FinetuneConfig {
        epochs: 1,
        batch_size: 8,
        steps_per_epoch: Some(500),
        init: InitMode::Scratch,
        eval_every: 0,
        optim: OptimConfig {
            base_lr: 3e-3,
            weight_decay: 0.0,
            ..OptimConfig::default()
        },
        ..FinetuneConfig::default()
    };
    let out = finetune(&ds, None, &cfg(), &fc, None, 2).unwrap();
    let tail: Vec<f64> = out.log.rows().iter().rev().take(20).map(|r| r.total).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 1e-3, "final BC loss {mean}");
}

#[test]
fn finetuning_is_deterministic_and_recorded() {
    let pre = pretrained();
    let ds = data(40);
    let a = finetune(&ds, Some(&pre), &cfg(), &short(InitMode::Checkpoint), None, 3).unwrap();
    let b = finetune(&ds, Some(&pre), &cfg(), &short(InitMode::Checkpoint), None, 3).unwrap();
    assert_eq!(a.checkpoint.id().unwrap(), b.checkpoint.id().unwrap());
    assert_eq!(a.log.rows(), b.log.rows());
    let last = a.checkpoint.provenance().last().unwrap();
    assert_eq!(last.stage, Stage::Finetune);
    assert_eq!(last.dataset_hashes, vec![ds.content_hash()]);
    assert_eq!(last.tasks, vec!["pointmass/reach_center".to_string()]);
}

#[test]
fn best_snapshot_has_the_best_logged_return() {
    let fc = FinetuneConfig {
        epochs: 3,
        eval_every: 1,
        ..short(InitMode::Scratch)
    };
    let ec = EvalConfig {
        n_episodes: 2,
        seed: 40,
        episode_length: ENV.episode_length,
    };
    let out = finetune(&data(40), None, &cfg(), &fc, Some(&ec), 4).unwrap();
    assert_eq!(out.log.evals().iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    let top = out.log.evals().iter().map(|e| e.mean_return).fold(f64::MIN, f64::max);
    let best = out.best.expect("evaluation ran");
    let again = evaluate_policy_with(&best, TaskId::PointmassReachCenter, PolicyHead::Bc, &ec, |_| {}).unwrap();
    assert_eq!(again.mean, top);
}

#[test]
fn rtg_needs_rewards() {
    let fc = FinetuneConfig {
        mode: PolicyHead::Rtg,
        ..short(InitMode::Scratch)
    };
    let ds = data(40).without_rewards();
    assert!(matches!(finetune(&ds, None, &cfg(), &fc, None, 0), Err(CtError::Config(_))));
}

#[test]
fn adapting_redraws_only_action_interfaces() {
    let pre = pretrained();
    let adapted = adapt_action_space(&pre, 1, 7).unwrap();
    let action_side = |n: &str| n.starts_with(ACT_TOK) || n.starts_with(HEAD_INV) || n.starts_with(HEAD_MASK_INV);
    assert_ne!(hash(&adapted, action_side), hash(&pre, action_side));
    assert_eq!(hash(&adapted, |n| !action_side(n)), hash(&pre, |n| !action_side(n)));
    assert_eq!(adapted.provenance().last().unwrap().stage, Stage::AdaptActionSpace);
    assert_eq!(adapted.provenance().len(), pre.provenance().len() + 1);
    // Same seed, same draw.
    let twice = adapt_action_space(&pre, 1, 7).unwrap();
    assert_eq!(hash(&twice, action_side), hash(&adapted, action_side));
    assert!(adapt_action_space(&pre, 0, 7).is_err());
    assert!(adapt_action_space(&pre, 3, 7).is_err());
}
