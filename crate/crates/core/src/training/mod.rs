//! Pretraining and policy-learning loops.

mod finetune;
mod optim;
mod pretrain;
mod runlog;

pub use finetune::{
    adapt_action_space, finetune, initial_policy_model, policy_loss, FinetuneConfig, FinetuneOutcome,
    InitMode,
};
pub use optim::{lr_at_step, OptimConfig, Trainer};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub use runlog::{read_evals_csv, EvalSnapshot, LogRow, RunLog};
