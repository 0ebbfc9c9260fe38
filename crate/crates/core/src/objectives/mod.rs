//! The control-centric pretraining objective.

mod losses;
mod plan;
mod schedule;

pub use losses::{
    contrastive_term, loss_forward, loss_hindsight, loss_inverse, total_pretrain_loss, BatchTensors,
    LossBreakdown, ObjectiveConfig, PretrainLoss, Variant,
};
pub use plan::{apply_mask_plan, sample_mask_plan, MaskPlan};
pub use schedule::{schedule_mask_sizes, ScheduleState};

/// Mask sizes for an epoch, honoring the fixed-size variant.
pub fn mask_sizes(cfg: &ObjectiveConfig, state: ScheduleState, pairs: usize) -> (usize, usize) {
    if cfg.variant == Some(Variant::MaxFixedMask) {
        return (pairs, (pairs / 2).max(1));
    }
    schedule_mask_sizes(state, pairs)
}

/// Plans for one batch: a single shared plan, or one per window.
pub fn draw_plans<R: rand::Rng + ?Sized>(
    rng: &mut R,
    cfg: &ObjectiveConfig,
    batch: usize,
    pairs: usize,
    (k, k_prime): (usize, usize),
) -> crate::Result<Vec<MaskPlan>> {
    if cfg.variant == Some(Variant::MultistepInverse) {
        return Ok(vec![MaskPlan::multistep_inverse(pairs)]);
    }
    let n = if cfg.per_sample_mask { batch } else { 1 };
    (0..n).map(|_| sample_mask_plan(rng, pairs, k, k_prime)).collect()
}
