use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};

/// Which pairs have their action and/or observation hidden in the
/// hindsight pass, and which actions are regressed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub action_indices: Vec<usize>,
    pub obs_indices: Vec<usize>,
    pub k: usize,
    pub k_prime: usize,
    /// Masked actions that contribute to the loss.
    pub targets: Vec<usize>,
}

impl MaskPlan {
    /// Plan from explicit index sets. The last action is never a target:
    /// nothing after it in the window could reveal it.
    pub fn new(pairs: usize, action_indices: &[usize], obs_indices: &[usize]) -> Result<Self> {
        let mut actions = action_indices.to_vec();
        let mut obs = obs_indices.to_vec();
        actions.sort_unstable();
        actions.dedup();
        obs.sort_unstable();
        obs.dedup();
        if let Some(&i) = actions.iter().chain(&obs).find(|&&i| i >= pairs) {
            return Err(CtError::Index { index: i, bound: pairs });
        }
        let targets = actions.iter().copied().filter(|&i| i + 1 < pairs).collect();
        Ok(Self {
            k: actions.len(),
            k_prime: obs.len(),
            action_indices: actions,
            obs_indices: obs,
            targets,
        })
    }

    pub fn empty(pairs: usize) -> Self {
        Self::new(pairs, &[], &[]).expect("empty plan is in range")
    }

    /// Hide everything except the first and last observation and regress
    /// only the first action.
    pub fn multistep_inverse(pairs: usize) -> Self {
        let actions: Vec<usize> = (0..pairs).collect();
        let obs: Vec<usize> = (1..pairs.saturating_sub(1)).collect();
        let mut plan = Self::new(pairs, &actions, &obs).expect("indices in range");
        plan.targets = vec![0];
        plan
    }

    /// Actions hidden from the hindsight encoder: the plan plus the final
    /// action, which is always withheld so that including it in a plan
    /// cannot change the loss.
    pub fn hidden_actions(&self, pairs: usize) -> Vec<usize> {
        let mut out = self.action_indices.clone();
        if pairs > 0 && out.last() != Some(&(pairs - 1)) {
            out.push(pairs - 1);
        }
        out
    }
}

/// Samples `k` action indices from `[0, T-1]` and `min(k', T-2)`
/// observation indices from the interior `[1, T-2]`, independently and
/// without replacement.
pub fn sample_mask_plan<R: Rng + ?Sized>(rng: &mut R, pairs: usize, k: usize, k_prime: usize) -> Result<MaskPlan> {
    if k == 0 || k > pairs {
        return Err(CtError::Config(format!("k = {k} outside [1, {pairs}]")));
    }
    let mut actions = sample(rng, pairs, k).into_vec();
    actions.sort_unstable();
    let interior = pairs.saturating_sub(2);
    let n_obs = k_prime.min(interior);
    let mut obs: Vec<usize> = sample(rng, interior, n_obs).into_iter().map(|i| i + 1).collect();
    obs.sort_unstable();
    MaskPlan::new(pairs, &actions, &obs)
}

/// `[1, T, 1]` (or `[B, T, 1]` for per-sample plans) indicator of masked
/// positions.
pub(crate) fn selector(plans: &[MaskPlan], pairs: usize, pick: impl Fn(&MaskPlan) -> Vec<usize>, dtype: DType) -> Result<Tensor> {
    let mut vals = vec![0f32; plans.len() * pairs];
    for (b, plan) in plans.iter().enumerate() {
        for i in pick(plan) {
            vals[b * pairs + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(vals, (plans.len(), pairs, 1), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Replaces masked inputs with the constant `-1`: observations
/// `[B, T, H, W, C]` (already normalized) and padded actions `[B, T, A]`.
/// `plans` holds either one shared plan or one per batch row.
pub fn apply_mask_plan(obs: &Tensor, actions: &Tensor, plans: &[MaskPlan]) -> Result<(Tensor, Tensor)> {
    let (b, t, h, w, c) = obs.dims5()?;
    if plans.len() != 1 && plans.len() != b {
        return Err(CtError::Shape(format!("{} plans for a batch of {b}", plans.len())));
    }
    for plan in plans {
        if let Some(&i) = plan.action_indices.iter().chain(&plan.obs_indices).find(|&&i| i >= t) {
            return Err(CtError::Index { index: i, bound: t });
        }
    }
    let sel_a = selector(plans, t, |p| p.action_indices.clone(), obs.dtype())?;
    let sel_o = selector(plans, t, |p| p.obs_indices.clone(), obs.dtype())?
        .reshape((plans.len(), t, 1, 1, 1))?;
    let a = blend(actions, &sel_a)?;
    let o = blend(obs, &sel_o)?;
    debug_assert_eq!(o.dims(), [b, t, h, w, c]);
    Ok((o, a))
}

/// `x` where `sel == 0`, `-1` where `sel == 1`.
fn blend(x: &Tensor, sel: &Tensor) -> Result<Tensor> {
    let keep = sel.affine(-1.0, 1.0)?;
    Ok((x.broadcast_mul(&keep)? - sel.broadcast_as(x.shape())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_k_masks_every_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_mask_plan(&mut rng, 30, 30, 15).unwrap();
        assert_eq!(p.action_indices, (0..30).collect::<Vec<_>>());
        assert_eq!(p.obs_indices.len(), 15);
        assert!(p.obs_indices.iter().all(|&i| (1..=28).contains(&i)));
    }

    #[test]
    fn interior_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_mask_plan(&mut rng, 3, 2, 5).unwrap();
        assert_eq!(p.obs_indices, vec![1]);
        let p = sample_mask_plan(&mut rng, 2, 1, 5).unwrap();
        assert!(p.obs_indices.is_empty());
    }

    #[test]
    fn last_action_is_not_a_target() {
        let p = MaskPlan::new(4, &[3, 1], &[]).unwrap();
        assert_eq!(p.action_indices, vec![1, 3]);
        assert_eq!(p.targets, vec![1]);
        assert_eq!(MaskPlan::new(4, &[1], &[]).unwrap().hidden_actions(4), vec![1, 3]);
        assert!(MaskPlan::new(4, &[4], &[]).is_err());
    }

    #[test]
    fn multistep_plan_shape() {
        let p = MaskPlan::multistep_inverse(6);
        assert_eq!(p.action_indices.len(), 6);
        assert_eq!(p.obs_indices, vec![1, 2, 3, 4]);
        assert_eq!(p.targets, vec![0]);
    }

    #[test]
    fn masking_action_zero() {
        let dev = candle_core::Device::Cpu;
        let obs = Tensor::rand(0f32, 1f32, (1, 3, 2, 2, 3), &dev).unwrap();
        let act = Tensor::rand(-1f32, 1f32, (1, 3, 2), &dev).unwrap();
        let plan = MaskPlan::new(3, &[0], &[]).unwrap();
        let (o, a) = apply_mask_plan(&obs, &act, &[plan]).unwrap();
        let a = a.to_vec3::<f32>().unwrap();
        let orig = act.to_vec3::<f32>().unwrap();
        assert_eq!(a[0][0], vec![-1.0, -1.0]);
        assert_eq!(a[0][1..], orig[0][1..]);
        let same = (o - &obs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same, 0.0);
    }

    proptest::proptest! {
        #[test]
        fn sampled_plans_respect_their_sizes(pairs in 2usize..12, k_raw in 0usize..12, kp in 0usize..12, seed in 0u64..1000) {
            let k = k_raw % pairs + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_mask_plan(&mut rng, pairs, k, kp).unwrap();
            proptest::prop_assert_eq!(p.action_indices.len(), k);
            proptest::prop_assert_eq!(p.obs_indices.len(), kp.min(pairs - 2));
            proptest::prop_assert!(p.action_indices.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(p.obs_indices.iter().all(|&i| i >= 1 && i + 1 < pairs));
            let targets: Vec<usize> = p.action_indices.iter().copied().filter(|&i| i + 1 < pairs).collect();
            proptest::prop_assert_eq!(p.targets, targets);
        }
    }

    #[test]
    fn every_index_is_equally_likely() {
        let (pairs, k, kp, n) = (6, 2, 3, 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut acts = vec![0usize; pairs];
        let mut obs = vec![0usize; pairs];
        for _ in 0..n {
            let p = sample_mask_plan(&mut rng, pairs, k, kp).unwrap();
            p.action_indices.iter().for_each(|&i| acts[i] += 1);
            p.obs_indices.iter().for_each(|&i| obs[i] += 1);
        }
        for (i, &c) in acts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - k as f64 / pairs as f64).abs() < 0.015, "action {i}: {f}");
        }
        assert_eq!((obs[0], obs[pairs - 1]), (0, 0));
        for (i, &c) in obs.iter().enumerate().take(pairs - 1).skip(1) {
            let f = c as f64 / n as f64;
            assert!((f - kp as f64 / (pairs - 2) as f64).abs() < 0.015, "observation {i}: {f}");
        }
    }
}
