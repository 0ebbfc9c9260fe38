use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::env::{clip_action, expert_score, Env, EnvConfig, TaskId, DEFAULT_EPISODE_LENGTH};
use crate::error::{CtError, Result};
use crate::model::{build_attention_mask, Checkpoint, ForwardCtx, MaskKind, PolicyHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskId,
    pub mode: PolicyHead,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub normalized_mean: f64,
    pub checkpoint_id: String,
    pub seed: u64,
    pub n_episodes: usize,
}

/// What the policy saw at one rollout step, for instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    /// Observation tokens fed to the encoder.
    pub context_pairs: usize,
    /// Return-to-go conditioning per episode (RTG mode only).
    pub rtg: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub episode_length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 50,
            seed: 0,
            episode_length: DEFAULT_EPISODE_LENGTH,
        }
    }
}

/// `raw / expert_score(task)` for a built-in or reference task name.
pub fn normalized_reward(raw: f64, task: &str) -> Result<f64> {
    Ok(raw / expert_score(task)?)
}

/// `(method - scratch) / scratch`.
pub fn relative_improvement(method_reward: f64, scratch_reward: f64) -> Result<f64> {
    if scratch_reward == 0.0 {
        return Err(CtError::DivisionByZero(
            "relative improvement over a zero scratch reward".into(),
        ));
    }
    Ok((method_reward - scratch_reward) / scratch_reward)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate_policy(ck: &Checkpoint, task: TaskId, mode: PolicyHead, n_episodes: usize, seed: u64) -> Result<EvalResult> {
    let cfg = EvalConfig {
        n_episodes,
        seed,
        ..EvalConfig::default()
    };
    evaluate_policy_with(ck, task, mode, &cfg, |_| {})
}

/// Rolls out `n_episodes` episodes in lockstep; episode `i` uses
/// environment seed `seed + i`. At step `t` the encoder sees the latest
/// `min(T, t + 1)` pairs under the causal mask and the policy reads the
/// representation of the newest observation.
pub fn evaluate_policy_with(
    ck: &Checkpoint,
    task: TaskId,
    mode: PolicyHead,
    cfg: &EvalConfig,
    mut hook: impl FnMut(&StepTrace),
) -> Result<EvalResult> {
    let model = &ck.model;
    let mc = model.config();
    if !model.has_head(mode) {
        return Err(CtError::Config(format!("checkpoint has no {mode:?} policy head")));
    }
    if task.action_dim() > mc.a_max {
        return Err(CtError::Config(format!(
            "{task} needs {} action dims, model has {}",
            task.action_dim(),
            mc.a_max
        )));
    }
    let [h, w, _] = mc.image_shape;
    if h != w {
        return Err(CtError::Config(format!("environments render square frames, model expects {h}x{w}")));
    }
    let n = cfg.n_episodes;
    if n == 0 {
        return Err(CtError::Config("n_episodes must be at least 1".into()));
    }
    let env_cfg = EnvConfig {
        image_size: h,
        episode_length: cfg.episode_length,
    };
    let mut envs: Vec<Env> = (0..n)
        .map(|i| Env::with_config(task, cfg.seed + i as u64, env_cfg))
        .collect();
    let dim = task.action_dim();
    let a_max = mc.a_max;
    let mut ctx = ForwardCtx::eval();
    let mut rtg: Vec<f64> = vec![task.expert_score(); n];
    let mut returns = vec![0f64; n];
    // Per-step token caches, each `[n, d]`; eval mode makes tokens a
    // pure function of their input so they can be reused across steps.
    let mut obs_cache: Vec<Tensor> = Vec::new();
    let mut act_cache: Vec<Tensor> = Vec::new();
    let placeholder = model.tokenize_actions(&Tensor::zeros((n, a_max), model.dtype(), model.device())?)?;
    let mut frames: Vec<u8> = envs.iter().flat_map(|e| e.observation().pixels).collect();
    let mut t = 0usize;
    while !envs[0].is_done() {
        obs_cache.push(model.tokenize_obs(&model.images_to_tensor(&frames, n)?)?);
        let pairs = (t + 1).min(mc.context_pairs);
        let lo = t + 1 - pairs;
        let obs = Tensor::stack(&obs_cache[lo..=t], 1)?;
        let mut acts: Vec<&Tensor> = act_cache[lo..t].iter().collect();
        acts.push(&placeholder);
        let acts = Tensor::stack(&acts, 1)?;
        let x = model.interleave(&obs, &acts)?;
        let phi = model.encode(&x, &build_attention_mask(MaskKind::Causal, pairs)?, &mut ctx)?;
        let phi_o = phi.narrow(1, 2 * pairs - 2, 1)?.squeeze(1)?;
        let cond = match mode {
            PolicyHead::Rtg => Some(Tensor::from_slice(&rtg, n, model.device())?.to_dtype(model.dtype())?),
            PolicyHead::Bc => None,
        };
        hook(&StepTrace {
            t,
            context_pairs: pairs,
            rtg: (mode == PolicyHead::Rtg).then(|| rtg.clone()),
        });
        let out = model.predict_action(mode, &phi_o, cond.as_ref())?;
        let out: Vec<Vec<f32>> = out.to_dtype(candle_core::DType::F32)?.to_vec2()?;
        let mut taken = vec![0f32; n * a_max];
        frames.clear();
        for (i, env) in envs.iter_mut().enumerate() {
            let a: Vec<f32> = out[i][..dim].iter().map(|&v| clip_action(v)).collect();
            taken[i * a_max..i * a_max + dim].copy_from_slice(&a);
            let step = env.step(&a)?;
            returns[i] += step.reward as f64;
            rtg[i] -= step.reward as f64;
            frames.extend_from_slice(&step.observation.pixels);
        }
        let taken = Tensor::from_vec(taken, (n, a_max), model.device())?.to_dtype(model.dtype())?;
        act_cache.push(model.tokenize_actions(&taken)?);
        t += 1;
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalResult {
        task,
        mode,
        mean,
        std,
        normalized_mean: normalized_reward(mean, task.name())?,
        checkpoint_id: ck.id()?,
        seed: cfg.seed,
        n_episodes: n,
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(relative_improvement(120.0, 100.0).unwrap(), 0.2);
        assert_eq!(relative_improvement(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(relative_improvement(80.0, 100.0).unwrap(), -0.2);
        assert!(matches!(relative_improvement(1.0, 0.0), Err(CtError::DivisionByZero(_))));
        assert_eq!(normalized_reward(425.0, "cheetah-run").unwrap(), 0.5);
        let t = TaskId::PendulumBalance;
        assert_eq!(normalized_reward(0.0, t.name()).unwrap(), 0.0);
        assert_eq!(normalized_reward(t.expert_score(), t.name()).unwrap(), 1.0);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
