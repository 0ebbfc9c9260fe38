use super::{Env, PolicyKind, ScriptedPolicy, TaskId};
use crate::error::{CtError, Result};

/// Episodes averaged when measuring a built-in expert score.
pub const EXPERT_SCORE_EPISODES: usize = 100;

/// Mean scripted-expert return over `EXPERT_SCORE_EPISODES` episodes
/// (environment seeds `0..100`), regenerated with `measure_expert_score`.
const BUILTIN_EXPERT_SCORES: [(TaskId, f64); 6] = [
    (TaskId::PendulumSwingup, 124.338688940220),
    (TaskId::PendulumBalance, 197.911740918905),
    (TaskId::PointmassReachCenter, 185.444364454700),
    (TaskId::PointmassReachCorner, 180.561376001443),
    (TaskId::TwolinkarmReach, 184.207075304919),
    (TaskId::TwolinkarmHold, 182.547640320489),
];

/// Reference scores for the DeepMind Control tasks, kept so that
/// normalized metrics can be cross-checked against published numbers.
const EXTERNAL_EXPERT_SCORES: [(&str, f64); 10] = [
    ("cartpole-swingup", 875.0),
    ("hopper-hop", 200.0),
    ("cheetah-run", 850.0),
    ("walker-stand", 980.0),
    ("walker-run", 700.0),
    ("cartpole-balance", 1000.0),
    ("hopper-stand", 900.0),
    ("walker-walk", 950.0),
    ("pendulum-swingup", 1000.0),
    ("finger-spin", 800.0),
];

impl TaskId {
    pub fn expert_score(self) -> f64 {
        BUILTIN_EXPERT_SCORES
            .iter()
            .find(|(t, _)| *t == self)
            .map(|(_, s)| *s)
            .expect("every built-in task has a score")
    }
}

pub fn external_expert_score(name: &str) -> Option<f64> {
    EXTERNAL_EXPERT_SCORES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
}

/// Normalization constant for a built-in task (`pendulum/balance`) or a
/// reference task (`cheetah-run`).
pub fn expert_score(name: &str) -> Result<f64> {
    if let Ok(task) = name.parse::<TaskId>() {
        return Ok(task.expert_score());
    }
    external_expert_score(name).ok_or_else(|| CtError::UnknownTask(name.to_string()))
}

/// Return of one episode of a scripted policy, without keeping frames.
pub fn scripted_return(task: TaskId, kind: PolicyKind, env_seed: u64, progress: f64) -> f64 {
    let mut env = Env::new(task, env_seed);
    let mut policy = ScriptedPolicy::new(task, kind, env_seed ^ 0x5eed);
    policy.set_progress(progress);
    let mut total = 0.0f64;
    while !env.is_done() {
        let a = policy.act(env.state());
        total += env.step(&a).expect("valid action").reward as f64;
    }
    total
}

pub fn measure_expert_score(task: TaskId, episodes: usize) -> f64 {
    let sum: f64 = (0..episodes as u64)
        .map(|s| scripted_return(task, PolicyKind::Expert, s, 0.0))
        .sum();
    sum / episodes as f64
}
