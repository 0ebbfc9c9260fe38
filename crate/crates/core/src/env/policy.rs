use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::physics::{
    arm_gravity, wrap_angle, ARM_GAIN, ARM_LINKS, PENDULUM_GAIN, PENDULUM_GRAVITY, POINTMASS_GAIN,
};
use super::{clip_action, DomainId, EnvState, TaskId};

/// Behavior policy used to generate offline data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Exploratory,
    Expert,
}

/// Exploration noise at the start and end of a collection budget.
pub const EXPLORATION_SIGMA: (f64, f64) = (1.0, 0.2);

/// Controllers read the true state; they never look at pixels.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    task: TaskId,
    kind: PolicyKind,
    rng: ChaCha8Rng,
    progress: f64,
}

impl ScriptedPolicy {
    pub fn new(task: TaskId, kind: PolicyKind, seed: u64) -> Self {
        Self {
            task,
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            progress: 0.0,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    /// Fraction of the collection budget already spent, in `[0, 1]`.
    /// Only the exploratory policy uses it, to anneal its noise.
    pub fn set_progress(&mut self, progress: f64) {
        self.progress = progress.clamp(0.0, 1.0);
    }

    pub fn noise_sigma(&self) -> f64 {
        let (start, end) = EXPLORATION_SIGMA;
        start + (end - start) * self.progress
    }

    pub fn act(&mut self, state: &EnvState) -> Vec<f32> {
        let dim = self.task.action_dim();
        match self.kind {
            PolicyKind::Random => (0..dim)
                .map(|_| self.rng.random_range(-1.0f32..=1.0))
                .collect(),
            PolicyKind::Expert => expert_action(self.task, state),
            PolicyKind::Exploratory => {
                let sigma = self.noise_sigma();
                expert_action(self.task, state)
                    .into_iter()
                    .map(|a| {
                        let n: f64 = StandardNormal.sample(&mut self.rng);
                        clip_action((a as f64 + sigma * n) as f32)
                    })
                    .collect()
            }
        }
    }
}

/// Deterministic state-feedback controller for each task.
pub fn expert_action(task: TaskId, s: &EnvState) -> Vec<f32> {
    match task.domain() {
        DomainId::Pendulum => vec![pendulum_expert(s) as f32],
        DomainId::Pointmass => pointmass_expert(s).map(|u| u as f32).to_vec(),
        DomainId::Twolinkarm => arm_expert(s).map(|u| u as f32).to_vec(),
    }
}

fn pendulum_expert(s: &EnvState) -> f64 {
    let (theta, omega) = (s.pos[0], s.vel[0]);
    if theta.abs() < 0.6 {
        // Cancel gravity and add a PD pull toward upright.
        let torque = -PENDULUM_GRAVITY * theta.sin() - 20.0 * theta - 6.0 * omega;
        (torque / PENDULUM_GAIN).clamp(-1.0, 1.0)
    } else {
        // Energy pumping toward the upright rest energy.
        let energy = 0.5 * omega * omega + PENDULUM_GRAVITY * theta.cos();
        let deficit = PENDULUM_GRAVITY - energy;
        let dir = if omega == 0.0 { 1.0 } else { omega.signum() };
        (2.0 * deficit * dir).clamp(-1.0, 1.0)
    }
}

fn pointmass_expert(s: &EnvState) -> [f64; 2] {
    let mut u = [0.0; 2];
    for i in 0..2 {
        let force = 8.0 * (s.target[i] - s.pos[i]) - 2.5 * s.vel[i];
        u[i] = (force / POINTMASS_GAIN).clamp(-1.0, 1.0);
    }
    u
}

/// Joint angles placing the end effector at `target`, choosing the elbow
/// configuration closest to `current`.
fn arm_inverse_kinematics(target: [f64; 2], current: [f64; 2]) -> [f64; 2] {
    let [l1, l2] = ARM_LINKS;
    let d2 = target[0] * target[0] + target[1] * target[1];
    let c2 = ((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let base = target[1].atan2(target[0]);
    let solve = |q2: f64| {
        let q1 = base - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        [wrap_angle(q1), wrap_angle(q2)]
    };
    let a = solve(c2.acos());
    let b = solve(-c2.acos());
    let dist = |q: [f64; 2]| {
        wrap_angle(q[0] - current[0]).abs() + wrap_angle(q[1] - current[1]).abs()
    };
    if dist(a) <= dist(b) {
        a
    } else {
        b
    }
}

fn arm_expert(s: &EnvState) -> [f64; 2] {
    let goal = arm_inverse_kinematics(s.target, s.pos);
    let g = arm_gravity(s.pos);
    let mut u = [0.0; 2];
    for i in 0..2 {
        let err = wrap_angle(goal[i] - s.pos[i]);
        let torque = 30.0 * err - 7.0 * s.vel[i] - g[i];
        u[i] = (torque / ARM_GAIN).clamp(-1.0, 1.0);
    }
    u
}
