//! Deterministic multi-task pixel control suite.
//!
//! Three domains (pendulum, point mass, two-link arm) with two tasks each.
//! Tasks inside a domain share the action space and the dynamics; they
//! differ in the initial-state distribution and the reward target. The
//! agent only ever sees rendered RGB frames.

mod physics;
mod policy;
mod render;
mod scores;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};

pub use policy::{PolicyKind, ScriptedPolicy};
pub use render::render;
pub use scores::{
    expert_score, external_expert_score, measure_expert_score, scripted_return,
    EXPERT_SCORE_EPISODES,
};

pub const DEFAULT_EPISODE_LENGTH: usize = 200;
pub const DEFAULT_IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Pendulum,
    Pointmass,
    Twolinkarm,
}

impl DomainId {
    pub fn action_dim(self) -> usize {
        match self {
            DomainId::Pendulum => 1,
            DomainId::Pointmass | DomainId::Twolinkarm => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainId::Pendulum => "pendulum",
            DomainId::Pointmass => "pointmass",
            DomainId::Twolinkarm => "twolinkarm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    PendulumSwingup,
    PendulumBalance,
    PointmassReachCenter,
    PointmassReachCorner,
    TwolinkarmReach,
    TwolinkarmHold,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::PendulumSwingup,
        TaskId::PendulumBalance,
        TaskId::PointmassReachCenter,
        TaskId::PointmassReachCorner,
        TaskId::TwolinkarmReach,
        TaskId::TwolinkarmHold,
    ];

    pub fn domain(self) -> DomainId {
        match self {
            TaskId::PendulumSwingup | TaskId::PendulumBalance => DomainId::Pendulum,
            TaskId::PointmassReachCenter | TaskId::PointmassReachCorner => DomainId::Pointmass,
            TaskId::TwolinkarmReach | TaskId::TwolinkarmHold => DomainId::Twolinkarm,
        }
    }

    pub fn action_dim(self) -> usize {
        self.domain().action_dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::PendulumSwingup => "pendulum/swingup",
            TaskId::PendulumBalance => "pendulum/balance",
            TaskId::PointmassReachCenter => "pointmass/reach_center",
            TaskId::PointmassReachCorner => "pointmass/reach_corner",
            TaskId::TwolinkarmReach => "twolinkarm/reach",
            TaskId::TwolinkarmHold => "twolinkarm/hold",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = CtError;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CtError::UnknownTask(s.to_string()))
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub image_size: usize,
    pub episode_length: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            episode_length: DEFAULT_EPISODE_LENGTH,
        }
    }
}

/// Physical state. Positions are radians (pendulum, arm joints) or arena
/// units (point mass); velocities are per second of simulated time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    /// Goal location in arena coordinates, unused by the pendulum.
    pub target: [f64; 2],
    pub step: usize,
}

/// An 8-bit RGB frame stored row-major as `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f32,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    task: TaskId,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    state: EnvState,
}

/// Creates an environment and samples its first initial state.
pub fn create_env(task: &str, seed: u64) -> Result<Env> {
    Ok(Env::new(task.parse()?, seed))
}

impl Env {
    pub fn new(task: TaskId, seed: u64) -> Self {
        Self::with_config(task, seed, EnvConfig::default())
    }

    pub fn with_config(task: TaskId, seed: u64, cfg: EnvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = physics::initial_state(task, &mut rng);
        Self {
            task,
            cfg,
            rng,
            state,
        }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_dim(&self) -> usize {
        self.task.action_dim()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Overrides the physical state, e.g. to start from an equilibrium.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.episode_length
    }

    pub fn observation(&self) -> Observation {
        render(self.task, &self.state, self.cfg.image_size)
    }

    /// Starts a new episode from the environment's RNG stream.
    pub fn reset(&mut self) -> Observation {
        self.state = physics::initial_state(self.task, &mut self.rng);
        self.observation()
    }

    pub fn step(&mut self, action: &[f32]) -> Result<StepResult> {
        let dim = self.action_dim();
        if action.len() != dim {
            return Err(CtError::ActionDim {
                expected: dim,
                got: action.len(),
            });
        }
        if self.is_done() {
            return Err(CtError::EpisodeDone);
        }
        let mut u = [0.0f64; 2];
        for (dst, &a) in u.iter_mut().zip(action) {
            *dst = clip_action(a) as f64;
        }
        physics::advance(self.task, &mut self.state, &u[..dim]);
        self.state.step += 1;
        let reward = physics::reward(self.task, &self.state) as f32;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.is_done(),
        })
    }
}

/// Componentwise clip to `[-1, 1]`; NaN maps to zero.
pub fn clip_action(a: f32) -> f32 {
    if a.is_nan() {
        0.0
    } else {
        a.clamp(-1.0, 1.0)
    }
}
