use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DomainId, EnvState, TaskId};

pub(crate) const DT: f64 = 0.05;
const SUBSTEPS: usize = 2;

// Pendulum: angle 0 is upright, gravity destabilizes.
pub(crate) const PENDULUM_GRAVITY: f64 = 10.0;
pub(crate) const PENDULUM_GAIN: f64 = 4.0;
const PENDULUM_DAMPING: f64 = 0.1;
const PENDULUM_MAX_SPEED: f64 = 10.0;
const PENDULUM_REWARD_WIDTH: f64 = 0.15;

// Point mass in the [-1, 1]^2 arena.
pub(crate) const POINTMASS_GAIN: f64 = 3.0;
pub(crate) const POINTMASS_DAMPING: f64 = 1.0;
const POINTMASS_REWARD_WIDTH: f64 = 0.12;
pub(crate) const CORNER_TARGET: [f64; 2] = [0.6, 0.6];

// Two-link arm in a vertical plane, base at the origin.
pub(crate) const ARM_LINKS: [f64; 2] = [0.45, 0.4];
pub(crate) const ARM_GAIN: f64 = 6.0;
pub(crate) const ARM_DAMPING: f64 = 1.5;
pub(crate) const ARM_GRAVITY: f64 = 2.0;
const ARM_MAX_SPEED: f64 = 8.0;
const ARM_REWARD_WIDTH: f64 = 0.1;
pub(crate) const HOLD_TARGET: [f64; 2] = [0.55, 0.25];

pub(crate) fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

pub(crate) fn initial_state(task: TaskId, rng: &mut ChaCha8Rng) -> EnvState {
    let mut s = EnvState {
        pos: [0.0; 2],
        vel: [0.0; 2],
        target: [0.0; 2],
        step: 0,
    };
    match task {
        TaskId::PendulumSwingup => {
            s.pos[0] = wrap_angle(PI + rng.random_range(-0.2..0.2));
            s.vel[0] = rng.random_range(-0.2..0.2);
        }
        TaskId::PendulumBalance => {
            s.pos[0] = rng.random_range(-0.3..0.3);
            s.vel[0] = rng.random_range(-0.2..0.2);
        }
        TaskId::PointmassReachCenter | TaskId::PointmassReachCorner => {
            s.pos = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
            s.target = if task == TaskId::PointmassReachCenter {
                [0.0, 0.0]
            } else {
                CORNER_TARGET
            };
        }
        TaskId::TwolinkarmReach | TaskId::TwolinkarmHold => {
            s.pos = [rng.random_range(-PI..PI), rng.random_range(-2.5..2.5)];
            s.target = if task == TaskId::TwolinkarmReach {
                let r = rng.random_range(0.3..0.8);
                let a = rng.random_range(-PI..PI);
                [r * a.cos(), r * a.sin()]
            } else {
                HOLD_TARGET
            };
        }
    }
    s
}

pub(crate) fn arm_gravity(q: [f64; 2]) -> [f64; 2] {
    let c1 = q[0].cos();
    let c12 = (q[0] + q[1]).cos();
    [
        -ARM_GRAVITY * (c1 + 0.5 * c12),
        -ARM_GRAVITY * 0.5 * c12,
    ]
}

pub(crate) fn arm_end_effector(q: [f64; 2]) -> [f64; 2] {
    let [l1, l2] = ARM_LINKS;
    [
        l1 * q[0].cos() + l2 * (q[0] + q[1]).cos(),
        l1 * q[0].sin() + l2 * (q[0] + q[1]).sin(),
    ]
}

/// Semi-implicit Euler with `SUBSTEPS` substeps of `DT / SUBSTEPS`.
pub(crate) fn advance(task: TaskId, s: &mut EnvState, u: &[f64]) {
    let h = DT / SUBSTEPS as f64;
    for _ in 0..SUBSTEPS {
        match task.domain() {
            DomainId::Pendulum => {
                let acc = PENDULUM_GRAVITY * s.pos[0].sin() + PENDULUM_GAIN * u[0]
                    - PENDULUM_DAMPING * s.vel[0];
                s.vel[0] = (s.vel[0] + h * acc).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                s.pos[0] = wrap_angle(s.pos[0] + h * s.vel[0]);
            }
            DomainId::Pointmass => {
                for i in 0..2 {
                    let acc = POINTMASS_GAIN * u[i] - POINTMASS_DAMPING * s.vel[i];
                    s.vel[i] += h * acc;
                    s.pos[i] += h * s.vel[i];
                    if s.pos[i].abs() > 1.0 {
                        s.pos[i] = s.pos[i].clamp(-1.0, 1.0);
                        s.vel[i] = 0.0;
                    }
                }
            }
            DomainId::Twolinkarm => {
                let g = arm_gravity(s.pos);
                for i in 0..2 {
                    let acc = ARM_GAIN * u[i] - ARM_DAMPING * s.vel[i] + g[i];
                    s.vel[i] = (s.vel[i] + h * acc).clamp(-ARM_MAX_SPEED, ARM_MAX_SPEED);
                    s.pos[i] = wrap_angle(s.pos[i] + h * s.vel[i]);
                }
            }
        }
    }
}

fn gaussian_bump(d2: f64, width: f64) -> f64 {
    (-d2 / (2.0 * width * width)).exp()
}

/// Per-step reward in `[0, 1]`.
pub(crate) fn reward(task: TaskId, s: &EnvState) -> f64 {
    match task.domain() {
        DomainId::Pendulum => gaussian_bump(s.pos[0] * s.pos[0], PENDULUM_REWARD_WIDTH),
        DomainId::Pointmass => {
            let dx = s.pos[0] - s.target[0];
            let dy = s.pos[1] - s.target[1];
            gaussian_bump(dx * dx + dy * dy, POINTMASS_REWARD_WIDTH)
        }
        DomainId::Twolinkarm => {
            let ee = arm_end_effector(s.pos);
            let dx = ee[0] - s.target[0];
            let dy = ee[1] - s.target[1];
            gaussian_bump(dx * dx + dy * dy, ARM_REWARD_WIDTH)
        }
    }
}
