use super::physics::{arm_end_effector, ARM_LINKS};
use super::{DomainId, EnvState, Observation, TaskId};

const BACKGROUND: [u8; 3] = [18, 20, 32];
const TARGET: [u8; 3] = [60, 200, 90];
const BODY: [u8; 3] = [235, 130, 45];
const BODY_ALT: [u8; 3] = [90, 160, 240];
const JOINT: [u8; 3] = [240, 240, 240];

enum Shape {
    Disc { c: [f64; 2], r: f64 },
    Segment { a: [f64; 2], b: [f64; 2], r: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Disc { c, r } => {
                let dx = p[0] - c[0];
                let dy = p[1] - c[1];
                dx * dx + dy * dy <= r * r
            }
            Shape::Segment { a, b, r } => {
                let ab = [b[0] - a[0], b[1] - a[1]];
                let ap = [p[0] - a[0], p[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                let t = if len2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dx = ap[0] - t * ab[0];
                let dy = ap[1] - t * ab[1];
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

fn scene(task: TaskId, s: &EnvState) -> Vec<(Shape, [u8; 3])> {
    match task.domain() {
        DomainId::Pendulum => {
            let tip = [0.75 * s.pos[0].sin(), 0.75 * s.pos[0].cos()];
            vec![
                (Shape::Segment { a: [0.0, 0.0], b: tip, r: 0.09 }, BODY),
                (Shape::Disc { c: tip, r: 0.16 }, BODY_ALT),
                (Shape::Disc { c: [0.0, 0.0], r: 0.07 }, JOINT),
            ]
        }
        DomainId::Pointmass => vec![
            (Shape::Disc { c: s.target, r: 0.14 }, TARGET),
            (Shape::Disc { c: s.pos, r: 0.11 }, BODY),
        ],
        DomainId::Twolinkarm => {
            let elbow = [
                ARM_LINKS[0] * s.pos[0].cos(),
                ARM_LINKS[0] * s.pos[0].sin(),
            ];
            let ee = arm_end_effector(s.pos);
            vec![
                (Shape::Disc { c: s.target, r: 0.12 }, TARGET),
                (Shape::Segment { a: [0.0, 0.0], b: elbow, r: 0.08 }, BODY),
                (Shape::Segment { a: elbow, b: ee, r: 0.07 }, BODY_ALT),
                (Shape::Disc { c: [0.0, 0.0], r: 0.06 }, JOINT),
            ]
        }
    }
}

/// Rasterizes the state into a square `[size, size, 3]` frame covering the
/// arena `[-1, 1]^2` with +y pointing up. Pure function of its inputs.
pub fn render(task: TaskId, state: &EnvState, size: usize) -> Observation {
    let shapes = scene(task, state);
    let mut pixels = Vec::with_capacity(size * size * 3);
    let scale = 2.0 / size as f64;
    for row in 0..size {
        let y = 1.0 - (row as f64 + 0.5) * scale;
        for col in 0..size {
            let x = -1.0 + (col as f64 + 0.5) * scale;
            let color = shapes
                .iter()
                .rev()
                .find(|(shape, _)| shape.contains([x, y]))
                .map_or(BACKGROUND, |(_, c)| *c);
            pixels.extend_from_slice(&color);
        }
    }
    Observation {
        height: size,
        width: size,
        pixels,
    }
}
