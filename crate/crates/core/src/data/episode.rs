use crate::env::TaskId;
use crate::error::{CtError, Result};

pub const EPISODE_MAGIC: &[u8; 4] = b"CTEP";
pub const EPISODE_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

/// One recorded trajectory. Stores one more observation than actions so
/// the frame following the last action is available as a prediction
/// target.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskId,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub action_dim: usize,
    /// `[len + 1, H, W, C]` bytes.
    pub observations: Vec<u8>,
    /// `[len, action_dim]`.
    pub actions: Vec<f32>,
    /// `[len]`.
    pub rewards: Vec<f32>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.observations[i * n..(i + 1) * n]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    /// Undiscounted return, accumulated in f64.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(CtError::Integrity("episode has no steps".into()));
        }
        if self.observations.len() != (t + 1) * self.frame_len() {
            return Err(CtError::Integrity(format!(
                "observation bytes {} != (T+1)*H*W*C = {}",
                self.observations.len(),
                (t + 1) * self.frame_len()
            )));
        }
        if self.actions.len() != t * self.action_dim {
            return Err(CtError::Integrity(format!(
                "action count {} != T*A = {}",
                self.actions.len(),
                t * self.action_dim
            )));
        }
        if self.action_dim != self.task.action_dim() {
            return Err(CtError::Integrity(format!(
                "action dim {} does not match task {}",
                self.action_dim, self.task
            )));
        }
        Ok(())
    }

    /// Little-endian binary encoding: header, frames, actions, rewards.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.observations.len() + 4 * (self.actions.len() + self.rewards.len()),
        );
        out.extend_from_slice(EPISODE_MAGIC);
        for v in [
            EPISODE_FORMAT_VERSION,
            self.len() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.action_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.observations);
        for a in &self.actions {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for r in &self.rewards {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn decode(task: TaskId, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CtError::Integrity("episode file shorter than header".into()));
        }
        if &bytes[..4] != EPISODE_MAGIC {
            return Err(CtError::Integrity("bad episode magic".into()));
        }
        let word = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
        };
        let version = word(0);
        if version != EPISODE_FORMAT_VERSION {
            return Err(CtError::FormatVersion {
                found: version,
                supported: EPISODE_FORMAT_VERSION,
            });
        }
        let (t, h, w, c, a) = (
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
        );
        let n_obs = (t + 1) * h * w * c;
        let expected = HEADER_LEN + n_obs + 4 * (t * a + t);
        if bytes.len() != expected {
            return Err(CtError::Integrity(format!(
                "episode file has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let floats = |range: std::ops::Range<usize>| -> Vec<f32> {
            body[range]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        let ep = Episode {
            task,
            height: h,
            width: w,
            channels: c,
            action_dim: a,
            observations: body[..n_obs].to_vec(),
            actions: floats(n_obs..n_obs + 4 * t * a),
            rewards: floats(n_obs + 4 * t * a..body.len()),
        };
        ep.validate()?;
        Ok(ep)
    }
}
