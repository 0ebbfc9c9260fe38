use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::episode::Episode;
use crate::env::{Env, EnvConfig, PolicyKind, ScriptedPolicy, TaskId};
use crate::error::{CtError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODE_DIR: &str = "episodes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Random,
    Exploratory,
    Expert,
    SampledReplay,
}

impl From<PolicyKind> for DatasetKind {
    fn from(k: PolicyKind) -> Self {
        match k {
            PolicyKind::Random => DatasetKind::Random,
            PolicyKind::Exploratory => DatasetKind::Exploratory,
            PolicyKind::Expert => DatasetKind::Expert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task_id: TaskId,
    pub episodes: usize,
    pub steps: usize,
    pub action_dim: usize,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub tasks: Vec<TaskEntry>,
    pub image_shape: [usize; 3],
    pub seed: u64,
    /// False when reward values were stripped; episode files then carry
    /// zeros in the reward slot.
    #[serde(default = "default_true")]
    pub has_rewards: bool,
}

/// Immutable collection of episodes, grouped by task in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "fraction")]
pub enum SubsetRule {
    TopReturnFraction(f64),
    UniformFraction(f64),
}

impl SubsetRule {
    pub fn fraction(self) -> f64 {
        match self {
            SubsetRule::TopReturnFraction(f) | SubsetRule::UniformFraction(f) => f,
        }
    }

    /// Number of episodes kept out of `n`, `ceil(fraction * n)`. A small
    /// slack absorbs products like `0.7 * 10 = 7.000000000000001`.
    pub fn keep_count(self, n: usize) -> usize {
        ((self.fraction() * n as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Mixes a base seed with a stream index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn task_stream(task: TaskId) -> u64 {
    TaskId::ALL.iter().position(|&t| t == task).unwrap() as u64
}

/// Rolls out whole episodes of `kind` on `task` until at least `n_steps`
/// transitions are recorded.
pub fn collect_task(
    task: TaskId,
    kind: PolicyKind,
    n_steps: usize,
    seed: u64,
    env_cfg: EnvConfig,
) -> Result<Vec<Episode>> {
    if n_steps < env_cfg.episode_length {
        return Err(CtError::Config(format!(
            "n_steps ({n_steps}) must be at least one episode ({})",
            env_cfg.episode_length
        )));
    }
    let stream = task_stream(task);
    let mut env = Env::with_config(task, derive_seed(seed, 2 * stream), env_cfg);
    let mut policy = ScriptedPolicy::new(task, kind, derive_seed(seed, 2 * stream + 1));
    let size = env_cfg.image_size;
    let mut episodes = Vec::new();
    let mut collected = 0usize;
    while collected < n_steps {
        let first = if episodes.is_empty() {
            env.observation()
        } else {
            env.reset()
        };
        let mut ep = Episode {
            task,
            height: size,
            width: size,
            channels: 3,
            action_dim: task.action_dim(),
            observations: first.pixels,
            actions: Vec::new(),
            rewards: Vec::new(),
        };
        while !env.is_done() {
            policy.set_progress(collected as f64 / n_steps as f64);
            let a = policy.act(env.state());
            let r = env.step(&a)?;
            ep.observations.extend_from_slice(&r.observation.pixels);
            ep.actions.extend_from_slice(&a);
            ep.rewards.push(r.reward);
            collected += 1;
        }
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Collects `steps_per_task` transitions for every task and assembles a
/// dataset. Deterministic in `seed`.
pub fn collect_dataset(
    tasks: &[TaskId],
    kind: PolicyKind,
    steps_per_task: usize,
    seed: u64,
    env_cfg: EnvConfig,
) -> Result<Dataset> {
    if tasks.is_empty() {
        return Err(CtError::Config("no tasks to collect".into()));
    }
    let mut episodes = Vec::new();
    for &task in tasks {
        episodes.extend(collect_task(task, kind, steps_per_task, seed, env_cfg)?);
    }
    let s = env_cfg.image_size;
    Dataset::from_episodes(kind.into(), episodes, [s, s, 3], seed, true)
}

impl Dataset {
    /// Builds the manifest from episodes, which are reordered to group
    /// by task in first-appearance order (stable within a task).
    pub fn from_episodes(
        kind: DatasetKind,
        episodes: Vec<Episode>,
        image_shape: [usize; 3],
        seed: u64,
        has_rewards: bool,
    ) -> Result<Self> {
        let mut order: Vec<TaskId> = Vec::new();
        for ep in &episodes {
            if !order.contains(&ep.task) {
                order.push(ep.task);
            }
        }
        let mut grouped = Vec::with_capacity(episodes.len());
        let mut tasks = Vec::new();
        for &task in &order {
            let mine: Vec<Episode> = episodes.iter().filter(|e| e.task == task).cloned().collect();
            tasks.push(TaskEntry {
                task_id: task,
                episodes: mine.len(),
                steps: mine.iter().map(Episode::len).sum(),
                action_dim: task.action_dim(),
            });
            grouped.extend(mine);
        }
        let ds = Dataset {
            manifest: Manifest {
                format_version: MANIFEST_FORMAT_VERSION,
                kind,
                tasks,
                image_shape,
                seed,
                has_rewards,
            },
            episodes: grouped,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn has_rewards(&self) -> bool {
        self.manifest.has_rewards
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.manifest.tasks.iter().map(|t| t.task_id).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn max_action_dim(&self) -> usize {
        self.manifest.tasks.iter().map(|t| t.action_dim).max().unwrap_or(0)
    }

    /// Indices of the episodes belonging to `task`.
    pub fn episodes_of(&self, task: TaskId) -> Vec<usize> {
        (0..self.episodes.len())
            .filter(|&i| self.episodes[i].task == task)
            .collect()
    }

    /// Copy with every reward zeroed and the manifest flagged reward-free.
    pub fn without_rewards(&self) -> Self {
        let mut out = self.clone();
        out.manifest.has_rewards = false;
        for ep in &mut out.episodes {
            ep.rewards.iter_mut().for_each(|r| *r = 0.0);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(CtError::FormatVersion {
                found: m.format_version,
                supported: MANIFEST_FORMAT_VERSION,
            });
        }
        let mut cursor = 0usize;
        for entry in &m.tasks {
            if entry.action_dim != entry.task_id.action_dim() {
                return Err(CtError::Integrity(format!(
                    "manifest action_dim {} for {}",
                    entry.action_dim, entry.task_id
                )));
            }
            let end = cursor + entry.episodes;
            if end > self.episodes.len() {
                return Err(CtError::Integrity(format!(
                    "manifest lists {} episodes for {}, files run out",
                    entry.episodes, entry.task_id
                )));
            }
            let eps = &self.episodes[cursor..end];
            if eps.iter().any(|e| e.task != entry.task_id) {
                return Err(CtError::Integrity("episodes not grouped by task".into()));
            }
            let steps: usize = eps.iter().map(Episode::len).sum();
            if steps != entry.steps {
                return Err(CtError::Integrity(format!(
                    "manifest steps {} for {} but episodes hold {steps}",
                    entry.steps, entry.task_id
                )));
            }
            cursor = end;
        }
        if cursor != self.episodes.len() {
            return Err(CtError::Integrity(format!(
                "manifest accounts for {cursor} episodes, found {}",
                self.episodes.len()
            )));
        }
        for ep in &self.episodes {
            ep.validate()?;
            if [ep.height, ep.width, ep.channels] != m.image_shape {
                return Err(CtError::Integrity("episode image shape differs from manifest".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let ep_dir = dir.join(EPISODE_DIR);
        fs::create_dir_all(&ep_dir).map_err(|e| CtError::storage(&ep_dir, e))?;
        for (i, ep) in self.episodes.iter().enumerate() {
            let p = ep_dir.join(format!("ep_{i}.bin"));
            fs::write(&p, ep.encode()).map_err(|e| CtError::storage(&p, e))?;
        }
        let p = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&p, json).map_err(|e| CtError::storage(&p, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| CtError::storage(&p, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        // Check the version before the strict parse so newer manifests
        // report a version error rather than a schema error.
        if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
            if v as u32 != MANIFEST_FORMAT_VERSION {
                return Err(CtError::FormatVersion {
                    found: v as u32,
                    supported: MANIFEST_FORMAT_VERSION,
                });
            }
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let ep_dir = dir.join(EPISODE_DIR);
        let on_disk = fs::read_dir(&ep_dir)
            .map_err(|e| CtError::storage(&ep_dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| {
                let name = e.file_name();
                let name = name.to_string_lossy();
                name.starts_with("ep_") && name.ends_with(".bin")
            })
            .count();
        let listed: usize = manifest.tasks.iter().map(|t| t.episodes).sum();
        if on_disk != listed {
            return Err(CtError::Integrity(format!(
                "manifest lists {listed} episodes, directory holds {on_disk}"
            )));
        }
        let mut episodes = Vec::with_capacity(listed);
        for entry in &manifest.tasks {
            for _ in 0..entry.episodes {
                let p = ep_dir.join(format!("ep_{}.bin", episodes.len()));
                let bytes = fs::read(&p).map_err(|e| CtError::storage(&p, e))?;
                episodes.push(Episode::decode(entry.task_id, &bytes)?);
            }
        }
        let ds = Dataset { manifest, episodes };
        ds.validate()?;
        Ok(ds)
    }

    /// SHA-256 over the manifest and every episode encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        for ep in &self.episodes {
            h.update(ep.encode());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Keeps a fraction of each task's episodes, either those with the
/// highest return (ties by ascending index) or a seeded uniform sample.
pub fn derive_subset(ds: &Dataset, rule: SubsetRule, seed: u64) -> Result<Dataset> {
    let f = rule.fraction();
    if !(f > 0.0 && f <= 1.0) {
        return Err(CtError::Config(format!("subset fraction {f} outside (0, 1]")));
    }
    if !ds.has_rewards() {
        return Err(CtError::Config("subset selection needs rewards".into()));
    }
    let mut kept = Vec::new();
    for (ti, task) in ds.tasks().into_iter().enumerate() {
        let idx = ds.episodes_of(task);
        let count = rule.keep_count(idx.len());
        let mut chosen: Vec<usize> = match rule {
            SubsetRule::TopReturnFraction(_) => {
                let mut by_return: Vec<(usize, f64)> = idx
                    .iter()
                    .map(|&i| (i, ds.episodes[i].total_return()))
                    .collect();
                by_return.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                by_return.into_iter().take(count).map(|(i, _)| i).collect()
            }
            SubsetRule::UniformFraction(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ti as u64));
                index::sample(&mut rng, idx.len(), count)
                    .into_iter()
                    .map(|j| idx[j])
                    .collect()
            }
        };
        chosen.sort_unstable();
        kept.extend(chosen.into_iter().map(|i| ds.episodes[i].clone()));
    }
    if kept.is_empty() {
        return Err(CtError::EmptySubset);
    }
    let kind = match rule {
        SubsetRule::TopReturnFraction(_) => DatasetKind::Expert,
        SubsetRule::UniformFraction(_) => DatasetKind::SampledReplay,
    };
    Dataset::from_episodes(kind, kept, ds.manifest.image_shape, seed, ds.has_rewards())
}
