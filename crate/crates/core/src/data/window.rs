use rand::Rng;

use super::dataset::Dataset;
use crate::env::TaskId;
use crate::error::{CtError, Result};

/// Suffix sums of `rewards`, accumulated in f64 and stored as f32.
pub fn compute_returns_to_go(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f64;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i] as f64;
        out[i] = acc as f32;
    }
    out
}

/// A batch of contiguous length-`window` slices of episodes.
///
/// Image arrays are `[B, T, H, W, C]` bytes, actions are zero-padded to
/// `a_max` and `next_obs[b, i]` is the frame after `obs[b, i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub a_max: usize,
    pub obs: Vec<u8>,
    pub next_obs: Vec<u8>,
    pub actions_padded: Vec<f32>,
    pub action_valid_dims: Vec<usize>,
    /// `[B, T]`, present iff requested and the dataset has rewards.
    pub rtg: Option<Vec<f32>>,
    pub task_ids: Vec<TaskId>,
    pub episode_index: Vec<usize>,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn obs_frame(&self, b: usize, i: usize) -> &[u8] {
        let n = self.frame_len();
        let o = (b * self.window + i) * n;
        &self.obs[o..o + n]
    }

    pub fn next_obs_frame(&self, b: usize, i: usize) -> &[u8] {
        let n = self.frame_len();
        let o = (b * self.window + i) * n;
        &self.next_obs[o..o + n]
    }

    pub fn action(&self, b: usize, i: usize) -> &[f32] {
        let o = (b * self.window + i) * self.a_max;
        &self.actions_padded[o..o + self.a_max]
    }

    /// Copies the given `(episode, start)` windows out of `ds`.
    pub fn gather(
        ds: &Dataset,
        picks: &[(usize, usize)],
        window: usize,
        a_max: usize,
        with_rtg: bool,
    ) -> Result<Self> {
        let [h, w, c] = ds.manifest.image_shape;
        let frame = h * w * c;
        let b = picks.len();
        let want_rtg = with_rtg && ds.has_rewards();
        if with_rtg && !ds.has_rewards() {
            return Err(CtError::Config("return-to-go requested on a reward-free dataset".into()));
        }
        let mut out = WindowBatch {
            batch: b,
            window,
            height: h,
            width: w,
            channels: c,
            a_max,
            obs: Vec::with_capacity(b * window * frame),
            next_obs: Vec::with_capacity(b * window * frame),
            actions_padded: vec![0.0; b * window * a_max],
            action_valid_dims: Vec::with_capacity(b),
            rtg: want_rtg.then(|| Vec::with_capacity(b * window)),
            task_ids: Vec::with_capacity(b),
            episode_index: Vec::with_capacity(b),
            starts: Vec::with_capacity(b),
        };
        for (bi, &(ei, start)) in picks.iter().enumerate() {
            let ep = &ds.episodes[ei];
            if start + window > ep.len() {
                return Err(CtError::Index {
                    index: start + window,
                    bound: ep.len() + 1,
                });
            }
            if ep.action_dim > a_max {
                return Err(CtError::Shape(format!(
                    "action dim {} exceeds a_max {a_max}",
                    ep.action_dim
                )));
            }
            out.obs
                .extend_from_slice(&ep.observations[start * frame..(start + window) * frame]);
            out.next_obs
                .extend_from_slice(&ep.observations[(start + 1) * frame..(start + window + 1) * frame]);
            for i in 0..window {
                let dst = (bi * window + i) * a_max;
                out.actions_padded[dst..dst + ep.action_dim].copy_from_slice(ep.action(start + i));
            }
            if let Some(rtg) = out.rtg.as_mut() {
                let full = compute_returns_to_go(&ep.rewards);
                rtg.extend_from_slice(&full[start..start + window]);
            }
            out.action_valid_dims.push(ep.action_dim);
            out.task_ids.push(ep.task);
            out.episode_index.push(ei);
            out.starts.push(start);
        }
        Ok(out)
    }
}

/// Uniform sampler over every valid window of a set of episodes.
///
/// An episode is drawn with weight equal to its number of valid starts
/// `len - T + 1`, then a start uniformly, so each window is equally
/// likely. Episodes shorter than `T` are never drawn.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    window: usize,
    episodes: Vec<usize>,
    cumulative: Vec<u64>,
}

impl WindowSampler {
    pub fn new(ds: &Dataset, episodes: &[usize], window: usize) -> Result<Self> {
        let mut eligible = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0u64;
        for &ei in episodes {
            let len = ds.episodes[ei].len();
            if len >= window && window > 0 {
                total += (len - window + 1) as u64;
                eligible.push(ei);
                cumulative.push(total);
            }
        }
        if eligible.is_empty() {
            return Err(CtError::NoEligibleEpisode { window });
        }
        Ok(Self {
            window,
            episodes: eligible,
            cumulative,
        })
    }

    pub fn for_dataset(ds: &Dataset, window: usize) -> Result<Self> {
        let all: Vec<usize> = (0..ds.episodes.len()).collect();
        Self::new(ds, &all, window)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_windows(&self) -> u64 {
        *self.cumulative.last().unwrap()
    }

    /// Maps a flat window index in `[0, num_windows)` to `(episode, start)`.
    pub fn locate(&self, flat: u64) -> (usize, usize) {
        let k = self.cumulative.partition_point(|&c| c <= flat);
        let before = if k == 0 { 0 } else { self.cumulative[k - 1] };
        (self.episodes[k], (flat - before) as usize)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        self.locate(rng.random_range(0..self.num_windows()))
    }
}

/// Draws one window from the whole dataset.
pub fn sample_window<R: Rng + ?Sized>(
    ds: &Dataset,
    window: usize,
    with_rtg: bool,
    rng: &mut R,
) -> Result<WindowBatch> {
    let sampler = WindowSampler::for_dataset(ds, window)?;
    let pick = sampler.draw(rng);
    WindowBatch::gather(ds, &[pick], window, ds.max_action_dim(), with_rtg)
}

/// Per-task window samplers mixed with fixed proportions. Every batch
/// element independently picks its task first.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    samplers: Vec<(TaskId, WindowSampler)>,
    cumulative_weight: Vec<f64>,
}

impl MixtureSampler {
    /// `proportions` defaults to equal weights over the dataset's tasks.
    pub fn new(ds: &Dataset, window: usize, proportions: Option<&[f64]>) -> Result<Self> {
        let tasks = ds.tasks();
        let weights: Vec<f64> = match proportions {
            Some(p) => {
                if p.len() != tasks.len() || p.iter().any(|&w| !(w >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                    return Err(CtError::Config(format!(
                        "need {} nonnegative task proportions, got {p:?}",
                        tasks.len()
                    )));
                }
                p.to_vec()
            }
            None => vec![1.0; tasks.len()],
        };
        let mut samplers = Vec::new();
        let mut cumulative_weight = Vec::new();
        let mut acc = 0.0;
        for (task, w) in tasks.into_iter().zip(weights) {
            match WindowSampler::new(ds, &ds.episodes_of(task), window) {
                Ok(s) if w > 0.0 => {
                    acc += w;
                    samplers.push((task, s));
                    cumulative_weight.push(acc);
                }
                Ok(_) | Err(CtError::NoEligibleEpisode { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if samplers.is_empty() {
            return Err(CtError::NoEligibleEpisode { window });
        }
        Ok(Self {
            samplers,
            cumulative_weight,
        })
    }

    pub fn num_windows(&self) -> u64 {
        self.samplers.iter().map(|(_, s)| s.num_windows()).sum()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let total = *self.cumulative_weight.last().unwrap();
        let u = rng.random::<f64>() * total;
        let k = self
            .cumulative_weight
            .partition_point(|&c| c <= u)
            .min(self.samplers.len() - 1);
        self.samplers[k].1.draw(rng)
    }

    pub fn draw_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
        (0..batch).map(|_| self.draw(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::dataset::DatasetKind;
    use super::super::episode::tests::synthetic_episode;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(lens: &[usize]) -> Dataset {
        let eps = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| synthetic_episode(TaskId::PendulumSwingup, l, 2, (i * 50) as u8))
            .collect();
        Dataset::from_episodes(DatasetKind::Random, eps, [2, 2, 3], 0, true).unwrap()
    }

    fn brute_rtg(r: &[f32]) -> Vec<f32> {
        (0..r.len())
            .map(|i| {
                let mut s = 0.0f64;
                for &x in &r[i..] {
                    s += x as f64;
                }
                s as f32
            })
            .collect()
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_returns_to_go(&[1.0, 1.0, 1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(compute_returns_to_go(&[0.0; 5]), vec![0.0; 5]);
        assert!(compute_returns_to_go(&[]).is_empty());
    }

    #[test]
    fn rtg_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f32> = (0..100).map(|_| rng.random::<f32>()).collect();
        assert_eq!(compute_returns_to_go(&r), brute_rtg(&r));
    }

    #[test]
    fn window_indices_line_up() {
        let ds = dataset(&[200]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let w = sample_window(&ds, 30, true, &mut rng).unwrap();
            let start = w.starts[0];
            assert!(start <= 170);
            let ep = &ds.episodes[w.episode_index[0]];
            for i in 0..30 {
                assert_eq!(w.obs_frame(0, i), ep.frame(start + i));
                assert_eq!(w.next_obs_frame(0, i), ep.frame(start + i + 1));
                assert_eq!(&w.action(0, i)[..1], ep.action(start + i));
            }
            let rtg = w.rtg.as_ref().unwrap();
            let full = compute_returns_to_go(&ep.rewards);
            assert_eq!(&rtg[..], &full[start..start + 30]);
        }
    }

    #[test]
    fn full_length_window_starts_at_zero() {
        let ds = dataset(&[12]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_window(&ds, 12, false, &mut rng).unwrap().starts[0], 0);
        }
    }

    #[test]
    fn short_episodes_are_skipped() {
        let ds = dataset(&[5, 40, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert_eq!(sample_window(&ds, 10, false, &mut rng).unwrap().episode_index[0], 1);
        }
        assert!(matches!(
            sample_window(&dataset(&[5]), 10, false, &mut rng),
            Err(CtError::NoEligibleEpisode { window: 10 })
        ));
    }

    #[test]
    fn padding_is_zero() {
        let ds = dataset(&[20]);
        let picks = [(0, 3), (0, 7)];
        let w = WindowBatch::gather(&ds, &picks, 5, 4, false).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                assert!(w.action(b, i)[w.action_valid_dims[b]..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn rtg_on_reward_free_dataset_errors() {
        let ds = dataset(&[20]).without_rewards();
        assert!(WindowBatch::gather(&ds, &[(0, 0)], 5, 1, true).is_err());
    }

    #[test]
    fn start_histogram_is_uniform() {
        // Two episodes with 6 and 3 valid starts: all 9 windows equally likely.
        let ds = dataset(&[10, 7]);
        let sampler = WindowSampler::for_dataset(&ds, 5).unwrap();
        assert_eq!(sampler.num_windows(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut counts = [0u64; 9];
        for _ in 0..n {
            let (e, s) = sampler.draw(&mut rng);
            counts[if e == 0 { s } else { 6 + s }] += 1;
        }
        let expected = n as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 8 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 26.12, "chi2 = {chi2}, counts {counts:?}");
    }
}
