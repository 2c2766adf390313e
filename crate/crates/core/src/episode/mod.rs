//! Episodes, the synthetic tabletop world and its scripted generators.

pub mod arm;
mod file;
pub mod generate;
pub mod hand;
pub mod task;
pub mod world;

use serde::{Deserialize, Serialize};

pub use file::{load_episodes, save_episodes, EPISODE_FORMAT_VERSION};
pub use generate::{generate_human_episode, generate_robot_episode};
pub use task::{TaskKind, TaskSpec};
pub use world::{Palette, World};

use crate::encoders::{KeypointFrame, LanguageInstruction, Observation, RobotState, STATE_DIMS};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanEpisode {
    pub episode_id: String,
    pub instruction: LanguageInstruction,
    pub frames: Vec<(Observation, KeypointFrame)>,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotEpisode {
    pub episode_id: String,
    pub instruction: LanguageInstruction,
    pub frames: Vec<(Observation, RobotState)>,
    pub fps: f64,
}

impl HumanEpisode {
    pub fn observations(&self) -> Vec<&Observation> {
        self.frames.iter().map(|f| &f.0).collect()
    }

    pub fn keypoints(&self) -> Vec<KeypointFrame> {
        self.frames.iter().map(|f| f.1.clone()).collect()
    }
}

impl RobotEpisode {
    pub fn observations(&self) -> Vec<&Observation> {
        self.frames.iter().map(|f| &f.0).collect()
    }

    pub fn states(&self) -> Vec<RobotState> {
        self.frames.iter().map(|f| f.1).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Episode {
    Human(HumanEpisode),
    Robot(RobotEpisode),
}

impl Episode {
    pub fn id(&self) -> &str {
        match self {
            Episode::Human(e) => &e.episode_id,
            Episode::Robot(e) => &e.episode_id,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Episode::Human(e) => e.frames.len(),
            Episode::Robot(e) => e.frames.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `s_next - s_t` over the six pose dimensions and the gripper.
pub fn compute_action(s: &RobotState, next: &RobotState) -> [f64; STATE_DIMS] {
    let (a, b) = (s.to_vec(), next.to_vec());
    std::array::from_fn(|i| b[i] - a[i])
}

/// Frame indices kept when resampling `n` frames from `native` to `target` fps.
pub fn subsample_indices(n: usize, native: f64, target: f64) -> Result<Vec<usize>> {
    if !(target > 0.0 && target <= native) {
        return Err(Error::Input(format!("target rate {target} must be in (0, {native}]")));
    }
    let stride = native / target;
    let idx: Vec<usize> = (0..)
        .map(|k: usize| (k as f64 * stride + 1e-9).floor() as usize)
        .take_while(|&i| i < n)
        .collect();
    if idx.len() < 2 {
        return Err(Error::Input(format!(
            "subsampling {n} frames from {native} to {target} fps leaves {} frame(s)",
            idx.len()
        )));
    }
    Ok(idx)
}

fn pick<T: Clone>(frames: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| frames[i].clone()).collect()
}

/// Uniformly spaced subsequence keeping the first frame.
pub fn subsample_frames(ep: &Episode, target: f64) -> Result<Episode> {
    Ok(match ep {
        Episode::Human(e) => {
            let idx = subsample_indices(e.frames.len(), e.fps, target)?;
            Episode::Human(HumanEpisode { frames: pick(&e.frames, &idx), fps: target, ..e.clone() })
        }
        Episode::Robot(e) => {
            let idx = subsample_indices(e.frames.len(), e.fps, target)?;
            Episode::Robot(RobotEpisode { frames: pick(&e.frames, &idx), fps: target, ..e.clone() })
        }
    })
}

/// Seed for item `index` of stream `tag` under `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which corpus a generated episode is drawn for.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    pub palettes: Vec<Palette>,
    pub unseen_phrasing: bool,
}

fn corpus_spec(c: &CorpusSpec, tag: u64, i: usize, attempt: u64) -> (TaskSpec, u64) {
    use rand::SeedableRng;
    let s = derive_seed(c.seed, tag, (i as u64) << 8 | attempt);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
    (task::sample_spec(&mut rng, &c.palettes, c.unseen_phrasing), s)
}

pub fn human_corpus(c: &CorpusSpec) -> Result<Vec<HumanEpisode>> {
    let idx: Vec<usize> = (0..c.count).collect();
    par::map(&idx, |&i| {
        for attempt in 0..16 {
            let (spec, s) = corpus_spec(c, 1, i, attempt);
            if let Ok(mut ep) = generate_human_episode(&spec, s) {
                ep.episode_id = format!("h{:05}", i);
                return Ok(ep);
            }
        }
        Err(Error::Generation(format!("no feasible human episode for index {i}")))
    })
    .into_iter()
    .collect()
}

pub fn robot_corpus(c: &CorpusSpec) -> Result<Vec<RobotEpisode>> {
    let idx: Vec<usize> = (0..c.count).collect();
    par::map(&idx, |&i| {
        for attempt in 0..16 {
            let (spec, s) = corpus_spec(c, 2, i, attempt);
            if let Ok(mut ep) = generate_robot_episode(&spec, s) {
                ep.episode_id = format!("r{:05}", i);
                return Ok(ep);
            }
        }
        Err(Error::Generation(format!("no feasible robot episode for index {i}")))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn action_examples() {
        let s = RobotState { pose: [0.0; 6], gripper: 0.0 };
        assert_eq!(compute_action(&s, &s), [0.0; 7]);
        let n = RobotState { pose: [0.1, 0.0, 0.0, 0.0, 0.0, 0.0], gripper: 1.0 };
        assert_eq!(compute_action(&s, &n), [0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn action_reconstructs_next_state() {
        // Stored states live on a dyadic grid, where differences are exact.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let g = |r: &mut ChaCha8Rng| f64::from(r.random_range(-4096i32..4096)) / 1024.0;
            let s = RobotState { pose: std::array::from_fn(|_| g(&mut rng)), gripper: f64::from(rng.random_bool(0.5)) };
            let n = RobotState { pose: std::array::from_fn(|_| g(&mut rng)), gripper: f64::from(rng.random_bool(0.5)) };
            let a = compute_action(&s, &n);
            let sv = s.to_vec();
            let rebuilt: Vec<f64> = (0..7).map(|i| sv[i] + a[i]).collect();
            assert_eq!(rebuilt, n.to_vec());
        }
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_indices(30, 30.0, 30.0).unwrap(), (0..30).collect::<Vec<_>>());
        assert_eq!(subsample_indices(30, 30.0, 3.0).unwrap(), vec![0, 10, 20]);
        let twice: Vec<usize> = {
            let a = subsample_indices(30, 30.0, 15.0).unwrap();
            let b = subsample_indices(a.len(), 15.0, 3.0).unwrap();
            b.into_iter().map(|i| a[i]).collect()
        };
        assert_eq!(twice, vec![0, 10, 20]);
        assert!(subsample_indices(10, 30.0, 3.0).is_err());
        assert!(subsample_indices(30, 3.0, 30.0).is_err());
    }
}
