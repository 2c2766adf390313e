//! Modality encoders producing `d`-dimensional tokens.
//!
//! Each encoder has a frozen base and a trainable projection:
//!
//! * language: hashed bag-of-words table (frozen) → MLP projection
//! * observation: tanh random patch features (frozen) → global MLP on the
//!   pooled features, plus a perceiver resampler and MLP for `M` local tokens
//! * keypoints: per-node embedding with mean pooling → MLP
//! * robot state: separate pose and gripper MLPs, concatenated and projected
//!
//! Frozen base features depend only on the input, so they are computed once
//! per frame outside the tape ([`FrameFeatures`]).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{
    Activation, Graph, Linear, Mlp, ParamId, ParamStore, PerceiverResampler, Tensor, Var,
};

pub const POSE_DIMS: usize = 6;
pub const STATE_DIMS: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageInstruction {
    pub text: String,
    pub template_id: String,
    pub slots: BTreeMap<String, String>,
}

impl LanguageInstruction {
    pub fn new(text: impl Into<String>, template_id: impl Into<String>) -> Self {
        Self { text: text.into(), template_id: template_id.into(), slots: BTreeMap::new() }
    }

    pub fn with_slot(mut self, key: &str, value: &str) -> Self {
        self.slots.insert(key.to_string(), value.to_string());
        self
    }
}

/// Lowercased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Top-down scene render, row-major `[height][width][channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::Input(format!(
                "observation {}x{}x{} has {} values",
                self.width,
                self.height,
                self.channels,
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("observation value {} at {i} outside [0,1]", self.data[i])));
        }
        Ok(())
    }
}

/// `K` keypoints with `(x, y, z)` image-frame coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub coords: Vec<[f64; 3]>,
}

impl KeypointFrame {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.coords.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!("keypoint {i} has a non-finite coordinate")));
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    /// Mean of the five fingertips (4, 8, 12, 16, 20).
    pub fn fingertip_centroid(&self) -> [f64; 3] {
        let tips = [4, 8, 12, 16, 20];
        let mut c = [0.0; 3];
        for &t in &tips {
            for a in 0..3 {
                c[a] += self.coords[t][a] / tips.len() as f64;
            }
        }
        c
    }
}

/// End-effector pose (`x, y, heading, j1, j2, j3`) and a binary gripper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: [f64; POSE_DIMS],
    pub gripper: f64,
}

impl RobotState {
    pub fn validate(&self) -> Result<()> {
        if self.gripper != 0.0 && self.gripper != 1.0 {
            return Err(Error::Input(format!("gripper state {} is not in {{0, 1}}", self.gripper)));
        }
        if !self.pose.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("robot pose has a non-finite component".into()));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> [f64; STATE_DIMS] {
        let p = self.pose;
        [p[0], p[1], p[2], p[3], p[4], p[5], self.gripper]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { pose: [v[0], v[1], v[2], v[3], v[4], v[5]], gripper: v[6] }
    }
}

/// Frozen observation features for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// Mean of the patch features.
    pub pooled: Vec<f64>,
    /// `[V, d_patch]`.
    pub patches: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoders {
    lang_table: ParamId,
    lang_proj: Mlp,
    patch_w: ParamId,
    patch_pos: ParamId,
    global_proj: Mlp,
    resampler: PerceiverResampler,
    local_proj: Mlp,
    kp_coord: Linear,
    kp_node_emb: ParamId,
    kp_proj: Mlp,
    pose_mlp: Mlp,
    grip_mlp: Mlp,
    state_proj: Linear,
}

pub const LANG_BASE: &str = "lang_base";
pub const LANG_PROJ: &str = "lang_proj";
pub const OBS_BASE: &str = "obs_base";
pub const OBS_PROJ: &str = "obs_proj";
pub const KP_ENCODER: &str = "kp_encoder";
pub const STATE_ENCODER: &str = "state_encoder";

impl Encoders {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        use Activation::*;
        let d = cfg.d_model;
        let lang_table = store.add_normal(LANG_BASE, "lang.table", &[cfg.lang_buckets, cfg.d_lang], 1.0, rng);
        let lang_proj = Mlp::new(store, LANG_PROJ, "lang.proj", &[cfg.d_lang, d, d], &[Tanh, Identity], rng);

        let patch_in = cfg.patch * cfg.patch * cfg.obs_channels;
        let patch_w = store.add_normal(OBS_BASE, "obs.patch_w", &[patch_in, cfg.d_patch], 2.0 / (patch_in as f64).sqrt(), rng);
        let patch_pos = store.add_normal(OBS_BASE, "obs.patch_pos", &[cfg.n_patches(), cfg.d_patch], 1.0, rng);
        let global_proj = Mlp::new(store, OBS_PROJ, "obs.global", &[cfg.d_patch, d, d], &[Tanh, Identity], rng);
        let resampler = PerceiverResampler::new(store, OBS_PROJ, "obs.resampler", cfg.d_patch, cfg.n_latents, rng);
        let local_proj = Mlp::new(store, OBS_PROJ, "obs.local", &[cfg.d_patch, d, d], &[Tanh, Identity], rng);

        let kp_coord = Linear::new(store, KP_ENCODER, "kp.coord", 3, cfg.d_kp, 2.0, rng);
        let kp_node_emb = store.add_normal(KP_ENCODER, "kp.node_emb", &[cfg.keypoints, cfg.d_kp], 1.0, rng);
        let kp_proj = Mlp::new(store, KP_ENCODER, "kp.proj", &[cfg.d_kp, d, d], &[Tanh, Identity], rng);

        let pose_mlp = Mlp::new(store, STATE_ENCODER, "state.pose", &[POSE_DIMS, 32], &[Tanh], rng);
        let grip_mlp = Mlp::new(store, STATE_ENCODER, "state.grip", &[1, 8], &[Tanh], rng);
        let state_proj = Linear::new(store, STATE_ENCODER, "state.proj", 40, d, 1.0, rng);
        Self {
            lang_table,
            lang_proj,
            patch_w,
            patch_pos,
            global_proj,
            resampler,
            local_proj,
            kp_coord,
            kp_node_emb,
            kp_proj,
            pose_mlp,
            grip_mlp,
            state_proj,
        }
    }

    /// Frozen bag-of-words base embedding.
    pub fn language_base(&self, store: &ParamStore, text: &str) -> Result<Vec<f64>> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::Input("language instruction is empty".into()));
        }
        let table = store.get(self.lang_table);
        let buckets = table.rows() as u64;
        let mut out = vec![0.0; table.cols()];
        for w in &words {
            let row = table.row_slice((fnv1a(w) % buckets) as usize);
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / words.len() as f64;
            }
        }
        Ok(out)
    }

    /// Frozen patch features: `tanh(flatten(patch)·W + pos)` per patch.
    pub fn observation_base(&self, store: &ParamStore, cfg: &ModelConfig, obs: &Observation) -> Result<FrameFeatures> {
        if obs.width != cfg.obs_width || obs.height != cfg.obs_height || obs.channels != cfg.obs_channels {
            return Err(Error::Input(format!(
                "observation {}x{}x{} does not match configured {}x{}x{}",
                obs.width, obs.height, obs.channels, cfg.obs_width, cfg.obs_height, cfg.obs_channels
            )));
        }
        obs.validate()?;
        let p = cfg.patch;
        let (pw, ph) = (obs.width / p, obs.height / p);
        let patch_in = p * p * obs.channels;
        let mut flat = vec![0.0; pw * ph * patch_in];
        for py in 0..ph {
            for px in 0..pw {
                let dst = &mut flat[(py * pw + px) * patch_in..(py * pw + px + 1) * patch_in];
                for r in 0..p {
                    let row = py * p + r;
                    let src = (row * obs.width + px * p) * obs.channels;
                    dst[r * p * obs.channels..(r + 1) * p * obs.channels]
                        .copy_from_slice(&obs.data[src..src + p * obs.channels]);
                }
            }
        }
        let patches = Tensor::matrix(pw * ph, patch_in, flat);
        let mut feats = patches.matmul(store.get(self.patch_w))?;
        let pos = store.get(self.patch_pos);
        for (v, q) in feats.data_mut().iter_mut().zip(pos.data()) {
            *v = (*v + q).tanh();
        }
        let dp = feats.cols();
        let mut pooled = vec![0.0; dp];
        for r in 0..feats.rows() {
            for (o, v) in pooled.iter_mut().zip(feats.row_slice(r)) {
                *o += v;
            }
        }
        let n = feats.rows() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        Ok(FrameFeatures { pooled, patches: feats })
    }

    pub fn language_token(&self, store: &ParamStore, g: &mut Graph, base: &[f64]) -> Result<Var> {
        let x = g.constant(Tensor::row(base.to_vec()));
        self.lang_proj.forward(store, g, x)
    }

    /// Global `[T, d]` and local `[T·M, d]` tokens for `T` frames.
    pub fn observation_tokens(&self, store: &ParamStore, g: &mut Graph, frames: &[FrameFeatures]) -> Result<(Var, Var)> {
        let first = frames.first().ok_or_else(|| Error::Empty("no frames to encode".into()))?;
        let (v, dp) = (first.patches.rows(), first.patches.cols());
        let mut pooled = Vec::with_capacity(frames.len() * dp);
        let mut patches = Vec::with_capacity(frames.len() * v * dp);
        for f in frames {
            pooled.extend_from_slice(&f.pooled);
            patches.extend_from_slice(f.patches.data());
        }
        let pooled = g.constant(Tensor::matrix(frames.len(), dp, pooled));
        let global = self.global_proj.forward(store, g, pooled)?;

        let patches = g.constant(Tensor::matrix(frames.len() * v, dp, patches));
        let r = &self.resampler;
        let lat = g.param(store, r.latents);
        let q = r.q.forward(store, g, lat)?;
        let k = r.k.forward(store, g, patches)?;
        let val = r.v.forward(store, g, patches)?;
        let mut per_frame = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let kt = g.slice_rows(k, t * v, v)?;
            let vt = g.slice_rows(val, t * v, v)?;
            per_frame.push(g.attention(q, kt, vt, 1, false)?);
        }
        let resampled = g.concat_rows(&per_frame)?;
        let local = self.local_proj.forward(store, g, resampled)?;
        Ok((global, local))
    }

    /// One `[T, d]` token per keypoint frame.
    pub fn keypoint_tokens(&self, store: &ParamStore, g: &mut Graph, frames: &[KeypointFrame]) -> Result<Var> {
        let k = store.get(self.kp_node_emb).rows();
        let n = frames.len();
        if n == 0 {
            return Err(Error::Empty("no keypoint frames to encode".into()));
        }
        let mut flat = Vec::with_capacity(n * k * 3);
        for f in frames {
            if f.coords.len() != k {
                return Err(Error::Input(format!("expected {k} keypoints, got {}", f.coords.len())));
            }
            flat.extend(f.flat());
        }
        let coords = g.constant(Tensor::matrix(n * k, 3, flat));
        let h = self.kp_coord.forward(store, g, coords)?;
        let emb = g.param(store, self.kp_node_emb);
        let tiled: Vec<usize> = (0..n * k).map(|r| r % k).collect();
        let emb = g.gather_rows(emb, &tiled)?;
        let h = g.add(h, emb)?;
        let h = g.tanh(h);
        let mut pool = vec![0.0; n * n * k];
        for t in 0..n {
            pool[t * n * k + t * k..t * n * k + (t + 1) * k].fill(1.0 / k as f64);
        }
        let pool = g.constant(Tensor::matrix(n, n * k, pool));
        let pooled = g.matmul(pool, h)?;
        self.kp_proj.forward(store, g, pooled)
    }

    /// One `[T, d]` token per robot state.
    pub fn state_tokens(&self, store: &ParamStore, g: &mut Graph, states: &[RobotState]) -> Result<Var> {
        if states.is_empty() {
            return Err(Error::Empty("no robot states to encode".into()));
        }
        let n = states.len();
        let pose = g.constant(Tensor::matrix(n, POSE_DIMS, states.iter().flat_map(|s| s.pose).collect()));
        let grip = g.constant(Tensor::matrix(n, 1, states.iter().map(|s| s.gripper).collect()));
        let e = self.pose_mlp.forward(store, g, pose)?;
        let gr = self.grip_mlp.forward(store, g, grip)?;
        let cat = g.concat_cols(&[e, gr])?;
        self.state_proj.forward(store, g, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn model() -> Model {
        Model::new(ModelConfig::default(), 3).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("Pick up, the RED block!"), vec!["pick", "up", "the", "red", "block"]);
    }

    #[test]
    fn language_embedding_is_deterministic_and_discriminative() {
        let m = model();
        let red = LanguageInstruction::new("pick up the red block", "pick_up");
        let blue = LanguageInstruction::new("pick up the blue block", "pick_up");
        let a = m.encode_language(&red).unwrap();
        let b = m.encode_language(&red).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, m.encode_language(&blue).unwrap());
        assert!((cosine(a.data(), a.data()) - 1.0).abs() < 1e-12);
        assert!(m.encode_language(&LanguageInstruction::new("  ,", "x")).is_err());
    }

    #[test]
    fn observation_tokens_have_expected_shapes() {
        let m = model();
        let cfg = m.cfg.clone();
        let obs = Observation::zeros(cfg.obs_width, cfg.obs_height, cfg.obs_channels);
        let (g, l) = m.encode_observation(&obs).unwrap();
        assert_eq!(g.shape(), &[1, cfg.d_model]);
        assert_eq!(l.shape(), &[cfg.n_latents, cfg.d_model]);
        assert!(g.is_finite() && l.is_finite());

        let mut other = obs.clone();
        other.data[0] = 1.0; // top-left patch
        let (g2, _) = m.encode_observation(&other).unwrap();
        assert_ne!(g, g2);
        assert!(m.encode_observation(&Observation::zeros(16, 16, 3)).is_err());
    }

    #[test]
    fn sixteen_patches_resample_to_four_tokens() {
        let cfg = ModelConfig { n_latents: 4, ..ModelConfig::default() };
        assert_eq!(cfg.n_patches(), 16);
        let m = Model::new(cfg.clone(), 1).unwrap();
        let obs = Observation::zeros(cfg.obs_width, cfg.obs_height, cfg.obs_channels);
        assert_eq!(m.encode_observation(&obs).unwrap().1.rows(), 4);
    }

    #[test]
    fn keypoint_encoder_is_sensitive_and_checks_finiteness() {
        let m = model();
        let zero = KeypointFrame { coords: vec![[0.0; 3]; 21] };
        let t = m.encode_keypoints(&zero).unwrap();
        assert_eq!(t.shape(), &[1, m.cfg.d_model]);
        assert!(t.is_finite());
        assert_eq!(t, m.encode_keypoints(&zero.clone()).unwrap());
        let mut moved = zero.clone();
        moved.coords[8][0] = 0.2;
        assert_ne!(t, m.encode_keypoints(&moved).unwrap());
        let mut bad = zero;
        bad.coords[5][1] = f64::NAN;
        let err = m.encode_keypoints(&bad).unwrap_err();
        assert!(err.to_string().contains("keypoint 5"), "{err}");
    }

    #[test]
    fn state_encoder_checks_gripper() {
        let m = model();
        let open = RobotState { pose: [0.0; 6], gripper: 0.0 };
        let closed = RobotState { gripper: 1.0, ..open };
        let a = m.encode_state(&open).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, m.encode_state(&open).unwrap());
        assert_ne!(a, m.encode_state(&closed).unwrap());
        assert!(m.encode_state(&RobotState { gripper: 0.5, ..open }).is_err());
    }
}
