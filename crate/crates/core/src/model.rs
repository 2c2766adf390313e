//! The multimodal causal sequence model: encoders, trunk, keypoint head,
//! state head and analogical parameters, all in one [`ParamStore`].
//!
//! Token layout for an episode of `T` steps, where `x_t` is a keypoint token
//! (human) or a state token (robot):
//!
//! ```text
//! [z_l, o_1^cls, o_1^p1..pM, x_1, o_2^cls, ..., x_T]
//! ```
//!
//! The prediction for `x_t` is read from the hidden state at the `x_{t-1}`
//! slot (the language slot for `t = 1`), i.e. position `t·(M+2)` with
//! zero-based `t`. The prefix therefore holds `o_1..o_{t-1}` and
//! `x_1..x_{t-1}` but never `x_t` or `o_t`. Reading the slot after `x_T`
//! yields the forecast for the step after the episode, which is what the
//! closed-loop policy uses.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    Encoders, FrameFeatures, KeypointFrame, LanguageInstruction, Observation, RobotState, KP_ENCODER,
    LANG_BASE, LANG_PROJ, OBS_BASE, OBS_PROJ, STATE_DIMS, STATE_ENCODER,
};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{CausalTransformer, Graph, Linear, ParamId, ParamStore, Tensor, TransformerConfig, Var};

pub const TRUNK: &str = "trunk";
pub const KP_HEAD: &str = "kp_head";
pub const STATE_HEAD: &str = "state_head";
pub const ANALOGICAL: &str = "analogical";

/// Gripper, end-effector, mid-link, root.
pub const STATE_NODES: usize = 4;
const STATE_NODE_OUT: usize = 2;
/// Node readout columns → `[x, y, heading, j1, j2, j3, g]`.
///
/// Node 0 (gripper) uses its first column, node 1 (end effector) gives
/// `x, y`, node 2 (mid link) `j2, j3`, node 3 (root) `heading, j1`.
const STATE_GATHER: [usize; STATE_DIMS] = [2, 3, 6, 7, 4, 5, 0];

const ROLE_LANG: usize = 0;
const ROLE_OBS_GLOBAL: usize = 1;
const ROLE_OBS_PATCH: usize = 2;
const ROLE_KEYPOINT: usize = 3;
const ROLE_STATE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_mult: usize,
    /// Maximum number of timesteps in one sequence.
    pub context: usize,
    /// Local observation tokens per frame (`M`).
    pub n_latents: usize,
    pub lang_buckets: usize,
    pub d_lang: usize,
    pub d_patch: usize,
    pub obs_width: usize,
    pub obs_height: usize,
    pub obs_channels: usize,
    pub patch: usize,
    pub keypoints: usize,
    pub d_kp: usize,
    pub d_node: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 4,
            hidden_mult: 4,
            context: 10,
            n_latents: 4,
            lang_buckets: 512,
            d_lang: 64,
            d_patch: 64,
            obs_width: 32,
            obs_height: 32,
            obs_channels: 3,
            patch: 8,
            keypoints: 21,
            d_kp: 32,
            d_node: 16,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.obs_width / self.patch) * (self.obs_height / self.patch)
    }

    pub fn tokens_per_step(&self) -> usize {
        self.n_latents + 2
    }

    pub fn max_seq(&self) -> usize {
        1 + self.context * self.tokens_per_step()
    }

    /// Number of tokens for a `T`-step sequence.
    pub fn sequence_len(&self, steps: usize) -> usize {
        1 + steps * self.tokens_per_step()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.layers,
            self.heads,
            self.context,
            self.n_latents,
            self.lang_buckets,
            self.d_lang,
            self.d_patch,
            self.patch,
            self.keypoints,
            self.d_kp,
            self.d_node,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.obs_width.is_multiple_of(self.patch) || !self.obs_height.is_multiple_of(self.patch) || self.n_patches() == 0 {
            return Err(Error::Config(format!(
                "observation {}x{} is not divisible into {}x{} patches",
                self.obs_width, self.obs_height, self.patch, self.patch
            )));
        }
        if self.keypoints < 21 {
            return Err(Error::Config("the hand model needs 21 keypoints".into()));
        }
        self.trunk().validate()
    }

    fn trunk(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            hidden_mult: self.hidden_mult,
            max_seq: self.max_seq(),
        }
    }
}

/// Trunk-to-node projection with `tanh` node features and a per-node readout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeHead {
    proj: Linear,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
    pub nodes: usize,
    pub d_node: usize,
    pub d_out: usize,
}

impl NodeHead {
    fn new(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        d: usize,
        nodes: usize,
        d_node: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = Linear::new(store, group, &format!("{name}.proj"), d, nodes * d_node, 1.0, rng);
        let readout_w = store.add_normal(
            group,
            &format!("{name}.readout_w"),
            &[nodes, d_node * d_out],
            1.0 / (d_node as f64).sqrt(),
            rng,
        );
        let readout_b = store.add(group, &format!("{name}.readout_b"), Tensor::zeros(&[nodes, d_out]));
        Self { proj, readout_w, readout_b, nodes, d_node, d_out }
    }

    /// Node features `[n·nodes, d_node]` for hidden rows `[n, d]`.
    pub fn features(&self, store: &ParamStore, g: &mut Graph, h: Var) -> Result<Var> {
        let n = g.shape(h).0;
        let p = self.proj.forward(store, g, h)?;
        let p = g.reshape(p, n * self.nodes, self.d_node)?;
        Ok(g.tanh(p))
    }

    pub fn readout(&self, store: &ParamStore, g: &mut Graph, f: Var) -> Result<Var> {
        let w = g.param(store, self.readout_w);
        let b = g.param(store, self.readout_b);
        g.node_readout(f, w, b)
    }
}

/// Learnable map `m`, blend weight `α` and the readout for blended features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalogicalParams {
    pub m: ParamId,
    pub alpha: ParamId,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
}

/// Per-step slot contents of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Slots {
    Keypoints(Vec<KeypointFrame>),
    States(Vec<RobotState>),
}

impl Slots {
    pub fn len(&self) -> usize {
        match self {
            Slots::Keypoints(k) => k.len(),
            Slots::States(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An episode with its frozen base features precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub lang: Vec<f64>,
    pub frames: Vec<FrameFeatures>,
    pub slots: Slots,
}

impl Sequence {
    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    /// Keeps the last `n` steps.
    pub fn last_window(&self, n: usize) -> Sequence {
        let t = self.steps();
        let start = t.saturating_sub(n);
        let slots = match &self.slots {
            Slots::Keypoints(k) => Slots::Keypoints(k[start..].to_vec()),
            Slots::States(s) => Slots::States(s[start..].to_vec()),
        };
        Sequence { lang: self.lang.clone(), frames: self.frames[start..].to_vec(), slots }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc: Encoders,
    trunk: CausalTransformer,
    role_emb: ParamId,
    pos_emb: ParamId,
    pub kp_head: NodeHead,
    pub state_head: NodeHead,
    pub analogical: AnalogicalParams,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HMAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    frozen: Vec<(String, bool)>,
    tensors: Vec<(String, Vec<usize>)>,
    meta: serde_json::Value,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoders::new(&mut store, &cfg, &mut rng);
        let d = cfg.d_model;
        let role_emb = store.add_normal(TRUNK, "trunk.role_emb", &[5, d], 0.1, &mut rng);
        let pos_emb = store.add_normal(TRUNK, "trunk.pos_emb", &[cfg.max_seq(), d], 0.1, &mut rng);
        let trunk = CausalTransformer::new(&mut store, TRUNK, cfg.trunk(), &mut rng)?;
        let kp_head = NodeHead::new(&mut store, KP_HEAD, "kp_head", d, cfg.keypoints, cfg.d_node, 3, &mut rng);
        let state_head =
            NodeHead::new(&mut store, STATE_HEAD, "state_head", d, STATE_NODES, cfg.d_node, STATE_NODE_OUT, &mut rng);
        let m = store.add(
            ANALOGICAL,
            "analogical.m",
            Tensor::full(&[STATE_NODES, cfg.keypoints], 1.0 / cfg.keypoints as f64),
        );
        let alpha = store.add(ANALOGICAL, "analogical.alpha", Tensor::scalar(0.9));
        let readout_w = store.add(ANALOGICAL, "analogical.readout_w", store.get(state_head.readout_w).clone());
        let readout_b = store.add(ANALOGICAL, "analogical.readout_b", store.get(state_head.readout_b).clone());
        let analogical = AnalogicalParams { m, alpha, readout_w, readout_b };
        Ok(Self { cfg, store, enc, trunk, role_emb, pos_emb, kp_head, state_head, analogical })
    }

    /// Copies the state head's readout into the analogical readout.
    pub fn sync_analogical_readout(&mut self) {
        let w = self.store.get(self.state_head.readout_w).clone();
        let b = self.store.get(self.state_head.readout_b).clone();
        *self.store.get_mut(self.analogical.readout_w) = w;
        *self.store.get_mut(self.analogical.readout_b) = b;
    }

    pub fn encode_language(&self, l: &LanguageInstruction) -> Result<Tensor> {
        let base = self.enc.language_base(&self.store, &l.text)?;
        let mut g = Graph::inference();
        let v = self.enc.language_token(&self.store, &mut g, &base)?;
        Ok(g.value(v).clone())
    }

    pub fn encode_observation(&self, o: &Observation) -> Result<(Tensor, Tensor)> {
        let f = self.frame_features(o)?;
        let mut g = Graph::inference();
        let (cls, local) = self.enc.observation_tokens(&self.store, &mut g, std::slice::from_ref(&f))?;
        Ok((g.value(cls).clone(), g.value(local).clone()))
    }

    pub fn encode_keypoints(&self, k: &KeypointFrame) -> Result<Tensor> {
        k.validate()?;
        let mut g = Graph::inference();
        let v = self.enc.keypoint_tokens(&self.store, &mut g, std::slice::from_ref(k))?;
        Ok(g.value(v).clone())
    }

    pub fn encode_state(&self, s: &RobotState) -> Result<Tensor> {
        s.validate()?;
        let mut g = Graph::inference();
        let v = self.enc.state_tokens(&self.store, &mut g, std::slice::from_ref(s))?;
        Ok(g.value(v).clone())
    }

    pub fn frame_features(&self, o: &Observation) -> Result<FrameFeatures> {
        self.enc.observation_base(&self.store, &self.cfg, o)
    }

    pub fn language_base(&self, l: &LanguageInstruction) -> Result<Vec<f64>> {
        self.enc.language_base(&self.store, &l.text)
    }

    /// Builds a sequence, validating every slot value.
    pub fn sequence(&self, l: &LanguageInstruction, observations: &[&Observation], slots: Slots) -> Result<Sequence> {
        if observations.len() != slots.len() {
            return Err(Error::Contract(format!(
                "{} observations but {} slot values",
                observations.len(),
                slots.len()
            )));
        }
        match &slots {
            Slots::Keypoints(k) => k.iter().try_for_each(KeypointFrame::validate)?,
            Slots::States(s) => s.iter().try_for_each(RobotState::validate)?,
        }
        let lang = self.language_base(l)?;
        let frames = observations.iter().map(|o| self.frame_features(o)).collect::<Result<_>>()?;
        Ok(Sequence { lang, frames, slots })
    }

    /// Trunk hidden states at the `T + 1` prediction positions `t·(M+2)`.
    ///
    /// Row `t` (zero-based) forecasts slot `t`; row `T` forecasts the step
    /// after the sequence.
    pub fn prediction_hidden(&self, g: &mut Graph, seq: &Sequence) -> Result<Var> {
        let t = seq.steps();
        if t == 0 || seq.slots.len() != t {
            return Err(Error::Contract(format!("sequence has {t} frames and {} slots", seq.slots.len())));
        }
        let len = self.cfg.sequence_len(t);
        if len > self.cfg.max_seq() {
            return Err(Error::Capacity { len, max: self.cfg.max_seq() });
        }
        let st = &self.store;
        let m = self.cfg.n_latents;
        let lang = self.enc.language_token(st, g, &seq.lang)?;
        let (globals, locals) = self.enc.observation_tokens(st, g, &seq.frames)?;
        let (items, item_role) = match &seq.slots {
            Slots::Keypoints(k) => (self.enc.keypoint_tokens(st, g, k)?, ROLE_KEYPOINT),
            Slots::States(s) => (self.enc.state_tokens(st, g, s)?, ROLE_STATE),
        };
        let all = g.concat_rows(&[lang, globals, locals, items])?;
        // `all` rows: 0 = lang, 1..=T globals, then T·M locals, then T items.
        let (g0, l0, i0) = (1, 1 + t, 1 + t + t * m);
        let mut order = Vec::with_capacity(len);
        let mut roles = Vec::with_capacity(len);
        order.push(0);
        roles.push(ROLE_LANG);
        for s in 0..t {
            order.push(g0 + s);
            roles.push(ROLE_OBS_GLOBAL);
            for j in 0..m {
                order.push(l0 + s * m + j);
                roles.push(ROLE_OBS_PATCH);
            }
            order.push(i0 + s);
            roles.push(item_role);
        }
        let tokens = g.gather_rows(all, &order)?;
        let role = g.param(st, self.role_emb);
        let role = g.gather_rows(role, &roles)?;
        let pos = g.param(st, self.pos_emb);
        let pos = g.slice_rows(pos, 0, len)?;
        let x = g.add(tokens, role)?;
        let x = g.add(x, pos)?;
        let h = self.trunk.forward(st, g, x)?;
        let rows: Vec<usize> = (0..=t).map(|s| s * self.cfg.tokens_per_step()).collect();
        g.gather_rows(h, &rows)
    }

    /// Keypoint predictions `[n·K, 3]` and node features `[n·K, d_node]`.
    pub fn keypoint_head(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let f = self.kp_head.features(&self.store, g, h)?;
        let y = self.kp_head.readout(&self.store, g, f)?;
        Ok((y, f))
    }

    /// State predictions `[n, 7]` and node features `[n·S, d_node]`.
    pub fn state_head(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let n = g.shape(h).0;
        let f = self.state_head.features(&self.store, g, h)?;
        let y = self.state_head.readout(&self.store, g, f)?;
        let y = self.state_from_nodes(g, y, n)?;
        Ok((y, f))
    }

    /// Maps `[n·S, 2]` node outputs to `[n, 7]` states.
    pub fn state_from_nodes(&self, g: &mut Graph, y: Var, n: usize) -> Result<Var> {
        let y = g.reshape(y, n, STATE_NODES * STATE_NODE_OUT)?;
        g.gather_cols(y, &STATE_GATHER)
    }

    /// Linear readout of blended `[S, d_node]` features through the analogical readout.
    pub fn analogical_readout(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let w = g.param(&self.store, self.analogical.readout_w);
        let b = g.param(&self.store, self.analogical.readout_b);
        let y = g.node_readout(f, w, b)?;
        let n = g.shape(f).0 / STATE_NODES;
        self.state_from_nodes(g, y, n)
    }

    /// Forecast the next state after the last step of a robot sequence.
    pub fn forecast_state(&self, seq: &Sequence) -> Result<RobotState> {
        let mut g = Graph::inference();
        let window = seq.last_window(self.cfg.context);
        let h = self.prediction_hidden(&mut g, &window)?;
        let last = g.shape(h).0 - 1;
        let h = g.slice_rows(h, last, 1)?;
        let (y, _) = self.state_head(&mut g, h)?;
        Ok(RobotState::from_slice(g.value(y).data()))
    }

    pub fn set_frozen(&mut self, groups: &[&str], frozen: bool) -> Result<()> {
        for gname in groups {
            self.store.set_frozen(gname, frozen)?;
        }
        Ok(())
    }

    /// Frozen language and observation bases; everything else trainable.
    pub fn freeze_for_pretraining(&mut self) -> Result<()> {
        for g in self.store.groups().iter().map(|g| g.name.clone()).collect::<Vec<_>>() {
            self.store.set_frozen(&g, false)?;
        }
        self.set_frozen(&[LANG_BASE, OBS_BASE], true)
    }

    pub fn group_hash(&self, groups: &[&str]) -> String {
        self.store.group_hash(groups)
    }

    /// Hash of the groups that produce retrieval embeddings.
    pub fn encoder_fingerprint(&self) -> String {
        self.store.group_hash(&[LANG_BASE, LANG_PROJ, OBS_BASE, OBS_PROJ])
    }

    pub fn all_groups() -> [&'static str; 10] {
        [LANG_BASE, LANG_PROJ, OBS_BASE, OBS_PROJ, KP_ENCODER, STATE_ENCODER, TRUNK, KP_HEAD, STATE_HEAD, ANALOGICAL]
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            frozen: self.store.groups().iter().map(|g| (g.name.clone(), g.frozen)).collect(),
            tensors: self.store.entries().iter().map(|e| (e.name.clone(), e.tensor.shape().to_vec())).collect(),
            meta,
        };
        let payload: Vec<f64> = self.store.entries().iter().flat_map(|e| e.tensor.data().iter().copied()).collect();
        io::write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
    }

    /// Loads a checkpoint, returning the model and the stored metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, payload) = io::read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let header: CheckpointHeader = serde_json::from_value(header)?;
        let mut model = Model::new(header.config, 0)?;
        if header.tensors.len() != model.store.len() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                record: 0,
                msg: format!("{} tensors, expected {}", header.tensors.len(), model.store.len()),
            });
        }
        let mut offset = 0;
        for (name, shape) in &header.tensors {
            let id = model.store.id(name).ok_or_else(|| Error::Load {
                path: path.to_path_buf(),
                record: 0,
                msg: format!("unknown tensor {name}"),
            })?;
            let n: usize = shape.iter().product();
            let data = payload.get(offset..offset + n).ok_or_else(|| Error::Load {
                path: path.to_path_buf(),
                record: 0,
                msg: format!("payload ends inside tensor {name}"),
            })?;
            model.store.set(id, Tensor::new(shape.clone(), data.to_vec())?)?;
            offset += n;
        }
        if offset != payload.len() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                record: 0,
                msg: format!("{} trailing values", payload.len() - offset),
            });
        }
        for (g, frozen) in &header.frozen {
            model.store.set_frozen(g, *frozen)?;
        }
        Ok((model, header.meta))
    }
}

/// Row-major `[n·K, 3]` tensor of keypoint targets.
pub fn keypoint_targets(frames: &[KeypointFrame]) -> Tensor {
    let k = frames.first().map_or(0, |f| f.coords.len());
    Tensor::matrix(frames.len() * k, 3, frames.iter().flat_map(|f| f.flat()).collect())
}

/// `[n, 7]` tensor of state targets.
pub fn state_targets(states: &[RobotState]) -> Tensor {
    Tensor::matrix(states.len(), STATE_DIMS, states.iter().flat_map(|s| s.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 16, layers: 2, heads: 2, hidden_mult: 2, context: 4, d_lang: 8, d_patch: 8, d_kp: 8, d_node: 4, lang_buckets: 32, ..ModelConfig::default() }
    }

    pub(crate) fn robot_sequence(model: &Model, steps: usize, seed: u64) -> Sequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &model.cfg;
        let obs: Vec<Observation> = (0..steps)
            .map(|_| {
                let n = cfg.obs_width * cfg.obs_height * cfg.obs_channels;
                Observation {
                    width: cfg.obs_width,
                    height: cfg.obs_height,
                    channels: cfg.obs_channels,
                    data: (0..n).map(|_| rng.random::<f64>()).collect(),
                }
            })
            .collect();
        let states = (0..steps)
            .map(|_| RobotState {
                pose: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                gripper: f64::from(rng.random_bool(0.5)),
            })
            .collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        model
            .sequence(&LanguageInstruction::new("open the drawer", "open_drawer"), &refs, Slots::States(states))
            .unwrap()
    }

    #[test]
    fn sequence_length_counts_tokens() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.sequence_len(2), 1 + 2 * (1 + cfg.n_latents + 1));
        assert_eq!(cfg.max_seq(), cfg.sequence_len(cfg.context));
    }

    #[test]
    fn prediction_rows_ignore_their_own_slot() {
        let model = Model::new(small(), 5).unwrap();
        let seq = robot_sequence(&model, 3, 1);
        let run = |s: &Sequence| {
            let mut g = Graph::inference();
            let h = model.prediction_hidden(&mut g, s).unwrap();
            g.value(h).clone()
        };
        let base = run(&seq);
        let mut changed = seq.clone();
        if let Slots::States(s) = &mut changed.slots {
            s[2].pose[0] += 0.5;
        }
        let other = run(&changed);
        // Rows 0..=2 forecast slots 0..=2 and never see slot 2 itself.
        assert_eq!(&base.data()[..3 * 16], &other.data()[..3 * 16]);
        assert_ne!(&base.data()[3 * 16..], &other.data()[3 * 16..]);
    }

    #[test]
    fn overlong_sequences_hit_capacity() {
        let model = Model::new(small(), 5).unwrap();
        let seq = robot_sequence(&model, 5, 1);
        let mut g = Graph::inference();
        assert!(matches!(model.prediction_hidden(&mut g, &seq), Err(Error::Capacity { .. })));
        assert!(model.forecast_state(&seq).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut model = Model::new(small(), 9).unwrap();
        model.freeze_for_pretraining().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, serde_json::json!({"seed": 9})).unwrap();
        let (back, meta) = Model::load(&path).unwrap();
        assert_eq!(meta["seed"], 9);
        for (a, b) in model.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor);
        }
        assert!(back.store.group(OBS_BASE).unwrap().frozen);
        let seq = robot_sequence(&model, 3, 2);
        assert_eq!(model.forecast_state(&seq).unwrap(), back.forecast_state(&seq).unwrap());
    }

    #[test]
    fn analogical_readout_starts_as_state_readout() {
        let model = Model::new(small(), 4).unwrap();
        assert_eq!(model.store.get(model.analogical.readout_w), model.store.get(model.state_head.readout_w));
        assert_eq!(model.store.get(model.analogical.alpha).item(), 0.9);
    }
}
