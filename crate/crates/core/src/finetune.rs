//! Fine-tuning on robot episodes: state prediction plus an auxiliary loss
//! over retrieved human episodes, either analogical (blend mapped keypoint
//! features into the state features) or plain keypoint replay.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{KP_ENCODER, LANG_BASE, OBS_BASE};
use crate::episode::{HumanEpisode, RobotEpisode};
use crate::error::{Error, Result};
use crate::model::{state_targets, Model, Sequence, Slots, KP_HEAD, STATE_NODES};
use crate::numerics::{Graph, Tensor, Var};
use crate::par;
use crate::pretrain::{assemble_pretrain_sequence, csv_err, pretrain_loss_graph, PretrainExample};
use crate::retrieval::{check_fingerprint, embed_robot, retrieve_top_j, RetrievalIndex, DEFAULT_J};
use crate::train::{self, EpochHook, EpochStats, LossOutput, TrainConfig};

/// What the retrieved human episodes contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Auxiliary {
    /// State loss only; nothing is retrieved.
    None,
    /// Keypoint prediction loss on the retrieved episodes.
    Replay,
    /// Analogical loss through the learned keypoint-to-component map.
    Analogical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub beta: f64,
    pub j: usize,
    pub auxiliary: Auxiliary,
    /// Supervise only the final state instead of every step.
    pub final_state_only: bool,
    pub frozen: Vec<String>,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            j: DEFAULT_J,
            auxiliary: Auxiliary::Analogical,
            final_state_only: false,
            frozen: default_frozen(),
            train: TrainConfig { epochs: 20, ..TrainConfig::default() },
        }
    }
}

pub fn default_frozen() -> Vec<String> {
    [LANG_BASE, OBS_BASE, KP_ENCODER, KP_HEAD].map(String::from).to_vec()
}

/// A robot episode ready for training, with the indices of its retrieved
/// human episodes in the accompanying human example list.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotExample {
    pub episode_id: String,
    pub seq: Sequence,
    pub targets: Tensor,
    pub retrieved: Vec<usize>,
}

pub fn assemble_robot_sequence(model: &Model, ep: &RobotEpisode) -> Result<RobotExample> {
    if ep.frames.is_empty() {
        return Err(Error::Input(format!("robot episode {} has no frames", ep.episode_id)));
    }
    let ctx = model.cfg.context;
    let start = ep.frames.len().saturating_sub(ctx);
    if start > 0 {
        log::warn!("episode {} has {} frames; keeping the last {ctx}", ep.episode_id, ep.frames.len());
    }
    let frames = &ep.frames[start..];
    let obs: Vec<_> = frames.iter().map(|f| &f.0).collect();
    let states: Vec<_> = frames.iter().map(|f| f.1).collect();
    let targets = state_targets(&states);
    let seq = model.sequence(&ep.instruction, &obs, Slots::States(states))?;
    Ok(RobotExample { episode_id: ep.episode_id.clone(), seq, targets, retrieved: vec![] })
}

/// State predictions `[T, 7]` and node features `[T·S, d_node]`.
pub fn predict_state_token(model: &Model, g: &mut Graph, seq: &Sequence) -> Result<(Var, Var)> {
    let h = model.prediction_hidden(g, seq)?;
    let h = g.slice_rows(h, 0, seq.steps())?;
    model.state_head(g, h)
}

/// MSE between a predicted state vector and the true one.
pub fn state_loss(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::Contract(format!(
            "state prediction has {} values, target {}",
            prediction.len(),
            target.len()
        )));
    }
    let s: f64 = prediction.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / prediction.len() as f64)
}

pub fn finetune_loss(state: f64, aux: f64, beta: f64) -> f64 {
    state + beta * aux
}

/// `(1 − α)·m·f_k + α·f_s` on the graph.
pub fn blend(g: &mut Graph, m: Var, alpha: Var, f_k: Var, f_s: Var) -> Result<Var> {
    let mapped = g.matmul(m, f_k)?;
    let neg = g.scale(alpha, -1.0);
    let keep = g.add_const(neg, 1.0);
    let a = g.scale_by(mapped, keep)?;
    let b = g.scale_by(f_s, alpha)?;
    g.add(a, b)
}

pub fn analogical_blend(m: &Tensor, alpha: f64, f_k: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (m, a, k, s) = (g.constant(m.clone()), g.constant(Tensor::scalar(alpha)), g.constant(f_k.clone()), g.constant(f_s.clone()));
    let out = blend(&mut g, m, a, k, s)?;
    if g.shape(out) != g.shape(s) {
        return Err(Error::Shape(format!("blend produced {:?}, expected {:?}", g.shape(out), g.shape(s))));
    }
    Ok(g.value(out).clone())
}

/// Keypoint node features `[K, d_node]` at the final prediction step of a
/// human sequence.
pub fn final_keypoint_features(model: &Model, g: &mut Graph, seq: &Sequence) -> Result<Var> {
    let h = model.prediction_hidden(g, seq)?;
    let h = g.slice_rows(h, seq.steps() - 1, 1)?;
    Ok(model.keypoint_head(g, h)?.1)
}

/// `Σ_j MSE(Linear(f*_j), s_T)` for final-step state features `f_s` `[S, d_node]`.
pub fn ar_loss(model: &Model, g: &mut Graph, f_s: Var, s_t: &[f64], humans: &[&Sequence]) -> Result<Var> {
    if humans.is_empty() {
        log::warn!("no retrieved episodes; analogical loss is 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let m = g.param(&model.store, model.analogical.m);
    let alpha = g.param(&model.store, model.analogical.alpha);
    let target = g.constant(Tensor::row(s_t.to_vec()));
    let mut terms = Vec::with_capacity(humans.len());
    for h in humans {
        let f_k = final_keypoint_features(model, g, h)?;
        let f = blend(g, m, alpha, f_k, f_s)?;
        let y = model.analogical_readout(g, f)?;
        terms.push(g.mse(y, target)?);
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.sum(all))
}

/// Full fine-tuning loss for one robot example.
pub fn finetune_loss_graph(
    model: &Model,
    g: &mut Graph,
    ex: &RobotExample,
    humans: &[PretrainExample],
    cfg: &FinetuneConfig,
) -> Result<LossOutput> {
    let t = ex.seq.steps();
    let (y, f_s) = predict_state_token(model, g, &ex.seq)?;
    let s_t = ex.targets.row_slice(t - 1).to_vec();
    let state = if cfg.final_state_only {
        let last = g.slice_rows(y, t - 1, 1)?;
        let target = g.constant(Tensor::row(s_t.clone()));
        g.mse(last, target)?
    } else {
        // Equal-size steps: the overall mean is the mean of per-step MSEs.
        let target = g.constant(ex.targets.clone());
        g.mse(y, target)?
    };
    let per_step = {
        let (p, q) = (g.value(y).data(), ex.targets.data());
        p.chunks(7).zip(q.chunks(7)).map(|(a, b)| state_loss(a, b)).collect::<Result<Vec<_>>>()?
    };
    let retrieved: Vec<&PretrainExample> = ex.retrieved.iter().map(|&i| &humans[i]).collect();
    let aux_on_tape = cfg.beta != 0.0;
    let aux = match cfg.auxiliary {
        Auxiliary::None => None,
        Auxiliary::Analogical => {
            let seqs: Vec<&Sequence> = retrieved.iter().map(|h| &h.seq).collect();
            if aux_on_tape {
                let f_t = g.slice_rows(f_s, (t - 1) * STATE_NODES, STATE_NODES)?;
                Some(ar_loss(model, g, f_t, &s_t, &seqs)?)
            } else {
                // Kept off the tape so the analogical parameters get no
                // gradient entry at all.
                let mut side = Graph::inference();
                let (_, fs) = predict_state_token(model, &mut side, &ex.seq)?;
                let f_t = side.slice_rows(fs, (t - 1) * STATE_NODES, STATE_NODES)?;
                let v = ar_loss(model, &mut side, f_t, &s_t, &seqs)?;
                Some(g.constant(side.value(v).clone()))
            }
        }
        Auxiliary::Replay => {
            let mut side = Graph::inference();
            let graph = if aux_on_tape { &mut *g } else { &mut side };
            let mut terms = Vec::with_capacity(retrieved.len());
            for h in &retrieved {
                terms.push(pretrain_loss_graph(model, graph, h)?.total);
            }
            let v = if terms.is_empty() {
                graph.constant(Tensor::scalar(0.0))
            } else {
                let all = graph.concat_rows(&terms)?;
                graph.sum(all)
            };
            Some(if aux_on_tape { v } else { g.constant(side.value(v).clone()) })
        }
    };
    let (total, aux_value) = match aux {
        Some(a) if aux_on_tape => {
            let w = g.scale(a, cfg.beta);
            (g.add(state, w)?, g.value(a).item())
        }
        Some(a) => (state, g.value(a).item()),
        None => (state, 0.0),
    };
    let sv = g.value(state).item();
    Ok(LossOutput { total, parts: vec![sv, aux_value, finetune_loss(sv, aux_value, cfg.beta)], per_step })
}

/// Retrieved human episode ids per robot episode.
pub fn retrieve_for_corpus(
    model: &Model,
    index: &RetrievalIndex,
    robots: &[RobotEpisode],
    j: usize,
) -> Result<Vec<Vec<String>>> {
    check_fingerprint(index, model)?;
    par::map(robots, |ep| Ok(retrieve_top_j(index, &embed_robot(model, ep)?, j).into_iter().map(|h| h.episode_id).collect()))
        .into_iter()
        .collect()
}

/// Training examples with retrieval resolved against the human corpus.
pub fn prepare(
    model: &Model,
    robots: &[RobotEpisode],
    humans: &[HumanEpisode],
    index: Option<&RetrievalIndex>,
    cfg: &FinetuneConfig,
) -> Result<(Vec<RobotExample>, Vec<PretrainExample>)> {
    if robots.is_empty() {
        return Err(Error::Empty("robot corpus is empty".into()));
    }
    let mut examples = par::map(robots, |ep| assemble_robot_sequence(model, ep)).into_iter().collect::<Result<Vec<_>>>()?;
    if cfg.auxiliary == Auxiliary::None {
        return Ok((examples, vec![]));
    }
    let index = index.ok_or_else(|| Error::Config("auxiliary loss needs a retrieval index".into()))?;
    let hits = retrieve_for_corpus(model, index, robots, cfg.j)?;
    let by_id: HashMap<&str, &HumanEpisode> = humans.iter().map(|h| (h.episode_id.as_str(), h)).collect();
    let mut slot: BTreeMap<String, usize> = BTreeMap::new();
    let mut needed: Vec<&HumanEpisode> = Vec::new();
    for (ex, ids) in examples.iter_mut().zip(hits) {
        for id in ids {
            let ep = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Input(format!("retrieved episode {id} is not in the human corpus")))?;
            let next = slot.len();
            let i = *slot.entry(id).or_insert_with(|| {
                needed.push(ep);
                next
            });
            ex.retrieved.push(i);
        }
    }
    let human = par::map(&needed, |ep| assemble_pretrain_sequence(model, ep)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok((examples, human))
}

/// Applies the freeze policy of `cfg`: listed groups frozen, all others trainable.
pub fn apply_freeze_policy(model: &mut Model, cfg: &FinetuneConfig) -> Result<()> {
    for g in Model::all_groups() {
        model.store.set_frozen(g, cfg.frozen.iter().any(|f| f == g))?;
    }
    Ok(())
}

/// Fine-tunes `model` in place.
pub fn run_finetune<R: EpochHook>(
    model: &mut Model,
    robots: &[RobotEpisode],
    humans: &[HumanEpisode],
    index: Option<&RetrievalIndex>,
    cfg: &FinetuneConfig,
    on_epoch: impl FnMut(&EpochStats) -> R,
) -> Result<Vec<EpochStats>> {
    if cfg.beta < 0.0 || !cfg.beta.is_finite() {
        return Err(Error::Config(format!("beta must be finite and non-negative, got {}", cfg.beta)));
    }
    let (examples, human) = prepare(model, robots, humans, index, cfg)?;
    apply_freeze_policy(model, cfg)?;
    model.sync_analogical_readout();
    train::train(model, &examples, &cfg.train, |m, g, ex| finetune_loss_graph(m, g, ex, &human, cfg), on_epoch)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    l_state: f64,
    l_ar: f64,
    l_finetune: f64,
}

pub fn write_loss_csv(path: &Path, reports: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        let p = |i: usize| r.parts.get(i).copied().unwrap_or(0.0);
        w.serialize(LossRow { epoch: r.epoch, l_state: p(0), l_ar: p(1), l_finetune: p(2) }).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Column-wise normalization of `|m|`; all-zero columns become uniform.
pub fn normalize_map(m: &Tensor) -> Tensor {
    let (s, k) = (m.rows(), m.cols());
    let mut out = vec![0.0; s * k];
    for c in 0..k {
        let total: f64 = (0..s).map(|r| m.data()[r * k + c].abs()).sum();
        for r in 0..s {
            out[r * k + c] = if total == 0.0 { 1.0 / s as f64 } else { m.data()[r * k + c].abs() / total };
        }
        if total == 0.0 {
            log::warn!("analogical map column {c} is all zero; exporting it as uniform");
        }
    }
    Tensor::matrix(s, k, out)
}

fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["node".to_string()];
    header.extend((0..m.cols()).map(|c| format!("k{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..m.rows() {
        let mut rec = vec![r.to_string()];
        rec.extend(m.row_slice(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_map_csv(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Input(format!("{}: ragged map rows", path.display())));
    }
    Ok(Tensor::matrix(rows.len(), k, rows.concat()))
}

/// Path of the raw map written next to the normalized one.
pub fn raw_map_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or("map".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_raw.csv"))
}

/// Writes the normalized map to `path` and the raw map beside it.
pub fn export_analogical_map(model: &Model, path: &Path) -> Result<Tensor> {
    let m = model.store.get(model.analogical.m);
    if !m.is_finite() {
        return Err(Error::Input("analogical map has non-finite entries".into()));
    }
    let norm = normalize_map(m);
    write_matrix(path, &norm)?;
    write_matrix(&raw_map_path(path), m)?;
    Ok(norm)
}
