//! Keypoint pretraining on human episodes: predict every keypoint frame
//! from the causal prefix and minimize the per-step MSE summed over steps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::KeypointFrame;
use crate::episode::HumanEpisode;
use crate::error::{Error, Result};
use crate::model::{keypoint_targets, Model, Sequence, Slots};
use crate::numerics::{Graph, Tensor, Var};
use crate::par;
use crate::train::{self, EpochHook, EpochStats, LossOutput, TrainConfig};

/// A pretraining example: the token inputs and the `[T·K, 3]` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    pub episode_id: String,
    pub seq: Sequence,
    pub targets: Tensor,
}

/// Builds the token inputs for a human episode.
///
/// Episodes longer than the context window keep their most recent window.
pub fn assemble_pretrain_sequence(model: &Model, ep: &HumanEpisode) -> Result<PretrainExample> {
    if ep.frames.len() < 2 {
        return Err(Error::Input(format!("episode {} has {} frame(s), need 2", ep.episode_id, ep.frames.len())));
    }
    let ctx = model.cfg.context;
    let start = ep.frames.len().saturating_sub(ctx);
    if start > 0 {
        log::warn!("episode {} has {} frames; keeping the last {ctx}", ep.episode_id, ep.frames.len());
    }
    let frames = &ep.frames[start..];
    let obs: Vec<_> = frames.iter().map(|f| &f.0).collect();
    let kps: Vec<KeypointFrame> = frames.iter().map(|f| f.1.clone()).collect();
    let targets = keypoint_targets(&kps);
    let seq = model.sequence(&ep.instruction, &obs, Slots::Keypoints(kps))?;
    Ok(PretrainExample { episode_id: ep.episode_id.clone(), seq, targets })
}

pub fn assemble_corpus(model: &Model, corpus: &[HumanEpisode]) -> Result<Vec<PretrainExample>> {
    par::map(corpus, |ep| assemble_pretrain_sequence(model, ep)).into_iter().collect()
}

/// Keypoint predictions `[T·K, 3]` and node features `[T·K, d_node]` for the
/// `T` slots of `seq`, recorded on `g`.
pub fn keypoint_predictions(model: &Model, g: &mut Graph, seq: &Sequence) -> Result<(Var, Var)> {
    let h = model.prediction_hidden(g, seq)?;
    let h = g.slice_rows(h, 0, seq.steps())?;
    model.keypoint_head(g, h)
}

/// One predicted keypoint frame per timestep.
pub fn predict_keypoints(model: &Model, seq: &Sequence) -> Result<Vec<KeypointFrame>> {
    let mut g = Graph::inference();
    let (y, _) = keypoint_predictions(model, &mut g, seq)?;
    let k = model.cfg.keypoints;
    Ok(g.value(y)
        .data()
        .chunks(k * 3)
        .map(|c| KeypointFrame { coords: c.chunks(3).map(|p| [p[0], p[1], p[2]]).collect() })
        .collect())
}

/// `Σ_t MSE(pred_t, target_t)` over per-step tensors.
pub fn pretrain_loss(predictions: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?}", p.shape(), t.shape())));
        }
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += s / p.len() as f64;
    }
    Ok(total)
}

/// Recorded pretraining loss for one example, with per-step MSEs.
pub fn pretrain_loss_graph(model: &Model, g: &mut Graph, ex: &PretrainExample) -> Result<LossOutput> {
    let (y, _) = keypoint_predictions(model, g, &ex.seq)?;
    let t = ex.seq.steps();
    let target = g.constant(ex.targets.clone());
    // Every step has the same K×3 size, so the sum of per-step means is
    // T times the overall mean.
    let all = g.mse(y, target)?;
    let total = g.scale(all, t as f64);
    let per = 3 * model.cfg.keypoints;
    let (p, q) = (g.value(y).data(), ex.targets.data());
    let per_step = (0..t)
        .map(|s| {
            let r = s * per..(s + 1) * per;
            p[r.clone()].iter().zip(&q[r]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per as f64
        })
        .collect();
    Ok(LossOutput { total, parts: vec![], per_step })
}

pub type PretrainBatchReport = EpochStats;

/// Pretrains `model` in place on a human corpus.
pub fn run_pretraining<R: EpochHook>(
    model: &mut Model,
    corpus: &[HumanEpisode],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats) -> R,
) -> Result<Vec<PretrainBatchReport>> {
    if corpus.is_empty() {
        return Err(Error::Empty("human corpus is empty".into()));
    }
    model.freeze_for_pretraining()?;
    let examples = assemble_corpus(model, corpus)?;
    train::train(model, &examples, cfg, pretrain_loss_graph, on_epoch)
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    epoch: usize,
    mean_loss: f64,
}

pub fn write_loss_csv(path: &Path, reports: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(LossRow { epoch: r.epoch, mean_loss: r.mean_loss }).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::generate::generate_human_episode;
    use crate::episode::task::{sample_spec, TaskSpec};
    use crate::episode::Palette;
    use crate::model::ModelConfig;
    use crate::testutil::tiny_cfg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn episode(seed: u64) -> HumanEpisode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let spec: TaskSpec = sample_spec(&mut rng, &Palette::ALL, false);
            if let Ok(ep) = generate_human_episode(&spec, seed) {
                if ep.frames.len() >= 3 {
                    return ep;
                }
            }
        }
    }

    #[test]
    fn sequence_counts_and_targets() {
        let model = Model::new(tiny_cfg(), 0).unwrap();
        let mut ep = episode(1);
        ep.frames.truncate(2);
        let ex = assemble_pretrain_sequence(&model, &ep).unwrap();
        assert_eq!(model.cfg.sequence_len(ex.seq.steps()), 1 + 2 * (1 + model.cfg.n_latents + 1));
        assert_eq!(predict_keypoints(&model, &ex.seq).unwrap().len(), 2);
        assert_eq!(ex.targets.rows(), 2 * 21);
    }

    #[test]
    fn frame_order_matters() {
        let model = Model::new(tiny_cfg(), 0).unwrap();
        let ep = episode(2);
        let mut shuffled = ep.clone();
        shuffled.frames.reverse();
        let loss = |e: &HumanEpisode| {
            let ex = assemble_pretrain_sequence(&model, e).unwrap();
            let mut g = Graph::inference();
            let out = pretrain_loss_graph(&model, &mut g, &ex).unwrap();
            g.value(out.total).item()
        };
        assert_ne!(loss(&ep), loss(&shuffled));
    }

    #[test]
    fn last_keypoint_frame_never_affects_predictions() {
        let model = Model::new(tiny_cfg(), 0).unwrap();
        let ep = episode(3);
        let ex = assemble_pretrain_sequence(&model, &ep).unwrap();
        let mut changed = ex.seq.clone();
        if let Slots::Keypoints(k) = &mut changed.slots {
            k.last_mut().unwrap().coords[8][0] += 1.0;
        }
        assert_eq!(predict_keypoints(&model, &ex.seq).unwrap(), predict_keypoints(&model, &changed).unwrap());
        assert!(predict_keypoints(&model, &ex.seq).unwrap().iter().all(|k| k.validate().is_ok()));
    }

    #[test]
    fn long_episodes_keep_the_latest_window() {
        let cfg = ModelConfig { context: 2, ..tiny_cfg() };
        let model = Model::new(cfg, 0).unwrap();
        let ep = episode(4);
        let ex = assemble_pretrain_sequence(&model, &ep).unwrap();
        assert_eq!(ex.seq.steps(), 2);
        if let Slots::Keypoints(k) = &ex.seq.slots {
            assert_eq!(k.last().unwrap(), &ep.frames.last().unwrap().1);
        }
    }

    #[test]
    fn loss_examples_and_oracle() {
        let a = Tensor::matrix(2, 3, vec![1.0; 6]);
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(pretrain_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        assert_eq!(pretrain_loss(std::slice::from_ref(&a), std::slice::from_ref(&z)).unwrap(), 1.0);
        assert!(pretrain_loss(std::slice::from_ref(&a), &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<Tensor> = (0..4).map(|_| Tensor::matrix(21, 3, (0..63).map(|_| rng.random()).collect())).collect();
        let t: Vec<Tensor> = (0..4).map(|_| Tensor::matrix(21, 3, (0..63).map(|_| rng.random()).collect())).collect();
        let mut oracle = 0.0;
        for s in 0..4 {
            let mut acc = 0.0;
            for i in 0..63 {
                let d = p[s].data()[i] - t[s].data()[i];
                acc += d * d;
            }
            oracle += acc / 63.0;
        }
        assert!((pretrain_loss(&p, &t).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn targets_align_with_their_own_step() {
        // Keypoint values encode the step index; the per-step loss at step t
        // must be measured against the frame carrying t.
        let model = Model::new(tiny_cfg(), 0).unwrap();
        let mut ep = episode(5);
        for (t, f) in ep.frames.iter_mut().enumerate() {
            f.1.coords.iter_mut().for_each(|c| *c = [t as f64; 3]);
        }
        let ex = assemble_pretrain_sequence(&model, &ep).unwrap();
        let preds = predict_keypoints(&model, &ex.seq).unwrap();
        let mut g = Graph::inference();
        let out = pretrain_loss_graph(&model, &mut g, &ex).unwrap();
        for (t, p) in preds.iter().enumerate() {
            let mse: f64 = p.flat().iter().map(|v| (v - t as f64).powi(2)).sum::<f64>() / 63.0;
            assert!((out.per_step[t] - mse).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_respects_freezing() {
        let corpus: Vec<HumanEpisode> = (0..6).map(episode).collect();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 1e-3, seed: 1, ..TrainConfig::default() };
        let run = || {
            let mut m = Model::new(tiny_cfg(), 2).unwrap();
            let base = m.group_hash(&[crate::encoders::LANG_BASE, crate::encoders::OBS_BASE]);
            let r = run_pretraining(&mut m, &corpus, &cfg, |_| {}).unwrap();
            assert_eq!(base, m.group_hash(&[crate::encoders::LANG_BASE, crate::encoders::OBS_BASE]));
            (r, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>(), b.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>());
        assert_eq!(ma.group_hash(&Model::all_groups()), mb.group_hash(&Model::all_groups()));
        assert!(a.last().unwrap().mean_loss < a[0].mean_loss);

        // Breaking after epoch 2 leaves the same first two epochs.
        let mut m = Model::new(tiny_cfg(), 2).unwrap();
        let cut = run_pretraining(&mut m, &corpus, &cfg, |s| {
            if s.epoch == 1 {
                std::ops::ControlFlow::Break(())
            } else {
                std::ops::ControlFlow::Continue(())
            }
        })
        .unwrap();
        let bits = |r: &[EpochStats]| r.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&cut), bits(&a[..2]));
    }

    #[test]
    fn memorizes_a_single_episode() {
        let ep = episode(6);
        let mut m = Model::new(ModelConfig::default(), 3).unwrap();
        let cfg = TrainConfig { epochs: 1000, batch_size: 1, lr: 1e-3, weight_decay: 0.0, grad_clip: 0.0, seed: 0 };
        run_pretraining(&mut m, std::slice::from_ref(&ep), &cfg, |_| {}).unwrap();
        let ex = assemble_pretrain_sequence(&m, &ep).unwrap();
        let last = predict_keypoints(&m, &ex.seq).unwrap().pop().unwrap();
        let truth = &ep.frames.last().unwrap().1;
        let worst = last.flat().iter().zip(truth.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-2, "max keypoint error {worst}");
    }

    #[test]
    fn loss_csv_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let r = |e| EpochStats { epoch: e, mean_loss: 0.5, parts: vec![], per_step: vec![], wall_secs: 0.0 };
        write_loss_csv(&p, &[r(0), r(1)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,mean_loss");
        assert_eq!(text.lines().count(), 3);
    }
}
