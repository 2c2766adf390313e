//! Mini-batch training loop shared by pretraining and fine-tuning.
//!
//! Per-example gradients are computed independently (in parallel when the
//! `parallel` feature is on) and then summed in batch order, so results do
//! not depend on scheduling.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamW, AdamWConfig, Gradients, Graph, Var};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 1e-4, weight_decay: 0.01, grad_clip: 1.0, seed: 0 }
    }
}

/// Scalar loss plus named diagnostic parts and optional per-step values.
pub struct LossOutput {
    pub total: Var,
    pub parts: Vec<f64>,
    pub per_step: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Epoch means of [`LossOutput::parts`].
    pub parts: Vec<f64>,
    /// Mean per-step value over the examples that have that step.
    pub per_step: Vec<f64>,
    pub wall_secs: f64,
}

struct Example {
    loss: f64,
    parts: Vec<f64>,
    per_step: Vec<f64>,
    grads: Gradients,
}

fn example<T>(
    model: &Model,
    item: &T,
    loss: &(impl Fn(&Model, &mut Graph, &T) -> Result<LossOutput> + Sync),
) -> Result<Example> {
    let mut g = Graph::new();
    let out = loss(model, &mut g, item)?;
    let value = g.value(out.total).item();
    let grads = g.backward(out.total)?;
    Ok(Example { loss: value, parts: out.parts, per_step: out.per_step, grads })
}

/// Return type of an epoch callback: `()` always continues, a
/// [`ControlFlow::Break`] ends training after the current epoch.
pub trait EpochHook {
    fn keep_going(self) -> bool;
}

impl EpochHook for () {
    fn keep_going(self) -> bool {
        true
    }
}

impl EpochHook for ControlFlow<()> {
    fn keep_going(self) -> bool {
        self.is_continue()
    }
}

/// Runs up to `cfg.epochs` epochs of AdamW over `items`.
///
/// On a non-finite loss or gradient the error carries the model as it was
/// before the offending step.
pub fn train<T: Sync, R: EpochHook>(
    model: &mut Model,
    items: &[T],
    cfg: &TrainConfig,
    loss: impl Fn(&Model, &mut Graph, &T) -> Result<LossOutput> + Sync,
    mut on_epoch: impl FnMut(&EpochStats) -> R,
) -> Result<Vec<EpochStats>> {
    if items.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let bs = cfg.batch_size.max(1);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::episode::derive_seed(cfg.seed, 7, epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        let mut parts: Vec<f64> = Vec::new();
        let mut steps: Vec<(f64, usize)> = Vec::new();
        for chunk in order.chunks(bs) {
            let batch: Vec<&T> = chunk.iter().map(|&i| &items[i]).collect();
            let snapshot = &*model;
            let results = par::map(&batch, |item| example(snapshot, *item, &loss));
            let mut grads = Gradients::new(model.store.len());
            for r in results {
                let ex = r?;
                if !ex.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        reason: format!("loss is {}", ex.loss),
                        last_good: Box::new(model.clone()),
                    });
                }
                sum += ex.loss;
                n += 1;
                if parts.len() < ex.parts.len() {
                    parts.resize(ex.parts.len(), 0.0);
                }
                for (a, b) in parts.iter_mut().zip(&ex.parts) {
                    *a += b;
                }
                if steps.len() < ex.per_step.len() {
                    steps.resize(ex.per_step.len(), (0.0, 0));
                }
                for (a, b) in steps.iter_mut().zip(&ex.per_step) {
                    a.0 += b;
                    a.1 += 1;
                }
                grads.accumulate(&ex.grads);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            // The optimizer validates every gradient before touching any
            // parameter, so on error the model is still the last good one.
            if let Err(e) = opt.step(&mut model.store, &grads) {
                return Err(Error::Diverged { epoch, step, reason: e.to_string(), last_good: Box::new(model.clone()) });
            }
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: sum / n as f64,
            parts: parts.iter().map(|p| p / n as f64).collect(),
            per_step: steps.iter().map(|(s, c)| s / *c as f64).collect(),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} ({:.1}s)", stats.mean_loss, stats.wall_secs);
        let go = on_epoch(&stats).keep_going();
        history.push(stats);
        if !go {
            break;
        }
    }
    Ok(history)
}
