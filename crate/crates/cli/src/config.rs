//! Flat key-value run configuration (TOML syntax, no tables) with at most
//! one level of `include`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use handmap::ablation::{Split, StudyConfig, FEW_SHOT_FRACTION};
use handmap::finetune::{default_frozen, Auxiliary, FinetuneConfig};
use handmap::model::{ModelConfig, KP_HEAD};
use handmap::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: Option<u64>,

    pub humans: usize,
    pub robots: usize,
    pub split: String,
    pub data_fraction: f64,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub n_latents: usize,
    pub d_node: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,

    /// `analogical`, `replay` or `none`.
    pub auxiliary: String,
    pub j: usize,
    pub beta: f64,
    pub final_state_only: bool,

    pub chains: usize,
    pub max_steps: usize,

    pub study_seeds: Vec<u64>,
    pub study_humans: usize,
    pub study_pretrain_epochs: usize,
    pub study_chains: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let study = StudyConfig::default();
        Self {
            format_version: CONFIG_FORMAT,
            seed: None,
            humans: 2000,
            robots: 200,
            split: "full".into(),
            data_fraction: 1.0,
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            context: m.context,
            n_latents: m.n_latents,
            d_node: m.d_node,
            pretrain_epochs: 10,
            pretrain_lr: study.pretrain.lr,
            pretrain_batch: study.pretrain.batch_size,
            finetune_epochs: study.finetune.train.epochs,
            finetune_lr: study.finetune.train.lr,
            finetune_batch: study.finetune.train.batch_size,
            weight_decay: study.finetune.train.weight_decay,
            grad_clip: study.finetune.train.grad_clip,
            auxiliary: "analogical".into(),
            j: study.finetune.j,
            beta: study.finetune.beta,
            final_state_only: false,
            chains: 50,
            max_steps: study.max_steps,
            study_seeds: study.seeds,
            study_humans: study.humans,
            study_pretrain_epochs: study.pretrain.epochs,
            study_chains: study.chains,
        }
    }
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        bail!("{}: `{k}` is a table; configs are flat key-value files", path.display());
    }
    Ok(table)
}

impl RunConfig {
    /// Reads `path`, merging its single optional `include` underneath.
    pub fn load(path: &Path) -> Result<Self> {
        let top = read_table(path)?;
        let mut merged = toml::Table::new();
        if let Some(inc) = top.get("include") {
            let inc = inc.as_str().with_context(|| format!("{}: include must be a path string", path.display()))?;
            let base_path = path.parent().unwrap_or(Path::new(".")).join(inc);
            let base = read_table(&base_path)?;
            if base.contains_key("include") {
                bail!("{}: nested include; only one level is allowed", base_path.display());
            }
            merged.extend(base);
        }
        merged.extend(top.into_iter().filter(|(k, _)| k != "include"));
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT {
            bail!("config format_version {} is not supported (expected {CONFIG_FORMAT})", self.format_version);
        }
        self.split()?;
        self.auxiliary()?;
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            bail!("data_fraction {} outside (0, 1]", self.data_fraction);
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bail!("beta must be finite and non-negative, got {}", self.beta);
        }
        self.model().validate()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.context("a seed is required (--seed or `seed = ...` in the config)")
    }

    pub fn split(&self) -> Result<Split> {
        Split::parse(&self.split).with_context(|| {
            format!("unknown split `{}` (full, held_out_scene, few_shot, unseen_instruction)", self.split)
        })
    }

    pub fn auxiliary(&self) -> Result<Auxiliary> {
        Ok(match self.auxiliary.as_str() {
            "analogical" | "ar" => Auxiliary::Analogical,
            "replay" => Auxiliary::Replay,
            "none" => Auxiliary::None,
            other => bail!("unknown auxiliary `{other}` (analogical, replay, none)"),
        })
    }

    pub fn robot_fraction(&self) -> Result<f64> {
        Ok(match self.split()? {
            Split::FewShot => self.data_fraction.min(FEW_SHOT_FRACTION),
            _ => self.data_fraction,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            context: self.context,
            n_latents: self.n_latents,
            d_node: self.d_node,
            ..ModelConfig::default()
        }
    }

    pub fn pretrain(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed,
        }
    }

    pub fn finetune(&self, seed: u64) -> Result<FinetuneConfig> {
        let auxiliary = self.auxiliary()?;
        let mut frozen = default_frozen();
        if auxiliary == Auxiliary::Replay {
            frozen.retain(|g| g != KP_HEAD);
        }
        Ok(FinetuneConfig {
            beta: self.beta,
            j: self.j,
            auxiliary,
            final_state_only: self.final_state_only,
            frozen,
            train: TrainConfig {
                epochs: self.finetune_epochs,
                batch_size: self.finetune_batch,
                lr: self.finetune_lr,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
                seed,
            },
        })
    }

    pub fn study(&self) -> Result<StudyConfig> {
        let mut finetune = self.finetune(0)?;
        finetune.frozen = default_frozen();
        Ok(StudyConfig {
            seeds: self.study_seeds.clone(),
            humans: self.study_humans,
            robots: self.robots,
            data_fraction: self.data_fraction,
            split: self.split()?,
            model: self.model(),
            pretrain: TrainConfig { epochs: self.study_pretrain_epochs, ..self.pretrain(0) },
            finetune,
            chains: self.study_chains,
            max_steps: self.max_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn include_is_overridden_by_the_including_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "seed = 4\nrobots = 50\nbeta = 0.5\n").unwrap();
        std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\nrobots = 60\n").unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!((cfg.seed, cfg.robots, cfg.beta), (Some(4), 60, 0.5));
        assert_eq!(cfg.humans, RunConfig::default().humans);
    }

    #[test]
    fn rejects_nesting_tables_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        std::fs::write(p("a.toml"), "include = \"b.toml\"\n").unwrap();
        std::fs::write(p("b.toml"), "include = \"c.toml\"\n").unwrap();
        std::fs::write(p("c.toml"), "seed = 1\n").unwrap();
        assert!(RunConfig::load(&p("a.toml")).unwrap_err().to_string().contains("nested include"));
        std::fs::write(p("t.toml"), "[model]\nd_model = 8\n").unwrap();
        assert!(RunConfig::load(&p("t.toml")).is_err());
        std::fs::write(p("u.toml"), "learning_rate = 0.1\n").unwrap();
        assert!(RunConfig::load(&p("u.toml")).is_err());
        std::fs::write(p("s.toml"), "split = \"sideways\"\n").unwrap();
        assert!(RunConfig::load(&p("s.toml")).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::default().seed().is_err());
        assert_eq!(RunConfig { seed: Some(9), ..RunConfig::default() }.seed().unwrap(), 9);
    }

    #[test]
    fn replay_unfreezes_the_keypoint_head() {
        let cfg = RunConfig { auxiliary: "replay".into(), ..RunConfig::default() };
        assert!(!cfg.finetune(0).unwrap().frozen.iter().any(|g| g == KP_HEAD));
        assert!(RunConfig::default().finetune(0).unwrap().frozen.iter().any(|g| g == KP_HEAD));
    }
}
