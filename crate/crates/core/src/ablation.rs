//! Controlled studies on the synthetic benchmark: each variant is trained
//! per seed from the same initial weights and data, then evaluated on the
//! same task chains.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::{derive_seed, human_corpus, robot_corpus, CorpusSpec, HumanEpisode, Palette};
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, Auxiliary, FinetuneConfig};
use crate::model::{Model, ModelConfig, KP_HEAD};
use crate::pretrain::{csv_err, run_pretraining};
use crate::retrieval::build_index;
use crate::sim::{evaluate, sample_chains, EvalReport, ModelPolicy, CHAIN_LEN, DEFAULT_MAX_STEPS};
use crate::train::TrainConfig;

pub const FEW_SHOT_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Scratch,
    Pretrained,
    Replay,
    Analogical,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Scratch, Variant::Pretrained, Variant::Replay, Variant::Analogical];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Scratch => "scratch",
            Variant::Pretrained => "+pretrain",
            Variant::Replay => "+retrieval+replay",
            Variant::Analogical => "+retrieval+analogical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scratch" => Some(Variant::Scratch),
            "pretrained" | "pretrain" => Some(Variant::Pretrained),
            "replay" => Some(Variant::Replay),
            "analogical" | "ar" => Some(Variant::Analogical),
            _ => None,
        }
    }

    fn needs_pretraining(self) -> bool {
        self != Variant::Scratch
    }

    fn auxiliary(self) -> Auxiliary {
        match self {
            Variant::Scratch | Variant::Pretrained => Auxiliary::None,
            Variant::Replay => Auxiliary::Replay,
            Variant::Analogical => Auxiliary::Analogical,
        }
    }
}

/// Which scenes and phrasings are trained on and evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    /// Train on palettes A-C, evaluate on D.
    HeldOutScene,
    /// Full scenes with [`FEW_SHOT_FRACTION`] of the robot data.
    FewShot,
    /// Evaluate on paraphrased instructions never seen in training.
    UnseenInstruction,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Some(Split::Full),
            "held_out_scene" => Some(Split::HeldOutScene),
            "few_shot" => Some(Split::FewShot),
            "unseen_instruction" => Some(Split::UnseenInstruction),
            _ => None,
        }
    }

    pub fn train_palettes(self) -> Vec<Palette> {
        match self {
            Split::HeldOutScene => vec![Palette::A, Palette::B, Palette::C],
            _ => Palette::ALL.to_vec(),
        }
    }

    pub fn eval_palettes(self) -> Vec<Palette> {
        match self {
            Split::HeldOutScene => vec![Palette::D],
            _ => Palette::ALL.to_vec(),
        }
    }

    pub fn eval_unseen(self) -> bool {
        self == Split::UnseenInstruction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub humans: usize,
    pub robots: usize,
    /// Fraction of the robot corpus used for fine-tuning.
    pub data_fraction: f64,
    pub split: Split,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// `auxiliary` is set per variant; everything else is shared.
    pub finetune: FinetuneConfig,
    pub chains: usize,
    pub max_steps: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            humans: 1000,
            robots: 200,
            data_fraction: 1.0,
            split: Split::Full,
            model: ModelConfig::default(),
            pretrain: TrainConfig { epochs: 5, lr: 1e-3, ..TrainConfig::default() },
            finetune: FinetuneConfig {
                train: TrainConfig { epochs: 20, batch_size: 4, lr: 3e-4, ..TrainConfig::default() },
                ..FinetuneConfig::default()
            },
            chains: 40,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Input("study needs at least one seed".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Input(format!("data fraction {} outside (0, 1]", self.data_fraction)));
        }
        if self.humans == 0 || self.robots == 0 || self.chains == 0 {
            return Err(Error::Input("corpus sizes and chain count must be positive".into()));
        }
        self.model.validate()
    }

    pub fn robot_fraction(&self) -> f64 {
        match self.split {
            Split::FewShot => self.data_fraction.min(FEW_SHOT_FRACTION),
            _ => self.data_fraction,
        }
    }

    pub fn robots_used(&self) -> usize {
        ((self.robots as f64 * self.robot_fraction()).round() as usize).clamp(1, self.robots)
    }

    fn human_spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            count: self.humans,
            seed: derive_seed(seed, 21, 0),
            palettes: self.split.train_palettes(),
            unseen_phrasing: false,
        }
    }

    fn robot_spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            count: self.robots,
            seed: derive_seed(seed, 21, 1),
            palettes: self.split.train_palettes(),
            unseen_phrasing: false,
        }
    }

    fn cache_key(&self, seed: u64) -> String {
        serde_json::json!({
            "seed": seed,
            "humans": self.human_spec(seed).seed,
            "count": self.humans,
            "palettes": format!("{:?}", self.split.train_palettes()),
            "model": self.model,
            "pretrain": self.pretrain,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub seed: u64,
    pub variant: Variant,
    pub report: EvalReport,
    /// Epoch-mean state loss of the last fine-tuning epoch.
    pub final_state_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
}

/// Pretrained checkpoints keyed by seed and everything that shaped them,
/// so several studies over the same human data pretrain once.
#[derive(Default)]
pub struct PretrainCache {
    models: BTreeMap<String, Model>,
}

fn pretrained(cfg: &StudyConfig, seed: u64, base: &Model, humans: &[HumanEpisode], cache: &mut PretrainCache) -> Result<Model> {
    let key = cfg.cache_key(seed);
    if let Some(m) = cache.models.get(&key) {
        return Ok(m.clone());
    }
    let mut m = base.clone();
    let pcfg = TrainConfig { seed: derive_seed(seed, 21, 4), ..cfg.pretrain.clone() };
    run_pretraining(&mut m, humans, &pcfg, |e| log::info!("seed {seed} pretrain epoch {} loss {:.5}", e.epoch, e.mean_loss))?;
    cache.models.insert(key, m.clone());
    Ok(m)
}

/// Trains and evaluates every requested variant for one seed.
pub fn run_seed(cfg: &StudyConfig, seed: u64, variants: &[Variant], cache: &mut PretrainCache) -> Result<Vec<StudyRow>> {
    cfg.validate()?;
    let humans = human_corpus(&cfg.human_spec(seed))?;
    let mut robots = robot_corpus(&cfg.robot_spec(seed))?;
    robots.truncate(cfg.robots_used());
    let base = Model::new(cfg.model.clone(), derive_seed(seed, 21, 2))?;
    let chains = sample_chains(cfg.chains, derive_seed(seed, 21, 3), &cfg.split.eval_palettes(), cfg.split.eval_unseen());

    let pre = if variants.iter().any(|v| v.needs_pretraining()) {
        Some(pretrained(cfg, seed, &base, &humans, cache)?)
    } else {
        None
    };
    let index = match &pre {
        Some(m) if variants.iter().any(|v| v.auxiliary() != Auxiliary::None) => Some(build_index(m, &humans)?),
        _ => None,
    };

    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut model = match (&pre, variant.needs_pretraining()) {
            (Some(m), true) => m.clone(),
            _ => base.clone(),
        };
        let mut ft = cfg.finetune.clone();
        ft.auxiliary = variant.auxiliary();
        ft.train.seed = derive_seed(seed, 21, 5);
        if variant == Variant::Replay {
            ft.frozen.retain(|g| g != KP_HEAD);
        }
        let stats = run_finetune(&mut model, &robots, &humans, index.as_ref(), &ft, |e| {
            log::info!("seed {seed} {} epoch {} parts {:?}", variant.label(), e.epoch, e.parts)
        })?;
        let final_state_loss = stats.last().map_or(f64::NAN, |s| s.parts[0]);
        let report = evaluate(&chains, cfg.max_steps, |_| ModelPolicy::new(&model))?;
        log::info!("seed {seed} {} avg_len {:.3}", variant.label(), report.avg_len);
        rows.push(StudyRow { seed, variant, report, final_state_loss });
    }
    Ok(rows)
}

pub fn run_study(cfg: &StudyConfig, variants: &[Variant], cache: &mut PretrainCache) -> Result<StudyReport> {
    let mut report = StudyReport::default();
    for &seed in &cfg.seeds {
        report.rows.extend(run_seed(cfg, seed, variants, cache)?);
    }
    Ok(report)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

impl StudyReport {
    /// Variants in first-seen order.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut out: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn avg_len(&self, seed: u64, variant: Variant) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed && r.variant == variant).map(|r| r.report.avg_len)
    }

    pub fn median_avg_len(&self, variant: Variant) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.report.avg_len).collect();
        median(&mut v)
    }

    fn median_rates(&self, variant: Variant) -> [f64; CHAIN_LEN] {
        let mut out = [f64::NAN; CHAIN_LEN];
        for (i, o) in out.iter_mut().enumerate() {
            let mut v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.report.rates[i]).collect();
            *o = median(&mut v).unwrap_or(f64::NAN);
        }
        out
    }

    /// Seeds on which `variant` beats every other variant outright.
    pub fn strictly_best_seeds(&self, variant: Variant) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| {
                let Some(best) = self.avg_len(s, variant) else { return false };
                self.variants().into_iter().filter(|&v| v != variant).all(|v| self.avg_len(s, v).is_none_or(|x| best > x))
            })
            .count()
    }

    /// Median-over-seeds table, one line per variant.
    pub fn table(&self) -> String {
        let mut out = String::from("variant                     r1     r2     r3     r4     r5  avg_len  avg_rate\n");
        for v in self.variants() {
            let r = self.median_rates(v);
            let len = self.median_avg_len(v).unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{:<24} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.3} {:>8.1}%",
                v.label(),
                r[0],
                r[1],
                r[2],
                r[3],
                r[4],
                len,
                100.0 * len / CHAIN_LEN as f64
            );
        }
        out
    }

    /// Per-seed rows: seed, variant, r1..r5, avg_len, avg_rate, l_state.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["seed", "variant", "r1", "r2", "r3", "r4", "r5", "avg_len", "avg_rate", "l_state"]).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.seed.to_string(), r.variant.label().to_string()];
            rec.extend(r.report.rates.iter().map(|x| x.to_string()));
            rec.extend([r.report.avg_len.to_string(), r.report.avg_rate.to_string(), r.final_state_loss.to_string()]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Median rows: variant, seeds, r1..r5, avg_len, avg_rate.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["variant", "seeds", "r1", "r2", "r3", "r4", "r5", "avg_len", "avg_rate"]).map_err(csv_err)?;
        for v in self.variants() {
            let n = self.rows.iter().filter(|r| r.variant == v).count();
            let len = self.median_avg_len(v).unwrap_or(f64::NAN);
            let mut rec = vec![v.label().to_string(), n.to_string()];
            rec.extend(self.median_rates(v).iter().map(|x| x.to_string()));
            rec.extend([len.to_string(), (len / CHAIN_LEN as f64).to_string()]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::compute_metrics;

    fn row(seed: u64, variant: Variant, counts: &[usize]) -> StudyRow {
        StudyRow { seed, variant, report: compute_metrics(counts).unwrap(), final_state_loss: 0.0 }
    }

    #[test]
    fn medians_and_strict_wins() {
        let mut rep = StudyReport::default();
        for (s, a, b) in [(0, 1, 2), (1, 3, 1), (2, 0, 0), (3, 2, 4), (4, 1, 5)] {
            rep.rows.push(row(s, Variant::Scratch, &[a]));
            rep.rows.push(row(s, Variant::Analogical, &[b]));
        }
        assert_eq!(rep.median_avg_len(Variant::Scratch), Some(1.0));
        assert_eq!(rep.median_avg_len(Variant::Analogical), Some(2.0));
        // Seed 2 is a tie and does not count.
        assert_eq!(rep.strictly_best_seeds(Variant::Analogical), 3);
        assert_eq!(rep.strictly_best_seeds(Variant::Scratch), 1);
        assert_eq!(rep.variants(), vec![Variant::Scratch, Variant::Analogical]);
        assert!(rep.table().contains("+retrieval+analogical"));
    }

    #[test]
    fn even_median_averages_middle_pair() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn splits_and_fractions() {
        let cfg = StudyConfig { split: Split::FewShot, ..StudyConfig::default() };
        assert_eq!(cfg.robots_used(), 20);
        let tiny = StudyConfig { robots: 3, data_fraction: 0.01, ..StudyConfig::default() };
        assert_eq!(tiny.robots_used(), 1);
        assert_eq!(Split::HeldOutScene.eval_palettes(), vec![Palette::D]);
        assert!(!Split::HeldOutScene.train_palettes().contains(&Palette::D));
        assert_eq!(Split::parse("held-out-scene"), Some(Split::HeldOutScene));
        assert!(StudyConfig { data_fraction: 0.0, ..StudyConfig::default() }.validate().is_err());
    }

    #[test]
    fn csv_outputs_have_one_line_per_row() {
        let mut rep = StudyReport::default();
        rep.rows.push(row(0, Variant::Scratch, &[1, 0]));
        rep.rows.push(row(0, Variant::Pretrained, &[2, 2]));
        let dir = tempfile::tempdir().unwrap();
        rep.write_csv(&dir.path().join("rows.csv")).unwrap();
        rep.write_summary_csv(&dir.path().join("summary.csv")).unwrap();
        let rows = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
        assert_eq!(rows.lines().count(), 3);
        assert!(rows.contains("+pretrain"));
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.lines().nth(2).unwrap().starts_with("+pretrain,1,1,1,0,0,0,2,0.4"));
    }

    #[test]
    fn tiny_study_runs_end_to_end() {
        let cfg = StudyConfig {
            seeds: vec![3],
            humans: 6,
            robots: 6,
            model: crate::testutil::tiny_cfg(),
            pretrain: TrainConfig { epochs: 1, ..TrainConfig::default() },
            finetune: FinetuneConfig { train: TrainConfig { epochs: 1, ..TrainConfig::default() }, j: 2, ..FinetuneConfig::default() },
            chains: 2,
            max_steps: 3,
            ..StudyConfig::default()
        };
        let mut cache = PretrainCache::default();
        let a = run_study(&cfg, &Variant::ALL, &mut cache).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!(cache.models.len(), 1);
        let b = run_study(&cfg, &Variant::ALL, &mut PretrainCache::default()).unwrap();
        assert_eq!(a, b);
    }
}
