//! Pipeline stages. Each writes its artifacts into a fresh directory that
//! only appears at the requested path once the stage has succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use handmap::ablation::{run_study, PretrainCache, Variant};
use handmap::episode::{
    derive_seed, human_corpus, load_episodes, robot_corpus, save_episodes, CorpusSpec, Episode, HumanEpisode,
    RobotEpisode,
};
use handmap::finetune::{self, export_analogical_map, run_finetune, Auxiliary};
use handmap::model::Model;
use handmap::pretrain::{self, run_pretraining};
use handmap::retrieval::{build_index, check_fingerprint, embed_robot, retrieve_top_j, RetrievalIndex};
use handmap::sim::{evaluate_traced, sample_chains, write_reports_csv, write_trace_csv, ModelPolicy};

use crate::config::RunConfig;
use crate::manifest::{sha256_file, sha256_path, InputFile, Manifest, BUILD_ID, MANIFEST_FORMAT};

pub const HUMANS_FILE: &str = "humans.jsonl";
pub const ROBOTS_FILE: &str = "robots.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const INDEX_FILE: &str = "index.bin";

pub type Inputs = BTreeMap<String, PathBuf>;

fn input<'a>(inputs: &'a Inputs, role: &str) -> Result<&'a Path> {
    inputs.get(role).map(PathBuf::as_path).with_context(|| format!("missing --{role}"))
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(INDEX_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> Result<Model> {
    let path = checkpoint_path(p);
    Ok(Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?.0)
}

fn load_index(p: &Path, model: &Model) -> Result<RetrievalIndex> {
    let path = index_path(p);
    let index = RetrievalIndex::load(&path).with_context(|| format!("loading index {}", path.display()))?;
    check_fingerprint(&index, model).with_context(|| format!("index {} does not match the checkpoint", path.display()))?;
    Ok(index)
}

fn load_humans(dir: &Path) -> Result<Vec<HumanEpisode>> {
    let path = dir.join(HUMANS_FILE);
    load_episodes(&path)
        .with_context(|| format!("loading {}", path.display()))?
        .into_iter()
        .map(|e| match e {
            Episode::Human(h) => Ok(h),
            Episode::Robot(r) => bail!("{} holds robot episode {}", path.display(), r.episode_id),
        })
        .collect()
}

fn load_robots(dir: &Path) -> Result<Vec<RobotEpisode>> {
    let path = dir.join(ROBOTS_FILE);
    load_episodes(&path)
        .with_context(|| format!("loading {}", path.display()))?
        .into_iter()
        .map(|e| match e {
            Episode::Robot(r) => Ok(r),
            Episode::Human(h) => bail!("{} holds human episode {}", path.display(), h.episode_id),
        })
        .collect()
}

/// Runs `f` in a scratch sibling of `out` and moves it into place on success.
fn staged(out: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            bail!("output path {} exists and is not a directory", out.display());
        }
        if fs::read_dir(out)?.next().is_some() {
            bail!("output directory {} is not empty", out.display());
        }
    }
    let name = out.file_name().with_context(|| format!("output path {} has no final component", out.display()))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    fs::create_dir_all(&tmp).with_context(|| format!("cannot create output directory {}", out.display()))?;
    match f(&tmp) {
        Ok(()) => {
            if out.exists() {
                fs::remove_dir(out)?;
            }
            fs::rename(&tmp, out).with_context(|| format!("moving results into {}", out.display()))?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// Runs one stage into `out`, then records the manifest.
pub fn run(stage: &str, cfg: &RunConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    cfg.validate()?;
    let mut recorded = BTreeMap::new();
    for (role, p) in inputs {
        let path = p.canonicalize().with_context(|| format!("{role} input {}", p.display()))?;
        recorded.insert(role.clone(), InputFile { sha256: sha256_path(&path)?, path });
    }
    let start = Instant::now();
    staged(out, |dir| {
        match stage {
            "generate" => generate(cfg, seed, dir),
            "pretrain" => pretrain_stage(cfg, seed, inputs, dir),
            "build-index" => build_index_stage(inputs, dir),
            "finetune" => finetune_stage(cfg, seed, inputs, dir),
            "eval" => eval_stage(cfg, seed, inputs, dir),
            "export-map" => export_map_stage(inputs, dir),
            "retrieve" => retrieve_stage(cfg, inputs, dir),
            "ablate" => ablate_stage(cfg, dir),
            other => bail!("unknown stage `{other}`"),
        }?;
        let mut outputs = BTreeMap::new();
        let mut names: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        names.sort();
        for p in names.iter().filter(|p| p.is_file()) {
            outputs.insert(p.file_name().unwrap_or_default().to_string_lossy().into_owned(), sha256_file(p)?);
        }
        Manifest {
            format_version: MANIFEST_FORMAT,
            stage: stage.to_string(),
            build: BUILD_ID.to_string(),
            seed,
            config: cfg.clone(),
            inputs: recorded,
            outputs,
            wall_secs: start.elapsed().as_secs_f64(),
        }
        .write(dir)
    })
}

/// Re-executes the stage recorded in `manifest` into `out`.
pub fn rerun(manifest: &Manifest, out: &Path) -> Result<()> {
    manifest.verify_inputs()?;
    let inputs: Inputs = manifest.inputs.iter().map(|(k, v)| (k.clone(), v.path.clone())).collect();
    run(&manifest.stage, &manifest.config, &inputs, out)
}

fn generate(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    let palettes = cfg.split()?.train_palettes();
    let spec = |count, tag| CorpusSpec { count, seed: derive_seed(seed, 31, tag), palettes: palettes.clone(), unseen_phrasing: false };
    let humans = human_corpus(&spec(cfg.humans, 0))?;
    let robots = robot_corpus(&spec(cfg.robots, 1))?;
    let humans: Vec<Episode> = humans.into_iter().map(Episode::Human).collect();
    let robots: Vec<Episode> = robots.into_iter().map(Episode::Robot).collect();
    save_episodes(&dir.join(HUMANS_FILE), &humans)?;
    save_episodes(&dir.join(ROBOTS_FILE), &robots)?;
    log::info!("wrote {} human and {} robot episodes", humans.len(), robots.len());
    Ok(())
}

fn pretrain_stage(cfg: &RunConfig, seed: u64, inputs: &Inputs, dir: &Path) -> Result<()> {
    let humans = load_humans(input(inputs, "episodes")?)?;
    let mut model = Model::new(cfg.model(), derive_seed(seed, 31, 2))?;
    let reports = run_pretraining(&mut model, &humans, &cfg.pretrain(seed), |e| {
        log::info!("pretrain epoch {} loss {:.6} ({:.1}s)", e.epoch, e.mean_loss, e.wall_secs)
    })?;
    model.save(&dir.join(CHECKPOINT_FILE), serde_json::json!({ "stage": "pretrain", "seed": seed }))?;
    pretrain::write_loss_csv(&dir.join("loss.csv"), &reports)?;
    Ok(())
}

fn build_index_stage(inputs: &Inputs, dir: &Path) -> Result<()> {
    let model = load_model(input(inputs, "checkpoint")?)?;
    let humans = load_humans(input(inputs, "episodes")?)?;
    build_index(&model, &humans)?.save(&dir.join(INDEX_FILE))?;
    Ok(())
}

fn finetune_stage(cfg: &RunConfig, seed: u64, inputs: &Inputs, dir: &Path) -> Result<()> {
    let episodes = input(inputs, "episodes")?;
    let mut model = match inputs.get("checkpoint") {
        Some(p) => load_model(p)?,
        None => Model::new(cfg.model(), derive_seed(seed, 31, 2))?,
    };
    let ft = cfg.finetune(seed)?;
    let index = match inputs.get("index") {
        Some(p) => Some(load_index(p, &model)?),
        None if ft.auxiliary != Auxiliary::None && ft.beta > 0.0 => {
            bail!("auxiliary `{}` needs --index (or set auxiliary = \"none\")", cfg.auxiliary)
        }
        None => None,
    };
    let humans = if ft.auxiliary == Auxiliary::None { Vec::new() } else { load_humans(episodes)? };
    let mut robots = load_robots(episodes)?;
    let keep = ((robots.len() as f64 * cfg.robot_fraction()?).round() as usize).clamp(1, robots.len().max(1));
    robots.truncate(keep);
    let reports = run_finetune(&mut model, &robots, &humans, index.as_ref(), &ft, |e| {
        log::info!("finetune epoch {} parts {:?} ({:.1}s)", e.epoch, e.parts, e.wall_secs)
    })?;
    model.save(&dir.join(CHECKPOINT_FILE), serde_json::json!({ "stage": "finetune", "seed": seed }))?;
    finetune::write_loss_csv(&dir.join("loss.csv"), &reports)?;
    Ok(())
}

fn label_for(p: &Path, used: &mut Vec<String>) -> String {
    let base = if p.is_dir() { p.file_name() } else { p.parent().and_then(Path::file_name).or(p.file_stem()) };
    let base = base.map(|s| s.to_string_lossy().into_owned()).filter(|s| !s.is_empty()).unwrap_or("model".into());
    let mut label = base.clone();
    let mut n = 1;
    while used.contains(&label) {
        n += 1;
        label = format!("{base}-{n}");
    }
    used.push(label.clone());
    label
}

fn eval_stage(cfg: &RunConfig, seed: u64, inputs: &Inputs, dir: &Path) -> Result<()> {
    let split = cfg.split()?;
    let chains = sample_chains(cfg.chains, derive_seed(seed, 31, 3), &split.eval_palettes(), split.eval_unseen());
    let mut used = Vec::new();
    let mut reports = Vec::new();
    for (role, p) in inputs.iter().filter(|(k, _)| k.starts_with("checkpoint")) {
        let model = load_model(p).with_context(|| role.to_string())?;
        let label = label_for(p, &mut used);
        let (report, trace) = evaluate_traced(&chains, cfg.max_steps, |_| ModelPolicy::new(&model))?;
        log::info!("{label}: avg_len {:.3} rates {:?}", report.avg_len, report.rates);
        write_trace_csv(&dir.join(format!("trace_{label}.csv")), &trace)?;
        reports.push((label, report));
    }
    if reports.is_empty() {
        bail!("eval needs at least one --checkpoint");
    }
    write_reports_csv(&dir.join("reports.csv"), &reports)?;
    Ok(())
}

fn export_map_stage(inputs: &Inputs, dir: &Path) -> Result<()> {
    let model = load_model(input(inputs, "checkpoint")?)?;
    export_analogical_map(&model, &dir.join("map.csv"))?;
    Ok(())
}

fn retrieve_stage(cfg: &RunConfig, inputs: &Inputs, dir: &Path) -> Result<()> {
    let model = load_model(input(inputs, "checkpoint")?)?;
    let index = load_index(input(inputs, "index")?, &model)?;
    let robots = load_robots(input(inputs, "episodes")?)?;
    let mut w = csv::Writer::from_path(dir.join("hits.csv"))?;
    w.write_record(["query", "rank", "episode_id", "similarity"])?;
    for ep in &robots {
        let q = embed_robot(&model, ep)?;
        for (rank, h) in retrieve_top_j(&index, &q, cfg.j).iter().enumerate() {
            w.write_record([ep.episode_id.clone(), (rank + 1).to_string(), h.episode_id.clone(), h.similarity.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn ablate_stage(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let study = cfg.study()?;
    let report = run_study(&study, &Variant::ALL, &mut PretrainCache::default())?;
    report.write_csv(&dir.join("ablation_rows.csv"))?;
    report.write_summary_csv(&dir.join("ablation_summary.csv"))?;
    let table = report.table();
    fs::write(dir.join("ablation_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
