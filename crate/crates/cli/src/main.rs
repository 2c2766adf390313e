mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use manifest::Manifest;
use stages::Inputs;

#[derive(Parser)]
#[command(name = "handmap", version = manifest::BUILD_ID, about = "Keypoint pretraining, retrieval and analogical fine-tuning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML config; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    /// Retrieved human episodes per robot episode.
    #[arg(long)]
    j: Option<usize>,
    /// Weight of the auxiliary loss.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    data_fraction: Option<f64>,
    /// full, held_out_scene, few_shot or unseen_instruction.
    #[arg(long)]
    split: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(j) = self.j {
            cfg.j = j;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(f) = self.data_fraction {
            cfg.data_fraction = f;
        }
        if let Some(s) = &self.split {
            cfg.split = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate human and robot episode corpora.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on human keypoint episodes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Embed the human corpus for retrieval.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Fine-tune on robot episodes, optionally from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// analogical, replay or none.
        #[arg(long)]
        auxiliary: Option<String>,
    },
    /// Closed-loop evaluation of one or more checkpoints on the same chains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Write the normalized analogical map as CSV.
    ExportMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Top-j human episodes for every robot episode.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Full four-row ablation over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-execute a stage from its manifest after checking input digests.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn inputs(pairs: &[(&str, Option<&PathBuf>)]) -> Inputs {
    pairs.iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v.clone()))).collect()
}

fn dispatch(cmd: Command) -> Result<()> {
    let (stage, common, inputs) = match cmd {
        Command::Rerun { manifest, out } => return stages::rerun(&Manifest::load(&manifest)?, &out),
        Command::Generate { common } => ("generate", common, Inputs::new()),
        Command::Pretrain { common, episodes } => ("pretrain", common, inputs(&[("episodes", Some(&episodes))])),
        Command::BuildIndex { common, checkpoint, episodes } => {
            ("build-index", common, inputs(&[("checkpoint", Some(&checkpoint)), ("episodes", Some(&episodes))]))
        }
        Command::Finetune { common, episodes, checkpoint, index, auxiliary } => {
            let mut cfg = common.resolve()?;
            if let Some(a) = auxiliary {
                cfg.auxiliary = a;
                cfg.validate()?;
            }
            let ins = inputs(&[("episodes", Some(&episodes)), ("checkpoint", checkpoint.as_ref()), ("index", index.as_ref())]);
            return stages::run("finetune", &cfg, &ins, &common.out);
        }
        Command::Eval { common, checkpoint } => {
            let ins = checkpoint
                .iter()
                .enumerate()
                .map(|(i, p)| (if i == 0 { "checkpoint".to_string() } else { format!("checkpoint-{i:03}") }, p.clone()))
                .collect();
            ("eval", common, ins)
        }
        Command::ExportMap { common, checkpoint } => ("export-map", common, inputs(&[("checkpoint", Some(&checkpoint))])),
        Command::Retrieve { common, checkpoint, index, episodes } => (
            "retrieve",
            common,
            inputs(&[("checkpoint", Some(&checkpoint)), ("index", Some(&index)), ("episodes", Some(&episodes))]),
        ),
        Command::Ablate { common } => ("ablate", common, Inputs::new()),
    };
    stages::run(stage, &common.resolve()?, &inputs, &common.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
