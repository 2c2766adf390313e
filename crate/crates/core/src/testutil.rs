use crate::episode::{human_corpus, robot_corpus, CorpusSpec, HumanEpisode, Palette, RobotEpisode};
use crate::model::ModelConfig;

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        hidden_mult: 2,
        context: 10,
        n_latents: 2,
        d_lang: 8,
        d_patch: 8,
        d_kp: 8,
        d_node: 4,
        lang_buckets: 32,
        ..ModelConfig::default()
    }
}

fn spec(count: usize, seed: u64) -> CorpusSpec {
    CorpusSpec { count, seed, palettes: Palette::ALL.to_vec(), unseen_phrasing: false }
}

pub fn humans(count: usize, seed: u64) -> Vec<HumanEpisode> {
    human_corpus(&spec(count, seed)).unwrap()
}

pub fn robots(count: usize, seed: u64) -> Vec<RobotEpisode> {
    robot_corpus(&spec(count, seed)).unwrap()
}
