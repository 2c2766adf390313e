use criterion::{criterion_group, criterion_main, Criterion};
use handmap::episode::{robot_corpus, CorpusSpec, Palette};
use handmap::model::{Model, ModelConfig};
use handmap::par;
use handmap::retrieval::embed_robot;
use handmap::sim::{evaluate, sample_chains, ExpertPolicy};

fn embeddings(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let robots = robot_corpus(&CorpusSpec { count: 16, seed: 2, palettes: Palette::ALL.to_vec(), unseen_phrasing: false }).unwrap();
    let mut g = c.benchmark_group("embed_robot_x16");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(&robots, |e| embed_robot(&model, e).unwrap())));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| par::map_par(&robots, |e| embed_robot(&model, e).unwrap())));
    g.finish();
}

fn gradients(c: &mut Criterion) {
    use handmap::finetune::{assemble_robot_sequence, predict_state_token, state_loss};
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let robots = robot_corpus(&CorpusSpec { count: 8, seed: 3, palettes: Palette::ALL.to_vec(), unseen_phrasing: false }).unwrap();
    let examples: Vec<_> = robots.iter().map(|e| assemble_robot_sequence(&model, e).unwrap()).collect();
    let forward = |ex: &handmap::finetune::RobotExample| {
        let mut g = handmap::numerics::Graph::new();
        let (y, _) = predict_state_token(&model, &mut g, &ex.seq).unwrap();
        state_loss(g.value(y).data(), ex.targets.data()).unwrap_or(0.0)
    };
    let mut g = c.benchmark_group("state_forward_x8");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(&examples, forward)));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| par::map_par(&examples, forward)));
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let chains = sample_chains(8, 4, &Palette::ALL, false);
    let mut g = c.benchmark_group("expert_eval_x8");
    g.sample_size(10);
    g.bench_function("default_map", |b| b.iter(|| evaluate(&chains, 120, |_| ExpertPolicy::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, embeddings, gradients, rollouts);
criterion_main!(benches);
