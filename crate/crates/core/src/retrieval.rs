//! Exhaustive cosine retrieval of human episodes for a robot episode,
//! scored on the projected language token plus per-frame global
//! observation tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{LanguageInstruction, Observation};
use crate::episode::{HumanEpisode, RobotEpisode};
use crate::error::{Error, Result};
use crate::io;
use crate::model::Model;
use crate::numerics::Graph;
use crate::par;

/// Frames each episode is resampled to before comparison.
pub const COMPARE_FRAMES: usize = 5;
pub const DEFAULT_J: usize = 3;
pub const INDEX_MAGIC: &[u8; 8] = b"HMAPINDX";
pub const INDEX_VERSION: u32 = 1;

/// Language and per-frame observation embeddings of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub episode_id: String,
    pub lang: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub fingerprint: String,
    /// Sorted by `episode_id`.
    pub entries: Vec<Embedding>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub episode_id: String,
    pub similarity: f64,
}

/// `COMPARE_FRAMES` uniformly spaced indices over `t` frames, endpoints included.
pub fn comparison_indices(t: usize) -> Vec<usize> {
    if t == 0 {
        return vec![];
    }
    let last = (COMPARE_FRAMES - 1) as f64;
    (0..COMPARE_FRAMES).map(|i| (i as f64 * (t - 1) as f64 / last).round() as usize).collect()
}

/// Embeds an instruction and its frames resampled to the comparison length.
pub fn embed(model: &Model, id: &str, l: &LanguageInstruction, obs: &[&Observation]) -> Result<Embedding> {
    if obs.is_empty() {
        return Err(Error::Input(format!("episode {id} has no frames")));
    }
    let lang = model.encode_language(l)?.into_data();
    let features =
        comparison_indices(obs.len()).into_iter().map(|i| model.frame_features(obs[i])).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::inference();
    let (globals, _) = model.enc.observation_tokens(&model.store, &mut g, &features)?;
    let frames = g.value(globals).data().chunks(model.cfg.d_model).map(<[f64]>::to_vec).collect();
    Ok(Embedding { episode_id: id.to_string(), lang, frames })
}

/// Query embedding from a robot episode's observation history.
pub fn embed_robot(model: &Model, ep: &RobotEpisode) -> Result<Embedding> {
    embed(model, &ep.episode_id, &ep.instruction, &ep.observations())
}

pub fn build_index(model: &Model, corpus: &[HumanEpisode]) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("cannot index an empty human corpus".into()));
    }
    let mut entries = par::map(corpus, |ep| embed(model, &ep.episode_id, &ep.instruction, &ep.observations()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    if let Some(w) = entries.windows(2).find(|w| w[0].episode_id == w[1].episode_id) {
        return Err(Error::Input(format!("duplicate episode id {}", w[0].episode_id)));
    }
    Ok(RetrievalIndex { fingerprint: model.encoder_fingerprint(), entries })
}

/// Cosine similarity; a zero-norm side yields 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm embedding in cosine similarity");
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Language cosine plus summed frame cosines over the common frame prefix.
pub fn similarity(q: &Embedding, e: &Embedding) -> f64 {
    let frames: f64 = q.frames.iter().zip(&e.frames).map(|(a, b)| cosine(a, b)).sum();
    cosine(&q.lang, &e.lang) + frames
}

/// The `min(J, N)` most similar entries, ties broken by ascending id.
pub fn retrieve_top_j(index: &RetrievalIndex, query: &Embedding, j: usize) -> Vec<Hit> {
    let mut hits: Vec<Hit> = index
        .entries
        .iter()
        .map(|e| Hit { episode_id: e.episode_id.clone(), similarity: similarity(query, e) })
        .collect();
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.episode_id.cmp(&b.episode_id)));
    hits.truncate(j);
    hits
}

pub fn check_fingerprint(index: &RetrievalIndex, model: &Model) -> Result<()> {
    let found = model.encoder_fingerprint();
    if index.fingerprint != found {
        return Err(Error::Fingerprint(format!(
            "index was built with encoders {}, model has {found}",
            index.fingerprint
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    fingerprint: String,
    dim: usize,
    entries: Vec<(String, usize)>,
}

impl RetrievalIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.entries.first().map_or(0, |e| e.lang.len());
        let header = IndexHeader {
            format_version: INDEX_VERSION,
            fingerprint: self.fingerprint.clone(),
            dim,
            entries: self.entries.iter().map(|e| (e.episode_id.clone(), e.frames.len())).collect(),
        };
        let mut payload = Vec::new();
        for e in &self.entries {
            payload.extend_from_slice(&e.lang);
            e.frames.iter().for_each(|f| payload.extend_from_slice(f));
        }
        io::write_container(path, INDEX_MAGIC, INDEX_VERSION, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = io::read_container(path, INDEX_MAGIC, INDEX_VERSION)?;
        let header: IndexHeader = serde_json::from_value(header)?;
        let bad = |record, msg: String| Error::Load { path: path.to_path_buf(), record, msg };
        let d = header.dim;
        let mut rest = payload.as_slice();
        let mut entries = Vec::with_capacity(header.entries.len());
        for (i, (id, n)) in header.entries.into_iter().enumerate() {
            let need = d * (n + 1);
            if rest.len() < need {
                return Err(bad(i, format!("payload ends inside entry {id}")));
            }
            let (cur, tail) = rest.split_at(need);
            rest = tail;
            let frames = cur[d..].chunks(d.max(1)).map(<[f64]>::to_vec).collect();
            entries.push(Embedding { episode_id: id, lang: cur[..d].to_vec(), frames });
        }
        if !rest.is_empty() {
            return Err(bad(entries.len(), format!("{} trailing values", rest.len())));
        }
        Ok(Self { fingerprint: header.fingerprint, entries })
    }
}

pub fn write_hits_csv(path: &Path, hits: &[Hit]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in hits {
        w.serialize(h).map_err(crate::pretrain::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    io::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{human_corpus, CorpusSpec, Palette};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_embedding(rng: &mut ChaCha8Rng, id: &str, d: usize, t: usize) -> Embedding {
        let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Embedding { episode_id: id.into(), lang: v(), frames: (0..t).map(|_| v()).collect() }
    }

    fn oracle(q: &Embedding, e: &Embedding) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..a.len() {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            dot / (na.sqrt() * nb.sqrt())
        };
        let mut s = cos(&q.lang, &e.lang);
        for t in 0..q.frames.len().min(e.frames.len()) {
            s += cos(&q.frames[t], &e.frames[t]);
        }
        s
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_embedding(&mut rng, "a", 8, 3);
        assert!((similarity(&a, &a) - 4.0).abs() < 1e-9);
        let mut x = random_embedding(&mut rng, "x", 2, 2);
        let mut y = x.clone();
        x.lang = vec![1.0, 0.0];
        y.lang = vec![0.0, 3.0];
        assert!((similarity(&x, &y) - 2.0).abs() < 1e-9);
        let b = random_embedding(&mut rng, "b", 8, 5);
        assert!((similarity(&a, &b) - oracle(&a, &b)).abs() < 1e-12);
        let z = Embedding { lang: vec![0.0; 8], ..a.clone() };
        assert!((similarity(&z, &a) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn comparison_frames_cover_both_ends() {
        assert_eq!(comparison_indices(9), vec![0, 2, 4, 6, 8]);
        assert_eq!(comparison_indices(2), vec![0, 0, 1, 1, 1]);
        assert_eq!(comparison_indices(1), vec![0; 5]);
    }

    fn brute_force(index: &RetrievalIndex, q: &Embedding, j: usize) -> Vec<String> {
        let mut left: Vec<(String, f64)> = index.entries.iter().map(|e| (e.episode_id.clone(), oracle(q, e))).collect();
        let mut out = Vec::new();
        while out.len() < j && !left.is_empty() {
            let mut best = 0;
            for i in 1..left.len() {
                let (a, b) = (&left[i], &left[best]);
                if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                    best = i;
                }
            }
            out.push(left.remove(best).0);
        }
        out
    }

    #[test]
    fn top_j_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<Embedding> = (0..100).map(|i| random_embedding(&mut rng, &format!("h{i:05}"), 6, 5)).collect();
        let index = RetrievalIndex { fingerprint: String::new(), entries };
        for _ in 0..20 {
            let q = random_embedding(&mut rng, "q", 6, 5);
            let ids: Vec<String> = retrieve_top_j(&index, &q, 7).into_iter().map(|h| h.episode_id).collect();
            assert_eq!(ids, brute_force(&index, &q, 7));
        }
        let q = index.entries[42].clone();
        assert_eq!(retrieve_top_j(&index, &q, 1)[0].episode_id, "h00042");
        let all = retrieve_top_j(&index, &q, 500);
        assert_eq!(all.len(), 100);
        assert!(all.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let e = Embedding { episode_id: "b".into(), lang: vec![1.0], frames: vec![vec![1.0]] };
        let index = RetrievalIndex { fingerprint: String::new(), entries: vec![Embedding { episode_id: "a".into(), ..e.clone() }, e.clone()] };
        let ids: Vec<_> = retrieve_top_j(&index, &e, 2).into_iter().map(|h| h.episode_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_ranking(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<Embedding> = (0..20).map(|i| random_embedding(&mut rng, &format!("h{i:02}"), 4, 5)).collect();
            let index = RetrievalIndex { fingerprint: String::new(), entries };
            let q = random_embedding(&mut rng, "q", 4, 5);
            let mut scaled = q.clone();
            scaled.lang.iter_mut().for_each(|v| *v *= scale);
            scaled.frames.iter_mut().flatten().for_each(|v| *v *= scale);
            let ids = |q: &Embedding| retrieve_top_j(&index, q, 5).into_iter().map(|h| h.episode_id).collect::<Vec<_>>();
            prop_assert_eq!(ids(&q), ids(&scaled));
        }
    }

    fn small_model(seed: u64) -> Model {
        Model::new(ModelConfig { d_model: 16, heads: 2, layers: 1, d_lang: 8, d_patch: 8, d_kp: 8, lang_buckets: 32, ..ModelConfig::default() }, seed)
            .unwrap()
    }

    #[test]
    fn index_is_deterministic_and_round_trips() {
        let corpus = human_corpus(&CorpusSpec { count: 12, seed: 3, palettes: Palette::ALL.to_vec(), unseen_phrasing: false }).unwrap();
        let m = small_model(0);
        let index = build_index(&m, &corpus).unwrap();
        assert_eq!(index.entries.len(), 12);
        assert!(index.entries.iter().all(|e| e.frames.len() == COMPARE_FRAMES && e.lang.len() == 16));
        assert_eq!(index, build_index(&m, &corpus).unwrap());
        assert_ne!(index.fingerprint, build_index(&small_model(1), &corpus).unwrap().fingerprint);
        assert!(check_fingerprint(&index, &small_model(1)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        index.save(&p).unwrap();
        assert_eq!(RetrievalIndex::load(&p).unwrap(), index);
        assert!(build_index(&m, &[]).is_err());
        let ep = &corpus[5];
        let q = embed(&m, "q", &ep.instruction, &ep.observations()).unwrap();
        assert_eq!(retrieve_top_j(&index, &q, 1)[0].episode_id, ep.episode_id);
    }
}
