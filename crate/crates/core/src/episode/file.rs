//! Line-delimited JSON episode files.
//!
//! Line 1 is a file header `{format_version, count}`. Each episode is a
//! header line `{format_version, kind, episode_id, instruction, dims,
//! n_frames, fps}` followed by `n_frames` lines, each a flat float array of
//! the observation followed by the keypoint or state payload.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Episode, HumanEpisode, RobotEpisode};
use crate::encoders::{KeypointFrame, LanguageInstruction, Observation, RobotState, STATE_DIMS};
use crate::error::{Error, Result};

pub const EPISODE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format_version: u32,
    count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Human,
    Robot,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    width: usize,
    height: usize,
    channels: usize,
    payload: usize,
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    format_version: u32,
    kind: Kind,
    episode_id: String,
    instruction: LanguageInstruction,
    dims: Dims,
    n_frames: usize,
    fps: f64,
}

fn frame_line(obs: &Observation, payload: &[f64]) -> Result<String> {
    let mut v = Vec::with_capacity(obs.data.len() + payload.len());
    v.extend_from_slice(&obs.data);
    v.extend_from_slice(payload);
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Input(format!("cannot store non-finite value {x}")));
    }
    Ok(serde_json::to_string(&v)?)
}

/// Writes all episodes atomically (temp file then rename).
pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    let header = FileHeader { format_version: EPISODE_FORMAT_VERSION, count: episodes.len() };
    writeln!(buf, "{}", serde_json::to_string(&header)?)?;
    for ep in episodes {
        let (kind, id, instr, fps, n) = match ep {
            Episode::Human(e) => (Kind::Human, &e.episode_id, &e.instruction, e.fps, e.frames.len()),
            Episode::Robot(e) => (Kind::Robot, &e.episode_id, &e.instruction, e.fps, e.frames.len()),
        };
        let first_obs = match ep {
            Episode::Human(e) => e.frames.first().map(|f| &f.0),
            Episode::Robot(e) => e.frames.first().map(|f| &f.0),
        };
        let payload = match ep {
            Episode::Human(e) => e.frames.first().map_or(0, |f| f.1.coords.len() * 3),
            Episode::Robot(_) => STATE_DIMS,
        };
        let dims = Dims {
            width: first_obs.map_or(0, |o| o.width),
            height: first_obs.map_or(0, |o| o.height),
            channels: first_obs.map_or(0, |o| o.channels),
            payload,
        };
        let h = EpisodeHeader {
            format_version: EPISODE_FORMAT_VERSION,
            kind,
            episode_id: id.clone(),
            instruction: instr.clone(),
            dims,
            n_frames: n,
            fps,
        };
        writeln!(buf, "{}", serde_json::to_string(&h)?)?;
        match ep {
            Episode::Human(e) => {
                for (o, k) in &e.frames {
                    writeln!(buf, "{}", frame_line(o, &k.flat())?)?;
                }
            }
            Episode::Robot(e) => {
                for (o, s) in &e.frames {
                    writeln!(buf, "{}", frame_line(o, &s.to_vec())?)?;
                }
            }
        }
    }
    let bytes = buf.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Loads a file written by [`save_episodes`].
///
/// Record numbering counts episodes from 0; an error inside an episode
/// reports that episode's index and the id of the last complete one.
pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let f = fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let err = |record: usize, msg: String| Error::Load { path: path.to_path_buf(), record, msg };
    let first = lines.next().ok_or_else(|| err(0, "missing file header".into()))??;
    let header: FileHeader = serde_json::from_str(&first).map_err(|e| err(0, format!("file header: {e}")))?;
    if header.format_version != EPISODE_FORMAT_VERSION {
        return Err(Error::Version { expected: EPISODE_FORMAT_VERSION, found: header.format_version });
    }
    let mut out: Vec<Episode> = Vec::with_capacity(header.count);
    let last_valid = |out: &Vec<Episode>| out.last().map_or("none".to_string(), |e| e.id().to_string());
    for rec in 0..header.count {
        let line = match lines.next() {
            Some(l) => l?,
            None => {
                return Err(err(rec, format!("file ends before episode header; last valid record: {}", last_valid(&out))))
            }
        };
        let h: EpisodeHeader = serde_json::from_str(&line)
            .map_err(|e| err(rec, format!("bad episode header ({e}); last valid record: {}", last_valid(&out))))?;
        if h.format_version != EPISODE_FORMAT_VERSION {
            return Err(Error::Version { expected: EPISODE_FORMAT_VERSION, found: h.format_version });
        }
        let obs_len = h.dims.width * h.dims.height * h.dims.channels;
        let mut frames: Vec<(Observation, Vec<f64>)> = Vec::with_capacity(h.n_frames);
        for t in 0..h.n_frames {
            let line = lines.next().transpose()?.ok_or_else(|| {
                err(rec, format!("truncated at frame {t} of {}; last valid record: {}", h.episode_id, last_valid(&out)))
            })?;
            let v: Vec<f64> = serde_json::from_str(&line).map_err(|e| {
                err(rec, format!("frame {t} of {}: {e}; last valid record: {}", h.episode_id, last_valid(&out)))
            })?;
            if v.len() != obs_len + h.dims.payload {
                return Err(err(
                    rec,
                    format!(
                        "frame {t} of {} has {} values, expected {}; last valid record: {}",
                        h.episode_id,
                        v.len(),
                        obs_len + h.dims.payload,
                        last_valid(&out)
                    ),
                ));
            }
            let obs = Observation {
                width: h.dims.width,
                height: h.dims.height,
                channels: h.dims.channels,
                data: v[..obs_len].to_vec(),
            };
            frames.push((obs, v[obs_len..].to_vec()));
        }
        out.push(match h.kind {
            Kind::Human => Episode::Human(HumanEpisode {
                episode_id: h.episode_id,
                instruction: h.instruction,
                fps: h.fps,
                frames: frames
                    .into_iter()
                    .map(|(o, p)| (o, KeypointFrame { coords: p.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() }))
                    .collect(),
            }),
            Kind::Robot => Episode::Robot(RobotEpisode {
                episode_id: h.episode_id,
                instruction: h.instruction,
                fps: h.fps,
                frames: frames.into_iter().map(|(o, p)| (o, RobotState::from_slice(&p))).collect(),
            }),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{human_corpus, robot_corpus, CorpusSpec, Palette};

    fn mixed(n: usize) -> Vec<Episode> {
        let c = CorpusSpec { count: n / 2, seed: 4, palettes: Palette::ALL.to_vec(), unseen_phrasing: false };
        let mut v: Vec<Episode> = human_corpus(&c).unwrap().into_iter().map(Episode::Human).collect();
        v.extend(robot_corpus(&c).unwrap().into_iter().map(Episode::Robot));
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eps.jsonl");
        let eps = mixed(50);
        save_episodes(&p, &eps).unwrap();
        let back = load_episodes(&p).unwrap();
        assert_eq!(back, eps);
        let bits = |e: &[Episode]| -> Vec<u64> {
            e.iter()
                .flat_map(|ep| match ep {
                    Episode::Robot(r) => r.frames.iter().flat_map(|f| f.1.to_vec()).map(f64::to_bits).collect::<Vec<_>>(),
                    Episode::Human(h) => h.frames.iter().flat_map(|f| f.1.flat()).map(f64::to_bits).collect(),
                })
                .collect()
        };
        assert_eq!(bits(&back), bits(&eps));
    }

    #[test]
    fn truncated_file_names_last_valid_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eps.jsonl");
        let eps = mixed(4);
        save_episodes(&p, &eps).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let cut = text.len() - text.len() / 5;
        fs::write(&p, &text[..cut]).unwrap();
        let msg = load_episodes(&p).unwrap_err().to_string();
        assert!(msg.contains("last valid record"), "{msg}");
    }

    #[test]
    fn empty_list_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        save_episodes(&p, &[]).unwrap();
        assert!(load_episodes(&p).unwrap().is_empty());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        fs::write(&p, "{\"format_version\":99,\"count\":0}\n").unwrap();
        assert!(matches!(load_episodes(&p), Err(Error::Version { found: 99, .. })));
    }
}
