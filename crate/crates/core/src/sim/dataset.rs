use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::render::{render_state, render_slice, Observation, IMG_SIZE};
use crate::sim::veg::{
    apply_cut, classify_thickness, new_vegetable, CutAction, ObsRole, VegKind,
};

/// One recorded interaction step; a line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub episode_id: u64,
    pub t: u32,
    pub veg_type: String,
    pub action_d: f64,
    pub created: bool,
    pub slice_thickness: Option<f64>,
    pub remaining_after: f64,
    pub stop: bool,
    pub slice_class: Option<usize>,
    pub remaining_class: usize,
    /// Relative image paths below the dataset root.
    pub obs_before: String,
    pub obs_after: String,
    pub slice_obs: Option<String>,
}

impl Transition {
    pub fn veg_kind(&self) -> Result<VegKind> {
        VegKind::parse(&self.veg_type)
    }
}

/// Episode-count presets: desk-scale default and the paper-scale split.
pub const DESK_EPISODES: usize = 2000;
pub const PAPER_EPISODES_CUCUMBER: usize = 50;
pub const PAPER_EPISODES_TOMATO: usize = 25;

/// Default execution-noise sigma in cm.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

/// Dataset generation settings.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub kind: VegKind,
    pub episodes: usize,
    pub master_seed: u64,
    pub noise_sigma: f64,
}

impl GenConfig {
    pub fn new(kind: VegKind, episodes: usize, master_seed: u64) -> Self {
        Self { kind, episodes, master_seed, noise_sigma: DEFAULT_NOISE_SIGMA }
    }
}

/// Per-type range of sampled slice counts per episode.
fn slice_count_range(kind: VegKind) -> (u32, u32) {
    match kind {
        // Cucumber demonstrations average around five slices, tomatoes three.
        VegKind::Cucumber => (4, 7),
        VegKind::Tomato => (2, 4),
    }
}

/// Summary statistics returned by [`generate_dataset`].
#[derive(Clone, Debug, Serialize)]
pub struct GenSummary {
    pub episodes: usize,
    pub transitions: usize,
    pub slice_transitions: usize,
    pub stop_transitions: usize,
}

fn img_name(episode: u64, t: u32, which: &str) -> String {
    format!("img/ep{episode:05}_t{t:02}_{which}.pgm")
}

/// Generate a dataset under `dir`: `index.jsonl` plus `img/*.pgm`.
///
/// Episodes sample a slice count and per-slice commanded thicknesses
/// uniformly from the type's action range; each step records before/after
/// renders and, when a slice was created, the slice render with its class
/// labels. A terminal stop transition is recorded when a sampled cut is
/// infeasible. Fully deterministic per master seed.
pub fn generate_dataset(dir: &Path, cfg: &GenConfig) -> Result<GenSummary> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;
    let profile = cfg.kind.profile();
    let mut transitions: Vec<Transition> = Vec::new();
    let mut slice_transitions = 0;
    let mut stop_transitions = 0;

    for episode in 0..cfg.episodes as u64 {
        let ep_seed = derive_seed(cfg.master_seed, episode);
        let mut state = new_vegetable(cfg.kind, ep_seed);
        let mut ctrl_rng = ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, 0xc0a1));
        let (count_lo, count_hi) = slice_count_range(cfg.kind);
        let target_slices = ctrl_rng.gen_range(count_lo..=count_hi);

        let mut before_path = img_name(episode, 0, "before");
        write_pgm(&dir.join(&before_path), &render_state(&state, render_seed(ep_seed, 0, 0))?)?;

        for t in 0..target_slices {
            let d = ctrl_rng.gen_range(profile.action_range.0..=profile.action_range.1);
            let (next, outcome) = apply_cut(&state, CutAction { d }, cfg.noise_sigma)?;

            let after_path = img_name(episode, t, "after");
            write_pgm(&dir.join(&after_path), &render_state(&next, render_seed(ep_seed, t, 1))?)?;

            let (slice_path, slice_class) = if let Some(thickness) = outcome.slice_thickness {
                let path = img_name(episode, t, "slice");
                write_pgm(&dir.join(&path), &render_slice(thickness, cfg.kind, render_seed(ep_seed, t, 2))?)?;
                (Some(path), Some(classify_thickness(thickness, profile.nominal_length, ObsRole::Slice)?))
            } else {
                (None, None)
            };

            transitions.push(Transition {
                episode_id: episode,
                t,
                veg_type: profile.name.to_string(),
                action_d: d,
                created: outcome.created,
                slice_thickness: outcome.slice_thickness,
                remaining_after: outcome.remaining_after,
                stop: outcome.stop,
                slice_class,
                remaining_class: classify_thickness(
                    outcome.remaining_after,
                    profile.nominal_length,
                    ObsRole::WholeVegetable,
                )?,
                obs_before: before_path.clone(),
                obs_after: after_path.clone(),
                slice_obs: slice_path,
            });
            if outcome.stop {
                stop_transitions += 1;
                break;
            }
            slice_transitions += 1;
            state = next;
            // The after image of this step is the before image of the next.
            before_path = after_path;
        }
    }

    write_index(&dir.join("index.jsonl"), &transitions)?;
    Ok(GenSummary {
        episodes: cfg.episodes,
        transitions: transitions.len(),
        slice_transitions,
        stop_transitions,
    })
}

fn render_seed(ep_seed: u64, t: u32, which: u64) -> u64 {
    derive_seed(ep_seed, 0x9000 + u64::from(t) * 4 + which)
}

pub fn write_index(path: &Path, transitions: &[Transition]) -> Result<()> {
    let mut buf = Vec::new();
    for tr in transitions {
        serde_json::to_writer(&mut buf, tr).map_err(|e| Error::io(path.display().to_string(), e))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_index(path: &Path) -> Result<Vec<Transition>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tr: Transition = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(tr);
    }
    Ok(out)
}

/// Binary PGM (P5, maxval 255) with pixel values quantized from [0,1].
pub fn write_pgm(path: &Path, obs: &Observation) -> Result<()> {
    let mut buf = Vec::with_capacity(IMG_SIZE * IMG_SIZE + 16);
    buf.extend_from_slice(format!("P5\n{} {}\n255\n", IMG_SIZE, IMG_SIZE).as_bytes());
    buf.extend(obs.pixels.iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a PGM written by [`write_pgm`], recovering the bounding box by
/// thresholding.
pub fn read_pgm(path: &Path, role: ObsRole) -> Result<Observation> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header_err = || Error::parse(path.display().to_string(), "bad PGM header");
    // Header: three whitespace-separated tokens after the magic.
    if !bytes.starts_with(b"P5") {
        return Err(header_err());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(header_err)?;
    }
    pos += 1; // single whitespace after maxval
    let [w, h, maxval] = fields;
    if w != IMG_SIZE || h != IMG_SIZE || maxval != 255 || bytes.len() < pos + w * h {
        return Err(header_err());
    }
    let pixels: Vec<f64> = bytes[pos..pos + w * h].iter().map(|&b| f64::from(b) / 255.0).collect();
    Observation::from_pixels(pixels, role)
}

/// A dataset loaded in memory: transitions plus lazily-read observations.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let transitions = read_index(&dir.join("index.jsonl"))?;
        if transitions.is_empty() {
            return Err(Error::EmptyInput("dataset has no transitions"));
        }
        Ok(Self { root: dir.to_path_buf(), transitions })
    }

    pub fn observation(&self, rel_path: &str, role: ObsRole) -> Result<Observation> {
        read_pgm(&self.root.join(rel_path), role)
    }

    /// Load every referenced image once, keyed by relative path.
    pub fn load_observations(&self) -> Result<BTreeMap<String, Observation>> {
        let mut out = BTreeMap::new();
        for tr in &self.transitions {
            for (path, role) in [
                (Some(&tr.obs_before), ObsRole::WholeVegetable),
                (Some(&tr.obs_after), ObsRole::WholeVegetable),
                (tr.slice_obs.as_ref(), ObsRole::Slice),
            ] {
                if let Some(path) = path {
                    if !out.contains_key(path.as_str()) {
                        out.insert(path.clone(), self.observation(path, role)?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Episode ids in first-seen order.
    pub fn episode_ids(&self) -> Vec<u64> {
        let mut ids = Vec::new();
        for tr in &self.transitions {
            if ids.last() != Some(&tr.episode_id) {
                ids.push(tr.episode_id);
            }
        }
        ids
    }

    /// Deterministic 80/20 split by episode id, not by transition, so
    /// before/after frames of one episode never straddle the split.
    pub fn split_by_episode(&self) -> (Vec<&Transition>, Vec<&Transition>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for tr in &self.transitions {
            if tr.episode_id % 5 == 4 {
                val.push(tr);
            } else {
                train.push(tr);
            }
        }
        (train, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn small_cfg() -> GenConfig {
        GenConfig { kind: VegKind::Cucumber, episodes: 12, master_seed: 7, noise_sigma: 0.1 }
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        generate_dataset(d1.path(), &small_cfg()).unwrap();
        generate_dataset(d2.path(), &small_cfg()).unwrap();
        let i1 = fs::read(d1.path().join("index.jsonl")).unwrap();
        let i2 = fs::read(d2.path().join("index.jsonl")).unwrap();
        assert_eq!(i1, i2);
        // Compare every image byte-for-byte.
        let mut names: Vec<_> = fs::read_dir(d1.path().join("img"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = fs::read(d1.path().join("img").join(&name)).unwrap();
            let b = fs::read(d2.path().join("img").join(&name)).unwrap();
            assert_eq!(a, b, "{name:?}");
        }
    }

    #[test]
    fn stored_classes_match_classifier() {
        let dir = TempDir::new().unwrap();
        generate_dataset(dir.path(), &small_cfg()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for tr in &ds.transitions {
            let l = tr.veg_kind().unwrap().profile().nominal_length;
            if let (Some(d), Some(c)) = (tr.slice_thickness, tr.slice_class) {
                assert_eq!(classify_thickness(d, l, ObsRole::Slice).unwrap(), c);
            }
            assert_eq!(
                classify_thickness(tr.remaining_after, l, ObsRole::WholeVegetable).unwrap(),
                tr.remaining_class
            );
            assert_eq!(tr.created, !tr.stop);
            assert_eq!(tr.created, tr.slice_thickness.is_some());
        }
    }

    #[test]
    fn index_round_trip_field_for_field() {
        let dir = TempDir::new().unwrap();
        generate_dataset(dir.path(), &small_cfg()).unwrap();
        let first = read_index(&dir.path().join("index.jsonl")).unwrap();
        let copy = dir.path().join("copy.jsonl");
        write_index(&copy, &first).unwrap();
        let second = read_index(&copy).unwrap();
        assert_eq!(first, second);
        // And the rewritten file is byte-identical too.
        assert_eq!(
            fs::read(dir.path().join("index.jsonl")).unwrap(),
            fs::read(&copy).unwrap()
        );
    }

    #[test]
    fn pgm_round_trip_recovers_observation() {
        let dir = TempDir::new().unwrap();
        let obs = render_slice(2.5, VegKind::Cucumber, 99).unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &obs).unwrap();
        let back = read_pgm(&path, ObsRole::Slice).unwrap();
        assert_eq!(back.bbox, obs.bbox);
        assert_eq!(back.role, ObsRole::Slice);
        // Pixels agree to quantization.
        for (a, b) in obs.pixels.iter().zip(back.pixels.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn chained_before_equals_previous_after() {
        let dir = TempDir::new().unwrap();
        generate_dataset(dir.path(), &small_cfg()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for pair in ds.transitions.windows(2) {
            if pair[0].episode_id == pair[1].episode_id {
                assert_eq!(pair[1].obs_before, pair[0].obs_after);
                assert_eq!(pair[1].t, pair[0].t + 1);
            }
        }
    }

    #[test]
    fn unknown_key_in_index_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("index.jsonl");
        fs::write(&path, br#"{"episode_id":0,"t":0,"veg_type":"cucumber","action_d":1.0,"created":true,"slice_thickness":1.0,"remaining_after":10.0,"stop":false,"slice_class":1,"remaining_class":2,"obs_before":"a","obs_after":"b","slice_obs":"c","bogus":1}"#).unwrap();
        assert!(read_index(&path).is_err());
    }
}
