//! Source ingestion, scene-by-array dataset construction and batch serving.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! manifest.json
//! sources/{clip_id}.wav
//! scenes/{scene_id}/{variant}/{array_id}.wav      array signals
//! scenes/{scene_id}/{variant}/reference.wav       reference Ambisonics
//! scenes/{scene_id}/{variant}/rir/{array_id}.wav  array responses, [mic][source] channels
//! scenes/{scene_id}/{variant}/rir/reference.wav
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{quantize_geometry, sample_geometry, ArrayGeometry, ArrayRecord, QuantizedGeometry};
use crate::dsp::{read_wav, resample, write_wav, Audio, Spectrogram, Stft, WavEncoding};
use crate::error::{Error, Result};
use crate::scene::{sample_scene, ImpulseResponseSet, SceneConfig, SceneRecord, Simulator};

pub const SAMPLE_RATE: u32 = 24_000;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dry,
    Wet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dry => "dry",
            Variant::Wet => "wet",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dry" => Ok(Variant::Dry),
            "wet" => Ok(Variant::Wet),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// A seeded generator on its own stream, so that draws for one purpose never
/// shift the draws for another.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// stream tags
const STREAM_SPLIT: u64 = 1;
const STREAM_SYNTH: u64 = 2;
const STREAM_TRAIN_POOL: u64 = 3;
const STREAM_SCENES: u64 = 4;
const STREAM_PAIRING: u64 = 5;
const STREAM_HELDOUT_ARRAYS: u64 = 6;
const STREAM_EPOCH: u64 = 1 << 32;
const STREAM_DRAW: u64 = 1 << 40;

// ---------------------------------------------------------------------------
// sources

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub clips: usize,
    pub seconds: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clips: 50,
            seconds: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceClip {
    pub id: String,
    /// File the clip came from, `None` for synthetic clips.
    pub origin: Option<PathBuf>,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub eval: Vec<String>,
}

impl SourceSplits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Eval => &self.eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceIndex {
    pub sample_rate: u32,
    pub synthetic: bool,
    pub clips: Vec<SourceClip>,
    pub splits: SourceSplits,
}

impl SourceIndex {
    pub fn clip(&self, id: &str) -> Option<&SourceClip> {
        self.clips.iter().find(|c| c.id == id)
    }
}

/// Shuffles `ids` and cuts them 80/10/10.
pub fn split_ids(ids: &[String], seed: u64) -> SourceSplits {
    let mut ids = ids.to_vec();
    ids.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let n = ids.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let eval = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    SourceSplits {
        train: ids,
        val,
        eval,
    }
}

fn noise_burst_clip(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    // coloured noise: one-pole lowpass with a random corner
    let corner: f64 = rng.gen_range(800.0..10_000.0);
    let a = (-2.0 * std::f64::consts::PI * corner / fs).exp();
    let mut state = 0.0;
    let mut envelope = vec![0.0; len];
    let bursts = rng.gen_range(1..=4);
    for _ in 0..bursts {
        let dur = (rng.gen_range(0.2..1.5) * fs) as usize;
        let start = rng.gen_range(0..len.saturating_sub(dur).max(1));
        let attack = (0.01 * fs) as usize;
        let gain: f64 = rng.gen_range(0.2..0.6);
        for i in 0..dur.min(len - start) {
            let rise = (i as f64 / attack as f64).min(1.0);
            let fall = (-3.0 * i as f64 / dur as f64).exp();
            envelope[start + i] += gain * rise * fall;
        }
    }
    (0..len)
        .map(|i| {
            let w: f64 = rng.sample(StandardNormal);
            state = a * state + (1.0 - a) * w;
            let floor: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-3;
            // the white share keeps the top octaves populated
            envelope[i] * (state * 2.0 + 0.3 * w) + floor
        })
        .collect()
}

fn tone_complex_clip(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let f0: f64 = rng.gen_range(110.0..880.0);
    let partials = ((fs / 2.0 * 0.9) / f0) as usize;
    let phases: Vec<f64> = (0..partials)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let tremolo: f64 = rng.gen_range(0.5..4.0);
    let gain: f64 = rng.gen_range(0.1..0.3);
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            let mut v = 0.0;
            for (k, ph) in phases.iter().enumerate() {
                let h = (k + 1) as f64;
                v += (std::f64::consts::TAU * h * f0 * t + ph).sin() / h.sqrt();
            }
            let am = 0.75 + 0.25 * (std::f64::consts::TAU * tremolo * t).sin();
            let floor: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-3;
            gain * am * v / (partials as f64).sqrt() + floor
        })
        .collect()
}

/// Seeded clip set alternating noise bursts and tone complexes.
pub fn synthetic_clips(seed: u64, cfg: &SyntheticConfig, sample_rate: u32) -> Vec<SourceClip> {
    let len = (cfg.seconds * sample_rate as f64).round() as usize;
    (0..cfg.clips)
        .map(|i| {
            let mut rng = stream_rng(seed, STREAM_SYNTH + ((i as u64) << 8));
            let mut samples = if i % 2 == 0 {
                noise_burst_clip(&mut rng, len, sample_rate as f64)
            } else {
                tone_complex_clip(&mut rng, len, sample_rate as f64)
            };
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                let level: f64 = rng.gen_range(0.1..0.9);
                samples.iter_mut().for_each(|v| *v *= level / peak);
            }
            SourceClip {
                id: format!("synth-{i:04}"),
                origin: None,
                samples,
            }
        })
        .collect()
}

/// Indexes audio files in `dir`, resampled to `target_fs` and mixed to mono.
/// Falls back to seeded synthetic clips when `dir` is `None` or missing.
pub fn ingest_sources(
    dir: Option<&Path>,
    target_fs: u32,
    seed: u64,
    synthetic: &SyntheticConfig,
) -> Result<SourceIndex> {
    let dir = dir.filter(|d| d.exists());
    let Some(dir) = dir else {
        let clips = synthetic_clips(seed, synthetic, target_fs);
        if clips.is_empty() {
            return Err(Error::Input("synthetic source set is empty".into()));
        }
        let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
        return Ok(SourceIndex {
            sample_rate: target_fs,
            synthetic: true,
            splits: split_ids(&ids, seed),
            clips,
        });
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut clips = Vec::new();
    for path in paths {
        let audio = match read_wav(&path) {
            Ok(a) if !a.is_empty() => a,
            Ok(_) => {
                log::warn!("skipping empty file {}", path.display());
                continue;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let n = audio.channels.len() as f64;
        let mono: Vec<f64> = (0..audio.len())
            .map(|i| audio.channels.iter().map(|c| c[i]).sum::<f64>() / n)
            .collect();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        clips.push(SourceClip {
            id: stem,
            samples: resample(&mono, audio.sample_rate, target_fs),
            origin: Some(path),
        });
    }
    if clips.is_empty() {
        return Err(Error::Input(format!("no readable audio in {}", dir.display())));
    }
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    Ok(SourceIndex {
        sample_rate: target_fs,
        synthetic: false,
        splits: split_ids(&ids, seed),
        clips,
    })
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scenes: usize,
    pub arrays_per_scene: usize,
    /// Scene `i` gets `source_counts[i % len]` sources.
    pub source_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub profile: Profile,
    pub seed: u64,
    pub sample_rate: u32,
    pub order: usize,
    pub mics: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub clip_seconds: f64,
    pub train: SplitPlan,
    pub val: SplitPlan,
    pub eval: SplitPlan,
    /// Arrays available to training scenes; held-out splits draw fresh ones.
    pub train_array_pool: usize,
    pub variants: Vec<Variant>,
    pub scene: SceneConfig,
    pub source_dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            profile: Profile::Desk,
            seed,
            sample_rate: SAMPLE_RATE,
            order: 1,
            mics: 5,
            d_min: 0.02,
            d_max: 0.18,
            clip_seconds: 2.0,
            train: SplitPlan {
                scenes: 8,
                arrays_per_scene: 4,
                source_counts: vec![1],
            },
            val: SplitPlan {
                scenes: 4,
                arrays_per_scene: 2,
                source_counts: vec![1, 2],
            },
            eval: SplitPlan {
                scenes: 4,
                arrays_per_scene: 2,
                source_counts: vec![1, 2],
            },
            train_array_pool: 16,
            variants: vec![Variant::Dry, Variant::Wet],
            scene: SceneConfig::default(),
            source_dir: None,
            synthetic: SyntheticConfig::default(),
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            profile: Profile::Paper,
            train: SplitPlan {
                scenes: 300,
                arrays_per_scene: 1000,
                source_counts: vec![1, 2],
            },
            val: SplitPlan {
                scenes: 1000,
                arrays_per_scene: 10,
                source_counts: vec![1, 2],
            },
            eval: SplitPlan {
                scenes: 1000,
                arrays_per_scene: 10,
                source_counts: vec![1, 2],
            },
            train_array_pool: 10_000,
            synthetic: SyntheticConfig {
                clips: 2000,
                seconds: 5.0,
            },
            ..Self::desk(seed)
        }
    }

    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Paper => Self::paper(seed),
            Profile::Desk => Self::desk(seed),
        }
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn plan(&self, split: Split) -> &SplitPlan {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Eval => &self.eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if self.clip_samples() == 0 {
            return Err(Error::Config("clip length must be positive".into()));
        }
        if self.train.arrays_per_scene > self.train_array_pool {
            return Err(Error::Config(format!(
                "{} arrays per training scene exceed the pool of {}",
                self.train.arrays_per_scene, self.train_array_pool
            )));
        }
        for split in [Split::Train, Split::Val, Split::Eval] {
            let p = self.plan(split);
            if p.scenes > 0 && (p.arrays_per_scene == 0 || p.source_counts.is_empty()) {
                return Err(Error::Config(format!("{split} split needs arrays and source counts")));
            }
            if p.source_counts.contains(&0) {
                return Err(Error::Config(format!("{split} split has a zero source count")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub origin: Option<PathBuf>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub record: SceneRecord,
    pub split: Split,
    /// Default source clips, one per source.
    pub clips: Vec<String>,
    pub excerpt_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub scene_id: String,
    pub array_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub profile: Profile,
    pub seed: u64,
    pub sample_rate: u32,
    pub order: usize,
    pub clip_samples: usize,
    pub d_max: f64,
    pub variants: Vec<Variant>,
    pub synthetic_sources: bool,
    pub sources: Vec<SourceEntry>,
    pub splits: SourceSplits,
    pub arrays: Vec<ArrayRecord>,
    pub scenes: Vec<ManifestScene>,
    pub pairings: Vec<Pairing>,
    /// Content key of every rendered (scene, variant, array) entry.
    pub cache_keys: Vec<String>,
}

impl DatasetManifest {
    pub fn scene(&self, id: &str) -> Option<&ManifestScene> {
        self.scenes.iter().find(|s| s.record.id == id)
    }

    pub fn array(&self, id: &str) -> Option<&ArrayRecord> {
        self.arrays.iter().find(|a| a.id == id)
    }

    pub fn pairings_in(&self, split: Split) -> impl Iterator<Item = &Pairing> {
        self.pairings.iter().filter(move |p| p.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(root: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(root.join(MANIFEST_FILE))?)
    }

    /// Structural audit: disjoint source splits, resolvable pairings, and
    /// no training array reused by a held-out split.
    pub fn check(&self) -> Result<()> {
        let sets: Vec<BTreeSet<&String>> = [Split::Train, Split::Val, Split::Eval]
            .iter()
            .map(|s| self.splits.get(*s).iter().collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(shared) = sets[i].intersection(&sets[j]).next() {
                    return Err(Error::Input(format!("source {shared} appears in two splits")));
                }
            }
        }
        for p in &self.pairings {
            if self.scene(&p.scene_id).is_none() || self.array(&p.array_id).is_none() {
                return Err(Error::Input(format!(
                    "pairing ({}, {}) references a missing record",
                    p.scene_id, p.array_id
                )));
            }
        }
        let train_arrays: BTreeSet<&String> =
            self.pairings_in(Split::Train).map(|p| &p.array_id).collect();
        if let Some(p) = self
            .pairings
            .iter()
            .find(|p| p.split != Split::Train && train_arrays.contains(&p.array_id))
        {
            return Err(Error::Input(format!(
                "array {} is shared between training and {}",
                p.array_id, p.split
            )));
        }
        Ok(())
    }
}

pub fn scene_dir(root: &Path, scene_id: &str, variant: Variant) -> PathBuf {
    root.join("scenes").join(scene_id).join(variant.to_string())
}

pub fn array_audio_path(root: &Path, scene_id: &str, variant: Variant, array_id: &str) -> PathBuf {
    scene_dir(root, scene_id, variant).join(format!("{array_id}.wav"))
}

pub fn reference_path(root: &Path, scene_id: &str, variant: Variant) -> PathBuf {
    scene_dir(root, scene_id, variant).join("reference.wav")
}

pub fn array_rir_path(root: &Path, scene_id: &str, variant: Variant, array_id: &str) -> PathBuf {
    scene_dir(root, scene_id, variant).join("rir").join(format!("{array_id}.wav"))
}

pub fn reference_rir_path(root: &Path, scene_id: &str, variant: Variant) -> PathBuf {
    scene_dir(root, scene_id, variant).join("rir").join("reference.wav")
}

pub fn source_path(root: &Path, clip_id: &str) -> PathBuf {
    root.join("sources").join(format!("{clip_id}.wav"))
}

fn variant_scene(record: &SceneRecord, variant: Variant) -> crate::scene::Scene {
    match variant {
        Variant::Wet => record.scene(),
        Variant::Dry => record.scene().to_dry(),
    }
}

/// Takes `len` samples from `start`, zero padded past the end.
fn excerpt(clip: &[f64], start: isize, len: usize) -> Vec<f64> {
    (0..len as isize)
        .map(|i| {
            let k = start + i;
            if k >= 0 && (k as usize) < clip.len() {
                clip[k as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Renders `len` samples starting at `start` of each clip, with enough
/// pre-roll that the reverberant state at the window start is complete.
pub fn render_excerpt(
    sim: &Simulator,
    irs: &ImpulseResponseSet,
    clips: &[&[f64]],
    start: usize,
    len: usize,
) -> Result<Vec<Vec<f64>>> {
    let pre = irs.taps();
    let from = start as isize - pre as isize;
    let segments: Vec<Vec<f64>> = clips.iter().map(|c| excerpt(c, from, pre + len)).collect();
    let rendered = sim.render(irs, &segments, irs.sample_rate)?;
    Ok(rendered.into_iter().map(|ch| ch[pre..pre + len].to_vec()).collect())
}

/// Flattens `[channel][source][tap]` responses into WAV channels.
fn irs_to_audio(irs: &ImpulseResponseSet) -> Audio {
    let taps = irs.taps();
    let channels = irs
        .responses
        .iter()
        .flat_map(|ch| ch.iter().map(|r| {
            let mut r = r.clone();
            r.resize(taps, 0.0);
            r
        }))
        .collect();
    Audio {
        sample_rate: irs.sample_rate,
        channels,
    }
}

fn audio_to_irs(audio: Audio, sources: usize) -> Result<ImpulseResponseSet> {
    if sources == 0 || audio.channels.len() % sources != 0 {
        return Err(Error::Format(format!(
            "{} response channels do not split into {sources} sources",
            audio.channels.len()
        )));
    }
    let mut responses = Vec::new();
    let mut it = audio.channels.into_iter();
    loop {
        let group: Vec<Vec<f64>> = it.by_ref().take(sources).collect();
        if group.is_empty() {
            break;
        }
        responses.push(group);
    }
    Ok(ImpulseResponseSet {
        sample_rate: audio.sample_rate,
        responses,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_key(
    record: &SceneRecord,
    variant: Variant,
    array: Option<&ArrayRecord>,
    clips: &[String],
    start: usize,
    cfg: &DatasetConfig,
    sim: &Simulator,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(record)?);
    h.update(variant.to_string());
    if let Some(a) = array {
        h.update(serde_json::to_vec(a)?);
    }
    h.update(serde_json::to_vec(clips)?);
    h.update(start.to_le_bytes());
    h.update(cfg.order.to_le_bytes());
    h.update(cfg.clip_samples().to_le_bytes());
    h.update(serde_json::to_vec(&cfg.synthetic)?);
    h.update(format!(
        "{}:{}:{}:{}",
        sim.sample_rate, sim.speed_of_sound, sim.fd_taps, sim.decay_factor
    ));
    Ok(hex(&h.finalize()))
}

fn key_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".key");
    PathBuf::from(s)
}

fn cached(paths: &[&Path], key: &str) -> bool {
    paths.iter().all(|p| {
        p.exists() && fs::read_to_string(key_path(p)).map(|k| k == key).unwrap_or(false)
    })
}

fn write_keyed(path: &Path, audio: &Audio, key: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_wav(path, audio, WavEncoding::Float32)?;
    fs::write(key_path(path), key)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub rendered: usize,
    pub reused: usize,
}

fn sample_array(rng: &mut ChaCha8Rng, id: String, cfg: &DatasetConfig) -> Result<ArrayRecord> {
    let seed: u64 = rng.gen();
    let mut arng = ChaCha8Rng::seed_from_u64(seed);
    let g = sample_geometry(&mut arng, cfg.mics, cfg.d_min, cfg.d_max)?;
    let q = quantize_geometry(&g, cfg.d_max)?;
    Ok(ArrayRecord {
        id,
        seed,
        coords: g.coords,
        quantized: q.indices,
    })
}

/// Samples scenes and arrays, renders every (scene, array, variant) pairing
/// under `root` and writes the manifest. Renders whose content key matches
/// the file on disk are reused.
pub fn build_dataset(
    cfg: &DatasetConfig,
    sources: &SourceIndex,
    root: &Path,
) -> Result<(DatasetManifest, BuildStats)> {
    cfg.validate()?;
    if sources.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "sources at {} Hz, dataset at {} Hz",
            sources.sample_rate, cfg.sample_rate
        )));
    }
    let sim = Simulator {
        sample_rate: cfg.sample_rate,
        ..Simulator::default()
    };
    let clip_len = cfg.clip_samples();

    // arrays
    let mut pool_rng = stream_rng(cfg.seed, STREAM_TRAIN_POOL);
    let mut arrays: Vec<ArrayRecord> = Vec::new();
    let n_pool = if cfg.train.scenes > 0 { cfg.train_array_pool } else { 0 };
    for i in 0..n_pool {
        arrays.push(sample_array(&mut pool_rng, format!("ma{i:05}"), cfg)?);
    }
    let train_q: BTreeSet<Vec<[u8; 3]>> = arrays.iter().map(|a| a.quantized.clone()).collect();
    let mut held_rng = stream_rng(cfg.seed, STREAM_HELDOUT_ARRAYS);

    // scene geometry first, in parallel; the calibration dominates
    let mut scene_rng = stream_rng(cfg.seed, STREAM_SCENES);
    let mut plan_list: Vec<(Split, usize, u64, usize)> = Vec::new();
    for split in [Split::Train, Split::Val, Split::Eval] {
        let plan = cfg.plan(split);
        for i in 0..plan.scenes {
            let n_src = plan.source_counts[i % plan.source_counts.len()];
            plan_list.push((split, i, scene_rng.gen(), n_src));
        }
    }
    let records: Vec<SceneRecord> = plan_list
        .par_iter()
        .map(|&(split, i, seed, n_src)| {
            let scene_cfg = SceneConfig {
                source_count: n_src,
                dry: false,
                ..cfg.scene.clone()
            };
            let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &scene_cfg)?;
            SceneRecord::from_scene(format!("{split}-{i:05}"), seed, &scene)
        })
        .collect::<Result<_>>()?;

    // sources and arrays per scene
    let mut pair_rng = stream_rng(cfg.seed, STREAM_PAIRING);
    let mut scenes = Vec::new();
    let mut pairings = Vec::new();
    for (&(split, _, _, n_src), record) in plan_list.iter().zip(records) {
        let plan = cfg.plan(split);
        let pool_ids = sources.splits.get(split);
        if pool_ids.len() < n_src {
            return Err(Error::Input(format!(
                "{split} split has {} source clips, a scene needs {n_src}",
                pool_ids.len()
            )));
        }
        let clips: Vec<String> = pool_ids
            .choose_multiple(&mut pair_rng, n_src)
            .cloned()
            .collect();
        let longest = clips
            .iter()
            .filter_map(|c| sources.clip(c))
            .map(|c| c.samples.len())
            .max()
            .unwrap_or(0);
        let excerpt_start = pair_rng.gen_range(0..=longest.saturating_sub(clip_len));
        let array_ids: Vec<String> = if split == Split::Train {
            rand::seq::index::sample(&mut pair_rng, cfg.train_array_pool, plan.arrays_per_scene)
                .into_iter()
                .map(|k| arrays[k].id.clone())
                .collect()
        } else {
            let mut ids = Vec::new();
            while ids.len() < plan.arrays_per_scene {
                let a = sample_array(&mut held_rng, format!("ma{:05}", arrays.len()), cfg)?;
                if train_q.contains(&a.quantized) {
                    continue;
                }
                ids.push(a.id.clone());
                arrays.push(a);
            }
            ids
        };
        for array_id in array_ids {
            pairings.push(Pairing {
                scene_id: record.id.clone(),
                array_id,
                split,
            });
        }
        scenes.push(ManifestScene {
            record,
            split,
            clips,
            excerpt_start,
        });
    }

    // source clips on disk
    fs::create_dir_all(root.join("sources"))?;
    let used: BTreeSet<&String> = sources
        .splits
        .train
        .iter()
        .chain(&sources.splits.val)
        .chain(&sources.splits.eval)
        .collect();
    sources
        .clips
        .par_iter()
        .filter(|c| used.contains(&c.id))
        .try_for_each(|c| -> Result<()> {
            let path = source_path(root, &c.id);
            let mut h = Sha256::new();
            for v in &c.samples {
                h.update(v.to_le_bytes());
            }
            let key = hex(&h.finalize());
            if cached(&[&path], &key) {
                return Ok(());
            }
            write_keyed(
                &path,
                &Audio {
                    sample_rate: sources.sample_rate,
                    channels: vec![c.samples.clone()],
                },
                &key,
            )
        })?;

    // renders, one task per (scene, variant)
    let tasks: Vec<(usize, Variant)> = (0..scenes.len())
        .flat_map(|s| cfg.variants.iter().map(move |v| (s, *v)))
        .collect();
    let results: Vec<Result<(Vec<(String, String, Variant, String)>, BuildStats)>> = tasks
        .par_iter()
        .map(|&(s, variant)| {
            let ms = &scenes[s];
            let scene = variant_scene(&ms.record, variant);
            let mut stats = BuildStats::default();
            let mut keys = Vec::new();
            let clip_data: Vec<&[f64]> = ms
                .clips
                .iter()
                .map(|id| {
                    sources
                        .clip(id)
                        .map(|c| c.samples.as_slice())
                        .ok_or_else(|| Error::Input(format!("unknown clip {id}")))
                })
                .collect::<Result<_>>()?;

            let ref_key = cache_key(&ms.record, variant, None, &ms.clips, ms.excerpt_start, cfg, &sim)?;
            let ref_audio = reference_path(root, &ms.record.id, variant);
            let ref_rir = reference_rir_path(root, &ms.record.id, variant);
            if cached(&[&ref_audio, &ref_rir], &ref_key) {
                stats.reused += 1;
            } else {
                let irs = sim.reference_ambisonic_rirs(&scene, cfg.order)?;
                let signals = render_excerpt(&sim, &irs, &clip_data, ms.excerpt_start, clip_len)?;
                write_keyed(&ref_rir, &irs_to_audio(&irs), &ref_key)?;
                write_keyed(
                    &ref_audio,
                    &Audio {
                        sample_rate: cfg.sample_rate,
                        channels: signals,
                    },
                    &ref_key,
                )?;
                stats.rendered += 1;
            }
            keys.push((ms.record.id.clone(), "reference".to_string(), variant, ref_key));

            for p in pairings.iter().filter(|p| p.scene_id == ms.record.id) {
                let array = arrays
                    .iter()
                    .find(|a| a.id == p.array_id)
                    .ok_or_else(|| Error::Input(format!("unknown array {}", p.array_id)))?;
                let key = cache_key(&ms.record, variant, Some(array), &ms.clips, ms.excerpt_start, cfg, &sim)?;
                let audio_path = array_audio_path(root, &ms.record.id, variant, &array.id);
                let rir_path = array_rir_path(root, &ms.record.id, variant, &array.id);
                if cached(&[&audio_path, &rir_path], &key) {
                    stats.reused += 1;
                } else {
                    let irs = sim.array_rirs(&scene, &array.geometry())?;
                    let signals = render_excerpt(&sim, &irs, &clip_data, ms.excerpt_start, clip_len)?;
                    write_keyed(&rir_path, &irs_to_audio(&irs), &key)?;
                    write_keyed(
                        &audio_path,
                        &Audio {
                            sample_rate: cfg.sample_rate,
                            channels: signals,
                        },
                        &key,
                    )?;
                    stats.rendered += 1;
                }
                keys.push((ms.record.id.clone(), array.id.clone(), variant, key));
            }
            Ok((keys, stats))
        })
        .collect();

    let mut stats = BuildStats::default();
    let mut cache_keys = Vec::new();
    for r in results {
        let (keys, s) = r?;
        stats.rendered += s.rendered;
        stats.reused += s.reused;
        cache_keys.extend(
            keys.into_iter()
                .map(|(scene, array, variant, key)| format!("{scene}/{variant}/{array}:{key}")),
        );
    }

    let used_sources: Vec<SourceEntry> = sources
        .clips
        .iter()
        .filter(|c| used.contains(&c.id))
        .map(|c| SourceEntry {
            id: c.id.clone(),
            origin: c.origin.clone(),
            samples: c.samples.len(),
        })
        .collect();
    let manifest = DatasetManifest {
        profile: cfg.profile,
        seed: cfg.seed,
        sample_rate: cfg.sample_rate,
        order: cfg.order,
        clip_samples: clip_len,
        d_max: cfg.d_max,
        variants: cfg.variants.clone(),
        synthetic_sources: sources.synthetic,
        sources: used_sources,
        splits: sources.splits.clone(),
        arrays,
        scenes,
        pairings,
        cache_keys,
    };
    manifest.check()?;
    fs::write(root.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok((manifest, stats))
}

// ---------------------------------------------------------------------------
// batches

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Example {
    pub scene_id: String,
    pub array_id: String,
    pub variant: Variant,
    pub sources: usize,
    pub geometry: ArrayGeometry,
    pub quantized: QuantizedGeometry,
    /// Array signal spectra, one channel per mic.
    pub x: Spectrogram,
    /// Reference Ambisonic spectra.
    pub reference: Spectrogram,
    /// Reference Ambisonic signals in the time domain.
    pub reference_time: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaderOptions {
    pub split: Split,
    pub variants: Vec<Variant>,
    /// Draw new clips and excerpts per epoch instead of the rendered defaults.
    pub fresh_sources: bool,
    pub shuffle: bool,
    pub seed: u64,
    pub fft: usize,
    pub hop: usize,
}

impl LoaderOptions {
    pub fn new(split: Split, seed: u64) -> Self {
        Self {
            split,
            variants: vec![Variant::Dry, Variant::Wet],
            fresh_sources: false,
            shuffle: split == Split::Train,
            seed,
            fft: 1024,
            hop: 512,
        }
    }
}

/// Serves examples of one split, epoch by epoch.
pub struct BatchLoader {
    root: PathBuf,
    manifest: Arc<DatasetManifest>,
    opts: LoaderOptions,
    items: Vec<(usize, Variant)>,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
    stft: Stft,
    sim: Simulator,
    clips: HashMap<String, Arc<Vec<f64>>>,
    rirs: HashMap<PathBuf, Arc<ImpulseResponseSet>>,
}

impl fmt::Debug for BatchLoader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BatchLoader")
            .field("root", &self.root)
            .field("split", &self.opts.split)
            .field("items", &self.items.len())
            .field("epoch", &self.epoch)
            .finish()
    }
}

impl BatchLoader {
    pub fn new(root: &Path, manifest: Arc<DatasetManifest>, opts: LoaderOptions) -> Result<Self> {
        let items: Vec<(usize, Variant)> = manifest
            .pairings
            .iter()
            .enumerate()
            .filter(|(_, p)| p.split == opts.split)
            .flat_map(|(i, _)| {
                opts.variants
                    .iter()
                    .filter(|v| manifest.variants.contains(v))
                    .map(move |v| (i, *v))
            })
            .collect();
        if items.is_empty() {
            return Err(Error::Input(format!("{} split has no examples", opts.split)));
        }
        let stft = Stft::new(opts.fft, opts.hop)?;
        let sim = Simulator {
            sample_rate: manifest.sample_rate,
            ..Simulator::default()
        };
        let mut loader = Self {
            root: root.to_path_buf(),
            manifest,
            opts,
            order: Vec::new(),
            items,
            epoch: 0,
            cursor: 0,
            stft,
            sim,
            clips: HashMap::new(),
            rirs: HashMap::new(),
        };
        loader.start_epoch(0);
        Ok(loader)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.cursor = 0;
        self.order = (0..self.items.len()).collect();
        if self.opts.shuffle {
            self.order
                .shuffle(&mut stream_rng(self.opts.seed, STREAM_EPOCH + epoch));
        }
    }

    /// Next `batch` examples of the current epoch, or `None` once the epoch
    /// is exhausted. The last batch may be short.
    pub fn next_batch(&mut self, batch: usize) -> Result<Option<Vec<Example>>> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.cursor >= self.order.len() {
            return Ok(None);
        }
        let end = (self.cursor + batch).min(self.order.len());
        let idx: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx.into_iter()
            .map(|i| self.example(i, self.epoch))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Example `i` (in manifest order) as served in `epoch`.
    pub fn example(&mut self, i: usize, epoch: u64) -> Result<Example> {
        let (pi, variant) = self.items[i];
        let manifest = Arc::clone(&self.manifest);
        let pairing = &manifest.pairings[pi];
        let ms = manifest
            .scene(&pairing.scene_id)
            .ok_or_else(|| Error::Input(format!("unknown scene {}", pairing.scene_id)))?;
        let array = manifest
            .array(&pairing.array_id)
            .ok_or_else(|| Error::Input(format!("unknown array {}", pairing.array_id)))?;
        let len = manifest.clip_samples;
        let (mics, reference) = if self.opts.fresh_sources {
            let draw = (epoch << 20) ^ i as u64;
            let mut rng = stream_rng(self.opts.seed, STREAM_DRAW + draw);
            let pool = manifest.splits.get(pairing.split);
            let chosen: Vec<String> = pool
                .choose_multiple(&mut rng, ms.clips.len())
                .cloned()
                .collect();
            let clips: Vec<Arc<Vec<f64>>> =
                chosen.iter().map(|c| self.clip(c)).collect::<Result<_>>()?;
            let longest = clips.iter().map(|c| c.len()).max().unwrap_or(0);
            let start = rng.gen_range(0..=longest.saturating_sub(len));
            let refs: Vec<&[f64]> = clips.iter().map(|c| c.as_slice()).collect();
            let ref_irs = self.rir(&reference_rir_path(&self.root, &ms.record.id, variant), refs.len())?;
            let arr_irs = self.rir(
                &array_rir_path(&self.root, &ms.record.id, variant, &array.id),
                refs.len(),
            )?;
            (
                render_excerpt(&self.sim, &arr_irs, &refs, start, len)?,
                render_excerpt(&self.sim, &ref_irs, &refs, start, len)?,
            )
        } else {
            (
                read_wav(&array_audio_path(&self.root, &ms.record.id, variant, &array.id))?.channels,
                read_wav(&reference_path(&self.root, &ms.record.id, variant))?.channels,
            )
        };
        let fs = manifest.sample_rate;
        Ok(Example {
            scene_id: ms.record.id.clone(),
            array_id: array.id.clone(),
            variant,
            sources: ms.clips.len(),
            geometry: array.geometry(),
            quantized: array.quantized_geometry(),
            x: self.stft.analyze(&mics, fs)?,
            reference: self.stft.analyze(&reference, fs)?,
            reference_time: reference,
        })
    }

    fn clip(&mut self, id: &str) -> Result<Arc<Vec<f64>>> {
        if let Some(c) = self.clips.get(id) {
            return Ok(Arc::clone(c));
        }
        let audio = read_wav(&source_path(&self.root, id))?;
        let c = Arc::new(audio.channels.into_iter().next().unwrap_or_default());
        self.clips.insert(id.to_string(), Arc::clone(&c));
        Ok(c)
    }

    fn rir(&mut self, path: &Path, sources: usize) -> Result<Arc<ImpulseResponseSet>> {
        if let Some(r) = self.rirs.get(path) {
            return Ok(Arc::clone(r));
        }
        let r = Arc::new(audio_to_irs(read_wav(path)?, sources)?);
        self.rirs.insert(path.to_path_buf(), Arc::clone(&r));
        Ok(r)
    }
}

/// Convenience form: the `batch`-th group of `batch_size` examples of `split`
/// in the given epoch.
pub fn load_batch(
    root: &Path,
    manifest: Arc<DatasetManifest>,
    opts: LoaderOptions,
    epoch: u64,
    batch_index: usize,
    batch_size: usize,
) -> Result<Option<Vec<Example>>> {
    let mut loader = BatchLoader::new(root, manifest, opts)?;
    loader.start_epoch(epoch);
    loader.cursor = (batch_index * batch_size).min(loader.order.len());
    loader.next_batch(batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_files_split_40_5_5() {
        let ids: Vec<String> = (0..50).map(|i| format!("f{i}")).collect();
        let s = split_ids(&ids, 3);
        assert_eq!((s.train.len(), s.val.len(), s.eval.len()), (40, 5, 5));
        let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.eval).collect();
        assert_eq!(all.len(), 50);
        assert_eq!(split_ids(&ids, 3), s);
        assert_ne!(split_ids(&ids, 4), s);
    }

    #[test]
    fn synthetic_clips_are_deterministic() {
        let cfg = SyntheticConfig {
            clips: 4,
            seconds: 0.5,
        };
        let a = synthetic_clips(9, &cfg, 24000);
        let b = synthetic_clips(9, &cfg, 24000);
        assert_eq!(a, b);
        assert_eq!(a[0].samples.len(), 12000);
        assert!(a.iter().all(|c| c.samples.iter().all(|v| v.is_finite() && v.abs() <= 0.9)));
        assert_ne!(synthetic_clips(10, &cfg, 24000)[0].samples, a[0].samples);
    }

    #[test]
    fn missing_directory_falls_back_to_synthetic() {
        let idx = ingest_sources(
            Some(Path::new("/nonexistent/corpus")),
            24000,
            1,
            &SyntheticConfig { clips: 10, seconds: 0.1 },
        )
        .unwrap();
        assert!(idx.synthetic);
        assert_eq!(idx.splits.train.len(), 8);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "not audio").unwrap();
        assert!(ingest_sources(Some(dir.path()), 24000, 1, &SyntheticConfig::default()).is_err());
    }

    #[test]
    fn excerpt_pads_with_zeros() {
        assert_eq!(excerpt(&[1.0, 2.0, 3.0], -1, 5), vec![0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn response_audio_round_trip() {
        let irs = ImpulseResponseSet {
            sample_rate: 24000,
            responses: vec![
                vec![vec![1.0, 0.5], vec![0.25, 0.0]],
                vec![vec![0.0, 1.0], vec![0.5, 0.5]],
            ],
        };
        assert_eq!(audio_to_irs(irs_to_audio(&irs), 2).unwrap(), irs);
        assert!(audio_to_irs(irs_to_audio(&irs), 3).is_err());
    }

    #[test]
    fn profile_parsing() {
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert!("huge".parse::<Profile>().is_err());
        assert_eq!(DatasetConfig::paper(0).train.arrays_per_scene, 1000);
        assert!(DatasetConfig::paper(0).validate().is_ok());
    }
}
