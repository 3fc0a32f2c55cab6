//! Scripted anomaly timelines, frame rendering, annotation records and the
//! line-delimited dataset format.
//!
//! Event boundaries are even frame indices so every boundary coincides with
//! the first frame of a frame pair.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::FrameSequence;
use crate::error::{Error, Result};
use crate::rng::{mix, SeededRng};
use crate::vocab::{TokenId, Vocab};

pub const DATASET_SCHEMA: &str = "vigil-dataset";
pub const DATASET_VERSION: u32 = 1;
const WORLD_LABEL: u64 = 0x57_4F_52_4C_44;
const NOISE_LABEL: u64 = 0x4E_4F_49_53_45;
const PLACEMENT_RETRIES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Frames per stream.
    pub frames: usize,
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
    /// Relative probability of a stream holding 0, 1, 2, … events.
    pub event_count_weights: Vec<f64>,
    /// Inclusive range of `t_n - t_p` for predictable events.
    pub lead_frames: (usize, usize),
    /// Inclusive range of `t_m - t_n`.
    pub duration_frames: (usize, usize),
    pub unpredictable_fraction: f64,
    pub noise_sd: f64,
    /// Precursor scale ρ.
    pub precursor_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 48,
            categories: 6,
            height: 16,
            width: 16,
            channels: 4,
            fps: 2.0,
            event_count_weights: vec![0.1, 0.6, 0.3],
            lead_frames: (4, 12),
            duration_frames: (6, 12),
            unpredictable_fraction: 0.25,
            noise_sd: 0.5,
            precursor_scale: 0.5,
        }
    }
}

fn even_range(name: &str, (lo, hi): (usize, usize)) -> Result<(usize, usize)> {
    let (a, b) = (lo.div_ceil(2), hi / 2);
    if a > b {
        return Err(Error::Config(format!("{name} range {lo}..={hi} holds no even value")));
    }
    Ok((a, b))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 || self.categories == 0 || self.fps <= 0.0 {
            return Err(Error::Config("frames ≥ 4, categories ≥ 1 and fps > 0 required".into()));
        }
        if self.event_count_weights.is_empty()
            || self.event_count_weights.iter().any(|w| !(*w >= 0.0))
            || self.event_count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("event count weights must be non-negative with a positive sum".into()));
        }
        even_range("lead", self.lead_frames)?;
        let (d_lo, _) = even_range("duration", self.duration_frames)?;
        if d_lo == 0 {
            return Err(Error::Config("anomaly duration must be at least 2 frames".into()));
        }
        if !(0.0..=1.0).contains(&self.unpredictable_fraction) {
            return Err(Error::Config("unpredictable fraction outside [0, 1]".into()));
        }
        if !(self.precursor_scale > 0.0 && self.precursor_scale < 1.0) {
            return Err(Error::Config("precursor scale must lie in (0, 1)".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::Config("noise_sd must be non-negative".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn pair_time(&self, pair: usize) -> f64 {
        2.0 * pair as f64 / self.fps
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    /// Stream length in seconds.
    pub fn duration(&self) -> f64 {
        self.frame_time(self.frames)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub category: usize,
    /// Precursor start.
    pub t_p: usize,
    /// Onset.
    pub t_n: usize,
    /// Offset (last anomalous frame).
    pub t_m: usize,
}

impl Event {
    pub fn predictable(&self) -> bool {
        self.t_p < self.t_n
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub frames: usize,
    pub events: Vec<Event>,
}

impl EventTimeline {
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = None;
        for e in &self.events {
            let ok = e.t_p <= e.t_n && e.t_n < e.t_m && e.t_m <= self.frames && e.t_p >= 1;
            let disjoint = prev_end.is_none_or(|p| e.t_p > p);
            if !ok || !disjoint {
                return Err(Error::Generation(format!("invalid event {e:?}")));
            }
            prev_end = Some(e.t_m);
        }
        Ok(())
    }

    /// State of a frame: `None` normal, `Some((c, false))` precursor,
    /// `Some((c, true))` anomaly.
    pub fn state(&self, frame: usize) -> Option<(usize, bool)> {
        self.events.iter().find_map(|e| {
            if (e.t_n..=e.t_m).contains(&frame) {
                Some((e.category, true))
            } else if (e.t_p..e.t_n).contains(&frame) {
                Some((e.category, false))
            } else {
                None
            }
        })
    }
}

/// Samples a valid timeline; boundaries are even frame indices.
pub fn gen_timeline(rng: &mut SeededRng, cfg: &SynthConfig) -> Result<EventTimeline> {
    cfg.validate()?;
    let total: f64 = cfg.event_count_weights.iter().sum();
    let mut u = rng.uniform() * total;
    let mut count = cfg.event_count_weights.len() - 1;
    for (i, w) in cfg.event_count_weights.iter().enumerate() {
        if u < *w {
            count = i;
            break;
        }
        u -= w;
    }
    let (l_lo, l_hi) = even_range("lead", cfg.lead_frames)?;
    let (d_lo, d_hi) = even_range("duration", cfg.duration_frames)?;
    // Frames 0-1 stay normal; each event occupies lead + dur + 1 frames plus
    // one normal frame after it, all counted in pairs.
    let avail_units = (cfg.frames - 2) / 2;
    for _ in 0..PLACEMENT_RETRIES {
        let shapes: Vec<(usize, usize, usize)> = (0..count)
            .map(|_| {
                let unpredictable = rng.uniform() < cfg.unpredictable_fraction;
                let lead = if unpredictable { 0 } else { rng.int_inclusive(l_lo, l_hi) };
                let dur = rng.int_inclusive(d_lo, d_hi);
                let cat = rng.int_inclusive(0, cfg.categories - 1);
                (lead, dur, cat)
            })
            .collect();
        let used: usize = shapes.iter().map(|(l, d, _)| l + d + 1).sum();
        if used > avail_units {
            continue;
        }
        let slack = avail_units - used;
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.int_inclusive(0, slack)).collect();
        cuts.sort_unstable();
        let mut cursor = 1;
        let mut prev_cut = 0;
        let mut events = Vec::with_capacity(count);
        for ((lead, dur, category), cut) in shapes.into_iter().zip(cuts) {
            cursor += cut - prev_cut;
            prev_cut = cut;
            let t_p = 2 * cursor;
            let t_n = t_p + 2 * lead;
            let t_m = t_n + 2 * dur;
            events.push(Event { category, t_p, t_n, t_m });
            cursor += lead + dur + 1;
        }
        let tl = EventTimeline {
            frames: cfg.frames,
            events,
        };
        tl.validate()?;
        return Ok(tl);
    }
    Err(Error::Generation(format!(
        "could not place {count} events in {} frames after {PLACEMENT_RETRIES} attempts",
        cfg.frames
    )))
}

/// Shared background and per-category signatures of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub background: Vec<f64>,
    pub signatures: Vec<Vec<f64>>,
    pub precursor_scale: f64,
}

impl World {
    pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed).fork(WORLD_LABEL);
        let n = cfg.frame_len();
        let background = (0..n).map(|_| rng.normal()).collect();
        let signatures: Vec<Vec<f64>> = (0..cfg.categories)
            .map(|_| (0..n).map(|_| rng.normal()).collect())
            .collect();
        let world = Self {
            background,
            signatures,
            precursor_scale: cfg.precursor_scale,
        };
        let min = world.min_signature_distance();
        if min < 3.0 * cfg.noise_sd {
            return Err(Error::Generation(format!(
                "signature distance {min:.3} below 3 × noise sd {}",
                cfg.noise_sd
            )));
        }
        Ok(world)
    }

    pub fn min_signature_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in self.signatures.iter().enumerate() {
            for b in &self.signatures[i + 1..] {
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        min
    }
}

/// Background plus precursor/anomaly signature plus Gaussian noise.
pub fn render_frames(
    timeline: &EventTimeline,
    world: &World,
    cfg: &SynthConfig,
    noise_sd: f64,
    rng: &mut SeededRng,
) -> FrameSequence {
    let mut seq = FrameSequence::new(cfg.height, cfg.width, cfg.channels, cfg.fps);
    for f in 0..timeline.frames {
        let (sig, scale) = match timeline.state(f) {
            Some((c, true)) => (Some(&world.signatures[c]), 1.0),
            Some((c, false)) => (Some(&world.signatures[c]), world.precursor_scale),
            None => (None, 0.0),
        };
        let frame = world
            .background
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let s = sig.map_or(0.0, |s| scale * s[i]);
                let noise = if noise_sd > 0.0 { noise_sd * rng.normal() } else { 0.0 };
                b + s + noise
            })
            .collect();
        seq.frames.push(frame);
    }
    seq
}

/// A supervised response anchored after the frame block of `pair`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub event: usize,
    pub frame: usize,
    pub pair: usize,
    pub t: f64,
    pub category: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub event: usize,
    pub frame: usize,
    pub pair: usize,
    pub t: f64,
    pub category: usize,
    pub family: usize,
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub vap: Vec<ResponseRecord>,
    pub vad: Vec<ResponseRecord>,
    pub vaa: Vec<QueryRecord>,
}

/// Key frames `t_n, t_n + s, …, ≤ t_m` with `s = ⌈(t_m − t_n + 1) / 3⌉`.
pub fn vad_key_frames(t_n: usize, t_m: usize) -> Vec<usize> {
    let stride = (t_m - t_n + 1).div_ceil(3).max(1);
    (t_n..=t_m).step_by(stride).collect()
}

pub fn gen_annotations(timeline: &EventTimeline, vocab: &Vocab, fps: f64) -> Result<AnnotationSet> {
    let mut out = AnnotationSet::default();
    let pair_time = |pair: usize| 2.0 * pair as f64 / fps;
    for (idx, e) in timeline.events.iter().enumerate() {
        if e.category >= vocab.categories() {
            return Err(Error::Config(format!("category {} missing from vocabulary", e.category)));
        }
        if e.predictable() {
            let pair = e.t_p / 2;
            out.vap.push(ResponseRecord {
                event: idx,
                frame: e.t_p,
                pair,
                t: pair_time(pair),
                category: e.category,
                tokens: vocab.vap_response(e.category),
            });
        }
        let mut last_pair = None;
        for frame in vad_key_frames(e.t_n, e.t_m) {
            let pair = frame / 2;
            if last_pair == Some(pair) {
                continue;
            }
            last_pair = Some(pair);
            out.vad.push(ResponseRecord {
                event: idx,
                frame,
                pair,
                t: pair_time(pair),
                category: e.category,
                tokens: vocab.vad_response(e.category),
            });
        }
        // Query strictly inside (t_n, t_m), at the middle pair.
        let (lo, hi) = (e.t_n / 2 + 1, (e.t_m - 1) / 2);
        if lo <= hi && 2 * hi > e.t_n {
            let pair = (lo + hi) / 2;
            let family = (e.t_n / 2 + idx) % crate::vocab::FAMILIES;
            out.vaa.push(QueryRecord {
                event: idx,
                frame: 2 * pair,
                pair,
                t: pair_time(pair),
                category: e.category,
                family,
                query: vocab.vaa_query(family),
                answer: vocab.vaa_answer(e.category, family),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub id: u32,
    pub frames: usize,
    pub timeline: EventTimeline,
    pub annotations: AnnotationSet,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: SynthConfig,
    pub streams: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub streams: Vec<StreamRecord>,
}

/// Train and test stream ids of one generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub config_hash: String,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

impl Dataset {
    pub fn empty(split: &str, seed: u64, config: SynthConfig) -> Self {
        Self {
            header: DatasetHeader {
                schema: DATASET_SCHEMA.into(),
                version: DATASET_VERSION,
                split: split.into(),
                seed,
                config_hash: config.hash(),
                config,
                streams: 0,
            },
            streams: Vec::new(),
        }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.header.config
    }

    pub fn world(&self) -> Result<World> {
        World::generate(self.header.seed, &self.header.config)
    }

    pub fn render(&self, stream: &StreamRecord, world: &World) -> FrameSequence {
        let cfg = self.config();
        render_frames(
            &stream.timeline,
            world,
            cfg,
            cfg.noise_sd,
            &mut SeededRng::new(stream.noise_seed),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header = self.header.clone();
        header.streams = self.streams.len();
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &self.streams {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty dataset file", path.display())))??;
        let raw: serde_json::Value = serde_json::from_str(&first)?;
        if raw.get("schema").and_then(|s| s.as_str()) != Some(DATASET_SCHEMA) {
            return Err(Error::Parse(format!("{}: not a dataset file", path.display())));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != DATASET_VERSION {
            return Err(Error::Schema {
                what: "dataset".into(),
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let header: DatasetHeader = serde_json::from_value(raw)?;
        if header.config.hash() != header.config_hash {
            return Err(Error::Parse(format!("{}: config hash does not match config", path.display())));
        }
        let mut streams = Vec::with_capacity(header.streams);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            streams.push(serde_json::from_str::<StreamRecord>(&line)?);
        }
        if streams.len() != header.streams {
            return Err(Error::Parse(format!(
                "{}: header announces {} streams, found {}",
                path.display(),
                header.streams,
                streams.len()
            )));
        }
        Ok(Self { header, streams })
    }
}

/// One stream record, a pure function of `(seed, config, id)`.
pub fn gen_stream(seed: u64, cfg: &SynthConfig, vocab: &Vocab, id: u32) -> Result<StreamRecord> {
    let mut rng = SeededRng::new(mix(seed, id as u64 + 1));
    let timeline = gen_timeline(&mut rng, cfg)?;
    let annotations = gen_annotations(&timeline, vocab, cfg.fps)?;
    Ok(StreamRecord {
        id,
        frames: cfg.frames,
        timeline,
        annotations,
        noise_seed: mix(mix(seed, NOISE_LABEL), id as u64),
    })
}

/// Streams `0..n_train` form the train split and the next `n_test` the test split.
pub fn generate(seed: u64, cfg: &SynthConfig, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset, DatasetSplit)> {
    cfg.validate()?;
    World::generate(seed, cfg)?;
    let vocab = Vocab::new(cfg.categories)?;
    let mut train = Dataset::empty("train", seed, cfg.clone());
    let mut test = Dataset::empty("test", seed, cfg.clone());
    for id in 0..(n_train + n_test) as u32 {
        let s = gen_stream(seed, cfg, &vocab, id)?;
        if (id as usize) < n_train {
            train.streams.push(s);
        } else {
            test.streams.push(s);
        }
    }
    train.header.streams = train.streams.len();
    test.header.streams = test.streams.len();
    let split = DatasetSplit {
        seed,
        config_hash: cfg.hash(),
        train: train.streams.iter().map(|s| s.id).collect(),
        test: test.streams.iter().map(|s| s.id).collect(),
    };
    Ok((train, test, split))
}
