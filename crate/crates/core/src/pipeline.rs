//! Experiment orchestration: configuration, output layout and the stages
//! `gen-data → distill → train → run → eval`, plus ablations and benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::MhsaConfig;
use crate::encoder::{EncoderConfig, FrameSequence, Teacher, VisionEncoder};
use crate::error::{Error, Result};
use crate::lm::{self, FinetuneConfig, LmConfig, LmExample, StreamLm};
use crate::metrics::{self, EvalInput, MatchingConfig, MetricReport, StreamTruth};
use crate::params::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, Graph};
use crate::rng::SeededRng;
use crate::scheduler::{self, Engine, LatencyStats, Query, ResponseEvent, SessionConfig, TracePoint};
use crate::strd::{self, DistillConfig, DistillExample, LossCurve, Strd, StrdInit, StrdMode};
use crate::synth::{self, Dataset, SynthConfig};
use crate::vocab::{Mode, Vocab};

/// Environment variable overriding the root of relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "VIGIL_OUTPUT_ROOT";

const ENCODER_LABEL: u64 = 0x454E_434F_4445;
const TEACHER_LABEL: u64 = 0x5445_4143_4845;
const STRD_LABEL: u64 = 0x5354_5244;
const RANDOM_STRD_LABEL: u64 = 0x52_53_54_52_44;
const LM_LABEL: u64 = 0x4C4D;
const LORA_LABEL: u64 = 0x4C4F_5241;
const DISTILL_LABEL: u64 = 0x4449_5354;
const FINETUNE_LABEL: u64 = 0x4649_4E45;
const BENCH_LABEL: u64 = 0x42_45_4E_43_48;
const INGEST_REPEATS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 100,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub lm_depth: usize,
    pub strd_depth: usize,
    /// Teacher attends to future tokens as well.
    pub teacher_bidirectional: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            ffn_mult: 4,
            patch: 8,
            lm_depth: 2,
            strd_depth: 2,
            teacher_bidirectional: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub strd_max_len: usize,
    pub lm_max_len: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            strd_max_len: 64,
            lm_max_len: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Test streams used for held-out teacher matching.
    pub heldout: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch: 8,
            heldout: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub w: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub heldout: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 3e-3,
            batch: 1,
            w: 1.0,
            lora_rank: 16,
            lora_alpha: 32.0,
            heldout: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub gamma_vap: f64,
    pub gamma_vad: f64,
    pub max_response_len: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            gamma_vap: SessionConfig::default_gamma(Mode::Vap),
            gamma_vad: SessionConfig::default_gamma(Mode::Vad),
            max_response_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub depths: Vec<usize>,
    pub gammas: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            depths: vec![1, 2, 3],
            gammas: (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub pairs: usize,
    /// Cache lengths as multiples of the block length.
    pub cache_multiples: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            pairs: 1000,
            cache_multiples: vec![1, 4, 16],
        }
    }
}

/// Complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub cache: CacheSection,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub inference: InferenceSection,
    pub ablation: AblationSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            cache: CacheSection::default(),
            distill: DistillSection::default(),
            finetune: FinetuneSection::default(),
            inference: InferenceSection::default(),
            ablation: AblationSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Sections that determine trained artifacts.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    data: &'a DataSection,
    model: &'a ModelSection,
    cache: &'a CacheSection,
    distill: &'a DistillSection,
    finetune: &'a FinetuneSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-serialisable")
    }

    /// SHA-256 over everything except the output location, inference
    /// thresholds, ablation grids and benchmark sizes.
    pub fn hash(&self) -> String {
        let view = Hashed {
            seed: self.seed,
            data: &self.data,
            model: &self.model,
            cache: &self.cache,
            distill: &self.distill,
            finetune: &self.finetune,
        };
        let json = serde_json::to_string(&view).expect("config is JSON-serialisable");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.encoder_config().validate()?;
        self.mhsa().validate()?;
        if !(1..=3).contains(&self.model.strd_depth) {
            return Err(Error::Config(format!("STRD depth {} outside 1..=3", self.model.strd_depth)));
        }
        let n = self.encoder_config().patches();
        for mode in [Mode::Vap, Mode::Vad] {
            self.session(mode, None).validate(n)?;
        }
        if !(self.finetune.w >= 0.0 && self.finetune.w.is_finite()) {
            return Err(Error::Config("loss weight w must be finite and non-negative".into()));
        }
        for (stage, lr) in [("distill", self.distill.lr), ("finetune", self.finetune.lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{stage} learning rate {lr} must be finite and non-negative")));
            }
        }
        if self.finetune.lora_alpha <= 0.0 || !self.finetune.lora_alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let s = &self.data.synth;
        EncoderConfig {
            height: s.height,
            width: s.width,
            channels: s.channels,
            patch: self.model.patch,
            d_model: self.model.d_model,
        }
    }

    pub fn mhsa(&self) -> MhsaConfig {
        MhsaConfig {
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            ffn_mult: self.model.ffn_mult,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.data.synth.categories)
    }

    pub fn lm_config(&self) -> Result<LmConfig> {
        Ok(LmConfig {
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            ffn_mult: self.model.ffn_mult,
            depth: self.model.lm_depth,
            vocab_size: self.vocab()?.size(),
        })
    }

    pub fn session(&self, mode: Mode, gamma: Option<f64>) -> SessionConfig {
        SessionConfig {
            mode,
            gamma: gamma.unwrap_or(match mode {
                Mode::Vap => self.inference.gamma_vap,
                Mode::Vad => self.inference.gamma_vad,
                Mode::Vaa => SessionConfig::default_gamma(Mode::Vaa),
            }),
            strd_max_len: self.cache.strd_max_len,
            lm_max_len: self.cache.lm_max_len,
            max_response_len: self.inference.max_response_len,
        }
    }

    pub fn strd_mode(&self) -> StrdMode {
        StrdMode::Streaming {
            max_len: self.cache.strd_max_len,
            block_len: self.encoder_config().patches(),
        }
    }
}

/// Which visual path feeds the LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoStrd,
}

impl Variant {
    pub fn dir_name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoStrd => "no-strd",
        }
    }
}

/// Output directory bound to one configuration.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
}

/// Relative paths resolve under the override root when it is set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

impl Workspace {
    /// Creates the directory and stamps the configuration, refusing a
    /// directory produced under a different configuration hash.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = resolve_output(&cfg.output_dir);
        fs::create_dir_all(&root)?;
        let hash = cfg.hash();
        let stamp = root.join("config_hash");
        if stamp.exists() {
            let found = fs::read_to_string(&stamp)?.trim().to_string();
            if found != hash {
                return Err(Error::Stage(format!(
                    "config hash mismatch in {}: directory has {found}, config has {hash}",
                    root.display()
                )));
            }
        }
        fs::write(&stamp, format!("{hash}\n"))?;
        fs::write(root.join("config.toml"), cfg.to_toml())?;
        Ok(Self { root, cfg, hash })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn strd_dir(&self) -> PathBuf {
        self.root.join("strd")
    }

    pub fn variant_dir(&self, v: Variant) -> PathBuf {
        self.root.join(v.dir_name())
    }

    fn ensure(&self, dir: PathBuf) -> Result<PathBuf> {
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn header(&self, kind: &str) -> CheckpointHeader {
        CheckpointHeader::new(kind, &self.hash)
    }

    fn check_checkpoint(&self, path: &Path, stage: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::Stage(format!("missing {stage} checkpoint {}", path.display())));
        }
        let h = read_checkpoint_header(path)?;
        if h.config_hash != self.hash {
            return Err(Error::Stage(format!(
                "{} was produced under config {}, expected {}",
                path.display(),
                h.config_hash,
                self.hash
            )));
        }
        Ok(())
    }

    pub fn load_split(&self, split: &str) -> Result<Dataset> {
        let path = self.data_dir().join(format!("{split}.jsonl"));
        if !path.exists() {
            return Err(Error::Stage(format!("missing dataset {}; run gen-data first", path.display())));
        }
        let ds = Dataset::load(&path)?;
        if ds.header.config != self.cfg.data.synth || ds.header.seed != self.cfg.seed {
            return Err(Error::Stage(format!("{} was generated under a different data config", path.display())));
        }
        Ok(ds)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Frozen components rebuilt from the seed.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub vocab: Vocab,
    pub encoder: VisionEncoder,
    pub teacher: Teacher,
}

pub fn frozen(cfg: &RunConfig) -> Result<Frozen> {
    let root = SeededRng::new(cfg.seed);
    let mut encoder = VisionEncoder::new(cfg.encoder_config(), &mut root.fork(ENCODER_LABEL))?;
    encoder.freeze();
    let teacher = Teacher::new(
        cfg.mhsa(),
        cfg.model.strd_depth,
        !cfg.model.teacher_bidirectional,
        &mut root.fork(TEACHER_LABEL),
    )?;
    Ok(Frozen {
        vocab: cfg.vocab()?,
        encoder,
        teacher,
    })
}

pub fn initial_strd(cfg: &RunConfig) -> Result<Strd> {
    Strd::new(cfg.mhsa(), cfg.model.strd_depth, StrdInit::Identity, &mut SeededRng::new(cfg.seed).fork(STRD_LABEL))
}

/// Base LM with freshly attached adapters.
pub fn initial_lm(cfg: &RunConfig) -> Result<StreamLm> {
    let root = SeededRng::new(cfg.seed);
    let mut lm = StreamLm::new(cfg.lm_config()?, &mut root.fork(LM_LABEL))?;
    lm.apply_lora(cfg.finetune.lora_rank, cfg.finetune.lora_alpha, &mut root.fork(LORA_LABEL))?;
    Ok(lm)
}

fn render_all(ds: &Dataset) -> Result<Vec<FrameSequence>> {
    let world = ds.world()?;
    Ok(ds.streams.iter().map(|s| ds.render(s, &world)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub config_hash: String,
    pub data_hash: String,
    pub train: usize,
    pub test: usize,
}

pub fn gen_data(ws: &Workspace) -> Result<GenReport> {
    let c = &ws.cfg;
    let (train, test, split) = synth::generate(c.seed, &c.data.synth, c.data.n_train, c.data.n_test)?;
    let dir = ws.ensure(ws.data_dir())?;
    train.save(&dir.join("train.jsonl"))?;
    test.save(&dir.join("test.jsonl"))?;
    write_json(&dir.join("split.json"), &split)?;
    let report = GenReport {
        config_hash: ws.hash.clone(),
        data_hash: split.config_hash,
        train: train.streams.len(),
        test: test.streams.len(),
    };
    write_json(&dir.join("gen.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub config_hash: String,
    pub train_streams: usize,
    pub heldout_streams: usize,
    /// Held-out MSE of the identity-initialised module.
    pub init_mse: f64,
    /// Held-out MSE of a randomly initialised module.
    pub random_mse: f64,
    pub final_mse: f64,
    pub curve: LossCurve,
}

fn distill_examples(f: &Frozen, frames: &[FrameSequence]) -> Result<Vec<DistillExample>> {
    frames.iter().map(|s| DistillExample::from_frames(&f.encoder, &f.teacher, s)).collect()
}

pub fn distill(ws: &Workspace) -> Result<DistillReport> {
    let c = &ws.cfg;
    let f = frozen(c)?;
    let train = distill_examples(&f, &render_all(&ws.load_split("train")?)?)?;
    let test_ds = ws.load_split("test")?;
    let mut test_frames = render_all(&test_ds)?;
    test_frames.truncate(c.distill.heldout);
    let heldout = distill_examples(&f, &test_frames)?;
    let mode = c.strd_mode();
    let mut module = initial_strd(c)?;
    let random = Strd::new(c.mhsa(), c.model.strd_depth, StrdInit::Random, &mut SeededRng::new(c.seed).fork(RANDOM_STRD_LABEL))?;
    let init_mse = strd::evaluate_distill(&module, &heldout, mode)?;
    let random_mse = strd::evaluate_distill(&random, &heldout, mode)?;
    let cfg = DistillConfig {
        epochs: c.distill.epochs,
        lr: c.distill.lr,
        batch: c.distill.batch,
        mode,
    };
    let curve = strd::train_distill(&mut module, &train, cfg, &mut SeededRng::new(c.seed).fork(DISTILL_LABEL))?;
    let final_mse = strd::evaluate_distill(&module, &heldout, mode)?;
    let dir = ws.ensure(ws.strd_dir())?;
    save_checkpoint(&dir.join("strd.ckpt"), &ws.header("strd"), &module, strd::PREFIX, &|_| true)?;
    let report = DistillReport {
        config_hash: ws.hash.clone(),
        train_streams: train.len(),
        heldout_streams: heldout.len(),
        init_mse,
        random_mse,
        final_mse,
        curve,
    };
    write_json(&dir.join("distill.json"), &report)?;
    Ok(report)
}

/// Per-stream LM inputs. With an STRD the visual rows are its attention
/// stack output, to which the trainable output layer is applied on the fly.
pub fn lm_examples(cfg: &RunConfig, f: &Frozen, strd: Option<&Strd>, ds: &Dataset) -> Result<Vec<(u32, LmExample)>> {
    let world = ds.world()?;
    let mode = cfg.strd_mode();
    ds.streams
        .iter()
        .map(|s| {
            let frames = ds.render(s, &world);
            let blocks = f.encoder.encode_pairs(&frames)?;
            let raw = strd::strd_concat(&blocks)?;
            let visual = match strd {
                Some(m) => {
                    let mut g = Graph::inference();
                    let x = g.input(raw);
                    let h = m.hidden(&mut g, x, &strd::mode_mask(mode, blocks.len() * f.encoder.cfg.patches()))?;
                    g.value(h).clone()
                }
                None => raw,
            };
            let sequences = Mode::ALL
                .iter()
                .map(|&m| lm::build_interleaved(&f.vocab, m, &s.annotations, &blocks))
                .collect::<Result<Vec<_>>>()?;
            Ok((s.id, LmExample { visual, sequences }))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub variant: Variant,
    pub train_streams: usize,
    pub heldout_streams: usize,
    pub init_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub curve: LossCurve,
}

fn load_distilled(ws: &Workspace) -> Result<Strd> {
    let path = ws.strd_dir().join("strd.ckpt");
    ws.check_checkpoint(&path, "distill")?;
    let mut m = initial_strd(&ws.cfg)?;
    load_checkpoint(&path, &mut m, strd::PREFIX)?;
    Ok(m)
}

pub fn train(ws: &Workspace, variant: Variant) -> Result<TrainReport> {
    let c = &ws.cfg;
    let f = frozen(c)?;
    let mut module = match variant {
        Variant::Full => Some(load_distilled(ws)?),
        Variant::NoStrd => None,
    };
    let train: Vec<LmExample> = lm_examples(c, &f, module.as_ref(), &ws.load_split("train")?)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    let mut test_ds = ws.load_split("test")?;
    test_ds.streams.truncate(c.finetune.heldout);
    let heldout: Vec<LmExample> = lm_examples(c, &f, module.as_ref(), &test_ds)?.into_iter().map(|(_, e)| e).collect();
    let mut model = initial_lm(c)?;
    let w = c.finetune.w;
    let max_len = c.cache.lm_max_len;
    let init = lm::evaluate_joint(&model, module.as_ref(), &heldout, w, max_len)?;
    let cfg = FinetuneConfig {
        epochs: c.finetune.epochs,
        lr: c.finetune.lr,
        batch: c.finetune.batch,
        w,
        lm_max_len: max_len,
        train_strd_output: module.is_some(),
    };
    let curve = lm::train_finetune(&mut model, module.as_mut(), &train, cfg, &mut SeededRng::new(c.seed).fork(FINETUNE_LABEL))?;
    let fin = lm::evaluate_joint(&model, module.as_ref(), &heldout, w, max_len)?;
    let dir = ws.ensure(ws.variant_dir(variant))?;
    save_checkpoint(&dir.join("lm_adapters.ckpt"), &ws.header("lm-adapters"), &model, lm::PREFIX, &|n: &str| {
        n.contains(".lora_")
    })?;
    if let Some(m) = &module {
        save_checkpoint(&dir.join("strd.ckpt"), &ws.header("strd-finetuned"), m, strd::PREFIX, &|_| true)?;
    }
    let report = TrainReport {
        config_hash: ws.hash.clone(),
        variant,
        train_streams: train.len(),
        heldout_streams: heldout.len(),
        init_heldout_loss: init,
        final_heldout_loss: fin,
        curve,
    };
    write_json(&dir.join("train.json"), &report)?;
    Ok(report)
}

/// Trained models of `variant` with adapters still separate.
pub struct Trained {
    pub frozen: Frozen,
    pub strd: Option<Strd>,
    pub lm: StreamLm,
}

impl Trained {
    pub fn load(ws: &Workspace, variant: Variant) -> Result<Self> {
        let dir = ws.variant_dir(variant);
        let adapters = dir.join("lm_adapters.ckpt");
        ws.check_checkpoint(&adapters, "train")?;
        let mut lm = initial_lm(&ws.cfg)?;
        load_checkpoint(&adapters, &mut lm, lm::PREFIX)?;
        let strd = match variant {
            Variant::Full => {
                let path = dir.join("strd.ckpt");
                ws.check_checkpoint(&path, "train")?;
                let mut m = initial_strd(&ws.cfg)?;
                load_checkpoint(&path, &mut m, strd::PREFIX)?;
                Some(m)
            }
            Variant::NoStrd => None,
        };
        Ok(Self {
            frozen: frozen(&ws.cfg)?,
            strd,
            lm,
        })
    }

    pub fn engine(&self) -> Result<Engine> {
        Engine::new(self.frozen.vocab.clone(), self.frozen.encoder.clone(), self.strd.clone(), self.lm.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub variant: Variant,
    pub mode: Mode,
    pub gamma: f64,
    pub streams: usize,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub meta: RunMeta,
    pub events: Vec<ResponseEvent>,
    pub traces: Vec<(u32, Vec<TracePoint>)>,
    pub latency: LatencyStats,
}

fn queries_for(mode: Mode, s: &synth::StreamRecord) -> Vec<Query> {
    if mode != Mode::Vaa {
        return Vec::new();
    }
    s.annotations
        .vaa
        .iter()
        .map(|q| Query {
            t: q.t,
            tokens: q.query.clone(),
        })
        .collect()
}

/// Streams every test stream (or one, with `only`) through the engine.
pub fn run_streams(
    ws: &Workspace,
    engine: &Engine,
    variant: Variant,
    mode: Mode,
    gamma: Option<f64>,
    only: Option<u32>,
) -> Result<RunResult> {
    let ds = ws.load_split("test")?;
    let world = ds.world()?;
    let session = ws.cfg.session(mode, gamma);
    let mut events = Vec::new();
    let mut traces = Vec::new();
    let mut steps = Vec::new();
    let selected: Vec<&synth::StreamRecord> = ds.streams.iter().filter(|s| only.is_none_or(|id| s.id == id)).collect();
    if let (Some(id), true) = (only, selected.is_empty()) {
        return Err(Error::Stage(format!("stream {id} is not in the test split")));
    }
    for s in &selected {
        let frames = ds.render(s, &world);
        let out = scheduler::run_stream(engine, session, s.id, &frames, &queries_for(mode, s))?;
        events.extend(out.events);
        traces.push((s.id, out.trace));
        steps.extend(out.step_secs);
    }
    let meta = RunMeta {
        config_hash: ws.hash.clone(),
        variant,
        mode,
        gamma: session.gamma,
        streams: selected.len(),
        events: events.len(),
    };
    Ok(RunResult {
        meta,
        events,
        traces,
        latency: LatencyStats::from_steps(&steps),
    })
}

fn events_path(ws: &Workspace, v: Variant, mode: Mode) -> PathBuf {
    ws.variant_dir(v).join(format!("events_{}.jsonl", mode.name()))
}

pub fn run(ws: &Workspace, variant: Variant, mode: Mode, gamma: Option<f64>, only: Option<u32>) -> Result<RunResult> {
    let trained = Trained::load(ws, variant)?;
    let result = run_streams(ws, &trained.engine()?, variant, mode, gamma, only)?;
    let dir = ws.variant_dir(variant);
    scheduler::write_event_log(&events_path(ws, variant, mode), &result.events)?;
    scheduler::write_traces(&dir.join(format!("trace_{}.tsv", mode.name())), &result.traces)?;
    write_json(&dir.join(format!("run_{}.json", mode.name())), &result.meta)?;
    Ok(result)
}

pub fn truth(ds: &Dataset, mode: Mode) -> Vec<StreamTruth> {
    let mut t: Vec<StreamTruth> = ds
        .streams
        .iter()
        .map(|s| StreamTruth::from_record(s, mode, ds.config().fps))
        .collect();
    t.sort_by_key(|s| s.stream);
    t
}

/// Model-side evaluation inputs: teacher-forced token hits and LM-PPL.
pub fn model_eval_inputs(
    cfg: &RunConfig,
    trained: &Trained,
    ds: &Dataset,
    mode: Mode,
) -> Result<(std::collections::BTreeMap<u32, Vec<Vec<bool>>>, Option<f64>)> {
    let examples = lm_examples(cfg, &trained.frozen, trained.strd.as_ref(), ds)?;
    let strd = trained.strd.as_ref();
    let max_len = cfg.cache.lm_max_len;
    let hits = metrics::model_token_hits(&trained.lm, strd, &examples, mode, max_len)?;
    let mode_only: Vec<LmExample> = examples
        .into_iter()
        .map(|(_, mut e)| {
            e.sequences.retain(|s| s.mode == mode);
            e
        })
        .collect();
    let ppl = match metrics::lm_ppl(&trained.lm, strd, &mode_only, max_len) {
        Ok(p) => Some(p),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((hits, ppl))
}

pub fn eval(ws: &Workspace, variant: Variant, mode: Mode) -> Result<MetricReport> {
    let dir = ws.variant_dir(variant);
    let meta_path = dir.join(format!("run_{}.json", mode.name()));
    if !meta_path.exists() {
        return Err(Error::Stage(format!("missing {}; run the `run` stage first", meta_path.display())));
    }
    let meta: RunMeta = read_json(&meta_path)?;
    if meta.config_hash != ws.hash {
        return Err(Error::Stage(format!(
            "event log was produced under config {}, expected {}",
            meta.config_hash, ws.hash
        )));
    }
    let events = scheduler::read_event_log(&events_path(ws, variant, mode))?;
    let ds = ws.load_split("test")?;
    let trained = Trained::load(ws, variant)?;
    let (token_hits, lm_ppl) = model_eval_inputs(&ws.cfg, &trained, &ds, mode)?;
    let input = EvalInput {
        truth: truth(&ds, mode),
        events,
        token_hits,
        lm_ppl,
    };
    let report = metrics::evaluate(&input, &MatchingConfig::new(mode))?;
    write_json(&dir.join(format!("report_{}.json", mode.name())), &report)?;
    fs::write(dir.join(format!("report_{}.tsv", mode.name())), report.table())?;
    Ok(report)
}

/// `gen-data`, `distill` (when needed), `train`, `run` and `eval` in one go.
pub fn full_pipeline(ws: &Workspace, variant: Variant, modes: &[Mode]) -> Result<Vec<MetricReport>> {
    if !ws.data_dir().join("test.jsonl").exists() {
        gen_data(ws)?;
    }
    if variant == Variant::Full && !ws.strd_dir().join("strd.ckpt").exists() {
        distill(ws)?;
    }
    train(ws, variant)?;
    modes
        .iter()
        .map(|&m| {
            run(ws, variant, m, None, None)?;
            eval(ws, variant, m)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Strd,
    Depth,
    Gamma,
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strd" => Ok(Study::Strd),
            "depth" => Ok(Study::Depth),
            "gamma" => Ok(Study::Gamma),
            other => Err(Error::Config(format!("unknown study {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub mode: Mode,
    pub gamma: f64,
    pub responses: usize,
    pub lm_ppl: Option<f64>,
    pub time_diff_seconds: Option<f64>,
    pub weighted_f1_pct: Option<f64>,
    pub aat_seconds: Option<f64>,
    pub distill_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub study: Study,
    pub rows: Vec<AblationRow>,
    /// Gamma study: per-stream response counts never decrease along the grid.
    pub monotone: Option<bool>,
}

impl AblationTable {
    pub fn tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::from("label\tseed\tmode\tgamma\tresponses\tlm_ppl\ttime_diff_s\tweighted_f1_pct\taat_s\tdistill_mse\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.label,
                r.seed,
                r.mode.name(),
                r.gamma,
                r.responses,
                fmt(r.lm_ppl),
                fmt(r.time_diff_seconds),
                fmt(r.weighted_f1_pct),
                fmt(r.aat_seconds),
                fmt(r.distill_mse),
            ));
        }
        s
    }
}

fn row(label: &str, seed: u64, gamma: f64, r: &MetricReport, distill_mse: Option<f64>) -> AblationRow {
    AblationRow {
        label: label.into(),
        seed,
        mode: r.mode,
        gamma,
        responses: r.responses,
        lm_ppl: r.lm_ppl,
        time_diff_seconds: r.time_diff_seconds,
        weighted_f1_pct: r.weighted_f1_pct,
        aat_seconds: r.aat_seconds,
        distill_mse,
    }
}

fn sub_workspace(ws: &Workspace, name: &str, edit: impl FnOnce(&mut RunConfig)) -> Result<Workspace> {
    let mut cfg = ws.cfg.clone();
    cfg.output_dir = ws.root.join(name);
    edit(&mut cfg);
    Workspace::open(cfg)
}

pub fn ablate(ws: &Workspace, study: Study) -> Result<AblationTable> {
    let c = &ws.cfg;
    let mut rows = Vec::new();
    let mut monotone = None;
    match study {
        Study::Strd => {
            for &seed in &c.ablation.seeds {
                let sub = sub_workspace(ws, &format!("ablate-strd/seed-{seed}"), |k| k.seed = seed)?;
                for variant in [Variant::Full, Variant::NoStrd] {
                    let reports = full_pipeline(&sub, variant, &[Mode::Vad])?;
                    let mse = match variant {
                        Variant::Full => Some(read_json::<DistillReport>(&sub.strd_dir().join("distill.json"))?.final_mse),
                        Variant::NoStrd => None,
                    };
                    rows.push(row(variant.dir_name(), seed, sub.cfg.inference.gamma_vad, &reports[0], mse));
                }
            }
        }
        Study::Depth => {
            for &depth in &c.ablation.depths {
                let sub = sub_workspace(ws, &format!("ablate-depth/depth-{depth}"), |k| k.model.strd_depth = depth)?;
                let reports = full_pipeline(&sub, Variant::Full, &[Mode::Vad])?;
                let mse = read_json::<DistillReport>(&sub.strd_dir().join("distill.json"))?.final_mse;
                rows.push(row(&format!("depth-{depth}"), c.seed, sub.cfg.inference.gamma_vad, &reports[0], Some(mse)));
            }
        }
        Study::Gamma => {
            let trained = Trained::load(ws, Variant::Full)?;
            let engine = trained.engine()?;
            let ds = ws.load_split("test")?;
            let mut ok = true;
            for mode in [Mode::Vap, Mode::Vad] {
                let (token_hits, lm_ppl) = model_eval_inputs(c, &trained, &ds, mode)?;
                let mut prev: Option<Vec<usize>> = None;
                for &gamma in &c.ablation.gammas {
                    let result = run_streams(ws, &engine, Variant::Full, mode, Some(gamma), None)?;
                    let counts: Vec<usize> = result
                        .traces
                        .iter()
                        .map(|(id, _)| result.events.iter().filter(|e| e.stream == *id).count())
                        .collect();
                    if let Some(p) = &prev {
                        ok &= p.iter().zip(&counts).all(|(a, b)| a <= b);
                    }
                    prev = Some(counts);
                    let input = EvalInput {
                        truth: truth(&ds, mode),
                        events: result.events,
                        token_hits: token_hits.clone(),
                        lm_ppl,
                    };
                    let report = metrics::evaluate(&input, &MatchingConfig::new(mode))?;
                    rows.push(row(&format!("gamma-{gamma}"), c.seed, gamma, &report, None));
                }
            }
            monotone = Some(ok);
        }
    }
    let table = AblationTable {
        config_hash: ws.hash.clone(),
        study,
        rows,
        monotone,
    };
    let name = match study {
        Study::Strd => "strd",
        Study::Depth => "depth",
        Study::Gamma => "gamma",
    };
    write_json(&ws.root.join(format!("ablate_{name}.json")), &table)?;
    fs::write(ws.root.join(format!("ablate_{name}.tsv")), table.tsv())?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub cache_len: usize,
    pub receptive_field_s: f64,
    pub pairs: usize,
    pub pairs_per_sec: f64,
    pub frames_per_sec: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    /// Median step latency over the first and second half of the stream.
    pub median_first_half_ms: f64,
    pub median_second_half_ms: f64,
    /// Half medians of passes that only ingest frames (encoder, STRD and LM),
    /// the fastest of a few repeats.
    pub ingest_median_first_half_ms: f64,
    pub ingest_median_second_half_ms: f64,
    /// Gated responses in each half.
    pub responses: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub trained: bool,
    pub rows: Vec<BenchRow>,
}

/// Latency of a long random stream per cache length, once with the VAD gate
/// live and once ingesting frames only. Uses trained weights when the
/// workspace has them.
pub fn bench(ws: &Workspace) -> Result<BenchReport> {
    let c = &ws.cfg;
    let trained = Trained::load(ws, Variant::Full).ok();
    let engine = match &trained {
        Some(t) => t.engine()?,
        None => {
            let f = frozen(c)?;
            Engine::new(f.vocab, f.encoder, Some(initial_strd(c)?), initial_lm(c)?)?
        }
    };
    let n = engine.block_len();
    let s = &c.data.synth;
    let mut rng = SeededRng::new(c.seed).fork(BENCH_LABEL);
    let mut seq = FrameSequence::new(s.height, s.width, s.channels, s.fps);
    for _ in 0..2 * c.bench.pairs {
        seq.frames.push((0..seq.frame_len()).map(|_| rng.normal() * s.noise_sd).collect());
    }
    let mut rows = Vec::new();
    for &k in &c.bench.cache_multiples {
        let len = k * n;
        let mut session = c.session(Mode::Vad, None);
        session.strd_max_len = len;
        session.lm_max_len = len;
        let out = scheduler::run_stream(&engine, session, 0, &seq, &[])?;
        let half = out.step_secs.len() / 2;
        let mut ingest = [f64::INFINITY; 2];
        for _ in 0..INGEST_REPEATS {
            let mut live = scheduler::Session::new(&engine, session, 0, seq.fps)?;
            let mut secs = Vec::with_capacity(seq.pair_count());
            for i in 0..seq.pair_count() {
                let (a, b) = seq.pair(i);
                let start = Instant::now();
                live.ingest(a, b)?;
                secs.push(start.elapsed().as_secs_f64());
            }
            ingest[0] = ingest[0].min(scheduler::percentile(&secs[..half], 0.5) * 1e3);
            ingest[1] = ingest[1].min(scheduler::percentile(&secs[half..], 0.5) * 1e3);
        }
        let lat = out.latency;
        let early = out.events.iter().filter(|e| e.pair < half).count();
        rows.push(BenchRow {
            cache_len: len,
            receptive_field_s: len as f64 / (n as f64 * s.fps / 2.0),
            pairs: lat.steps,
            pairs_per_sec: lat.pairs_per_sec,
            frames_per_sec: 2.0 * lat.pairs_per_sec,
            p50_ms: lat.p50_ms,
            p90_ms: lat.p90_ms,
            p99_ms: lat.p99_ms,
            median_first_half_ms: scheduler::percentile(&out.step_secs[..half], 0.5) * 1e3,
            median_second_half_ms: scheduler::percentile(&out.step_secs[half..], 0.5) * 1e3,
            ingest_median_first_half_ms: ingest[0],
            ingest_median_second_half_ms: ingest[1],
            responses: [early, out.events.len() - early],
        });
    }
    let report = BenchReport {
        config_hash: ws.hash.clone(),
        trained: trained.is_some(),
        rows,
    };
    write_json(&ws.root.join("bench.json"), &report)?;
    Ok(report)
}
