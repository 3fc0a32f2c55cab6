//! Online inference: frame pairs in, timestamped responses out.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::KvCache;
use crate::encoder::{FrameSequence, VisionEncoder};
use crate::error::{Error, Result};
use crate::lm::{LmInput, StreamLm};
use crate::strd::Strd;
use crate::tensor::{self, Matrix};
use crate::vocab::{Mode, TokenId, Vocab, RESPONSE_END, STREAM_EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: Mode,
    pub gamma: f64,
    pub strd_max_len: usize,
    pub lm_max_len: usize,
    pub max_response_len: usize,
}

impl SessionConfig {
    pub fn default_gamma(mode: Mode) -> f64 {
        match mode {
            Mode::Vap => 0.96,
            Mode::Vad => 0.7,
            Mode::Vaa => 1.0,
        }
    }

    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            gamma: Self::default_gamma(mode),
            strd_max_len: 64,
            lm_max_len: 256,
            max_response_len: 8,
        }
    }

    pub fn validate(&self, block_len: usize) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.strd_max_len < block_len || self.lm_max_len < block_len {
            return Err(Error::Config(format!(
                "cache lengths ({}, {}) below the block length {block_len}",
                self.strd_max_len, self.lm_max_len
            )));
        }
        if self.max_response_len == 0 {
            return Err(Error::Config("max response length is zero".into()));
        }
        Ok(())
    }
}

/// Frozen weights shared by every session.
#[derive(Clone, Debug)]
pub struct Engine {
    pub vocab: Vocab,
    pub encoder: VisionEncoder,
    pub strd: Option<Strd>,
    pub lm: StreamLm,
}

impl Engine {
    /// Folds any LoRA adapters into the LM weights.
    pub fn new(vocab: Vocab, encoder: VisionEncoder, strd: Option<Strd>, mut lm: StreamLm) -> Result<Self> {
        if lm.has_lora() {
            lm.merge_lora()?;
        }
        if lm.cfg.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "LM vocabulary {} does not match {}",
                lm.cfg.vocab_size,
                vocab.size()
            )));
        }
        Ok(Self {
            vocab,
            encoder,
            strd,
            lm,
        })
    }

    pub fn block_len(&self) -> usize {
        self.encoder.cfg.patches()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    EosGate,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseEvent {
    pub stream: u32,
    pub t: f64,
    pub pair: usize,
    pub mode: Mode,
    pub trigger: Trigger,
    pub eos_prob: f64,
    pub category: Option<usize>,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub clipped: bool,
    /// Distribution at the first decoding step.
    #[serde(skip)]
    pub first_dist: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub pair: usize,
    pub t: f64,
    pub eos_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct PendingQuery {
    tokens: Vec<TokenId>,
    t: f64,
}

pub struct Session<'a> {
    engine: &'a Engine,
    cfg: SessionConfig,
    stream: u32,
    fps: f64,
    pairs: usize,
    strd_cache: Option<KvCache>,
    lm_cache: KvCache,
    queue: VecDeque<PendingQuery>,
    log: Vec<ResponseEvent>,
    trace: Vec<TracePoint>,
}

impl<'a> Session<'a> {
    /// Primes the LM cache with the task prompt.
    pub fn new(engine: &'a Engine, cfg: SessionConfig, stream: u32, fps: f64) -> Result<Self> {
        cfg.validate(engine.block_len())?;
        let mut lm_cache = engine.lm.new_cache(cfg.lm_max_len);
        engine
            .lm
            .forward_stream(&mut lm_cache, LmInput::Text(&engine.vocab.prompt(cfg.mode)))?;
        Ok(Self {
            engine,
            strd_cache: engine.strd.as_ref().map(|s| s.new_cache(cfg.strd_max_len)),
            lm_cache,
            cfg,
            stream,
            fps,
            pairs: 0,
            queue: VecDeque::new(),
            log: Vec::new(),
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn pairs_seen(&self) -> usize {
        self.pairs
    }

    pub fn log(&self) -> &[ResponseEvent] {
        &self.log
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    /// Mainline tokens appended to the LM and STRD caches so far.
    pub fn cache_positions(&self) -> (usize, Option<usize>) {
        (self.lm_cache.appended(), self.strd_cache.as_ref().map(KvCache::appended))
    }

    /// Queues a query; it is answered after the first frame block at or after `t`.
    pub fn submit_query(&mut self, tokens: &[TokenId], t: f64) -> Result<()> {
        if self.cfg.mode != Mode::Vaa {
            return Err(Error::Config(format!("queries need VAA mode, session is {}", self.cfg.mode.name())));
        }
        for &id in tokens {
            self.engine.vocab.check(id)?;
        }
        self.queue.push_back(PendingQuery {
            tokens: tokens.to_vec(),
            t,
        });
        Ok(())
    }

    /// Ingests one frame pair. Returns the responses emitted after it: at
    /// most one gated response, or the answers to queries now due.
    pub fn step_frame(&mut self, f_prev: &[f64], f_curr: &[f64]) -> Result<Vec<ResponseEvent>> {
        let (last, eos_prob) = self.ingest(f_prev, f_curr)?;
        let TracePoint { pair, t, .. } = *self.trace.last().expect("ingest records a trace point");
        let mut out = Vec::new();
        if self.cfg.mode == Mode::Vaa {
            while self.queue.front().is_some_and(|q| q.t <= t + 1e-9) {
                let q = self.queue.pop_front().expect("front checked");
                let ev = self.decode(Some(&q.tokens), last.clone(), pair, t.max(q.t), eos_prob)?;
                out.push(ev);
            }
        } else if eos_prob < self.cfg.gamma {
            out.push(self.decode(None, last, pair, t, eos_prob)?);
        }
        self.log.extend(out.iter().cloned());
        Ok(out)
    }

    /// Encodes a frame pair and appends it to both caches without consulting
    /// the gate. Returns the final-position logits and P[EOS].
    pub fn ingest(&mut self, f_prev: &[f64], f_curr: &[f64]) -> Result<(Matrix, f64)> {
        let e = self.engine;
        let block = e.encoder.encode_frame_pair(f_prev, f_curr, self.pairs, self.fps)?;
        let visual = match (&e.strd, &mut self.strd_cache) {
            (Some(s), Some(cache)) => s.forward_block(cache, &block.tokens)?,
            _ => block.tokens,
        };
        let logits = e.lm.forward_stream(&mut self.lm_cache, LmInput::Visual(&visual))?;
        let last = Matrix::row_vector(logits.row(logits.rows() - 1));
        let dist = tensor::softmax_rows(&last, None)?;
        let eos_prob = dist.get(0, STREAM_EOS as usize);
        let pair = self.pairs;
        let t = block.timestamp;
        self.pairs += 1;
        self.trace.push(TracePoint { pair, t, eos_prob });
        Ok((last, eos_prob))
    }

    /// Greedy decoding inside a side branch of the LM cache. The stream EOS
    /// token is excluded from responses.
    fn decode(&mut self, query: Option<&[TokenId]>, block_logits: Matrix, pair: usize, t: f64, eos_prob: f64) -> Result<ResponseEvent> {
        let e = self.engine;
        self.lm_cache.begin_branch();
        let result = (|| {
            let mut logits = match query {
                Some(q) => {
                    let l = e.lm.forward_stream(&mut self.lm_cache, LmInput::Text(q))?;
                    Matrix::row_vector(l.row(l.rows() - 1))
                }
                None => block_logits,
            };
            let first_dist = tensor::softmax_rows(&logits, None)?.into_data();
            let mut tokens = Vec::new();
            let mut clipped = false;
            loop {
                let tok = argmax_excluding(logits.row(0), STREAM_EOS as usize) as TokenId;
                tokens.push(tok);
                if tok == RESPONSE_END {
                    break;
                }
                if tokens.len() >= self.cfg.max_response_len {
                    clipped = true;
                    break;
                }
                logits = e.lm.forward_stream(&mut self.lm_cache, LmInput::Text(&[tok]))?;
            }
            Ok::<_, Error>((tokens, clipped, first_dist))
        })();
        self.lm_cache.end_branch();
        let (tokens, clipped, first_dist) = result?;
        Ok(ResponseEvent {
            stream: self.stream,
            t,
            pair,
            mode: self.cfg.mode,
            trigger: if query.is_some() { Trigger::Query } else { Trigger::EosGate },
            eos_prob,
            category: tokens.first().and_then(|&c| e.vocab.category_of(c)),
            text: e.vocab.render(&tokens),
            tokens,
            clipped,
            first_dist,
        })
    }
}

fn argmax_excluding(row: &[f64], skip: usize) -> usize {
    let mut best = if skip == 0 { 1 } else { 0 };
    for (i, &v) in row.iter().enumerate() {
        if i != skip && v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub t: f64,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub steps: usize,
    pub pairs_per_sec: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    pub fn from_steps(secs: &[f64]) -> Self {
        if secs.is_empty() {
            return Self::default();
        }
        let total: f64 = secs.iter().sum();
        Self {
            steps: secs.len(),
            pairs_per_sec: if total > 0.0 { secs.len() as f64 / total } else { f64::INFINITY },
            p50_ms: percentile(secs, 0.5) * 1e3,
            p90_ms: percentile(secs, 0.9) * 1e3,
            p99_ms: percentile(secs, 0.99) * 1e3,
        }
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub events: Vec<ResponseEvent>,
    pub trace: Vec<TracePoint>,
    /// Wall-clock seconds per `step_frame` call.
    pub step_secs: Vec<f64>,
    pub latency: LatencyStats,
}

/// Streams every frame pair of `seq`, answering `queries` as they fall due.
pub fn run_stream(engine: &Engine, cfg: SessionConfig, stream: u32, seq: &FrameSequence, queries: &[Query]) -> Result<RunOutput> {
    let mut s = Session::new(engine, cfg, stream, seq.fps)?;
    let pairs = seq.pair_count();
    let span = if pairs == 0 { 0.0 } else { 2.0 * (pairs - 1) as f64 / seq.fps };
    for q in queries {
        if q.t < 0.0 || q.t > span + 1e-9 {
            return Err(Error::Config(format!("query at {}s outside the stream span [0, {span}]", q.t)));
        }
        s.submit_query(&q.tokens, q.t)?;
    }
    let mut step_secs = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let (a, b) = seq.pair(i);
        let start = Instant::now();
        s.step_frame(a, b)?;
        step_secs.push(start.elapsed().as_secs_f64());
    }
    Ok(RunOutput {
        events: s.log,
        trace: s.trace,
        latency: LatencyStats::from_steps(&step_secs),
        step_secs,
    })
}

pub fn write_event_log(path: &Path, events: &[ResponseEvent]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_event_log(path: &Path) -> Result<Vec<ResponseEvent>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Two-column `t<TAB>eos_prob` series, one `# stream <id>` section per stream.
pub fn write_traces(path: &Path, traces: &[(u32, Vec<TracePoint>)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, trace) in traces {
        writeln!(w, "# stream {id}")?;
        for p in trace {
            writeln!(w, "{}\t{}", p.t, p.eos_prob)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_traces`]; pair indices are recovered from row order.
pub fn read_traces(path: &Path) -> Result<Vec<(u32, Vec<TracePoint>)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out: Vec<(u32, Vec<TracePoint>)> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let bad = || Error::Parse(format!("{}:{}: malformed trace line", path.display(), n + 1));
        if let Some(id) = line.strip_prefix("# stream ") {
            out.push((id.trim().parse().map_err(|_| bad())?, Vec::new()));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (t, p) = line.split_once('\t').ok_or_else(bad)?;
        let (_, trace) = out.last_mut().ok_or_else(bad)?;
        trace.push(TracePoint {
            pair: trace.len(),
            t: t.parse().map_err(|_| bad())?,
            eos_prob: p.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
