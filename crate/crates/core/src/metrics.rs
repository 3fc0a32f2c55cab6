//! Evaluation of event logs against ground truth: LM-PPL, TimeDiff, Fluency,
//! support-weighted F1 and average advance time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, InterleavedSequence, LmExample, StreamLm};
use crate::params::Graph;
use crate::scheduler::{ResponseEvent, Trigger};
use crate::strd::Strd;
use crate::synth::StreamRecord;
use crate::tensor::{self, Matrix};
use crate::vocab::{Mode, STREAM_EOS};

/// Ground-truth anomaly in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtEvent {
    pub category: usize,
    pub t_p: f64,
    pub t_n: f64,
    pub t_m: f64,
}

/// One expected response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRound {
    pub event: usize,
    pub pair: usize,
    pub t: f64,
    /// Length of the expected response in tokens.
    pub tokens: usize,
}

/// Ground truth of one stream for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamTruth {
    pub stream: u32,
    pub pairs: usize,
    /// Stream end in seconds.
    pub end: f64,
    pub events: Vec<GtEvent>,
    pub rounds: Vec<GtRound>,
}

impl StreamTruth {
    pub fn from_record(record: &StreamRecord, mode: Mode, fps: f64) -> Self {
        let secs = |f: usize| f as f64 / fps;
        let events = record
            .timeline
            .events
            .iter()
            .map(|e| GtEvent {
                category: e.category,
                t_p: secs(e.t_p),
                t_n: secs(e.t_n),
                t_m: secs(e.t_m),
            })
            .collect();
        let a = &record.annotations;
        let mut rounds: Vec<GtRound> = match mode {
            Mode::Vap | Mode::Vad => {
                let recs = if mode == Mode::Vap { &a.vap } else { &a.vad };
                recs.iter()
                    .map(|r| GtRound {
                        event: r.event,
                        pair: r.pair,
                        t: r.t,
                        tokens: r.tokens.len(),
                    })
                    .collect()
            }
            Mode::Vaa => a
                .vaa
                .iter()
                .map(|q| GtRound {
                    event: q.event,
                    pair: q.pair,
                    t: q.t,
                    tokens: q.answer.len(),
                })
                .collect(),
        };
        rounds.sort_by(|x, y| x.t.total_cmp(&y.t));
        Self {
            stream: record.id,
            pairs: record.frames.div_ceil(2),
            end: secs(record.frames),
            events,
            rounds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnansweredPenalty {
    /// Distance from the expected time to the stream end.
    StreamEnd,
    /// Unanswered rounds are left out of the mean.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub mode: Mode,
    pub penalty: UnansweredPenalty,
}

impl MatchingConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            penalty: UnansweredPenalty::StreamEnd,
        }
    }

    /// VAP matches `[t_p, t_n)`; VAD and VAA match `[t_n, t_m]`. Events
    /// without a precursor have no VAP window.
    pub fn window(&self, e: &GtEvent) -> Option<(f64, f64, bool)> {
        match self.mode {
            Mode::Vap => (e.t_p < e.t_n).then_some((e.t_p, e.t_n, false)),
            Mode::Vad | Mode::Vaa => Some((e.t_n, e.t_m, true)),
        }
    }

    pub fn in_window(&self, e: &GtEvent, t: f64) -> bool {
        match self.window(e) {
            Some((lo, hi, true)) => t >= lo && t <= hi,
            Some((lo, hi, false)) => t >= lo && t < hi,
            None => false,
        }
    }

    fn trigger(&self) -> Trigger {
        if self.mode == Mode::Vaa {
            Trigger::Query
        } else {
            Trigger::EosGate
        }
    }
}

/// Events of `stream` scored under `m`, in time order.
fn stream_events<'a>(events: &'a [ResponseEvent], stream: u32, m: &MatchingConfig) -> Vec<&'a ResponseEvent> {
    let mut out: Vec<&ResponseEvent> = events
        .iter()
        .filter(|e| e.stream == stream && e.mode == m.mode && e.trigger == m.trigger())
        .collect();
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out
}

fn check_sorted(truth: &[StreamTruth]) -> Result<()> {
    if truth.windows(2).all(|w| w[0].stream < w[1].stream) {
        Ok(())
    } else {
        Err(Error::Ordering("truth must be sorted by unique stream id".into()))
    }
}

/// Mean |t_model − t_expected| over expected responses. Each round takes the
/// earliest unused response inside its event's window, in round order.
pub fn time_diff(truth: &[StreamTruth], events: &[ResponseEvent], m: &MatchingConfig) -> Result<Option<f64>> {
    check_sorted(truth)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for st in truth {
        let evs = stream_events(events, st.stream, m);
        let mut used = vec![false; evs.len()];
        for r in &st.rounds {
            let gt = st.events.get(r.event).ok_or(Error::Index {
                row: 0,
                index: r.event,
                classes: st.events.len(),
            })?;
            let hit = (0..evs.len()).find(|&i| !used[i] && m.in_window(gt, evs[i].t));
            match (hit, m.penalty) {
                (Some(i), _) => {
                    used[i] = true;
                    total += (evs[i].t - r.t).abs();
                    n += 1;
                }
                (None, UnansweredPenalty::StreamEnd) => {
                    total += (st.end - r.t).max(0.0);
                    n += 1;
                }
                (None, UnansweredPenalty::Skip) => {}
            }
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub weighted_f1_pct: Option<f64>,
    pub table: Vec<CategoryScore>,
    /// Responses carrying no category token.
    pub unlabelled: usize,
}

/// Event-level classification counts summed over streams, F1 weighted by
/// ground-truth support.
pub fn weighted_f1(truth: &[StreamTruth], events: &[ResponseEvent], m: &MatchingConfig) -> Result<F1Report> {
    check_sorted(truth)?;
    #[derive(Default)]
    struct Counts {
        tp: usize,
        fp: usize,
        fn_: usize,
    }
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    let mut unlabelled = 0;
    for st in truth {
        let evs = stream_events(events, st.stream, m);
        let mut detected = vec![false; st.events.len()];
        for ev in &evs {
            let Some(c) = ev.category else {
                unlabelled += 1;
                continue;
            };
            let correct = st
                .events
                .iter()
                .enumerate()
                .find(|(_, g)| g.category == c && m.in_window(g, ev.t));
            match correct {
                Some((i, _)) => detected[i] = true,
                None => counts.entry(c).or_default().fp += 1,
            }
        }
        for (g, hit) in st.events.iter().zip(&detected) {
            if m.window(g).is_none() {
                continue;
            }
            let e = counts.entry(g.category).or_default();
            if *hit {
                e.tp += 1;
            } else {
                e.fn_ += 1;
            }
        }
    }
    let table: Vec<CategoryScore> = counts
        .into_iter()
        .map(|(category, c)| {
            let denom = 2 * c.tp + c.fp + c.fn_;
            CategoryScore {
                category,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                support: c.tp + c.fn_,
                f1: if denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 },
            }
        })
        .collect();
    let support: usize = table.iter().map(|s| s.support).sum();
    let weighted = (support > 0).then(|| {
        100.0 * table.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / support as f64
    });
    Ok(F1Report {
        weighted_f1_pct: weighted,
        table,
        unlabelled,
    })
}

/// Mean lead `t_n − t` of the earliest correct prediction per event.
pub fn aat(truth: &[StreamTruth], events: &[ResponseEvent]) -> Result<Option<f64>> {
    check_sorted(truth)?;
    let m = MatchingConfig::new(Mode::Vap);
    let mut total = 0.0;
    let mut n = 0usize;
    for st in truth {
        let evs = stream_events(events, st.stream, &m);
        for g in &st.events {
            let first = evs
                .iter()
                .find(|e| e.category == Some(g.category) && m.in_window(g, e.t) && e.t < g.t_n);
            if let Some(e) = first {
                total += g.t_n - e.t;
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Per-round position accuracy of one stream. `respond[p]` is the gate
/// decision at pair `p`; `hits[k]` holds teacher-forced token correctness for
/// round `k`.
///
/// Round `k` spans the pairs after the previous expected response up to its
/// own response pair. Its silent pairs score when the gate stayed silent; its
/// response tokens score when the gate fired at the response pair and the
/// token was predicted. Pairs after the last response form a trailing round.
pub fn fluency_rounds(respond: &[bool], rounds: &[GtRound], hits: &[Vec<bool>]) -> Result<Vec<f64>> {
    if hits.len() != rounds.len() {
        return Err(Error::Config(format!("{} hit rows for {} rounds", hits.len(), rounds.len())));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for (r, h) in rounds.iter().zip(hits) {
        if r.pair >= respond.len() || r.pair < start {
            return Err(Error::Ordering(format!("round at pair {} outside [{start}, {})", r.pair, respond.len())));
        }
        if h.len() != r.tokens {
            return Err(Error::Config(format!("{} hits for a {}-token response", h.len(), r.tokens)));
        }
        let silent = respond[start..r.pair].iter().filter(|x| !**x).count();
        let fired = respond[r.pair];
        let tokens = if fired { h.iter().filter(|x| **x).count() } else { 0 };
        let total = r.pair - start + r.tokens;
        if total > 0 {
            out.push((silent + tokens) as f64 / total as f64);
        }
        start = r.pair + 1;
    }
    if start < respond.len() {
        let tail = &respond[start..];
        out.push(tail.iter().filter(|x| !**x).count() as f64 / tail.len() as f64);
    }
    Ok(out)
}

/// Gate decisions per pair recovered from gated events.
pub fn respond_mask(pairs: usize, stream: u32, events: &[ResponseEvent], mode: Mode) -> Vec<bool> {
    let mut mask = vec![false; pairs];
    for e in events {
        if e.stream == stream && e.mode == mode && e.trigger == Trigger::EosGate && e.pair < pairs {
            mask[e.pair] = true;
        }
    }
    mask
}

/// Mean round fluency over all streams in percent.
pub fn fluency(
    truth: &[StreamTruth],
    events: &[ResponseEvent],
    hits: &BTreeMap<u32, Vec<Vec<bool>>>,
    mode: Mode,
) -> Result<Option<f64>> {
    check_sorted(truth)?;
    if mode == Mode::Vaa {
        return Ok(None);
    }
    let mut rounds = Vec::new();
    let empty = Vec::new();
    for st in truth {
        let respond = respond_mask(st.pairs, st.stream, events, mode);
        let h = hits.get(&st.stream).unwrap_or(&empty);
        let h = if st.rounds.is_empty() { &empty } else { h };
        rounds.extend(fluency_rounds(&respond, &st.rounds, h)?);
    }
    Ok((!rounds.is_empty()).then(|| 100.0 * rounds.iter().sum::<f64>() / rounds.len() as f64))
}

/// `exp` of the mean negative log-likelihood of supervised next tokens.
pub fn ppl_from_dists(items: &[(Matrix, &InterleavedSequence)]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for (d, seq) in items {
        let l = lm::joint_loss(d, seq, 0.0)?;
        sum += l.text_sum;
        count += l.text_count;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("lm_ppl"));
    }
    Ok((sum / count as f64).exp())
}

fn example_dists(lm: &StreamLm, strd: Option<&Strd>, ex: &LmExample, seq: &InterleavedSequence, max_len: usize) -> Result<Matrix> {
    let mut g = Graph::inference();
    let v = g.input(ex.visual.clone());
    let v = match strd {
        Some(s) => s.head(&mut g, v)?,
        None => v,
    };
    let logits = lm.forward(&mut g, seq, v, max_len)?;
    tensor::softmax_rows(g.value(logits), None)
}

/// Perplexity of `lm` on every sequence of `data`.
pub fn lm_ppl(lm: &StreamLm, strd: Option<&Strd>, data: &[LmExample], max_len: usize) -> Result<f64> {
    let mut dists = Vec::new();
    for ex in data {
        for seq in &ex.sequences {
            dists.push((example_dists(lm, strd, ex, seq, max_len)?, seq));
        }
    }
    ppl_from_dists(&dists)
}

/// Teacher-forced correctness of each supervised response token, grouped by
/// response. The stream EOS token is excluded, as in greedy decoding.
pub fn token_hits(dists: &Matrix, seq: &InterleavedSequence) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = Vec::new();
    for (row, target) in seq.text_terms() {
        let d = dists.row(row);
        let mut best = usize::from(STREAM_EOS == 0);
        for (i, &p) in d.iter().enumerate() {
            if i != STREAM_EOS as usize && p > d[best] {
                best = i;
            }
        }
        if !seq.l[row] {
            out.push(Vec::new());
        }
        out.last_mut().expect("responses start after an unsupervised row").push(best == target as usize);
    }
    out
}

/// Teacher-forced hits for every stream of `data` in sequence `mode`.
pub fn model_token_hits(
    lm: &StreamLm,
    strd: Option<&Strd>,
    data: &[(u32, LmExample)],
    mode: Mode,
    max_len: usize,
) -> Result<BTreeMap<u32, Vec<Vec<bool>>>> {
    let mut out = BTreeMap::new();
    for (id, ex) in data {
        let mut hits = Vec::new();
        for seq in ex.sequences.iter().filter(|s| s.mode == mode) {
            let d = example_dists(lm, strd, ex, seq, max_len)?;
            hits.extend(token_hits(&d, seq));
        }
        out.insert(*id, hits);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub streams: usize,
    pub rounds: usize,
    pub responses: usize,
    pub lm_ppl: Option<f64>,
    pub time_diff_seconds: Option<f64>,
    pub fluency_pct: Option<f64>,
    pub weighted_f1_pct: Option<f64>,
    pub aat_seconds: Option<f64>,
    pub per_category: Vec<CategoryScore>,
    pub unlabelled: usize,
}

impl MetricReport {
    /// Flat `metric<TAB>value` table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "mode\t{}\nstreams\t{}\nrounds\t{}\nresponses\t{}\nlm_ppl\t{}\ntime_diff_s\t{}\nfluency_pct\t{}\nweighted_f1_pct\t{}\naat_s\t{}\n",
            self.mode.name(),
            self.streams,
            self.rounds,
            self.responses,
            fmt(self.lm_ppl),
            fmt(self.time_diff_seconds),
            fmt(self.fluency_pct),
            fmt(self.weighted_f1_pct),
            fmt(self.aat_seconds),
        );
        for c in &self.per_category {
            s.push_str(&format!(
                "category {}\ttp={} fp={} fn={} f1={:.4}\n",
                c.category, c.tp, c.fp, c.fn_, c.f1
            ));
        }
        s
    }
}

impl MetricReport {
    /// Field-wise equality with real values compared to within `tol`.
    pub fn agrees_with(&self, other: &MetricReport, tol: f64) -> bool {
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= tol,
            (None, None) => true,
            _ => false,
        };
        self.mode == other.mode
            && (self.streams, self.rounds, self.responses, self.unlabelled)
                == (other.streams, other.rounds, other.responses, other.unlabelled)
            && close(self.lm_ppl, other.lm_ppl)
            && close(self.time_diff_seconds, other.time_diff_seconds)
            && close(self.fluency_pct, other.fluency_pct)
            && close(self.weighted_f1_pct, other.weighted_f1_pct)
            && close(self.aat_seconds, other.aat_seconds)
            && self.per_category.len() == other.per_category.len()
            && self.per_category.iter().zip(&other.per_category).all(|(a, b)| {
                (a.category, a.tp, a.fp, a.fn_, a.support) == (b.category, b.tp, b.fp, b.fn_, b.support)
                    && (a.f1 - b.f1).abs() <= tol
            })
    }
}

/// A hand-computed report with the inputs it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub mode: Mode,
    pub input: EvalInput,
    pub expected: MetricReport,
}

impl GoldenCase {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn evaluate(&self) -> Result<MetricReport> {
        evaluate(&self.input, &MatchingConfig::new(self.mode))
    }
}

/// Everything the report is computed from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub truth: Vec<StreamTruth>,
    pub events: Vec<ResponseEvent>,
    #[serde(default)]
    pub token_hits: BTreeMap<u32, Vec<Vec<bool>>>,
    #[serde(default)]
    pub lm_ppl: Option<f64>,
}

pub fn evaluate(input: &EvalInput, m: &MatchingConfig) -> Result<MetricReport> {
    let f1 = weighted_f1(&input.truth, &input.events, m)?;
    Ok(MetricReport {
        mode: m.mode,
        streams: input.truth.len(),
        rounds: input.truth.iter().map(|t| t.rounds.len()).sum(),
        responses: input.events.iter().filter(|e| e.mode == m.mode).count(),
        lm_ppl: input.lm_ppl,
        time_diff_seconds: time_diff(&input.truth, &input.events, m)?,
        fluency_pct: fluency(&input.truth, &input.events, &input.token_hits, m.mode)?,
        weighted_f1_pct: f1.weighted_f1_pct,
        aat_seconds: if m.mode == Mode::Vap { aat(&input.truth, &input.events)? } else { None },
        per_category: f1.table,
        unlabelled: f1.unlabelled,
    })
}
