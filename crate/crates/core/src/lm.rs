//! Toy causal language model over interleaved visual blocks and text tokens,
//! with the per-frame streaming EOS objective and LoRA fine-tuning.
//!
//! Responses and queries are side branches anchored after the frame block
//! they follow: they see the mainline before them, and later frame tokens
//! never see them. Branch tokens take positions `anchor + 1 + k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{sinusoidal, BlockInit, KvCache, Layout, MhsaConfig, Segment, Stack};
use crate::autodiff::{NllTerm, Var, PROB_FLOOR};
use crate::encoder::TokenBlock;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{join, Graph, Init, Linear, Norm, Params};
use crate::rng::SeededRng;
use crate::strd::{self, Strd};
use crate::synth::AnnotationSet;
use crate::tensor::{self, Matrix};
use crate::vocab::{Mode, TokenId, Vocab, STREAM_EOS};

pub const PREFIX: &str = "lm";

/// Parameters that receive gradients during fine-tuning.
pub fn is_finetuned(name: &str) -> bool {
    name.contains(".lora_") || strd::is_output_layer(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Row `row` of the visual token matrix, from frame pair `pair`.
    Visual { row: usize, pair: usize },
    Text(TokenId),
}

/// Interleaved positions with the per-position indicators of the joint loss:
/// `l[i]` marks supervised response tokens, `f[i]` marks frame-final tokens
/// followed by a non-response position.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSequence {
    pub mode: Mode,
    pub slots: Vec<Slot>,
    pub layout: Layout,
    pub l: Vec<bool>,
    pub f: Vec<bool>,
    /// Visual rows consumed.
    pub visual_rows: usize,
    /// Index of the final position of each frame block.
    pub frame_ends: Vec<usize>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `(row, target)` pairs with `l[row + 1]` set.
    pub fn text_terms(&self) -> Vec<(usize, TokenId)> {
        (0..self.len().saturating_sub(1))
            .filter(|&i| self.l[i + 1])
            .map(|i| match self.slots[i + 1] {
                Slot::Text(t) => (i, t),
                Slot::Visual { .. } => unreachable!("l is only set on text"),
            })
            .collect()
    }

    pub fn eos_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.f[i]).collect()
    }
}

struct Builder {
    slots: Vec<Slot>,
    segments: Vec<Segment>,
    l: Vec<bool>,
    frame_last: Vec<bool>,
    frame_ends: Vec<usize>,
}

impl Builder {
    fn text(&mut self, ids: &[TokenId], supervised: bool) {
        for &t in ids {
            self.slots.push(Slot::Text(t));
            self.l.push(supervised);
            self.frame_last.push(false);
        }
    }
}

/// Lays out `[prompt, frame block 0, branches…, frame block 1, …]` for `mode`.
pub fn build_interleaved(
    vocab: &Vocab,
    mode: Mode,
    annotations: &AnnotationSet,
    blocks: &[TokenBlock],
) -> Result<InterleavedSequence> {
    // Branch content per pair: (tokens, supervised flags).
    let mut branches: BTreeMap<usize, Vec<(Vec<TokenId>, Vec<bool>)>> = BTreeMap::new();
    let anchor = |pair: usize, t: f64| -> Result<usize> {
        let block = blocks
            .iter()
            .position(|b| b.pair_index == pair && (b.timestamp - t).abs() < 1e-9)
            .ok_or_else(|| Error::Alignment(format!("response at {t}s (pair {pair}) matches no frame block")))?;
        Ok(block)
    };
    match mode {
        Mode::Vap | Mode::Vad => {
            let records = if mode == Mode::Vap { &annotations.vap } else { &annotations.vad };
            for r in records {
                let b = anchor(r.pair, r.t)?;
                branches.entry(b).or_default().push((r.tokens.clone(), vec![true; r.tokens.len()]));
            }
        }
        Mode::Vaa => {
            for q in &annotations.vaa {
                let b = anchor(q.pair, q.t)?;
                let mut tokens = q.query.clone();
                tokens.extend(&q.answer);
                let mut sup = vec![false; q.query.len()];
                sup.extend(vec![true; q.answer.len()]);
                branches.entry(b).or_default().push((tokens, sup));
            }
        }
    }
    for ids in branches.values().flatten().flat_map(|(t, _)| t) {
        vocab.check(*ids)?;
    }

    let prompt = vocab.prompt(mode);
    let mut b = Builder {
        slots: Vec::new(),
        segments: vec![Segment::Main(prompt.len())],
        l: Vec::new(),
        frame_last: Vec::new(),
        frame_ends: Vec::new(),
    };
    b.text(&prompt, false);
    let mut row = 0;
    for (bi, block) in blocks.iter().enumerate() {
        let n = block.tokens.rows();
        for k in 0..n {
            b.slots.push(Slot::Visual {
                row: row + k,
                pair: block.pair_index,
            });
            b.l.push(false);
            b.frame_last.push(k + 1 == n);
        }
        row += n;
        b.segments.push(Segment::Main(n));
        b.frame_ends.push(b.slots.len() - 1);
        for (tokens, sup) in branches.get(&bi).into_iter().flatten() {
            b.segments.push(Segment::Branch(tokens.len()));
            for (&t, &s) in tokens.iter().zip(sup) {
                b.text(&[t], s);
            }
        }
    }
    let len = b.slots.len();
    let f: Vec<bool> = (0..len)
        .map(|i| b.frame_last[i] && !(i + 1 < len && b.l[i + 1]))
        .collect();
    assert!(
        b.l.iter().zip(&f).all(|(l, f)| !(*l && *f)),
        "l and f overlap"
    );
    Ok(InterleavedSequence {
        mode,
        slots: b.slots,
        layout: Layout { segments: b.segments },
        l: b.l,
        f,
        visual_rows: row,
        frame_ends: b.frame_ends,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub depth: usize,
    pub vocab_size: usize,
}

impl LmConfig {
    pub fn mhsa(&self) -> MhsaConfig {
        MhsaConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamLm {
    pub cfg: LmConfig,
    pub embed: Matrix,
    pub projector: Linear,
    pub stack: Stack,
    pub norm: Norm,
    pub head: Linear,
}

/// Input to one streaming call.
pub enum LmInput<'a> {
    Visual(&'a Matrix),
    Text(&'a [TokenId]),
}

impl StreamLm {
    /// Random frozen base with an identity projector.
    pub fn new(cfg: LmConfig, rng: &mut SeededRng) -> Result<Self> {
        let mhsa = cfg.mhsa();
        mhsa.validate()?;
        Ok(Self {
            embed: Matrix::randn(cfg.vocab_size, cfg.d_model, 1.0, rng),
            projector: Linear::new(cfg.d_model, cfg.d_model, Init::Identity, rng),
            stack: Stack::new(mhsa, cfg.depth, BlockInit::Standard, rng)?,
            norm: Norm::new(cfg.d_model),
            head: Linear::new(cfg.d_model, cfg.vocab_size, Init::Scaled, rng),
            cfg,
        })
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.projector, &mut self.head];
        for b in &mut self.stack.blocks {
            out.extend(b.linears_mut());
        }
        out
    }

    /// Attaches a zero-initialised adapter to every linear layer.
    pub fn apply_lora(&mut self, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<()> {
        for l in self.linears_mut() {
            l.attach_lora(rank, alpha, rng)?;
        }
        Ok(())
    }

    pub fn merge_lora(&mut self) -> Result<()> {
        for l in self.linears_mut() {
            l.merge_lora()?;
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.projector.lora.is_some()
    }

    fn check_tokens(&self, ids: impl IntoIterator<Item = TokenId>) -> Result<()> {
        for id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::Vocab {
                    id,
                    size: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed_text(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Var> {
        let table = g.param(&join(PREFIX, "embed"), &self.embed);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        g.tape.gather_rows(table, &idx)
    }

    fn project(&self, g: &mut Graph, visual: Var) -> Result<Var> {
        self.projector.forward(g, &join(PREFIX, "projector"), visual)
    }

    fn readout(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let h = self.norm.forward(g, &join(PREFIX, "norm"), h)?;
        self.head.forward(g, &join(PREFIX, "head"), h)
    }

    /// Full-sequence logits (`len × vocab`). `visual` holds the rows referenced
    /// by the sequence's visual slots.
    pub fn forward(&self, g: &mut Graph, seq: &InterleavedSequence, visual: Var, max_len: usize) -> Result<Var> {
        self.check_tokens(seq.slots.iter().filter_map(|s| match s {
            Slot::Text(t) => Some(*t),
            Slot::Visual { .. } => None,
        }))?;
        let texts: Vec<TokenId> = seq
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Text(t) => Some(*t),
                _ => None,
            })
            .collect();
        let n_vis = g.value(visual).rows();
        let mut order = Vec::with_capacity(seq.len());
        let mut ti = 0;
        for s in &seq.slots {
            match *s {
                Slot::Visual { row, .. } => {
                    if row >= n_vis {
                        return Err(Error::Shape {
                            op: "lm_forward",
                            left: (n_vis, self.cfg.d_model),
                            right: (row + 1, self.cfg.d_model),
                        });
                    }
                    order.push(row)
                }
                Slot::Text(_) => {
                    order.push(n_vis + ti);
                    ti += 1;
                }
            }
        }
        let vis = self.project(g, visual)?;
        let x = if texts.is_empty() {
            vis
        } else {
            let emb = self.embed_text(g, &texts)?;
            g.tape.concat_rows(&[vis, emb])?
        };
        let x = g.tape.gather_rows(x, &order)?;
        let pe = g.input(sinusoidal(&seq.layout.positions(), self.cfg.d_model));
        let x = g.tape.add(x, pe)?;
        let h = self.stack.forward(g, &join(PREFIX, "stack"), x, &seq.layout.mask(max_len))?;
        self.readout(g, h)
    }

    /// Streams new mainline or branch rows through `cache`; returns their logits.
    pub fn forward_stream(&self, cache: &mut KvCache, input: LmInput) -> Result<Matrix> {
        let mut g = Graph::inference();
        let x = match input {
            LmInput::Visual(m) => {
                let v = g.input(m.clone());
                self.project(&mut g, v)?
            }
            LmInput::Text(ids) => {
                self.check_tokens(ids.iter().copied())?;
                self.embed_text(&mut g, ids)?
            }
        };
        let n = g.value(x).rows();
        let start = cache.next_position();
        let pos: Vec<usize> = (start..start + n).collect();
        let pe = g.input(sinusoidal(&pos, self.cfg.d_model));
        let x = g.tape.add(x, pe)?;
        let h = self.stack.forward_stream(&mut g, &join(PREFIX, "stack"), cache, x)?;
        let logits = self.readout(&mut g, h)?;
        Ok(g.value(logits).clone())
    }

    pub fn new_cache(&self, max_len: usize) -> KvCache {
        KvCache::new(&self.stack, max_len)
    }
}

impl Params for StreamLm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "embed"), &self.embed);
        self.projector.visit(&join(prefix, "projector"), f);
        self.stack.visit(&join(prefix, "stack"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "embed"), &mut self.embed);
        self.projector.visit_mut(&join(prefix, "projector"), f);
        self.stack.visit_mut(&join(prefix, "stack"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Loss value with its text and EOS sums kept apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub value: f64,
    /// Σ −log P[text] over `l[i+1]` positions.
    pub text_sum: f64,
    /// Σ −log P[EOS] over `f[i]` positions.
    pub eos_sum: f64,
    pub text_count: usize,
    pub eos_count: usize,
    pub floored: usize,
}

impl JointLoss {
    /// Supervised positions: text terms plus EOS terms when `w > 0`.
    pub fn normalizer(text: usize, eos: usize, w: f64) -> f64 {
        text as f64 + if w > 0.0 { eos as f64 } else { 0.0 }
    }
}

/// Joint loss from per-position probabilities (`len × vocab`).
pub fn joint_loss(dists: &Matrix, seq: &InterleavedSequence, w: f64) -> Result<JointLoss> {
    if w < 0.0 {
        return Err(Error::Config(format!("loss weight {w} is negative")));
    }
    if dists.rows() != seq.len() {
        return Err(Error::Shape {
            op: "joint_loss",
            left: dists.shape(),
            right: (seq.len(), dists.cols()),
        });
    }
    let mut floored = 0;
    let mut nll = |row: usize, target: usize| {
        let p = dists.get(row, target);
        if p < PROB_FLOOR {
            floored += 1;
            -PROB_FLOOR.ln()
        } else {
            -p.ln()
        }
    };
    let text = seq.text_terms();
    let eos = seq.eos_rows();
    let text_sum: f64 = text.iter().map(|&(r, t)| nll(r, t as usize)).sum();
    let eos_sum: f64 = eos.iter().map(|&r| nll(r, STREAM_EOS as usize)).sum();
    let n = JointLoss::normalizer(text.len(), eos.len(), w);
    let value = if n > 0.0 { (text_sum + w * eos_sum) / n } else { 0.0 };
    Ok(JointLoss {
        value,
        text_sum,
        eos_sum,
        text_count: text.len(),
        eos_count: eos.len(),
        floored,
    })
}

/// Differentiable joint loss on logits.
pub fn joint_loss_var(g: &mut Graph, logits: Var, seq: &InterleavedSequence, w: f64) -> Result<Var> {
    let mut terms: Vec<NllTerm> = seq
        .text_terms()
        .into_iter()
        .map(|(row, t)| NllTerm {
            row,
            target: t as usize,
            weight: 1.0,
        })
        .collect();
    let text_count = terms.len();
    let eos = seq.eos_rows();
    if w > 0.0 {
        terms.extend(eos.iter().map(|&row| NllTerm {
            row,
            target: STREAM_EOS as usize,
            weight: w,
        }));
    }
    let n = JointLoss::normalizer(text_count, eos.len(), w);
    g.tape.nll(logits, &terms, n, true)
}

/// Per-position probabilities from a full forward.
pub fn distributions(lm: &StreamLm, seq: &InterleavedSequence, visual: &Matrix, max_len: usize) -> Result<Matrix> {
    let mut g = Graph::inference();
    let v = g.input(visual.clone());
    let logits = lm.forward(&mut g, seq, v, max_len)?;
    tensor::softmax_rows(g.value(logits), None)
}

/// Visual input of one training stream: either precomputed STRD stack
/// output (the output layer is applied on the tape) or raw encoder tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub visual: Matrix,
    pub sequences: Vec<InterleavedSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub w: f64,
    pub lm_max_len: usize,
    /// Whether the STRD output layer is trained alongside the adapters.
    pub train_strd_output: bool,
}

/// Visual rows fed to the LM: STRD output layer on `visual` when an STRD is
/// given, `visual` itself otherwise.
fn visual_input(g: &mut Graph, strd: Option<&Strd>, visual: &Matrix) -> Result<Var> {
    let v = g.input(visual.clone());
    match strd {
        Some(s) => s.head(g, v),
        None => Ok(v),
    }
}

/// Mean joint loss over every sequence of every example.
pub fn evaluate_joint(
    lm: &StreamLm,
    strd: Option<&Strd>,
    data: &[LmExample],
    w: f64,
    lm_max_len: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in data {
        for seq in &ex.sequences {
            let mut g = Graph::inference();
            let v = visual_input(&mut g, strd, &ex.visual)?;
            let logits = lm.forward(&mut g, seq, v, lm_max_len)?;
            let loss = joint_loss_var(&mut g, logits, seq, w)?;
            total += g.tape.scalar(loss);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("empty evaluation set".into()));
    }
    Ok(total / count as f64)
}

/// AdamW over LoRA adapters (and optionally the STRD output layer).
pub fn train_finetune(
    lm: &mut StreamLm,
    mut strd: Option<&mut Strd>,
    data: &[LmExample],
    cfg: FinetuneConfig,
    rng: &mut SeededRng,
) -> Result<crate::strd::LossCurve> {
    let items: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| (0..ex.sequences.len()).map(move |j| (i, j)))
        .collect();
    if items.is_empty() {
        return Err(Error::Config("empty fine-tuning set".into()));
    }
    let batch = cfg.batch.max(1);
    let total_steps = items.len().div_ceil(batch) * cfg.epochs;
    let mut lm_opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), total_steps);
    let mut strd_opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), total_steps);
    let train_out = cfg.train_strd_output;
    let filter = move |name: &str| name.contains(".lora_") || (train_out && strd::is_output_layer(name));
    let mut order = items;
    let mut curve = crate::strd::LossCurve::default();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc: BTreeMap<String, Matrix> = BTreeMap::new();
            for &(i, j) in chunk {
                let ex = &data[i];
                let seq = &ex.sequences[j];
                let mut g = Graph::new(&filter);
                let v = visual_input(&mut g, strd.as_deref(), &ex.visual)?;
                let logits = lm.forward(&mut g, seq, v, cfg.lm_max_len)?;
                let loss = joint_loss_var(&mut g, logits, seq, cfg.w)?;
                let value = g.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        step: curve.steps,
                        loss: value,
                    });
                }
                epoch_total += value;
                for (name, grad) in g.tape.backward(loss)?.named() {
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&grad)?,
                        None => {
                            acc.insert(name, grad);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in acc.values_mut() {
                *g = g.scale(scale);
            }
            lm_opt.step(lm, PREFIX, &acc)?;
            if let Some(s) = strd.as_deref_mut() {
                strd_opt.step(s, strd::PREFIX, &acc)?;
            }
            curve.steps += 1;
        }
        curve.epoch_losses.push(epoch_total / order.len() as f64);
    }
    Ok(curve)
}
