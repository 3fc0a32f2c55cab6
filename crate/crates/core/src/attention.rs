//! Pre-norm multi-head self-attention stacks in full (bidirectional or
//! causal) and streaming modes, sinusoidal positions and the bounded KV cache.
//!
//! Streaming is block-granular: a call that appends `n` tokens first appends
//! them conceptually, keeps the newest `max_len` positions, and lets each new
//! token attend to the retained positions at or before it (and always to
//! itself). Tokens fed inside a *branch* see the retained mainline plus
//! earlier tokens of the same branch; they are dropped when the branch ends
//! and never become visible to later mainline tokens. [`Layout`] builds the
//! equivalent full-sequence mask so training can reproduce streaming exactly.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{join, Graph, Init, Linear, Norm, Params};
use crate::rng::SeededRng;
use crate::tensor::{Mask, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhsaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
}

impl Default for MhsaConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            ffn_mult: 4,
        }
    }
}

impl MhsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("attention dimensions must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockInit {
    Standard,
    /// Output projection and second feed-forward layer start at zero, so the
    /// block is an exact identity map.
    ZeroResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl Block {
    pub fn new(cfg: &MhsaConfig, init: BlockInit, rng: &mut SeededRng) -> Self {
        let d = cfg.d_model;
        let h = d * cfg.ffn_mult;
        let residual = match init {
            BlockInit::Standard => Init::Scaled,
            BlockInit::ZeroResidual => Init::Zero,
        };
        Self {
            ln1: Norm::new(d),
            q: Linear::new(d, d, Init::Scaled, rng),
            k: Linear::new(d, d, Init::Scaled, rng),
            v: Linear::new(d, d, Init::Scaled, rng),
            o: Linear::new(d, d, residual, rng),
            ln2: Norm::new(d),
            ffn1: Linear::new(d, h, Init::Scaled, rng),
            ffn2: Linear::new(h, d, residual, rng),
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.ffn1,
            &mut self.ffn2,
        ]
    }

    /// One block over `x`, whose keys/values are appended after `ctx` (cached
    /// keys and values from earlier calls). Returns the output and this
    /// call's keys and values.
    fn forward(
        &self,
        g: &mut Graph,
        prefix: &str,
        cfg: &MhsaConfig,
        x: Var,
        ctx: Option<(Var, Var)>,
        mask: &Mask,
        trace: Option<&mut Vec<Matrix>>,
    ) -> Result<(Var, Var, Var)> {
        let h = self.ln1.forward(g, &join(prefix, "ln1"), x)?;
        let q = self.q.forward(g, &join(prefix, "q"), h)?;
        let k = self.k.forward(g, &join(prefix, "k"), h)?;
        let v = self.v.forward(g, &join(prefix, "v"), h)?;
        let (keys, values) = match ctx {
            Some((ck, cv)) => (g.tape.concat_rows(&[ck, k])?, g.tape.concat_rows(&[cv, v])?),
            None => (k, v),
        };
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut weights = Vec::new();
        for head in 0..cfg.n_heads {
            let qh = g.tape.slice_cols(q, head * dh, dh)?;
            let kh = g.tape.slice_cols(keys, head * dh, dh)?;
            let vh = g.tape.slice_cols(values, head * dh, dh)?;
            let s = g.tape.matmul_nt(qh, kh)?;
            let s = g.tape.scale(s, scale);
            let a = g.tape.softmax_rows(s, Some(mask))?;
            if trace.is_some() {
                weights.push(g.value(a).clone());
            }
            heads.push(g.tape.matmul(a, vh)?);
        }
        if let Some(t) = trace {
            t.extend(weights);
        }
        let cat = g.tape.concat_cols(&heads)?;
        let attn = self.o.forward(g, &join(prefix, "o"), cat)?;
        let x = g.tape.add(x, attn)?;
        let h2 = self.ln2.forward(g, &join(prefix, "ln2"), x)?;
        let f = self.ffn1.forward(g, &join(prefix, "ffn1"), h2)?;
        let f = g.tape.gelu(f);
        let f = self.ffn2.forward(g, &join(prefix, "ffn2"), f)?;
        Ok((g.tape.add(x, f)?, k, v))
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ffn1.visit(&join(prefix, "ffn1"), f);
        self.ffn2.visit(&join(prefix, "ffn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
    }
}

/// A list of blocks applied in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub cfg: MhsaConfig,
    pub blocks: Vec<Block>,
}

impl Stack {
    pub fn new(cfg: MhsaConfig, depth: usize, init: BlockInit, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..depth).map(|_| Block::new(&cfg, init, rng)).collect();
        Ok(Self { cfg, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Full-sequence forward under an explicit mask.
    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var, mask: &Mask) -> Result<Var> {
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, &join(prefix, &i.to_string()), &self.cfg, h, None, mask, None)?.0;
        }
        Ok(h)
    }

    /// Streams `x_new` through the stack, appending to `cache` (or to its open
    /// branch). Returns outputs for the new rows only.
    pub fn forward_stream(&self, g: &mut Graph, prefix: &str, cache: &mut KvCache, x_new: Var) -> Result<Var> {
        self.stream_impl(g, prefix, cache, x_new, None)
    }

    /// Like [`Stack::forward_stream`] but also returns the attention weights of
    /// every layer and head (`layers × heads` matrices of `n_new × context`).
    pub fn forward_stream_traced(
        &self,
        g: &mut Graph,
        prefix: &str,
        cache: &mut KvCache,
        x_new: Var,
    ) -> Result<(Var, Vec<Vec<Matrix>>)> {
        let mut trace = Vec::new();
        let out = self.stream_impl(g, prefix, cache, x_new, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn stream_impl(
        &self,
        g: &mut Graph,
        prefix: &str,
        cache: &mut KvCache,
        x_new: Var,
        mut trace: Option<&mut Vec<Vec<Matrix>>>,
    ) -> Result<Var> {
        if cache.layers.len() != self.blocks.len() || cache.d_model != self.cfg.d_model {
            return Err(Error::Config(format!(
                "cache built for {} layers of width {}, stack has {} of width {}",
                cache.layers.len(),
                cache.d_model,
                self.blocks.len(),
                self.cfg.d_model
            )));
        }
        let n = g.value(x_new).rows();
        if g.value(x_new).cols() != self.cfg.d_model {
            return Err(Error::Shape {
                op: "forward_stream",
                left: g.value(x_new).shape(),
                right: (n, self.cfg.d_model),
            });
        }
        if n == 0 {
            return Ok(x_new);
        }
        let mask = cache.mask_for(n);
        let mut h = x_new;
        for (i, b) in self.blocks.iter().enumerate() {
            let ctx = cache.context(i, g);
            let mut weights = Vec::new();
            let (out, k, v) = b.forward(
                g,
                &join(prefix, &i.to_string()),
                &self.cfg,
                h,
                ctx,
                &mask,
                trace.as_ref().map(|_| &mut weights),
            )?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(weights);
            }
            let (kv, vv) = (g.value(k).clone(), g.value(v).clone());
            cache.push_layer(i, &kv, &vv);
            h = out;
        }
        cache.finish_append(n);
        Ok(h)
    }
}

impl Params for Stack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.blocks.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.blocks.visit_mut(prefix, f);
    }
}

/// `mhsa_full`: bidirectional when `causal` is false.
pub fn mhsa_full(stack: &Stack, x: &Matrix, causal: bool) -> Result<Matrix> {
    if x.rows() == 0 {
        return Ok(Matrix::zeros(0, x.cols()));
    }
    let mask = if causal {
        Mask::causal(x.rows())
    } else {
        Mask::all(x.rows(), x.rows())
    };
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let y = stack.forward(&mut g, "", xv, &mask)?;
    Ok(g.value(y).clone())
}

/// `mhsa_stream` over an inference graph.
pub fn mhsa_stream(stack: &Stack, cache: &mut KvCache, x_new: &Matrix) -> Result<Matrix> {
    let mut g = Graph::inference();
    let xv = g.input(x_new.clone());
    let y = stack.forward_stream(&mut g, "", cache, xv)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    keys: VecDeque<Vec<f64>>,
    values: VecDeque<Vec<f64>>,
}

impl LayerCache {
    fn len(&self) -> usize {
        self.keys.len()
    }
}

/// Per-layer FIFO buffers of keys and values.
#[derive(Clone, Debug)]
pub struct KvCache {
    max_len: usize,
    d_model: usize,
    layers: Vec<LayerCache>,
    branch: Option<Vec<LayerCache>>,
    appended: usize,
}

impl KvCache {
    pub fn new(stack: &Stack, max_len: usize) -> Self {
        Self {
            max_len,
            d_model: stack.cfg.d_model,
            layers: vec![LayerCache::default(); stack.depth()],
            branch: None,
            appended: 0,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Total mainline tokens ever appended.
    pub fn appended(&self) -> usize {
        self.appended
    }

    /// Mainline positions currently held.
    pub fn stored(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn branch_len(&self) -> usize {
        self.branch.as_ref().and_then(|b| b.first()).map_or(0, LayerCache::len)
    }

    pub fn in_branch(&self) -> bool {
        self.branch.is_some()
    }

    /// Routes subsequent appends into a temporary side buffer.
    pub fn begin_branch(&mut self) {
        self.branch = Some(vec![LayerCache::default(); self.layers.len()]);
    }

    /// Discards the side buffer.
    pub fn end_branch(&mut self) {
        self.branch = None;
    }

    /// Position index the next appended token receives.
    pub fn next_position(&self) -> usize {
        self.appended + self.branch_len()
    }

    fn mask_for(&self, n: usize) -> Mask {
        let stored = self.stored();
        if self.branch.is_some() {
            let b = self.branch_len();
            let ctx = stored + b;
            return Mask::from_fn(n, ctx + n, |j, c| c < ctx || c - ctx <= j);
        }
        // Cached entry c holds absolute index appended - stored + c.
        let end = self.appended + n;
        let lo = end.saturating_sub(self.max_len);
        let first = self.appended - stored;
        Mask::from_fn(n, stored + n, |j, c| {
            let idx = if c < stored { first + c } else { self.appended + (c - stored) };
            let me = self.appended + j;
            idx == me || (idx < me && idx >= lo)
        })
    }

    fn context(&self, layer: usize, g: &mut Graph) -> Option<(Var, Var)> {
        let main = &self.layers[layer];
        let branch = self.branch.as_ref().map(|b| &b[layer]);
        let total = main.len() + branch.map_or(0, LayerCache::len);
        if total == 0 {
            return None;
        }
        let gather = |sel: fn(&LayerCache) -> &VecDeque<Vec<f64>>| {
            let mut data = Vec::with_capacity(total * self.d_model);
            for row in sel(main) {
                data.extend_from_slice(row);
            }
            if let Some(b) = branch {
                for row in sel(b) {
                    data.extend_from_slice(row);
                }
            }
            Matrix::new(total, self.d_model, data).expect("cache rows have model width")
        };
        let k = gather(|l| &l.keys);
        let v = gather(|l| &l.values);
        Some((g.input(k), g.input(v)))
    }

    fn push_layer(&mut self, layer: usize, k: &Matrix, v: &Matrix) {
        let target = match &mut self.branch {
            Some(b) => &mut b[layer],
            None => &mut self.layers[layer],
        };
        for r in 0..k.rows() {
            target.keys.push_back(k.row(r).to_vec());
            target.values.push_back(v.row(r).to_vec());
        }
        if self.branch.is_none() {
            let l = &mut self.layers[layer];
            while l.keys.len() > self.max_len {
                l.keys.pop_front();
                l.values.pop_front();
            }
        }
    }

    fn finish_append(&mut self, n: usize) {
        if self.branch.is_none() {
            self.appended += n;
        }
    }
}

/// One contiguous group of tokens in a [`Layout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    /// Mainline tokens appended as one block.
    Main(usize),
    /// Side-branch tokens anchored after all preceding mainline tokens.
    Branch(usize),
}

/// Full-sequence description of a streaming schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn blocks(count: usize, len: usize) -> Self {
        Self {
            segments: vec![Segment::Main(len); count],
        }
    }

    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Main(n) | Segment::Branch(n) => n,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positional index of every token: mainline tokens count mainline tokens
    /// only; branch token `k` gets `anchor + 1 + k`.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut main = 0;
        for s in &self.segments {
            match *s {
                Segment::Main(n) => {
                    out.extend(main..main + n);
                    main += n;
                }
                Segment::Branch(n) => out.extend(main..main + n),
            }
        }
        out
    }

    /// Attention mask reproducing streaming with a cache of `max_len`.
    pub fn mask(&self, max_len: usize) -> Mask {
        #[derive(Clone, Copy)]
        enum Kind {
            Main { idx: usize, lo: usize },
            Branch { id: usize, main_end: usize, lo: usize },
        }
        let mut kinds = Vec::with_capacity(self.len());
        let mut main = 0;
        for (id, s) in self.segments.iter().enumerate() {
            match *s {
                Segment::Main(n) => {
                    let lo = (main + n).saturating_sub(max_len);
                    kinds.extend((main..main + n).map(|idx| Kind::Main { idx, lo }));
                    main += n;
                }
                Segment::Branch(n) => {
                    let lo = main.saturating_sub(max_len);
                    kinds.extend((0..n).map(|_| Kind::Branch { id, main_end: main, lo }));
                }
            }
        }
        let n = kinds.len();
        Mask::from_fn(n, n, |r, c| {
            if c > r {
                return false;
            }
            match (kinds[r], kinds[c]) {
                (Kind::Main { idx, lo }, Kind::Main { idx: k, .. }) => k == idx || k >= lo,
                (Kind::Main { .. }, Kind::Branch { .. }) => false,
                (Kind::Branch { main_end, lo, .. }, Kind::Main { idx: k, .. }) => k < main_end && k >= lo,
                (Kind::Branch { id, .. }, Kind::Branch { id: other, .. }) => id == other,
            }
        })
    }
}

/// Sinusoidal table for the given absolute positions:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(…)`.
pub fn sinusoidal(positions: &[usize], d: usize) -> Matrix {
    Matrix::from_fn(positions.len(), d, |r, c| {
        let pair = (c / 2) as f64;
        let angle = positions[r] as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adds encodings for positions `start..start + x.rows()`.
pub fn positional_encode(x: &Matrix, start: usize) -> Matrix {
    let pos: Vec<usize> = (start..start + x.rows()).collect();
    x.add(&sinusoidal(&pos, x.cols())).expect("table matches input shape")
}
