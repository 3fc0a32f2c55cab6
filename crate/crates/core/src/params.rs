//! Named parameters, tape binding and line-delimited checkpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{finite_diff_check, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// Hierarchical access to every weight matrix of a model.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// SHA-256 over names, shapes and bit patterns of every parameter.
pub fn fingerprint(p: &dyn Params, prefix: &str) -> String {
    let mut h = Sha256::new();
    p.visit(prefix, &mut |name, m| {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for b in m.to_bits() {
            h.update(b.to_le_bytes());
        }
    });
    format!("{:x}", h.finalize())
}

pub fn count(p: &dyn Params, prefix: &str, filter: &dyn Fn(&str) -> bool) -> usize {
    let mut n = 0;
    p.visit(prefix, &mut |name, m| {
        if filter(name) {
            n += m.len();
        }
    });
    n
}

/// A tape plus a name → leaf table so every parameter is bound at most once
/// per forward pass. `trainable` decides which names receive gradients.
pub struct Graph<'a> {
    pub tape: Tape,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: HashMap<String, Var>,
}

fn frozen(_: &str) -> bool {
    false
}

impl<'a> Graph<'a> {
    pub fn new(trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            tape: Tape::new(),
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Graph in which nothing is trainable.
    pub fn inference() -> Graph<'static> {
        Graph::new(&frozen)
    }

    pub fn param(&mut self, name: &str, m: &Matrix) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.param(name, m, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    /// Makes `name` resolve to an existing node instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }
}

/// [`finite_diff_check`] for model code written against [`Graph`]. With
/// `bind`, the checked point stands in for the parameter of that name;
/// otherwise it is the model input.
pub fn graph_check<F>(op: F, point: &Matrix, step: f64, bind: Option<&str>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check(
        |tape, v| {
            let mut g = Graph::inference();
            std::mem::swap(&mut g.tape, tape);
            if let Some(name) = bind {
                g.bind(name, v);
            }
            let out = op(&mut g, v);
            std::mem::swap(&mut g.tape, tape);
            out
        },
        point,
        step,
    )
}

/// Init scheme for a [`Linear`] layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, 1/d_in) weights, zero bias.
    Scaled,
    /// All zeros.
    Zero,
    /// Identity weights (square layers only), zero bias.
    Identity,
}

/// Low-rank correction `(alpha / rank) · A · B` on top of a frozen weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/d_in)`, `B = 0`, so the adapter starts as an exact no-op.
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Rank { rank, d_in, d_out });
        }
        Ok(Self {
            a: Matrix::randn(d_in, rank, 1.0 / (d_in as f64).sqrt(), rng),
            b: Matrix::zeros(rank, d_out),
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / rank) · A · B`.
    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.a.matmul(&self.b)?.scale(self.scaling()))
    }
}

/// Affine map `y = x·W + b` with an optional LoRA adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, init: Init, rng: &mut SeededRng) -> Self {
        let w = match init {
            Init::Scaled => Matrix::randn(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng),
            Init::Zero => Matrix::zeros(d_in, d_out),
            Init::Identity => {
                assert_eq!(d_in, d_out, "identity init needs a square layer");
                Matrix::identity(d_in)
            }
        };
        Self {
            w,
            b: Matrix::zeros(1, d_out),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<()> {
        self.lora = Some(LoraAdapter::new(self.d_in(), self.d_out(), rank, alpha, rng)?);
        Ok(())
    }

    /// Folds the adapter into `W` and removes it.
    pub fn merge_lora(&mut self) -> Result<()> {
        if let Some(l) = self.lora.take() {
            self.w.add_assign(&l.delta()?)?;
        }
        Ok(())
    }

    /// `W + (alpha / rank) · A · B`.
    pub fn effective_weight(&self) -> Result<Matrix> {
        match &self.lora {
            Some(l) => self.w.add(&l.delta()?),
            None => Ok(self.w.clone()),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(&join(prefix, "w"), &self.w);
        let b = g.param(&join(prefix, "b"), &self.b);
        let xw = g.tape.matmul(x, w)?;
        let mut y = g.tape.add_row(xw, b)?;
        if let Some(l) = &self.lora {
            let a = g.param(&join(prefix, "lora_a"), &l.a);
            let bm = g.param(&join(prefix, "lora_b"), &l.b);
            let xa = g.tape.matmul(x, a)?;
            let xab = g.tape.matmul(xa, bm)?;
            let scaled = g.tape.scale(xab, l.scaling());
            y = g.tape.add(y, scaled)?;
        }
        Ok(y)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), &l.a);
            f(&join(prefix, "lora_b"), &l.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
        if let Some(l) = &mut self.lora {
            f(&join(prefix, "lora_a"), &mut l.a);
            f(&join(prefix, "lora_b"), &mut l.b);
        }
    }
}

/// Gain and bias rows of a layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: Matrix,
    pub bias: Matrix,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let gain = g.param(&join(prefix, "gain"), &self.gain);
        let bias = g.param(&join(prefix, "bias"), &self.bias);
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

impl Params for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "vigil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointHeader {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config_hash: config_hash.into(),
            meta: serde_json::Value::Null,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Writes a header line followed by one line per parameter matching `filter`.
pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    p: &dyn Params,
    prefix: &str,
    filter: &dyn Fn(&str) -> bool,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    let mut err = None;
    p.visit(prefix, &mut |name, m| {
        if err.is_some() || !filter(name) {
            return;
        }
        let entry = Entry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        };
        let res = serde_json::to_writer(&mut out, &entry)
            .map_err(Error::from)
            .and_then(|_| out.write_all(b"\n").map_err(Error::from));
        if let Err(e) = res {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    parse_header(&line)
}

fn parse_header(line: &str) -> Result<CheckpointHeader> {
    let header: CheckpointHeader = serde_json::from_str(line)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse(format!("not a checkpoint: format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Schema {
            what: "checkpoint".into(),
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    Ok(header)
}

/// Overwrites the parameters named in the file; every stored entry must match
/// an existing parameter of the same shape.
pub fn load_checkpoint(path: &Path, p: &mut dyn Params, prefix: &str) -> Result<CheckpointHeader> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = parse_header(&lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))??)?;
    let mut entries: HashMap<String, Entry> = HashMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Entry = serde_json::from_str(&line)?;
        entries.insert(e.name.clone(), e);
    }
    let mut mismatch = None;
    p.visit_mut(prefix, &mut |name, m| {
        if let Some(e) = entries.remove(name) {
            if (e.rows, e.cols) != m.shape() || e.data.len() != e.rows * e.cols {
                mismatch.get_or_insert_with(|| format!("{name}: stored {}x{}, expected {:?}", e.rows, e.cols, m.shape()));
            } else {
                m.data_mut().copy_from_slice(&e.data);
            }
        }
    });
    if let Some(msg) = mismatch {
        return Err(Error::Parse(format!("checkpoint shape mismatch: {msg}")));
    }
    if let Some(name) = entries.keys().min() {
        return Err(Error::Parse(format!("checkpoint entry {name} has no matching parameter")));
    }
    Ok(header)
}
