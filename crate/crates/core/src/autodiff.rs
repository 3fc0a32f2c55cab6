//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive in forward order together with whatever
//! activations its backward rule needs. [`Tape::backward`] walks the record in
//! exact reverse order and accumulates gradients additively. Nodes that do not
//! depend on a gradient-carrying leaf are skipped during the backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Mask, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One supervised entry of a masked negative log-likelihood: row `row` of the
/// logits should predict class `target`, weighted by `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTerm {
    pub row: usize,
    pub target: usize,
    pub weight: f64,
}

/// Probability floor applied by [`Tape::nll`] when flooring is requested.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Nll {
        logits: Var,
        terms: Vec<NllTerm>,
        normalizer: f64,
        probs: Matrix,
        floored: Vec<bool>,
    },
    Mse(Var, Var),
    WeightedSum {
        x: Var,
        weights: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Forward record. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    floored: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    names: Vec<Option<String>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every named leaf that carried a gradient.
    pub fn named(&self) -> BTreeMap<String, Matrix> {
        self.names
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| Some((n.clone()?, g.clone()?)))
            .collect()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_plain(x: &Matrix) -> Matrix {
    x.map(gelu)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped to [`PROB_FLOOR`] so far.
    pub fn floored_count(&self) -> usize {
        self.floored
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Anonymous leaf that receives a gradient.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Named parameter leaf; gradients are reported under `name` when trainable.
    pub fn param(&mut self, name: &str, m: &Matrix, trainable: bool) -> Var {
        let v = self.push(m.clone(), Op::Leaf, trainable);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Broadcast-adds a `1 × cols` row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(row))?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = gelu_plain(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(x), mask)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// `gain` and `bias` are `1 × cols` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape(),
                right: g.shape(),
            });
        }
        let mut xhat = Matrix::zeros(xv.rows(), xv.cols());
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (mean, is) = tensor::row_moments(xv.row(r), eps);
            inv_std.push(is);
            for c in 0..xv.cols() {
                let h = (xv.get(r, c) - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|v| self.ng(*v));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|v| self.ng(*v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Output row `i` is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: xv.shape(),
                right: (bad, 0),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let value = Matrix::new(idx.len(), xv.cols(), data)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.value(logits).shape(),
                right: (targets.len(), 1),
            });
        }
        let terms: Vec<NllTerm> = targets
            .iter()
            .enumerate()
            .map(|(row, &target)| NllTerm {
                row,
                target,
                weight: 1.0,
            })
            .collect();
        self.nll(logits, &terms, rows as f64, false)
    }

    /// `Σ_k weight_k · (−log softmax(logits)[row_k, target_k]) / normalizer`.
    ///
    /// With `floor`, probabilities below [`PROB_FLOOR`] are clamped (their
    /// gradient is zero) and counted in [`Tape::floored_count`].
    pub fn nll(
        &mut self,
        logits: Var,
        terms: &[NllTerm],
        normalizer: f64,
        floor: bool,
    ) -> Result<Var> {
        let lv = self.value(logits);
        for t in terms {
            if t.row >= lv.rows() || t.target >= lv.cols() {
                return Err(Error::Index {
                    row: t.row,
                    index: t.target,
                    classes: lv.cols(),
                });
            }
        }
        let probs = tensor::softmax_rows(lv, None)?;
        let mut total = 0.0;
        let mut floored = Vec::with_capacity(terms.len());
        let mut n_floored = 0;
        for t in terms {
            let row = lv.row(t.row);
            let mut logp = row[t.target] - tensor::log_sum_exp(row);
            let clamp = floor && logp < PROB_FLOOR.ln();
            if clamp {
                logp = PROB_FLOOR.ln();
                n_floored += 1;
            }
            floored.push(clamp);
            total += t.weight * -logp;
        }
        let value = if normalizer > 0.0 {
            total / normalizer
        } else {
            0.0
        };
        self.floored += n_floored;
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::Nll {
                logits,
                terms: terms.to_vec(),
                normalizer,
                probs,
                floored,
            },
            ng,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mse(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Matrix::filled(1, 1, value), Op::Mse(a, b), ng))
    }

    /// `Σ weights ⊙ x`; reduces any output to a scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Matrix) -> Result<Var> {
        let value = self.value(x).hadamard(weights)?.sum();
        let ng = self.ng(x);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            ng,
        ))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(output).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Grads {
            grads,
            names: self.nodes.iter().map(|n| n.name.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, m: Matrix| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot => {
                    *slot = Some(m);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.hadamard(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    acc(*b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone())?;
                if self.ng(*row) {
                    acc(*row, g.sum_rows())?;
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, g.zip_with(xv, "gelu_grad", |gi, xi| gi * gelu_grad(xi))?)?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = tensor::dot(y.row(r), g.row(r));
                    for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yi * (gi - inner);
                    }
                }
                acc(*x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let (rows, cols) = xhat.shape();
                if self.ng(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for (r, &istd) in inv_std.iter().enumerate().take(rows) {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gv).map(|(gi, gain)| gi * gain).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = tensor::dot(&dxhat, xhat.row(r));
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = istd / n * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                        }
                    }
                    acc(*x, gx)?;
                }
                if self.ng(*gain) {
                    acc(*gain, g.hadamard(xhat)?.sum_rows())?;
                }
                if self.ng(*bias) {
                    acc(*bias, g.sum_rows())?;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.ng(*p) {
                        acc(*p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.ng(*p) {
                        acc(*p, g.slice_rows(offset, h)?)?;
                    }
                    offset += h;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (o, gi) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += gi;
                    }
                }
                acc(*x, gx)?;
            }
            Op::Nll {
                logits,
                terms,
                normalizer,
                probs,
                floored,
            } => {
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                if *normalizer > 0.0 {
                    let s = g.data()[0] / normalizer;
                    for (t, &clamped) in terms.iter().zip(floored) {
                        if clamped {
                            continue;
                        }
                        let k = s * t.weight;
                        for (o, p) in gl.row_mut(t.row).iter_mut().zip(probs.row(t.row)) {
                            *o += k * p;
                        }
                        let cell = gl.get(t.row, t.target) - k;
                        gl.set(t.row, t.target, cell);
                    }
                }
                acc(*logits, gl)?;
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.data()[0] / av.len() as f64;
                let ga = av.zip_with(bv, "mse_grad", |x, y| k * (x - y))?;
                if self.ng(*b) {
                    acc(*b, ga.scale(-1.0))?;
                }
                acc(*a, ga)?;
            }
            Op::WeightedSum { x, weights } => acc(*x, weights.scale(g.data()[0]))?,
        }
        Ok(())
    }
}

/// Largest relative gap between the tape gradient of a scalar-valued `op` at
/// `point` and central differences with the given `step`:
/// `max_k |analytic_k − numeric_k| / (|analytic_k| + 1e-8)`.
pub fn finite_diff_check<F>(op: F, point: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = op(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(point.rows(), point.cols()));
    if !analytic.is_finite() {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }

    let eval = |m: Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(m);
        let out = op(&mut t, v)?;
        Ok(t.scalar(out))
    };

    let mut worst: f64 = 0.0;
    for k in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[k] += step;
        let mut minus = point.clone();
        minus.data_mut()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite numeric gradient at coordinate {k}"
            )));
        }
        let a = analytic.data()[k];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_head(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::randn(rows, cols, 1.0, &mut SeededRng::new(seed))
    }

    #[test]
    fn mse_gradient_matches_central_differences() {
        let mut rng = SeededRng::new(1);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let zero = t.constant(Matrix::zeros(3, 4));
                t.mse(v, zero)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut rng = SeededRng::new(2);
        let logits = Matrix::randn(5, 6, 1.5, &mut rng);
        let err = finite_diff_check(|t, v| t.cross_entropy(v, &[0, 5, 2, 2, 3]), &logits, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn linear_op_is_exact() {
        let x = random_head(3, 3, 4);
        let w = random_head(3, 3, 5);
        let err = finite_diff_check(|t, v| t.weighted_sum(v, &w), &x, 1e-4).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Matrix::zeros(1, 1);
        let res = finite_diff_check(|t, v| t.mse(v, v), &x, 1e-2);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // y = sum(x ⊙ x) reuses x twice: dy/dx = 2x.
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[1.0, -2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let y = t.weighted_sum(sq, &Matrix::filled(1, 3, 1.0)).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::identity(2));
        let b = t.param("b", &Matrix::filled(2, 2, 0.5), true);
        let c = t.param("c", &Matrix::filled(2, 2, 0.5), false);
        let ab = t.matmul(a, b).unwrap();
        let abc = t.matmul(ab, c).unwrap();
        let y = t.weighted_sum(abc, &Matrix::filled(2, 2, 1.0)).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(c).is_none());
        let named = g.named();
        assert_eq!(named.keys().collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn floored_probabilities_are_counted() {
        let mut t = Tape::new();
        let logits = t.leaf(Matrix::row_vector(&[0.0, -100.0]));
        let term = NllTerm {
            row: 0,
            target: 1,
            weight: 1.0,
        };
        let loss = t.nll(logits, &[term], 1.0, true).unwrap();
        assert!((t.scalar(loss) + PROB_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(t.floored_count(), 1);
        let g = t.backward(loss).unwrap();
        assert!(g.get(logits).unwrap().data().iter().all(|v| *v == 0.0));
    }
}
