//! Spatio-temporal relation distillation: a small attention stack with a
//! residual output projection, trained so streaming per-pair tokens match an
//! offline teacher's global tokens.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockInit, KvCache, Layout, MhsaConfig, Stack};
use crate::autodiff::Var;
use crate::encoder::{encode_video_teacher, FrameSequence, Teacher, TokenBlock, VisionEncoder};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{join, Graph, Init, Linear, Params};
use crate::rng::SeededRng;
use crate::tensor::{self, Matrix};

pub const PREFIX: &str = "strd";

/// Name filter selecting only the output projection.
pub fn is_output_layer(name: &str) -> bool {
    name.starts_with("strd.out.")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrdInit {
    /// Residual branches and output projection zero: exact identity.
    Identity,
    /// Standard random weights everywhere.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrdMode {
    /// Causal attention over the whole sequence at once.
    Offline,
    /// Block-by-block through a bounded cache.
    Streaming { max_len: usize, block_len: usize },
}

/// `out = h + h·W_out + b_out` with `h` the attention stack output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strd {
    pub stack: Stack,
    pub out: Linear,
}

impl Strd {
    pub fn new(cfg: MhsaConfig, depth: usize, init: StrdInit, rng: &mut SeededRng) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(Error::Config(format!("STRD depth {depth} outside 1..=3")));
        }
        let (block_init, out_init) = match init {
            StrdInit::Identity => (BlockInit::ZeroResidual, Init::Zero),
            StrdInit::Random => (BlockInit::Standard, Init::Scaled),
        };
        Ok(Self {
            stack: Stack::new(cfg, depth, block_init, rng)?,
            out: Linear::new(cfg.d_model, cfg.d_model, out_init, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.stack.cfg.d_model
    }

    /// Stack output under `mask`.
    pub fn hidden(&self, g: &mut Graph, x: Var, mask: &tensor::Mask) -> Result<Var> {
        self.stack.forward(g, &join(PREFIX, "stack"), x, mask)
    }

    /// Residual output projection applied to stack output `h`.
    pub fn head(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let o = self.out.forward(g, &join(PREFIX, "out"), h)?;
        g.tape.add(h, o)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &tensor::Mask) -> Result<Var> {
        let h = self.hidden(g, x, mask)?;
        self.head(g, h)
    }

    pub fn new_cache(&self, max_len: usize) -> KvCache {
        KvCache::new(&self.stack, max_len)
    }

    /// Streams one block of tokens through `cache`.
    pub fn forward_block(&self, cache: &mut KvCache, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let h = self.stack.forward_stream(&mut g, &join(PREFIX, "stack"), cache, xv)?;
        let y = self.head(&mut g, h)?;
        Ok(g.value(y).clone())
    }
}

impl Params for Strd {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.stack.visit(&join(prefix, "stack"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.stack.visit_mut(&join(prefix, "stack"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Mask reproducing `mode` on `rows` tokens.
pub fn mode_mask(mode: StrdMode, rows: usize) -> tensor::Mask {
    match mode {
        StrdMode::Offline => tensor::Mask::causal(rows),
        StrdMode::Streaming { max_len, block_len } => {
            let mut layout = Layout::blocks(rows / block_len.max(1), block_len);
            let rest = rows - layout.len();
            if rest > 0 {
                layout.segments.push(crate::attention::Segment::Main(rest));
            }
            layout.mask(max_len)
        }
    }
}

/// Rows in `(pair, patch)` order; pair indices must strictly increase.
pub fn strd_concat(blocks: &[TokenBlock]) -> Result<Matrix> {
    for w in blocks.windows(2) {
        if w[1].pair_index <= w[0].pair_index {
            return Err(Error::Ordering(format!(
                "pair index {} follows {}",
                w[1].pair_index, w[0].pair_index
            )));
        }
    }
    let refs: Vec<&Matrix> = blocks.iter().map(|b| &b.tokens).collect();
    if refs.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::concat_rows(&refs)
}

/// Inverse of [`strd_concat`] for blocks of `block_len` rows.
pub fn strd_split(m: &Matrix, block_len: usize) -> Result<Vec<Matrix>> {
    if block_len == 0 || !m.rows().is_multiple_of(block_len) {
        return Err(Error::Shape {
            op: "strd_split",
            left: m.shape(),
            right: (block_len, m.cols()),
        });
    }
    (0..m.rows() / block_len)
        .map(|i| m.slice_rows(i * block_len, block_len))
        .collect()
}

pub fn strd_forward(strd: &Strd, v_images: &Matrix, mode: StrdMode) -> Result<Matrix> {
    if v_images.cols() != strd.d_model() {
        return Err(Error::Shape {
            op: "strd_forward",
            left: v_images.shape(),
            right: (v_images.rows(), strd.d_model()),
        });
    }
    if v_images.rows() == 0 {
        return Ok(v_images.clone());
    }
    match mode {
        StrdMode::Offline => {
            let mut g = Graph::inference();
            let x = g.input(v_images.clone());
            let y = strd.forward(&mut g, x, &mode_mask(mode, v_images.rows()))?;
            Ok(g.value(y).clone())
        }
        StrdMode::Streaming { max_len, block_len } => {
            let mut cache = strd.new_cache(max_len);
            let mut outs = Vec::new();
            let mut start = 0;
            while start < v_images.rows() {
                let n = block_len.max(1).min(v_images.rows() - start);
                outs.push(strd.forward_block(&mut cache, &v_images.slice_rows(start, n)?)?);
                start += n;
            }
            let refs: Vec<&Matrix> = outs.iter().collect();
            Matrix::concat_rows(&refs)
        }
    }
}

/// Teacher-matching loss; the teacher side is a constant.
pub fn distill_loss(v_video_hat: &Matrix, v_images_hat: &Matrix) -> Result<f64> {
    tensor::mse(v_video_hat, v_images_hat)
}

/// Student input tokens and teacher targets for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillExample {
    pub tokens: Matrix,
    pub teacher: Matrix,
}

impl DistillExample {
    pub fn from_frames(enc: &VisionEncoder, teacher: &Teacher, seq: &FrameSequence) -> Result<Self> {
        let blocks = enc.encode_pairs(seq)?;
        Ok(Self {
            tokens: strd_concat(&blocks)?,
            teacher: encode_video_teacher(enc, teacher, seq)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub mode: StrdMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mean student/teacher MSE of `strd` over `data` under `mode`.
pub fn evaluate_distill(strd: &Strd, data: &[DistillExample], mode: StrdMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for ex in data {
        let mut g = Graph::inference();
        let x = g.input(ex.tokens.clone());
        let y = strd.forward(&mut g, x, &mode_mask(mode, ex.tokens.rows()))?;
        total += distill_loss(&ex.teacher, g.value(y))?;
    }
    Ok(total / data.len() as f64)
}

fn all_strd(name: &str) -> bool {
    name.starts_with("strd.")
}

/// AdamW with cosine decay over shuffled mini-batches.
pub fn train_distill(strd: &mut Strd, data: &[DistillExample], cfg: DistillConfig, rng: &mut SeededRng) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(Error::Config("empty distillation set".into()));
    }
    let batch = cfg.batch.max(1);
    let per_epoch = data.len().div_ceil(batch);
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), per_epoch * cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve::default();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc: std::collections::BTreeMap<String, Matrix> = Default::default();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &data[i];
                let mut g = Graph::new(&all_strd);
                let x = g.input(ex.tokens.clone());
                let y = strd.forward(&mut g, x, &mode_mask(cfg.mode, ex.tokens.rows()))?;
                let t = g.input(ex.teacher.clone());
                let loss = g.tape.mse(y, t)?;
                let value = g.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        step: curve.steps,
                        loss: value,
                    });
                }
                batch_loss += value;
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
            opt.step(strd, PREFIX, &acc)?;
            curve.steps += 1;
            epoch_total += batch_loss;
        }
        curve.epoch_losses.push(epoch_total / data.len() as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::graph_check;

    fn strd(init: StrdInit, seed: u64) -> Strd {
        Strd::new(MhsaConfig::default(), 2, init, &mut SeededRng::new(seed)).unwrap()
    }

    fn block(i: usize, seed: u64) -> TokenBlock {
        TokenBlock {
            pair_index: i,
            tokens: Matrix::randn(4, 32, 1.0, &mut SeededRng::new(seed)),
            timestamp: i as f64,
        }
    }

    #[test]
    fn identity_init_passes_tokens_through() {
        let s = strd(StrdInit::Identity, 1);
        let x = Matrix::randn(12, 32, 1.0, &mut SeededRng::new(2));
        assert_eq!(strd_forward(&s, &x, StrdMode::Offline).unwrap(), x);
    }

    #[test]
    fn streaming_matches_offline_with_long_cache() {
        let s = strd(StrdInit::Random, 3);
        let x = Matrix::randn(32, 32, 1.0, &mut SeededRng::new(4));
        let off = strd_forward(&s, &x, StrdMode::Offline).unwrap();
        let on = strd_forward(
            &s,
            &x,
            StrdMode::Streaming {
                max_len: 64,
                block_len: 4,
            },
        )
        .unwrap();
        assert!(off.max_abs_diff(&on).unwrap() <= 1e-9);
    }

    #[test]
    fn one_pair_cache_forgets_older_blocks() {
        let s = strd(StrdInit::Random, 5);
        let mode = StrdMode::Streaming {
            max_len: 4,
            block_len: 4,
        };
        let x = Matrix::randn(24, 32, 1.0, &mut SeededRng::new(6));
        let base = strd_forward(&s, &x, mode).unwrap();
        let mut p = x.clone();
        for r in 0..12 {
            p.row_mut(r).iter_mut().for_each(|v| *v += 2.0);
        }
        let pert = strd_forward(&s, &p, mode).unwrap();
        // Blocks 0..3 perturbed; block 4 and 5 depend only on themselves.
        assert_eq!(pert.slice_rows(16, 8).unwrap(), base.slice_rows(16, 8).unwrap());
        assert_eq!(pert.slice_rows(12, 4).unwrap(), base.slice_rows(12, 4).unwrap());
    }

    #[test]
    fn concat_and_split_round_trip() {
        let blocks = vec![block(0, 1), block(1, 2)];
        let m = strd_concat(&blocks).unwrap();
        assert_eq!(m.rows(), 8);
        assert_eq!(m.slice_rows(0, 4).unwrap(), blocks[0].tokens);
        let parts = strd_split(&m, 4).unwrap();
        assert_eq!(parts[1], blocks[1].tokens);
        assert_eq!(strd_concat(&blocks[..1]).unwrap(), blocks[0].tokens);
    }

    #[test]
    fn out_of_order_blocks_are_rejected() {
        let blocks = vec![block(1, 1), block(1, 2)];
        assert!(matches!(strd_concat(&blocks), Err(Error::Ordering(_))));
        let blocks = vec![block(2, 1), block(1, 2)];
        assert!(matches!(strd_concat(&blocks), Err(Error::Ordering(_))));
    }

    #[test]
    fn distill_loss_fixtures() {
        let s = Matrix::randn(3, 4, 1.0, &mut SeededRng::new(7));
        assert_eq!(distill_loss(&s, &s).unwrap(), 0.0);
        let t = s.map(|v| v + 3.0);
        assert!((distill_loss(&t, &s).unwrap() - 9.0).abs() < 1e-12);
        let a = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.5, 1.0], vec![2.0, -3.0]]).unwrap();
        // (1 + 4 + 0 + 9) / 4
        assert!((distill_loss(&a, &b).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut s = strd(StrdInit::Identity, 8);
        let before = s.clone();
        let mut rng = SeededRng::new(9);
        let data = vec![DistillExample {
            tokens: Matrix::randn(8, 32, 1.0, &mut rng),
            teacher: Matrix::randn(8, 32, 1.0, &mut rng),
        }];
        let cfg = DistillConfig {
            epochs: 1,
            lr: 0.0,
            batch: 8,
            mode: StrdMode::Offline,
        };
        train_distill(&mut s, &data, cfg, &mut rng).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn non_finite_teacher_reports_divergence() {
        let mut s = strd(StrdInit::Identity, 8);
        let mut rng = SeededRng::new(9);
        let mut teacher = Matrix::randn(8, 32, 1.0, &mut rng);
        teacher.set(3, 5, f64::NAN);
        let data = vec![DistillExample {
            tokens: Matrix::randn(8, 32, 1.0, &mut rng),
            teacher,
        }];
        let cfg = DistillConfig {
            epochs: 1,
            lr: 1e-3,
            batch: 1,
            mode: StrdMode::Offline,
        };
        match train_distill(&mut s, &data, cfg, &mut rng) {
            Err(Error::Divergence { step: 0, loss }) => assert!(loss.is_nan()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identity_teacher_is_a_fixed_point() {
        let mut s = strd(StrdInit::Identity, 10);
        let mut rng = SeededRng::new(11);
        let data: Vec<DistillExample> = (0..4)
            .map(|_| {
                let t = Matrix::randn(8, 32, 1.0, &mut rng);
                DistillExample {
                    tokens: t.clone(),
                    teacher: t,
                }
            })
            .collect();
        let cfg = DistillConfig {
            epochs: 2,
            lr: 1e-3,
            batch: 2,
            mode: StrdMode::Offline,
        };
        let curve = train_distill(&mut s, &data, cfg, &mut rng).unwrap();
        assert!(curve.epoch_losses.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn distill_loss_gradient_matches_central_differences() {
        let mut s = strd(StrdInit::Random, 12);
        s.out.w = Matrix::randn(32, 32, 0.2, &mut SeededRng::new(13));
        let x = Matrix::randn(8, 32, 1.0, &mut SeededRng::new(14));
        let teacher = Matrix::randn(8, 32, 1.0, &mut SeededRng::new(15));
        let mask = mode_mask(StrdMode::Offline, 8);
        let loss = |g: &mut Graph, input: Var| {
            let y = s.forward(g, input, &mask)?;
            let t = g.input(teacher.clone());
            g.tape.mse(y, t)
        };
        let err = graph_check(loss, &x, 1e-5, None).unwrap();
        assert!(err <= 1e-4, "input: {err}");

        let fixed = x.clone();
        let wrt_out = |g: &mut Graph, _: Var| {
            let input = g.input(fixed.clone());
            let y = s.forward(g, input, &mask)?;
            let t = g.input(teacher.clone());
            g.tape.mse(y, t)
        };
        let err = graph_check(wrt_out, &s.out.w, 1e-5, Some("strd.out.w")).unwrap();
        assert!(err <= 1e-4, "output layer: {err}");
    }
}
