//! Frozen toy vision encoder: frame pairs to patch tokens, plus the offline
//! teacher that encodes a whole sequence at once.

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_full, positional_encode, BlockInit, MhsaConfig, Stack};
use crate::error::{Error, Result};
use crate::params::{fingerprint, Init, Linear, Params};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// Frames of `height × width × channels` values stored channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
    pub frames: Vec<Vec<f64>>,
}

impl FrameSequence {
    pub fn new(height: usize, width: usize, channels: usize, fps: f64) -> Self {
        Self {
            height,
            width,
            channels,
            fps,
            frames: Vec::new(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Repeats the last frame when the count is odd.
    pub fn padded(mut self) -> Self {
        if self.frames.len() % 2 == 1 {
            let last = self.frames.last().cloned().expect("odd length is non-zero");
            self.frames.push(last);
        }
        self
    }

    pub fn pair_count(&self) -> usize {
        self.frames.len().div_ceil(2)
    }

    /// Frames `(2i, 2i + 1)`, repeating the last frame for a trailing single.
    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        let a = &self.frames[2 * i];
        let b = self.frames.get(2 * i + 1).unwrap_or(a);
        (a, b)
    }
}

/// Patch tokens of one frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    pub pair_index: usize,
    pub tokens: Matrix,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 4,
            patch: 8,
            d_model: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.channels == 0 || self.d_model == 0 {
            return Err(Error::Config("encoder dimensions must be at least 1".into()));
        }
        Ok(())
    }

    /// Patches per frame pair.
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        2 * self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub proj: Linear,
    frozen: bool,
}

impl VisionEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut proj = Linear::new(cfg.patch_dim(), cfg.d_model, Init::Scaled, rng);
        proj.b = Matrix::randn(1, cfg.d_model, 0.1, rng);
        Ok(Self {
            cfg,
            proj,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self, "encoder")
    }

    fn check_frame(&self, f: &[f64]) -> Result<()> {
        let want = self.cfg.height * self.cfg.width * self.cfg.channels;
        if f.len() != want {
            return Err(Error::Shape {
                op: "encode_frame_pair",
                left: (f.len(), 1),
                right: (want, 1),
            });
        }
        Ok(())
    }

    /// Fuses the two frames per patch, projects to `d_model` and adds
    /// positions `pair_index · N + patch`.
    pub fn encode_frame_pair(&self, f_prev: &[f64], f_curr: &[f64], pair_index: usize, fps: f64) -> Result<TokenBlock> {
        self.check_frame(f_prev)?;
        self.check_frame(f_curr)?;
        let EncoderConfig {
            width,
            channels,
            patch,
            ..
        } = self.cfg;
        let n = self.cfg.patches();
        let per_row = width / patch;
        let half = patch * patch * channels;
        let mut patches = Matrix::zeros(n, self.cfg.patch_dim());
        for pi in 0..n {
            let (py, px) = (pi / per_row, pi % per_row);
            let row = patches.row_mut(pi);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let base = ((py * patch + y) * width + px * patch + x) * channels;
                    for c in 0..channels {
                        row[k] = f_prev[base + c];
                        row[half + k] = f_curr[base + c];
                        k += 1;
                    }
                }
            }
        }
        let tokens = patches.matmul(&self.proj.w)?.add_row(&self.proj.b)?;
        Ok(TokenBlock {
            pair_index,
            tokens: positional_encode(&tokens, pair_index * n),
            timestamp: 2.0 * pair_index as f64 / fps,
        })
    }

    /// One block per frame pair, padding an odd-length sequence.
    pub fn encode_pairs(&self, seq: &FrameSequence) -> Result<Vec<TokenBlock>> {
        (0..seq.pair_count())
            .map(|i| {
                let (a, b) = seq.pair(i);
                self.encode_frame_pair(a, b, i, seq.fps)
            })
            .collect()
    }
}

impl Params for VisionEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.proj.visit(&crate::params::join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        assert!(!self.frozen, "frozen encoder weights are read-only");
        self.proj.visit_mut(&crate::params::join(prefix, "proj"), f);
    }
}

/// Offline encoder over the full token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub stack: Stack,
    pub causal: bool,
}

impl Teacher {
    pub fn new(cfg: MhsaConfig, depth: usize, causal: bool, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            stack: Stack::new(cfg, depth, BlockInit::Standard, rng)?,
            causal,
        })
    }
}

/// `M × d_model` global tokens with `M = (T/2) · N`.
pub fn encode_video_teacher(enc: &VisionEncoder, teacher: &Teacher, seq: &FrameSequence) -> Result<Matrix> {
    let blocks = enc.encode_pairs(seq)?;
    let m = blocks.len() * enc.cfg.patches();
    let refs: Vec<&Matrix> = blocks.iter().map(|b| &b.tokens).collect();
    let tokens = if refs.is_empty() {
        Matrix::zeros(0, enc.cfg.d_model)
    } else {
        Matrix::concat_rows(&refs)?
    };
    let out = mhsa_full(&teacher.stack, &tokens, teacher.causal)?;
    assert_eq!(out.rows(), m, "token count law");
    Ok(out)
}
