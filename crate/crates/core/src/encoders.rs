//! Deterministic stand-ins for the frozen vision-language encoders.
//!
//! Both encoders share one architecture: embedding lookup, mean pool, a
//! frozen affine projection and L2 normalization. Weights are generated from
//! a seed and never enter a parameter set, so gradients can flow *through*
//! them to learnable prompt inputs without ever updating them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const VOCAB_SIZE: usize = 4096;
pub const MAX_TOKENS: usize = 77;
/// Pseudo patch tokens drawn per mock frame.
const PATCHES_PER_FRAME: usize = 16;
/// Expected norm of the frozen projection bias.
const BIAS_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Hashing word tokenizer: lowercase, split on anything that is not
/// alphanumeric, FNV-1a into a fixed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            max_tokens: MAX_TOKENS,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let lower = text.trim().to_lowercase();
        let ids: Vec<u32> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .take(self.max_tokens)
            .map(|w| (fnv1a(w.as_bytes()) % self.vocab_size as u64) as u32)
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(TokenSequence { ids })
    }
}

pub fn tokenize(text: &str) -> Result<TokenSequence> {
    Tokenizer::default().tokenize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    MockText,
    MockImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub seed: u64,
    pub token_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    table: Tensor,
    projection: Tensor,
    bias: Tensor,
}

impl FrozenEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.token_dim == 0 || spec.out_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let kind_salt = match spec.kind {
            EncoderKind::MockText => 0x7465_7874,
            EncoderKind::MockImage => 0x696d_6167,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ kind_salt);
        let std = (spec.token_dim as f64).recip().sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let table = Tensor::new(
            vec![VOCAB_SIZE, spec.token_dim],
            draw(&mut rng, VOCAB_SIZE * spec.token_dim),
        )?;
        let projection = Tensor::new(
            vec![spec.token_dim, spec.out_dim],
            draw(&mut rng, spec.token_dim * spec.out_dim),
        )?;
        let bias_normal = Normal::new(0.0, BIAS_SCALE / (spec.out_dim as f64).sqrt()).expect("positive std");
        let bias = Tensor::vector((0..spec.out_dim).map(|_| bias_normal.sample(&mut rng)).collect());
        Ok(Self {
            spec,
            table,
            projection,
            bias,
        })
    }

    pub fn text(seed: u64, token_dim: usize, out_dim: usize) -> Result<Self> {
        Self::new(EncoderSpec {
            kind: EncoderKind::MockText,
            seed,
            token_dim,
            out_dim,
        })
    }

    pub fn image(seed: u64, token_dim: usize, out_dim: usize) -> Result<Self> {
        Self::new(EncoderSpec {
            kind: EncoderKind::MockImage,
            seed,
            token_dim,
            out_dim,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    pub fn token_dim(&self) -> usize {
        self.spec.token_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    /// SHA-256 over the frozen weights.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in [&self.table, &self.projection, &self.bias] {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn embed(&self, ids: impl Iterator<Item = usize>) -> Result<Tensor> {
        let ids: Vec<usize> = ids.collect();
        self.table.select_rows(&ids)
    }

    /// Encodes a token sequence, optionally preceded by a prepended
    /// continuous token and learnable context rows: `[prepended, context,
    /// tokens]` are mean-pooled, projected with the frozen affine map and
    /// L2-normalized. Returns a length-`out_dim` vector on the tape.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        tokens: &TokenSequence,
        context: Option<Var>,
        prepended: Option<Var>,
    ) -> Result<Var> {
        if self.spec.kind != EncoderKind::MockText {
            return Err(Error::Config("encode_text needs a mock_text encoder".into()));
        }
        let d_tok = self.spec.token_dim;
        let mut parts = Vec::with_capacity(3);
        if let Some(p) = prepended {
            let pv = tape.value(p);
            if pv.len() != d_tok {
                return Err(Error::ShapeMismatch {
                    op: "encode_text (prepended)",
                    left: vec![d_tok],
                    right: pv.shape().to_vec(),
                });
            }
            parts.push(p);
        }
        if let Some(c) = context {
            if tape.value(c).rank() != 2 || tape.value(c).cols() != d_tok {
                return Err(Error::ShapeMismatch {
                    op: "encode_text (context)",
                    left: vec![0, d_tok],
                    right: tape.shape(c).to_vec(),
                });
            }
            parts.push(c);
        }
        let embedded = self.embed(tokens.ids().iter().map(|&i| i as usize))?;
        parts.push(tape.constant(embedded));
        let seq = tape.concat_rows(&parts)?;
        self.project(tape, seq)
    }

    fn project(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let pooled = tape.mean_rows(seq)?;
        let pooled = tape.reshape(pooled, vec![1, self.spec.token_dim])?;
        let proj = tape.constant(self.projection.clone());
        let out = tape.matmul(pooled, proj)?;
        let bias = tape.constant(self.bias.clone());
        let out = tape.add_row(out, bias)?;
        let out = tape.l2_normalize_rows(out)?;
        tape.reshape(out, vec![self.spec.out_dim])
    }

    /// Frozen text embedding without any learnable inputs.
    pub fn embed_text(&self, tokens: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.encode_text(&mut tape, tokens, None, None)?;
        Ok(tape.value(v).clone())
    }

    /// Deterministic unit-norm frame features for `frames` mock frames.
    /// Each frame pools a pseudo-random set of patch embeddings drawn from
    /// `pixel_seed`.
    pub fn encode_frames_mock(&self, pixel_seed: u64, frames: usize) -> Result<Tensor> {
        if frames == 0 {
            return Err(Error::Config("at least one frame is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed);
        let mut rows = Vec::with_capacity(frames);
        for _ in 0..frames {
            let ids: Vec<usize> = (0..PATCHES_PER_FRAME)
                .map(|_| rng.random_range(0..VOCAB_SIZE))
                .collect();
            let mut tape = Tape::new();
            let seq = tape.constant(self.embed(ids.into_iter())?);
            let v = self.project(&mut tape, seq)?;
            rows.push(tape.value(v).data().to_vec());
        }
        Tensor::from_rows(&rows)
    }
}
