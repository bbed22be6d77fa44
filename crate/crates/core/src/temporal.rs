//! Multi-grained temporal network.
//!
//! The fine branch runs a shallow transformer over overlapping fixed-width
//! windows and scatter-averages the per-window outputs back onto frames. The
//! coarse branch runs over the whole sequence. A shared fully-connected map
//! fuses the two per frame into instance features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParameterSet, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    pub window: usize,
    pub stride: usize,
    #[serde(default = "default_true")]
    pub cover_tail: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window: 4,
            stride: 1,
            cover_tail: true,
        }
    }
}

impl SegmentationConfig {
    pub fn overlap(&self) -> usize {
        self.window.saturating_sub(self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "segmentation needs 1 <= stride <= window (got stride {}, window {})",
                self.stride, self.window
            )));
        }
        Ok(())
    }

    /// Window start indices for a bag of `frames` frames.
    pub fn starts(&self, frames: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if self.window > frames {
            return Err(Error::WindowTooLarge {
                window: self.window,
                frames,
            });
        }
        let count = (frames - self.window) / self.stride + 1;
        let mut starts: Vec<usize> = (0..count).map(|i| i * self.stride).collect();
        let last_covered = starts[count - 1] + self.window - 1;
        if self.cover_tail && last_covered < frames - 1 {
            starts.push(frames - self.window);
        }
        Ok(starts)
    }
}

/// Splits `T×d` features into `w×d` windows, paired with their start frame.
pub fn segment(features: &Tensor, cfg: &SegmentationConfig) -> Result<Vec<(usize, Tensor)>> {
    let starts = cfg.starts(features.rows())?;
    starts
        .into_iter()
        .map(|s| {
            let rows: Vec<usize> = (s..s + cfg.window).collect();
            Ok((s, features.select_rows(&rows)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub fine_depth: usize,
    pub coarse_depth: usize,
    pub max_frames: usize,
    pub segmentation: SegmentationConfig,
    pub activation: Activation,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            ffn_mult: 4,
            fine_depth: 1,
            coarse_depth: 1,
            max_frames: 64,
            segmentation: SegmentationConfig::default(),
            activation: Activation::Gelu,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 || self.max_frames == 0 {
            return Err(Error::Config("ffn_mult and max_frames must be positive".into()));
        }
        self.segmentation.validate()
    }
}

const FINE: &str = "temporal.fine";
const COARSE: &str = "temporal.coarse";
const FUSE_W: &str = "temporal.fuse.w";
const FUSE_B: &str = "temporal.fuse.b";

fn layer_prefix(branch: &str, i: usize) -> String {
    format!("{branch}.{i}")
}

/// Registers one pre-norm encoder layer. Output projections start at zero so
/// the layer is the identity at initialization.
pub fn register_encoder_layer(
    params: &mut ParameterSet,
    prefix: &str,
    dim: usize,
    ffn_mult: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let g = ParamGroup::Temporal;
    let hidden = dim * ffn_mult;
    params.insert_full(&format!("{prefix}.ln1.gain"), g, &[dim], 1.0)?;
    params.insert_zeros(&format!("{prefix}.ln1.bias"), g, &[dim])?;
    for proj in ["q", "k", "v"] {
        params.insert_trunc_normal(&format!("{prefix}.attn.w{proj}"), g, &[dim, dim], INIT_STD, rng)?;
        params.insert_zeros(&format!("{prefix}.attn.b{proj}"), g, &[dim])?;
    }
    params.insert_zeros(&format!("{prefix}.attn.wo"), g, &[dim, dim])?;
    params.insert_zeros(&format!("{prefix}.attn.bo"), g, &[dim])?;
    params.insert_full(&format!("{prefix}.ln2.gain"), g, &[dim], 1.0)?;
    params.insert_zeros(&format!("{prefix}.ln2.bias"), g, &[dim])?;
    params.insert_trunc_normal(&format!("{prefix}.ffn.w1"), g, &[dim, hidden], INIT_STD, rng)?;
    params.insert_zeros(&format!("{prefix}.ffn.b1"), g, &[hidden])?;
    params.insert_zeros(&format!("{prefix}.ffn.w2"), g, &[hidden, dim])?;
    params.insert_zeros(&format!("{prefix}.ffn.b2"), g, &[dim])?;
    Ok(())
}

pub struct LayerOutput {
    pub out: Var,
    /// One `L×L` row-stochastic map per head.
    pub attention: Vec<Var>,
}

fn linear(tape: &mut Tape, params: &ParameterSet, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = tape.param(params, w)?;
    let b = tape.param(params, b)?;
    tape.linear(x, w, b)
}

/// `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
pub fn encoder_layer(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    heads: usize,
    activation: Activation,
) -> Result<LayerOutput> {
    let dim = tape.value(x).cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
    }
    let head_dim = dim / heads;
    let p = |name: &str| format!("{prefix}.{name}");

    let g1 = tape.param(params, &p("ln1.gain"))?;
    let b1 = tape.param(params, &p("ln1.bias"))?;
    let h = tape.layer_norm(x, g1, b1)?;
    let q = linear(tape, params, h, &p("attn.wq"), &p("attn.bq"))?;
    let k = linear(tape, params, h, &p("attn.wk"), &p("attn.bk"))?;
    let v = linear(tape, params, h, &p("attn.wv"), &p("attn.bv"))?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = tape.slice_cols(q, i * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, i * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, i * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let att = tape.softmax(scores, 1)?;
        head_outs.push(tape.matmul(att, vh)?);
        attention.push(att);
    }
    let merged = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    let attn_out = linear(tape, params, merged, &p("attn.wo"), &p("attn.bo"))?;
    let x = tape.add(x, attn_out)?;

    let g2 = tape.param(params, &p("ln2.gain"))?;
    let b2 = tape.param(params, &p("ln2.bias"))?;
    let h = tape.layer_norm(x, g2, b2)?;
    let h = linear(tape, params, h, &p("ffn.w1"), &p("ffn.b1"))?;
    let h = activation.apply(tape, h);
    let h = linear(tape, params, h, &p("ffn.w2"), &p("ffn.b2"))?;
    let out = tape.add(x, h)?;
    Ok(LayerOutput { out, attention })
}

fn run_stack(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TemporalConfig,
    branch: &str,
    depth: usize,
    mut x: Var,
) -> Result<Var> {
    for i in 0..depth {
        x = encoder_layer(tape, params, &layer_prefix(branch, i), x, cfg.heads, cfg.activation)?.out;
    }
    Ok(x)
}

/// Registers every learnable tensor of the temporal network.
pub fn register(params: &mut ParameterSet, cfg: &TemporalConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let g = ParamGroup::Temporal;
    params.insert_trunc_normal(&format!("{FINE}.pos"), g, &[cfg.segmentation.window, d], INIT_STD, rng)?;
    for i in 0..cfg.fine_depth {
        register_encoder_layer(params, &layer_prefix(FINE, i), d, cfg.ffn_mult, rng)?;
    }
    params.insert_trunc_normal(&format!("{COARSE}.pos"), g, &[cfg.max_frames, d], INIT_STD, rng)?;
    for i in 0..cfg.coarse_depth {
        register_encoder_layer(params, &layer_prefix(COARSE, i), d, cfg.ffn_mult, rng)?;
    }
    params.insert_trunc_normal(FUSE_W, g, &[2 * d, d], INIT_STD, rng)?;
    params.insert_zeros(FUSE_B, g, &[d])?;
    Ok(())
}

/// Fine branch: each window gets the per-position embedding added, runs
/// through the fine stack on its own, and frame outputs are averaged over
/// the windows covering them.
pub fn fine_forward(tape: &mut Tape, params: &ParameterSet, cfg: &TemporalConfig, features: Var) -> Result<Var> {
    let frames = tape.value(features).rows();
    let starts = cfg.segmentation.starts(frames)?;
    let w = cfg.segmentation.window;
    let pos = tape.param(params, &format!("{FINE}.pos"))?;
    let mut outs = Vec::with_capacity(starts.len());
    for &s in &starts {
        let window = tape.slice_rows(features, s, w)?;
        let window = tape.add(window, pos)?;
        outs.push(run_stack(tape, params, cfg, FINE, cfg.fine_depth, window)?);
    }
    tape.scatter_mean_rows(&outs, &starts, frames)
}

/// Coarse branch over the full sequence.
pub fn coarse_forward(tape: &mut Tape, params: &ParameterSet, cfg: &TemporalConfig, features: Var) -> Result<Var> {
    let frames = tape.value(features).rows();
    if frames > cfg.max_frames {
        return Err(Error::BagTooLong {
            frames,
            max: cfg.max_frames,
        });
    }
    let table = tape.param(params, &format!("{COARSE}.pos"))?;
    let pos = tape.slice_rows(table, 0, frames)?;
    let x = tape.add(features, pos)?;
    run_stack(tape, params, cfg, COARSE, cfg.coarse_depth, x)
}

/// `[x_fine, x_coarse] · W + b`, per frame.
pub fn fuse(tape: &mut Tape, params: &ParameterSet, x_fine: Var, x_coarse: Var) -> Result<Var> {
    if tape.shape(x_fine) != tape.shape(x_coarse) {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            left: tape.shape(x_fine).to_vec(),
            right: tape.shape(x_coarse).to_vec(),
        });
    }
    let both = tape.concat_cols(&[x_fine, x_coarse])?;
    linear(tape, params, both, FUSE_W, FUSE_B)
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceFeatures {
    pub x_fine: Var,
    pub x_coarse: Var,
    pub x_instance: Var,
}

pub fn forward(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TemporalConfig,
    features: Var,
) -> Result<InstanceFeatures> {
    let x_fine = fine_forward(tape, params, cfg, features)?;
    let x_coarse = coarse_forward(tape, params, cfg, features)?;
    let x_instance = fuse(tape, params, x_fine, x_coarse)?;
    Ok(InstanceFeatures {
        x_fine,
        x_coarse,
        x_instance,
    })
}

/// Names of the fusion weight and bias, for tests and ablations that pin them.
pub fn fuse_param_names() -> (&'static str, &'static str) {
    (FUSE_W, FUSE_B)
}
