//! Text and visual prompts fused into per-class label features.
//!
//! Fine prompts (class descriptors or class names, optionally preceded by a
//! shared learnable context) and coarse prompts (class names) go through the
//! frozen text encoder. Instance features attend to the fine embeddings to
//! build one visual prompt per class, which is folded back into the fine
//! embedding before a small MLP and the coarse residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenEncoder, TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::temporal::{Activation, INIT_STD};
use crate::tensor::{ParamGroup, ParameterSet, Tape, Var};

pub const CONTEXT: &str = "prompt.context";
const MLP_W1: &str = "head.mlp.w1";
const MLP_B1: &str = "head.mlp.b1";
const MLP_W2: &str = "head.mlp.w2";
const MLP_B2: &str = "head.mlp.b2";

/// Text used for the fine prompt of each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Class,
    #[default]
    Descriptors,
}

/// How visual prompts enter the fine label features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualPromptMode {
    None,
    #[default]
    Add,
    /// Re-encode the fine prompt with the visual prompt as an extra leading
    /// token. Requires the token width to equal the feature width.
    Prepend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub source: PromptSource,
    pub learnable_context: bool,
    pub context_len: usize,
    pub visual_mode: VisualPromptMode,
    pub tau_a: f64,
    pub mlp_mult: usize,
    pub activation: Activation,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            source: PromptSource::Descriptors,
            learnable_context: true,
            context_len: 8,
            visual_mode: VisualPromptMode::Add,
            tau_a: 0.01,
            mlp_mult: 4,
            activation: Activation::Gelu,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0 && self.tau_a.is_finite()) {
            return Err(Error::Config(format!("tau_a must be positive, got {}", self.tau_a)));
        }
        if self.learnable_context && self.context_len == 0 {
            return Err(Error::Config("learnable context needs context_len >= 1".into()));
        }
        if self.mlp_mult == 0 {
            return Err(Error::Config("mlp_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Tokenized fine and coarse prompts for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub fine: Vec<TokenSequence>,
    pub coarse: Vec<TokenSequence>,
    pub config: PromptConfig,
}

impl PromptSet {
    pub fn new(class_names: &[String], descriptors: &[String], config: PromptConfig) -> Result<Self> {
        config.validate()?;
        if class_names.len() != descriptors.len() || class_names.is_empty() {
            return Err(Error::Config(format!(
                "{} class names but {} descriptors",
                class_names.len(),
                descriptors.len()
            )));
        }
        let tok = Tokenizer::default();
        let fine_text = match config.source {
            PromptSource::Class => class_names,
            PromptSource::Descriptors => descriptors,
        };
        Ok(Self {
            fine: fine_text.iter().map(|t| tok.tokenize(t)).collect::<Result<_>>()?,
            coarse: class_names.iter().map(|t| tok.tokenize(t)).collect::<Result<_>>()?,
            config,
        })
    }

    pub fn classes(&self) -> usize {
        self.coarse.len()
    }
}

/// Registers the shared context (when learnable) and the label MLP. The MLP's
/// second layer starts at zero so enhanced labels equal the coarse
/// embeddings at initialization.
pub fn register(
    params: &mut ParameterSet,
    config: &PromptConfig,
    token_dim: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    config.validate()?;
    if config.learnable_context {
        params.insert_trunc_normal(
            CONTEXT,
            ParamGroup::Prompt,
            &[config.context_len, token_dim],
            INIT_STD,
            rng,
        )?;
    }
    let hidden = config.mlp_mult * dim;
    params.insert_trunc_normal(MLP_W1, ParamGroup::Head, &[dim, hidden], INIT_STD, rng)?;
    params.insert_zeros(MLP_B1, ParamGroup::Head, &[hidden])?;
    params.insert_zeros(MLP_W2, ParamGroup::Head, &[hidden, dim])?;
    params.insert_zeros(MLP_B2, ParamGroup::Head, &[dim])?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct LabelEmbeddings {
    pub x_fp: Var,
    pub x_cp: Var,
}

fn context(tape: &mut Tape, params: &ParameterSet, prompts: &PromptSet) -> Result<Option<Var>> {
    if prompts.config.learnable_context {
        Ok(Some(tape.param(params, CONTEXT)?))
    } else {
        Ok(None)
    }
}

fn encode_all(
    tape: &mut Tape,
    enc: &FrozenEncoder,
    tokens: &[TokenSequence],
    context: Option<Var>,
    prepended: Option<&[Var]>,
) -> Result<Var> {
    let rows = tokens
        .iter()
        .enumerate()
        .map(|(k, t)| enc.encode_text(tape, t, context, prepended.map(|p| p[k])))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Fine and coarse text embeddings, `C×d` each. Only the fine side sees the
/// learnable context.
pub fn embed_labels(
    tape: &mut Tape,
    params: &ParameterSet,
    prompts: &PromptSet,
    enc: &FrozenEncoder,
) -> Result<LabelEmbeddings> {
    let ctx = context(tape, params, prompts)?;
    let x_fp = encode_all(tape, enc, &prompts.fine, ctx, None)?;
    let x_cp = encode_all(tape, enc, &prompts.coarse, None, None)?;
    Ok(LabelEmbeddings { x_fp, x_cp })
}

/// `A[t,k] = cos(x_instance[t], x_fp[k]) / tau_a`, shape `T×C`.
pub fn alignment_scores(tape: &mut Tape, x_instance: Var, x_fp: Var, tau_a: f64) -> Result<Var> {
    if !(tau_a > 0.0) {
        return Err(Error::Config(format!("tau_a must be positive, got {tau_a}")));
    }
    let sims = tape.cosine_rows(x_instance, x_fp)?;
    Ok(tape.scale(sims, tau_a.recip()))
}

/// Per class, the softmax-over-frames weighted sum of instance features:
/// `softmax_t(A)ᵀ · x_instance`, shape `C×d`.
pub fn visual_prompt(tape: &mut Tape, alignment: Var, x_instance: Var) -> Result<Var> {
    let weights = tape.softmax(alignment, 0)?;
    let weights = tape.transpose(weights)?;
    tape.matmul(weights, x_instance)
}

#[derive(Debug, Clone, Copy)]
pub struct EnhancedLabels {
    pub labels: LabelEmbeddings,
    /// Absent when the visual prompt mode is `none`.
    pub alignment: Option<Var>,
    pub v_p: Option<Var>,
    pub x_hat: Var,
    pub x_tilde: Var,
}

/// `MLP(x) + residual` with the registered label MLP.
pub fn mlp_residual(
    tape: &mut Tape,
    params: &ParameterSet,
    activation: Activation,
    x: Var,
    residual: Var,
) -> Result<Var> {
    let (w1, b1) = (tape.param(params, MLP_W1)?, tape.param(params, MLP_B1)?);
    let (w2, b2) = (tape.param(params, MLP_W2)?, tape.param(params, MLP_B2)?);
    let h = tape.linear(x, w1, b1)?;
    let h = activation.apply(tape, h);
    let out = tape.linear(h, w2, b2)?;
    tape.add(out, residual)
}

/// Builds the enhanced label matrix `x_tilde` for one bag.
pub fn enhance_labels(
    tape: &mut Tape,
    params: &ParameterSet,
    prompts: &PromptSet,
    enc: &FrozenEncoder,
    x_instance: Var,
) -> Result<EnhancedLabels> {
    let cfg = prompts.config;
    let labels = embed_labels(tape, params, prompts, enc)?;
    let (alignment, v_p, x_hat) = match cfg.visual_mode {
        VisualPromptMode::None => (None, None, labels.x_fp),
        VisualPromptMode::Add => {
            let a = alignment_scores(tape, x_instance, labels.x_fp, cfg.tau_a)?;
            let v = visual_prompt(tape, a, x_instance)?;
            let x_hat = tape.add(labels.x_fp, v)?;
            (Some(a), Some(v), x_hat)
        }
        VisualPromptMode::Prepend => {
            let a = alignment_scores(tape, x_instance, labels.x_fp, cfg.tau_a)?;
            let v = visual_prompt(tape, a, x_instance)?;
            if enc.token_dim() != tape.value(v).cols() {
                return Err(Error::Config(format!(
                    "prepend mode needs token width {} to equal feature width {}",
                    enc.token_dim(),
                    tape.value(v).cols()
                )));
            }
            let d = enc.token_dim();
            let rows = (0..prompts.classes())
                .map(|k| {
                    let r = tape.slice_rows(v, k, 1)?;
                    tape.reshape(r, vec![d])
                })
                .collect::<Result<Vec<_>>>()?;
            let ctx = context(tape, params, prompts)?;
            let x_hat = encode_all(tape, enc, &prompts.fine, ctx, Some(&rows))?;
            (Some(a), Some(v), x_hat)
        }
    };
    let x_tilde = mlp_residual(tape, params, cfg.activation, x_hat, labels.x_cp)?;
    Ok(EnhancedLabels {
        labels,
        alignment,
        v_p,
        x_hat,
        x_tilde,
    })
}

/// Names of the label MLP tensors in `(w1, b1, w2, b2)` order.
pub fn mlp_param_names() -> [&'static str; 4] {
    [MLP_W1, MLP_B1, MLP_W2, MLP_B2]
}

#[cfg(test)]
mod tests;
