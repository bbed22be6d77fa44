//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! with the backward rules it is checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::prompt::{PromptConfig, VisualPromptMode};
use crate::temporal::{self, SegmentationConfig};
use crate::tensor::{ParameterSet, Tape, Tensor, Var};

/// Step used for central differences in f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error denominators are floored at this fraction of the largest
/// gradient norm in the check. Some gradients are structurally zero (a key
/// bias cancels inside the attention softmax) and would otherwise compare
/// finite-difference noise against nothing.
pub const REL_FLOOR_FRACTION: f64 = 1e-6;
const ABS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor).
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.rel_err < tol)
    }
}

/// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor).
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor).max(ABS_FLOOR)
}

/// Compares backward gradients of `loss_fn` against central differences for
/// every parameter in `params`.
pub fn check_params<F>(params: &ParameterSet, step: f64, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.zero_grad();
    analytic.accumulate(&tape, &grads, 1.0)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, p)?;
        Ok(t.value(l).item())
    };

    let mut work = params.clone();
    let mut pairs = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.value(&name)?.clone();
        let mut numeric = vec![0.0; base.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus.data_mut()[i] += step;
            work.set_value(&name, plus)?;
            let f_plus = eval(&work)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= step;
            work.set_value(&name, minus)?;
            let f_minus = eval(&work)?;
            *slot = (f_plus - f_minus) / (2.0 * step);
        }
        work.set_value(&name, base)?;
        let a = analytic
            .grad(&name)?
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numeric.len()]);
        pairs.push((name, a, numeric));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = pairs.iter().map(|(_, a, n)| norm(a).max(norm(n))).fold(0.0, f64::max);
    let checks = pairs
        .into_iter()
        .map(|(name, a, numeric)| ParamCheck {
            rel_err: relative_error(&a, &numeric, REL_FLOOR_FRACTION * scale),
            analytic_norm: norm(&a),
            numeric_norm: norm(&numeric),
            entries: numeric.len(),
            name,
        })
        .collect();
    Ok(GradReport {
        loss: loss_value,
        params: checks,
    })
}

/// Shape of the canonical small problems checked by [`full_pipeline`] and
/// [`temporal_only`]: T=6, d=8, C=3, window 3, stride 1, one layer per
/// branch.
pub const CHECK_FRAMES: usize = 6;
pub const CHECK_DIM: usize = 8;
pub const CHECK_CLASSES: usize = 3;

fn check_model(mode: VisualPromptMode) -> Result<Model> {
    let config = ModelConfig {
        segmentation: SegmentationConfig {
            window: 3,
            stride: 1,
            cover_tail: true,
        },
        prompt: PromptConfig {
            visual_mode: mode,
            learnable_context: true,
            ..PromptConfig::default()
        },
        ..ModelConfig::default()
    };
    let names: Vec<String> = (0..CHECK_CLASSES).map(|k| format!("class {k}")).collect();
    let descriptors: Vec<String> = (0..CHECK_CLASSES).map(|k| format!("facial cue {k}")).collect();
    Model::new(config, CHECK_DIM, &names, &descriptors, 0)
}

fn perturbed(params: &ParameterSet, rng: &mut ChaCha8Rng, std: f64) -> Result<ParameterSet> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut out = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let mut v = params.value(&name)?.clone();
        v.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
        out.set_value(&name, v)?;
    }
    Ok(out)
}

/// Features → temporal network → prompt fusion → bag loss, with every
/// parameter perturbed away from its initialization so that zero-initialized
/// maps carry gradient too.
pub fn full_pipeline(mode: VisualPromptMode, seed: u64) -> Result<GradReport> {
    let model = check_model(mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = perturbed(&model.params, &mut rng, 0.1)?;
    let features = random_rows(&mut rng, CHECK_FRAMES, CHECK_DIM)?;
    check_params(&params, DEFAULT_STEP, |tape, p| model.loss_with(tape, p, &features, 1))
}

/// Gradients of a random projection of the fused instance features with
/// respect to the temporal network alone.
pub fn temporal_only(seed: u64) -> Result<GradReport> {
    let model = check_model(VisualPromptMode::Add)?;
    let cfg = model.config.temporal(CHECK_DIM);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    temporal::register(&mut params, &cfg, &mut rng)?;
    let params = perturbed(&params, &mut rng, 0.1)?;
    let features = random_rows(&mut rng, CHECK_FRAMES, CHECK_DIM)?;
    let probe = random_rows(&mut rng, CHECK_FRAMES, CHECK_DIM)?;
    check_params(&params, DEFAULT_STEP, |tape, p| {
        let x = tape.constant(features.clone());
        let out = temporal::forward(tape, p, &cfg, x)?;
        let w = tape.constant(probe.clone());
        let prod = tape.mul(out.x_instance, w)?;
        Ok(tape.sum(prod))
    })
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0], 0.0), 0.0);
        assert!((relative_error(&[2.0], &[1.0], 0.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(&[0.0], &[1e-9], 1e-3) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn temporal_check_passes() {
        let r = temporal_only(1).unwrap();
        assert!(r.passes(1e-4), "{:#?}", r.params);
    }
}
