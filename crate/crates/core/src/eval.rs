//! Split evaluation, influence profiles and localization scoring.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::SalientMasks;
use crate::error::{Error, Result};
use crate::format::FrameBag;
use crate::metrics::EvalReport;
use crate::mil::{self, InfluenceProfile, Which};
use crate::model::{Model, Prediction};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "TGDFER_THREADS";

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Maps `f` over `items` on a thread pool capped by [`THREADS_ENV`], keeping
/// input order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let run = || items.par_iter().map(&f).collect::<Result<Vec<R>>>();
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Predictions for every bag, in order.
pub fn predict_all(model: &Model, bags: &[FrameBag]) -> Result<Vec<Prediction>> {
    par_map(bags, |bag| model.predict(&bag.features))
}

pub fn report(model: &Model, predictions: &[Prediction], bags: &[FrameBag]) -> Result<EvalReport> {
    let pairs: Vec<(usize, usize)> = bags
        .iter()
        .zip(predictions)
        .map(|(b, p)| (b.label, p.bag.predicted))
        .collect();
    EvalReport::from_pairs(model.classes(), &pairs)
}

pub fn evaluate(model: &Model, bags: &[FrameBag]) -> Result<EvalReport> {
    let preds = predict_all(model, bags)?;
    report(model, &preds, bags)
}

/// Source of the influence column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfluenceClass {
    Label,
    Predicted,
}

/// Per-bag influence profiles.
pub fn influence_profiles(
    predictions: &[Prediction],
    bags: &[FrameBag],
    class: InfluenceClass,
) -> Result<Vec<InfluenceProfile>> {
    bags.iter()
        .zip(predictions)
        .map(|(b, p)| {
            let label = match class {
                InfluenceClass::Label => Some(b.label),
                InfluenceClass::Predicted => None,
            };
            mil::influence_for(&p.bag, label)
        })
        .collect()
}

/// Metrics when each bag is re-scored on its `k` highest or lowest influence
/// frames, with influence taken from the predicted class.
pub fn evaluate_topk(
    model: &Model,
    predictions: &[Prediction],
    bags: &[FrameBag],
    k: usize,
    which: Which,
) -> Result<EvalReport> {
    let profiles = influence_profiles(predictions, bags, InfluenceClass::Predicted)?;
    let mut pairs = Vec::with_capacity(bags.len());
    for ((bag, pred), profile) in bags.iter().zip(predictions).zip(&profiles) {
        let sub = mil::predict_topk(&pred.x_instance, &pred.x_tilde, model.config.tau_p, profile, k, which)?;
        pairs.push((bag.label, sub.predicted));
    }
    EvalReport::from_pairs(model.classes(), &pairs)
}

/// `bag_id,frame_index,raw,normalized` rows.
pub fn influence_csv(bags: &[FrameBag], profiles: &[InfluenceProfile]) -> String {
    let mut out = String::from("bag_id,frame_index,raw,normalized\n");
    for (bag, p) in bags.iter().zip(profiles) {
        for (t, (r, n)) in p.raw.iter().zip(&p.normalized).enumerate() {
            let _ = writeln!(out, "{},{t},{r},{n}", bag.bag_id);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Localization {
    /// Mean over scored bags of (mean normalized influence on salient frames
    /// minus mean on the others).
    pub score: f64,
    pub bags_scored: usize,
}

/// Bags whose mask is all-salient or all-background are skipped.
pub fn localization(bags: &[FrameBag], profiles: &[InfluenceProfile], masks: &SalientMasks) -> Result<Localization> {
    let mut total = 0.0;
    let mut scored = 0;
    for (bag, p) in bags.iter().zip(profiles) {
        let mask = masks.get(&bag.bag_id)?;
        if mask.len() != p.normalized.len() {
            return Err(Error::MissingMasks(format!(
                "mask for `{}` has {} frames, bag has {}",
                bag.bag_id,
                mask.len(),
                p.normalized.len()
            )));
        }
        let mean_where = |want: bool| {
            let vals: Vec<f64> = p
                .normalized
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m == want)
                .map(|(v, _)| *v)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        if let (Some(on), Some(off)) = (mean_where(true), mean_where(false)) {
            total += on - off;
            scored += 1;
        }
    }
    Ok(Localization {
        score: if scored == 0 { 0.0 } else { total / scored as f64 },
        bags_scored: scored,
    })
}
