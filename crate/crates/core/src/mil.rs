//! Bag-level cosine classifier, MIL loss and frame influence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Reduction of per-frame similarities to one logit per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Mean of the `k` highest frame similarities per class.
    Topk { k: usize },
}

impl Aggregation {
    pub fn apply(self, tape: &mut Tape, frame_sims: Var) -> Result<Var> {
        match self {
            Aggregation::Mean => tape.mean_rows(frame_sims),
            Aggregation::Topk { k } => {
                let k = k.min(tape.value(frame_sims).rows());
                tape.topk_mean_rows(frame_sims, k)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BagOutput {
    /// `T×C` cosine similarities.
    pub frame_sims: Var,
    /// Length-`C` logits before the temperature.
    pub logits: Var,
}

/// Per-frame cosines to each enhanced label and their aggregate.
pub fn bag_logits(tape: &mut Tape, x_instance: Var, x_tilde: Var, aggregation: Aggregation) -> Result<BagOutput> {
    let frame_sims = tape.cosine_rows(x_instance, x_tilde)?;
    let logits = aggregation.apply(tape, frame_sims)?;
    Ok(BagOutput { frame_sims, logits })
}

/// `cross_entropy(logits / tau_p, label)`.
pub fn bag_loss(tape: &mut Tape, logits: Var, tau_p: f64, label: usize) -> Result<Var> {
    check_tau(tau_p)?;
    let scaled = tape.scale(logits, tau_p.recip());
    tape.cross_entropy(scaled, label)
}

fn check_tau(tau_p: f64) -> Result<()> {
    if tau_p > 0.0 && tau_p.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("tau_p must be positive, got {tau_p}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BagPrediction {
    pub frame_sims: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    pub predicted: usize,
}

impl BagPrediction {
    /// Softmax of `logits / tau_p`; the first maximum wins ties.
    pub fn from_sims(frame_sims: Tensor, logits: Tensor, tau_p: f64) -> Result<Self> {
        check_tau(tau_p)?;
        let z: Vec<f64> = logits.data().iter().map(|l| l / tau_p).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / total).collect();
        let predicted = argmax(&probs);
        Ok(Self {
            frame_sims,
            logits,
            probs: Tensor::vector(probs),
            predicted,
        })
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Bag prediction with the given aggregation.
pub fn predict_bag_with(
    x_instance: &Tensor,
    x_tilde: &Tensor,
    tau_p: f64,
    aggregation: Aggregation,
) -> Result<BagPrediction> {
    let mut tape = Tape::new();
    let xi = tape.constant(x_instance.clone());
    let xt = tape.constant(x_tilde.clone());
    let out = bag_logits(&mut tape, xi, xt, aggregation)?;
    BagPrediction::from_sims(
        tape.value(out.frame_sims).clone(),
        tape.value(out.logits).clone(),
        tau_p,
    )
}

/// Bag prediction with mean aggregation over frames.
pub fn predict_bag(x_instance: &Tensor, x_tilde: &Tensor, tau_p: f64) -> Result<BagPrediction> {
    predict_bag_with(x_instance, x_tilde, tau_p, Aggregation::Mean)
}

/// Frame influence for one class column, raw and min-max normalized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceProfile {
    pub class: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Influence of the enhanced label of `class` on each frame. A constant
/// column normalizes to 0.5 everywhere.
pub fn influence(frame_sims: &Tensor, class: usize) -> Result<InfluenceProfile> {
    let classes = frame_sims.cols();
    if class >= classes {
        return Err(Error::TargetOutOfRange { target: class, classes });
    }
    let raw: Vec<f64> = (0..frame_sims.rows()).map(|t| frame_sims.at(t, class)).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi > lo {
        raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; raw.len()]
    };
    Ok(InfluenceProfile { class, raw, normalized })
}

/// Ground-truth column when a label is known, otherwise the predicted one.
pub fn influence_for(pred: &BagPrediction, label: Option<usize>) -> Result<InfluenceProfile> {
    influence(&pred.frame_sims, label.unwrap_or(pred.predicted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Highest,
    Lowest,
}

/// The `k` frames with the highest or lowest normalized influence, ties to
/// the lower index, returned in ascending frame order.
pub fn select_frames(profile: &InfluenceProfile, k: usize, which: Which) -> Result<Vec<usize>> {
    let n = profile.normalized.len();
    if k == 0 || k > n {
        return Err(Error::TopKOutOfRange { k, frames: n });
    }
    let v = &profile.normalized;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let by_value = match which {
            Which::Highest => v[b].total_cmp(&v[a]),
            Which::Lowest => v[a].total_cmp(&v[b]),
        };
        by_value.then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Mean-aggregated prediction restricted to the selected frames, reusing the
/// full-bag label matrix.
pub fn predict_topk(
    x_instance: &Tensor,
    x_tilde: &Tensor,
    tau_p: f64,
    profile: &InfluenceProfile,
    k: usize,
    which: Which,
) -> Result<BagPrediction> {
    if profile.normalized.len() != x_instance.rows() {
        return Err(Error::ShapeMismatch {
            op: "predict_topk",
            left: vec![profile.normalized.len()],
            right: x_instance.shape().to_vec(),
        });
    }
    let frames = select_frames(profile, k, which)?;
    predict_bag(&x_instance.select_rows(&frames)?, x_tilde, tau_p)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::testutil::random_matrix;

    fn cos(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    }

    /// Scalar loops over frames and classes.
    fn oracle(x: &Tensor, labels: &Tensor, tau: f64) -> Vec<f64> {
        let (t_len, c_len) = (x.rows(), labels.rows());
        let mut logits = vec![0.0; c_len];
        for (k, logit) in logits.iter_mut().enumerate() {
            for t in 0..t_len {
                *logit += cos(x.row(t), labels.row(k));
            }
            *logit /= t_len as f64;
        }
        let denom: f64 = logits.iter().map(|l| (l / tau).exp()).sum();
        logits.iter().map(|l| (l / tau).exp() / denom).collect()
    }

    #[test]
    fn single_frame_closed_form() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let labels = Tensor::eye(2);
        let p = predict_bag(&x, &labels, 1.0).unwrap();
        assert_eq!(p.logits.data(), &[1.0, 0.0]);
        let e = 1f64.exp();
        assert!((p.probs.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.probs.data()[1] - 0.2689).abs() < 1e-4);
        assert_eq!(p.predicted, 0);
    }

    #[test]
    fn equal_similarities_give_uniform_probs() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let labels = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = predict_bag(&x, &labels, 0.01).unwrap();
        assert!((p.probs.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle() {
        for seed in 0..100u64 {
            let t = 1 + (seed % 8) as usize;
            let c = 2 + (seed % 4) as usize;
            let d = 2 + (seed % 15) as usize;
            let x = random_matrix(t, d, seed);
            let labels = random_matrix(c, d, 1000 + seed);
            let tau = [0.01, 0.1, 1.0][(seed % 3) as usize];
            let p = predict_bag(&x, &labels, tau).unwrap();
            for (a, b) in p.probs.data().iter().zip(oracle(&x, &labels, tau)) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn loss_matches_negative_log_prob() {
        let x = random_matrix(5, 6, 1);
        let labels = random_matrix(7, 6, 2);
        let mut tape = Tape::new();
        let (xi, xt) = (tape.constant(x.clone()), tape.constant(labels.clone()));
        let out = bag_logits(&mut tape, xi, xt, Aggregation::Mean).unwrap();
        let loss = bag_loss(&mut tape, out.logits, 0.1, 3).unwrap();
        let p = predict_bag(&x, &labels, 0.1).unwrap();
        assert!((tape.value(loss).item() + p.probs.data()[3].ln()).abs() < 1e-9);
        assert!(bag_loss(&mut tape, out.logits, 0.1, 7).is_err());

        let same = tape.constant(Tensor::zeros(&[7]));
        let uniform = bag_loss(&mut tape, same, 0.01, 0).unwrap();
        assert!((tape.value(uniform).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_descends_on_a_repeated_bag() {
        use crate::tensor::{ParamGroup, ParameterSet};
        let x = random_matrix(4, 5, 3);
        let mut params = ParameterSet::new();
        params
            .insert("labels", ParamGroup::Head, random_matrix(3, 5, 4))
            .unwrap();
        let step = |params: &mut ParameterSet| -> f64 {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let xt = tape.param(params, "labels").unwrap();
            let out = bag_logits(&mut tape, xi, xt, Aggregation::Mean).unwrap();
            let loss = bag_loss(&mut tape, out.logits, 0.1, 2).unwrap();
            let grads = tape.backward(loss).unwrap();
            params.zero_grad();
            params.accumulate(&tape, &grads, 1.0).unwrap();
            params.sgd_step(0.05).unwrap();
            tape.value(loss).item()
        };
        let losses: Vec<f64> = (0..50).map(|_| step(&mut params)).collect();
        assert!(losses[49] < losses[0] * 0.5, "{losses:?}");
    }

    #[test]
    fn influence_examples() {
        let sims = Tensor::new(vec![3, 2], vec![0.2, 1.0, 0.5, 1.0, 0.8, 1.0]).unwrap();
        let p = influence(&sims, 0).unwrap();
        assert_eq!(p.raw, vec![0.2, 0.5, 0.8]);
        for (a, b) in p.normalized.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(influence(&sims, 1).unwrap().normalized, vec![0.5; 3]);
        assert!(influence(&sims, 2).is_err());
    }

    #[test]
    fn influence_defaults_to_predicted_class() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.1, 0.9, 0.3]).unwrap();
        let pred = predict_bag(&x, &Tensor::eye(2), 0.01).unwrap();
        assert_eq!(pred.predicted, 0);
        assert_eq!(influence_for(&pred, None).unwrap().class, 0);
        assert_eq!(influence_for(&pred, Some(1)).unwrap().class, 1);
    }

    #[test]
    fn selection_breaks_ties_by_index() {
        let profile = InfluenceProfile {
            class: 0,
            raw: vec![],
            normalized: vec![0.5, 1.0, 0.5, 0.0, 0.5],
        };
        assert_eq!(select_frames(&profile, 1, Which::Highest).unwrap(), vec![1]);
        assert_eq!(select_frames(&profile, 2, Which::Highest).unwrap(), vec![0, 1]);
        assert_eq!(select_frames(&profile, 3, Which::Highest).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_frames(&profile, 2, Which::Lowest).unwrap(), vec![0, 3]);
        assert!(select_frames(&profile, 0, Which::Lowest).is_err());
        assert!(select_frames(&profile, 6, Which::Lowest).is_err());
    }

    #[test]
    fn topk_prediction_edges() {
        let x = random_matrix(5, 4, 8);
        let labels = random_matrix(3, 4, 9);
        let full = predict_bag(&x, &labels, 0.1).unwrap();
        let profile = influence(&full.frame_sims, 1).unwrap();
        let all = predict_topk(&x, &labels, 0.1, &profile, 5, Which::Lowest).unwrap();
        assert_eq!(all, full);
        let one = predict_topk(&x, &labels, 0.1, &profile, 1, Which::Highest).unwrap();
        let best = argmax(&profile.normalized);
        assert_eq!(one.logits.data(), full.frame_sims.row(best));
    }

    #[test]
    fn topk_aggregation_picks_largest_frames() {
        let sims_src = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let labels = Tensor::eye(2);
        let p = predict_bag_with(&sims_src, &labels, 1.0, Aggregation::Topk { k: 2 }).unwrap();
        assert!((p.logits.data()[0] - 0.8).abs() < 1e-12);
        assert!((p.logits.data()[1] - 0.9).abs() < 1e-12);
        let all = predict_bag_with(&sims_src, &labels, 1.0, Aggregation::Topk { k: 10 }).unwrap();
        let mean = predict_bag(&sims_src, &labels, 1.0).unwrap();
        assert!((all.logits.data()[0] - mean.logits.data()[0]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn probs_sum_to_one_and_argmax_is_stable(
            seed in 0u64..10_000,
            t in 1usize..9,
            c in 2usize..6,
            scales in proptest::collection::vec(0.01f64..100.0, 8),
        ) {
            let x = random_matrix(t, 6, seed);
            let labels = random_matrix(c, 6, seed + 1);
            let base = predict_bag(&x, &labels, 1.0).unwrap();
            let mut scaled = x.clone();
            for r in 0..t {
                scaled.data_mut()[r * 6..(r + 1) * 6].iter_mut().for_each(|v| *v *= scales[r]);
            }
            for tau in [0.01, 0.1, 1.0] {
                for input in [&x, &scaled] {
                    let p = predict_bag(input, &labels, tau).unwrap();
                    prop_assert!((p.probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert_eq!(p.predicted, base.predicted);
                }
            }
        }

        #[test]
        fn influence_is_pointwise(seed in 0u64..10_000, t in 2usize..10) {
            let sims = random_matrix(t, 3, seed);
            let perm: Vec<usize> = (0..t).rev().collect();
            let a = influence(&sims, 1).unwrap();
            let b = influence(&sims.select_rows(&perm).unwrap(), 1).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.normalized[i], a.normalized[p]);
            }
            prop_assert!(a.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
