//! Mini-batch SGD with a multi-step schedule and per-group learning rates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::par_map;
use crate::format::FrameBag;
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamGroup, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub temporal: f64,
    pub prompts: f64,
    pub head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            temporal: 1e-2,
            prompts: 1e-3,
            head: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Temporal => self.temporal,
            ParamGroup::Prompt => self.prompts,
            ParamGroup::Head => self.head,
        }
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            temporal: self.temporal * f,
            prompts: self.prompts * f,
            head: self.head * f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Global gradient-norm cap applied before each step.
    pub clip_grad_norm: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch_size: 8,
            lr: LearningRates::default(),
            milestones: vec![30, 40],
            gamma: 0.1,
            clip_grad_norm: Some(5.0),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("milestones {:?} are not strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!(
                "milestones {:?} must be below {} epochs",
                self.milestones, self.epochs
            ));
        }
        let lr = self.lr;
        if [lr.temporal, lr.prompts, lr.head]
            .iter()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return bad(format!("learning rates must be positive, got {lr:?}"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_grad_norm must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Base rates times `gamma` per milestone already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> LearningRates {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr.scaled(cfg.gamma.powi(passed as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: LearningRates,
    /// Mean loss over the mini-batches of this epoch.
    pub running_loss: f64,
    /// Mean training-split loss after the epoch's updates.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training-split loss before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.train_loss)
    }
}

/// Mean bag loss over `bags`, evaluated in parallel and summed in order.
pub fn mean_loss(model: &Model, bags: &[FrameBag]) -> Result<f64> {
    let losses = par_map(bags, |bag| {
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, &bag.features, bag.label)?;
        Ok(tape.value(l).item())
    })?;
    Ok(losses.iter().sum::<f64>() / bags.len().max(1) as f64)
}

/// Deterministic visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One epoch of SGD. Within a batch, gradients are accumulated in ascending
/// bag index order with weight `1/B`.
pub fn train_epoch(model: &mut Model, bags: &[FrameBag], cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let lr = lr_at(epoch, cfg);
    let order = epoch_order(cfg.seed, epoch, bags.len());
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let mut batch = chunk.to_vec();
        batch.sort_unstable();
        let weight = 1.0 / batch.len() as f64;
        model.params.zero_grad();
        for &i in &batch {
            let bag = &bags[i];
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &bag.features, bag.label)?;
            total += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            model.params.accumulate(&tape, &grads, weight)?;
        }
        if let Some(max) = cfg.clip_grad_norm {
            model.params.clip_grad_norm(max);
        }
        model.params.sgd_step_grouped(|g| lr.for_group(g))?;
    }
    if !model.params.is_finite() {
        return Err(Error::Config(format!("non-finite parameters after epoch {epoch}")));
    }
    Ok(total / bags.len() as f64)
}

/// Builds a fresh model for `dataset` and trains it. `on_epoch` sees every
/// epoch's log entry as it completes.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Manifest("training split is empty".into()));
    }
    let m = &dataset.manifest;
    let mut model = Model::new(cfg.model.clone(), m.d, &m.class_names, &m.fine_descriptors, cfg.seed)?;
    for bag in &dataset.train {
        cfg.model.segmentation.starts(bag.frames())?;
        if bag.frames() > cfg.model.max_frames {
            return Err(Error::BagTooLong {
                frames: bag.frames(),
                max: cfg.model.max_frames,
            });
        }
    }
    let mut log = TrainLog {
        initial_loss: mean_loss(&model, &dataset.train)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let running_loss = train_epoch(&mut model, &dataset.train, cfg, epoch)?;
        let entry = EpochLog {
            epoch,
            lr: lr_at(epoch, cfg),
            running_loss,
            train_loss: mean_loss(&model, &dataset.train)?,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).head, 1e-2);
        assert_eq!(lr_at(0, &cfg).prompts, 1e-3);
        assert_eq!(lr_at(29, &cfg).head, 1e-2);
        assert!((lr_at(30, &cfg).head - 1e-3).abs() < 1e-18);
        assert!((lr_at(40, &cfg).head - 1e-4).abs() < 1e-18);
        assert!((lr_at(49, &cfg).prompts - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let with = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate()
        };
        assert!(with(|c| c.milestones = vec![40, 30]).is_err());
        assert!(with(|c| c.milestones = vec![30, 50]).is_err());
        assert!(with(|c| c.gamma = 1.0).is_err());
        assert!(with(|c| c.lr.prompts = 0.0).is_err());
        assert!(with(|c| c.batch_size = 0).is_err());
        assert!(with(|c| c.milestones.clear()).is_ok());
    }

    #[test]
    fn config_json_defaults_and_hash() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "milestones": []}"#).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.model.tau_p, 0.01);
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
        assert_eq!(cfg.hash(), cfg.clone().hash());
        let cfg: TrainConfig = serde_json::from_str(r#"{"model": {"aggregation": {"topk": {"k": 3}}}}"#).unwrap();
        assert_eq!(cfg.model.aggregation, crate::mil::Aggregation::Topk { k: 3 });
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"model": {"prompt": {"tau": 0.1}}}"#).is_err());
    }

    #[test]
    fn epoch_orders_are_permutations_and_reproducible() {
        let a = epoch_order(1, 0, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 20));
        assert_ne!(a, epoch_order(1, 1, 20));
        assert_ne!(a, epoch_order(2, 0, 20));
    }
}
