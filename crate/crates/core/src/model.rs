//! The full network: temporal encoder, prompt fusion and the MIL head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FrozenEncoder;
use crate::error::{Error, Result};
use crate::mil::{self, Aggregation, BagPrediction};
use crate::prompt::{self, EnhancedLabels, PromptConfig, PromptSet};
use crate::temporal::{self, Activation, InstanceFeatures, SegmentationConfig, TemporalConfig};
use crate::tensor::{ParameterSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: usize,
    pub ffn_mult: usize,
    pub fine_depth: usize,
    pub coarse_depth: usize,
    pub max_frames: usize,
    pub segmentation: SegmentationConfig,
    pub activation: Activation,
    pub prompt: PromptConfig,
    pub tau_p: f64,
    pub aggregation: Aggregation,
    /// Seed of the frozen mock text encoder.
    pub encoder_seed: u64,
    /// Token width of the text encoder; the feature width when unset.
    pub token_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_mult: 4,
            fine_depth: 1,
            coarse_depth: 1,
            max_frames: 64,
            segmentation: SegmentationConfig::default(),
            activation: Activation::Gelu,
            prompt: PromptConfig::default(),
            tau_p: 0.01,
            aggregation: Aggregation::Mean,
            encoder_seed: 0,
            token_dim: None,
        }
    }
}

impl ModelConfig {
    pub fn temporal(&self, dim: usize) -> TemporalConfig {
        TemporalConfig {
            dim,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            fine_depth: self.fine_depth,
            coarse_depth: self.coarse_depth,
            max_frames: self.max_frames,
            segmentation: self.segmentation,
            activation: self.activation,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.temporal(dim).validate()?;
        self.prompt.validate()?;
        if self.fine_depth == 0 && self.coarse_depth == 0 {
            return Err(Error::Config("fine_depth and coarse_depth cannot both be 0".into()));
        }
        if !(self.tau_p > 0.0 && self.tau_p.is_finite()) {
            return Err(Error::Config(format!("tau_p must be positive, got {}", self.tau_p)));
        }
        if let Aggregation::Topk { k: 0 } = self.aggregation {
            return Err(Error::Config("top-k aggregation needs k >= 1".into()));
        }
        if self.token_dim == Some(0) {
            return Err(Error::Config("token_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Everything recorded on the tape for one bag.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub instance: InstanceFeatures,
    pub labels: EnhancedLabels,
    pub frame_sims: Var,
    pub logits: Var,
}

/// Values of one bag's forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub bag: BagPrediction,
    pub x_instance: Tensor,
    pub x_tilde: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dim: usize,
    pub prompts: PromptSet,
    pub encoder: FrozenEncoder,
    pub params: ParameterSet,
}

impl Model {
    /// Builds the network with parameters drawn from `init_seed`.
    pub fn new(
        config: ModelConfig,
        dim: usize,
        class_names: &[String],
        descriptors: &[String],
        init_seed: u64,
    ) -> Result<Self> {
        config.validate(dim)?;
        let prompts = PromptSet::new(class_names, descriptors, config.prompt)?;
        let token_dim = config.token_dim.unwrap_or(dim);
        let encoder = FrozenEncoder::text(config.encoder_seed, token_dim, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParameterSet::new();
        temporal::register(&mut params, &config.temporal(dim), &mut rng)?;
        prompt::register(&mut params, &config.prompt, token_dim, dim, &mut rng)?;
        Ok(Self {
            config,
            dim,
            prompts,
            encoder,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.prompts.classes()
    }

    /// Forward pass with an explicit parameter set (used by gradient checks).
    pub fn forward_with(&self, tape: &mut Tape, params: &ParameterSet, features: &Tensor) -> Result<Forward> {
        if features.cols() != self.dim || features.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                left: vec![0, self.dim],
                right: features.shape().to_vec(),
            });
        }
        let x = tape.constant(features.clone());
        let instance = temporal::forward(tape, params, &self.config.temporal(self.dim), x)?;
        let labels = prompt::enhance_labels(tape, params, &self.prompts, &self.encoder, instance.x_instance)?;
        let out = mil::bag_logits(tape, instance.x_instance, labels.x_tilde, self.config.aggregation)?;
        Ok(Forward {
            instance,
            labels,
            frame_sims: out.frame_sims,
            logits: out.logits,
        })
    }

    pub fn forward(&self, tape: &mut Tape, features: &Tensor) -> Result<Forward> {
        self.forward_with(tape, &self.params, features)
    }

    /// Bag loss with an explicit parameter set.
    pub fn loss_with(&self, tape: &mut Tape, params: &ParameterSet, features: &Tensor, label: usize) -> Result<Var> {
        let f = self.forward_with(tape, params, features)?;
        mil::bag_loss(tape, f.logits, self.config.tau_p, label)
    }

    pub fn loss(&self, tape: &mut Tape, features: &Tensor, label: usize) -> Result<Var> {
        self.loss_with(tape, &self.params, features, label)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, features)?;
        let bag = BagPrediction::from_sims(
            tape.value(f.frame_sims).clone(),
            tape.value(f.logits).clone(),
            self.config.tau_p,
        )?;
        Ok(Prediction {
            bag,
            x_instance: tape.value(f.instance.x_instance).clone(),
            x_tilde: tape.value(f.labels.x_tilde).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, DEFAULT_STEP};
    use crate::prompt::VisualPromptMode;
    use crate::testutil::{random_matrix, randomized};

    fn names(c: usize) -> (Vec<String>, Vec<String>) {
        let n = (0..c).map(|k| format!("class {k}")).collect();
        let d = (0..c).map(|k| format!("cue {k} on the face")).collect();
        (n, d)
    }

    fn small(mode: VisualPromptMode) -> ModelConfig {
        ModelConfig {
            heads: 2,
            ffn_mult: 2,
            segmentation: SegmentationConfig {
                window: 3,
                stride: 1,
                cover_tail: true,
            },
            prompt: PromptConfig {
                visual_mode: mode,
                context_len: 2,
                mlp_mult: 2,
                ..PromptConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (n, d) = names(3);
        let a = Model::new(small(VisualPromptMode::Add), 8, &n, &d, 4).unwrap();
        let b = Model::new(small(VisualPromptMode::Add), 8, &n, &d, 4).unwrap();
        let c = Model::new(small(VisualPromptMode::Add), 8, &n, &d, 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.encoder.checksum(), c.encoder.checksum());
    }

    #[test]
    fn prediction_is_a_distribution() {
        let (n, d) = names(4);
        let m = Model::new(small(VisualPromptMode::Prepend), 8, &n, &d, 1).unwrap();
        let p = m.predict(&random_matrix(7, 8, 2)).unwrap();
        assert_eq!(p.bag.frame_sims.shape(), &[7, 4]);
        assert!((p.bag.probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p.x_tilde.shape(), &[4, 8]);
        assert!(m.predict(&random_matrix(7, 6, 2)).is_err());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (n, d) = names(2);
        let mut cfg = small(VisualPromptMode::Add);
        cfg.tau_p = 0.0;
        assert!(Model::new(cfg, 8, &n, &d, 0).is_err());
        let mut cfg = small(VisualPromptMode::Add);
        cfg.heads = 3;
        assert!(Model::new(cfg, 8, &n, &d, 0).is_err());
        let mut cfg = small(VisualPromptMode::Add);
        (cfg.fine_depth, cfg.coarse_depth) = (0, 0);
        assert!(Model::new(cfg.clone(), 8, &n, &d, 0).is_err());
        cfg.coarse_depth = 2;
        assert!(Model::new(cfg, 8, &n, &d, 0).is_ok());
    }

    #[test]
    fn full_pipeline_gradients() {
        let (n, d) = names(3);
        for mode in [VisualPromptMode::None, VisualPromptMode::Add, VisualPromptMode::Prepend] {
            let mut cfg = small(mode);
            cfg.tau_p = 0.1;
            cfg.prompt.tau_a = 0.1;
            let m = Model::new(cfg, 8, &n, &d, 3).unwrap();
            let params = randomized(&m.params, 6, 0.2);
            let x = random_matrix(6, 8, 7);
            let report = check_params(&params, DEFAULT_STEP, |tape, p| m.loss_with(tape, p, &x, 1)).unwrap();
            assert!(report.passes(1e-4), "{mode:?}: {:#?}", report.params);
        }
    }
}
