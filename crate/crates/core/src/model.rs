//! The full network: encoder, frozen classifier and adversarial head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::heads::{AdversarialHead, ClassifierConfig, ClassifierHead};
use crate::nn::ParamStore;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 12,
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_classes < 2 {
            return Err(format!("model.n_classes must be at least 2, got {}", self.n_classes));
        }
        self.encoder.validate()
    }

    /// Trainable parameter count from the config alone.
    pub fn trainable_params(&self) -> usize {
        let d = self.encoder.d_model;
        let classifier = if self.classifier.trainable {
            ClassifierHead::param_count(d, self.n_classes, &self.classifier)
        } else {
            0
        };
        self.encoder.param_count() + AdversarialHead::param_count(d) + classifier
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub classifier: ClassifierHead,
    pub adversary: AdversarialHead,
}

impl Model {
    /// Builds and initialises every parameter from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate().map_err(TensorError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &cfg.encoder)?;
        let classifier = ClassifierHead::new(&mut store, &mut rng, cfg.encoder.d_model, cfg.n_classes, &cfg.classifier)?;
        let adversary = AdversarialHead::new(&mut store, &mut rng, cfg.encoder.d_model);
        let model = Model {
            cfg: cfg.clone(),
            store,
            encoder,
            classifier,
            adversary,
        };
        log::info!(
            "model built: {} trainable / {} total parameters",
            model.store.trainable_count(),
            model.store.total_count()
        );
        Ok(model)
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }
}
