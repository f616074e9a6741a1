//! Flat run configuration and the assembled system (backbone + generator +
//! verifier architecture).

use crate::backbone::{BackboneConfig, EmbeddingBackbone};
use crate::error::Result;
use crate::hypernet::{self, HyperNetwork, HypernetConfig, WeightSet};
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::verifier::VerifierArchitecture;
use serde::{Deserialize, Serialize};

/// Every tunable default in one flat document. Unknown keys are rejected so a
/// typo cannot silently fall back to a default. The config is echoed into
/// training output for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // synthetic dataset
    pub identities: usize,
    pub samples_per_identity: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub shift_px: usize,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub data_seed: u64,
    // identity-disjoint split
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,
    // reference backbone
    pub backbone_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub backbone_epochs: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub backbone_weight_decay: f64,
    pub backbone_seed: u64,
    // generator
    pub hypernet_hidden: Vec<usize>,
    pub final_init_scale: f64,
    pub hypernet_seed: u64,
    // verifier
    pub arch: String,
    // training loop
    pub initial_batch_identities: usize,
    pub images_per_identity: usize,
    pub total_steps: usize,
    pub kcs_start: usize,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// K for identity clustering; 0 means max(2, identities/10).
    pub clusters: usize,
    pub train_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            identities: 200,
            samples_per_identity: 20,
            image_size: 32,
            latent_dim: 16,
            shift_px: 3,
            brightness: 0.2,
            noise_sigma: 0.05,
            data_seed: 7,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            split_seed: 1,
            backbone_channels: vec![32, 64, 128, 256],
            embedding_dim: 64,
            backbone_epochs: 10,
            backbone_batch: 32,
            backbone_lr: 1e-2,
            backbone_weight_decay: 1e-5,
            backbone_seed: 11,
            hypernet_hidden: vec![256, 256, 256],
            final_init_scale: 0.01,
            hypernet_seed: 13,
            arch: "desk32".into(),
            initial_batch_identities: 2,
            images_per_identity: 2,
            total_steps: 2000,
            kcs_start: 1000,
            beta: 1.0,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 250,
            alpha_start: 1e-6,
            alpha_end: 1e-4,
            clusters: 0,
            train_seed: 17,
        }
    }
}

impl RunConfig {
    pub fn synth_config(&self) -> crate::data::SynthConfig {
        crate::data::SynthConfig {
            identities: self.identities,
            samples_per_identity: self.samples_per_identity,
            image_size: self.image_size,
            latent_dim: self.latent_dim,
            shift_px: self.shift_px,
            brightness: self.brightness,
            noise_sigma: self.noise_sigma,
            seed: self.data_seed,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.backbone_channels.clone(),
            embedding_dim: self.embedding_dim,
            input_size: self.image_size,
            epochs: self.backbone_epochs,
            batch_size: self.backbone_batch,
            lr: self.backbone_lr,
            weight_decay: self.backbone_weight_decay,
            seed: self.backbone_seed,
        }
    }

    pub fn hypernet_config(&self) -> HypernetConfig {
        HypernetConfig {
            hidden: self.hypernet_hidden.clone(),
            final_init_scale: self.final_init_scale,
        }
    }

    pub fn arch(&self) -> Result<VerifierArchitecture> {
        VerifierArchitecture::by_name(&self.arch)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            initial_batch_identities: self.initial_batch_identities,
            images_per_identity: self.images_per_identity,
            total_steps: self.total_steps,
            kcs_start: self.kcs_start,
            beta: self.beta,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            alpha_start: self.alpha_start,
            alpha_end: self.alpha_end,
            clusters: if self.clusters == 0 { None } else { Some(self.clusters) },
            seed: self.train_seed,
        }
    }
}

/// Anything that scores an (enroll, probe) image pair with an accept
/// probability.
pub trait PairScorer {
    fn score_pair(&self, enroll: &Tensor, probe: &Tensor) -> Result<f64>;
}

/// The full trained system: frozen backbone, trained generator, and the
/// verifier architecture the generator targets.
pub struct System {
    pub backbone: EmbeddingBackbone,
    pub hypernet: HyperNetwork,
    pub arch: VerifierArchitecture,
}

impl System {
    /// One-image enrollment: embed, then generate θ.
    pub fn enroll(&self, image: &Tensor) -> Result<WeightSet> {
        let e = self.backbone.embed(image)?;
        hypernet::generate_weights(&self.hypernet, &e)
    }

    /// Multi-image enrollment: average embeddings, re-normalize, generate.
    pub fn enroll_images(&self, images: &[Tensor]) -> Result<WeightSet> {
        hypernet::enroll_multi(&self.hypernet, &self.backbone, images)
    }
}

impl PairScorer for System {
    fn score_pair(&self, enroll: &Tensor, probe: &Tensor) -> Result<f64> {
        let theta = self.enroll(enroll)?;
        self.arch.verify(probe, &theta)
    }
}
