//! Losses, scheduling, and the training loops: the hypernetwork system and
//! the direct single-verifier baseline.

use crate::backbone::EmbeddingBackbone;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::hypernet::{HyperNetwork, HypernetConfig, WeightSet};
use crate::kcs::{self, ClusterIndex, SamplingMode, TrainingBatch};
use crate::optim::{SgdConfig, SgdMomentum};
use crate::tensor::{concat_rows, Tensor};
use crate::verifier::VerifierArchitecture;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Probability clamp inside the BCE so log never sees 0.
pub const BCE_EPS: f64 = 1e-7;

/// Y[j,k] = 1 iff samples j and k share an identity. Constant (no gradient).
pub fn target_matrix(identity_of_sample: &[usize]) -> Tensor {
    let nb = identity_of_sample.len();
    let mut y = vec![0.0; nb * nb];
    for j in 0..nb {
        for k in 0..nb {
            if identity_of_sample[j] == identity_of_sample[k] {
                y[j * nb + k] = 1.0;
            }
        }
    }
    Tensor::from_vec(y, &[nb, nb])
}

/// λ = 1 − β/B: up-weights the scarce positive class.
pub fn lambda_factor(b: usize, beta: f64) -> Result<f64> {
    if b < 2 {
        return Err(Error::Config(format!("lambda needs B >= 2, got {b}")));
    }
    if beta <= 0.0 || beta >= b as f64 {
        return Err(Error::Config(format!(
            "beta must lie in (0, B); got beta={beta}, B={b}"
        )));
    }
    Ok(1.0 - beta / b as f64)
}

/// Weighted binary cross-entropy over the prediction matrix:
/// `(1/nB) Σ −[λ·Y·log Ŷ + (1−λ)(1−Y)·log(1−Ŷ)]`, Ŷ clamped to
/// `[ε, 1−ε]`.
pub fn weighted_bce(yhat: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if yhat.shape() != y.shape() || yhat.rank() != 2 {
        return Err(Error::Dimension {
            op: "weighted_bce",
            lhs: yhat.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let nb = yhat.shape()[0] as f64;
    // pass-through clamp: saturated predictions keep a recovery gradient
    let yc = yhat.clamp_passthrough(BCE_EPS, 1.0 - BCE_EPS);
    let pos = y.mul(&yc.ln())?.scale(lambda);
    let neg = y.affine(-1.0, 1.0).mul(&yc.affine(-1.0, 1.0).ln())?.scale(1.0 - lambda);
    Ok(pos.add(&neg)?.sum_all().scale(-1.0 / nb))
}

/// Mean squared L2 norm of the generated weight rows: `(1/nB) Σ_j ‖θ_j‖²`.
pub fn norm_loss(thetas: &Tensor) -> Tensor {
    let rows = thetas.shape()[0] as f64;
    thetas.sq_sum().scale(1.0 / rows)
}

/// `bce + α_norm · norm`.
pub fn total_loss(bce: &Tensor, norm: &Tensor, alpha_norm: f64) -> Result<Tensor> {
    bce.add(&norm.scale(alpha_norm))
}

/// Staged schedule: batch doublings, regularizer ramp, sampling-mode switch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Schedule {
    pub initial_batch_identities: usize,
    pub total_steps: usize,
    /// Fractions of total_steps at which the identity count doubles.
    pub doubling_fractions: [f64; 3],
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// α ramps linearly over `[0, ramp_steps)`, then stays at alpha_end.
    pub ramp_steps: usize,
    /// Uniform sampling before this step, KCS from it on.
    pub kcs_start: usize,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig) -> Schedule {
        Schedule {
            initial_batch_identities: cfg.initial_batch_identities,
            total_steps: cfg.total_steps,
            doubling_fractions: [0.1, 0.2, 0.3],
            alpha_start: cfg.alpha_start,
            alpha_end: cfg.alpha_end,
            ramp_steps: cfg.total_steps / 2,
            kcs_start: cfg.kcs_start,
        }
    }

    /// Identities per batch at a step; doubles at each crossed milestone, so
    /// the final size is 8x the initial one.
    pub fn batch_identities(&self, step: usize) -> usize {
        let crossed = self
            .doubling_fractions
            .iter()
            .filter(|&&f| step >= (f * self.total_steps as f64) as usize)
            .count();
        self.initial_batch_identities << crossed
    }

    pub fn final_batch_identities(&self) -> usize {
        self.initial_batch_identities * 8
    }

    /// Linear ramp from alpha_start to alpha_end; non-decreasing.
    pub fn alpha(&self, step: usize) -> f64 {
        if self.ramp_steps == 0 || step >= self.ramp_steps {
            return self.alpha_end;
        }
        let t = step as f64 / self.ramp_steps as f64;
        self.alpha_start + t * (self.alpha_end - self.alpha_start)
    }

    pub fn mode(&self, step: usize) -> SamplingMode {
        if step < self.kcs_start {
            SamplingMode::Uniform
        } else {
            SamplingMode::Kcs
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
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
    /// None: K = max(2, identities/10).
    pub clusters: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_batch_identities: 4,
            images_per_identity: 2,
            total_steps: 4000,
            kcs_start: 2000,
            beta: 2.0,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 300,
            alpha_start: 1e-6,
            alpha_end: 1e-4,
            clusters: None,
            seed: 17,
        }
    }
}

/// One log record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub norm: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Total samples nB in the step.
    pub batch_size: usize,
    pub sampling_mode: String,
    pub seconds: f64,
}

/// Training state for the hypernetwork system. The backbone stays outside the
/// optimizer; only generator parameters receive gradients.
pub struct Trainer {
    hypernet: HyperNetwork,
    arch: VerifierArchitecture,
    params: Vec<Tensor>,
    opt: SgdMomentum,
    cfg: TrainConfig,
    pub schedule: Schedule,
    /// Cached embeddings of every dataset sample, row-major [N, d]; the
    /// backbone is frozen so these never change during training.
    embeddings: Vec<f64>,
    embedding_dim: usize,
    step: usize,
}

impl Trainer {
    pub fn new(
        dataset: &LabeledImageSet,
        backbone: &EmbeddingBackbone,
        arch: VerifierArchitecture,
        hn_config: &HypernetConfig,
        cfg: TrainConfig,
    ) -> Result<Trainer> {
        arch.validate()?;
        if dataset.image_size() != arch.input_size {
            return Err(Error::Config(format!(
                "dataset images are {}px, architecture expects {}px",
                dataset.image_size(),
                arch.input_size
            )));
        }
        let schedule = Schedule::from_config(&cfg);
        if dataset.identity_count() < schedule.final_batch_identities() {
            return Err(Error::Config(format!(
                "dataset has {} identities, final batch needs {}",
                dataset.identity_count(),
                schedule.final_batch_identities()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hypernet =
            HyperNetwork::new(backbone.embedding_dim(), arch.layout(), hn_config, &mut rng);
        let params: Vec<Tensor> = hypernet.params().into_iter().map(|(_, t)| t).collect();
        let opt = SgdMomentum::new(
            SgdConfig {
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                warmup_steps: cfg.warmup_steps,
                total_steps: Some(cfg.total_steps),
            },
            &params,
        );

        let d = backbone.embedding_dim();
        let mut embeddings = Vec::with_capacity(dataset.len() * d);
        let all: Vec<usize> = (0..dataset.len()).collect();
        for chunk in all.chunks(64) {
            let rows = backbone.embed_batch(&dataset.batch_tensor(chunk))?;
            embeddings.extend(rows.to_vec());
        }

        Ok(Trainer {
            hypernet,
            arch,
            params,
            opt,
            cfg,
            schedule,
            embeddings,
            embedding_dim: d,
            step: 0,
        })
    }

    pub fn hypernet(&self) -> &HyperNetwork {
        &self.hypernet
    }

    pub fn into_hypernet(self) -> HyperNetwork {
        self.hypernet
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn embedding_rows(&self, indices: &[usize]) -> Tensor {
        let d = self.embedding_dim;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.embeddings[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(data, &[indices.len(), d])
    }

    /// One optimizer step on a batch: generate θ for every sample, evaluate
    /// the all-pairs prediction matrix, apply the weighted BCE plus the norm
    /// penalty, and update the generator.
    pub fn step(&mut self, dataset: &LabeledImageSet, batch: &TrainingBatch) -> Result<StepMetrics> {
        let start = Instant::now();
        let b = batch.identities.len();
        let expected_b = self.schedule.batch_identities(self.step);
        if b != expected_b || batch.images_per_identity != self.cfg.images_per_identity {
            return Err(Error::Config(format!(
                "batch has B={b}, n={}; schedule expects B={expected_b}, n={}",
                batch.images_per_identity, self.cfg.images_per_identity
            )));
        }
        let lambda = lambda_factor(b, self.cfg.beta)?;
        let alpha = self.schedule.alpha(self.step);

        let emb = self.embedding_rows(&batch.sample_indices);
        let thetas = self.hypernet.forward(&emb)?;
        let images = dataset.batch_tensor(&batch.sample_indices);
        let yhat = self.arch.batched_predict(&images, &thetas)?;
        let y = target_matrix(&batch.sample_identities);

        let bce = weighted_bce(&yhat, &y, lambda)?;
        let norm = norm_loss(&thetas);
        let loss = total_loss(&bce, &norm, alpha)?;
        let (loss_v, bce_v, norm_v) = (loss.item(), bce.item(), norm.item());
        loss.backward()?;
        let lr = self.opt.apply(&self.params);

        let metrics = StepMetrics {
            step: self.step,
            loss: loss_v,
            bce: bce_v,
            norm: norm_v,
            lambda,
            lr,
            batch_size: batch.len(),
            sampling_mode: batch.mode.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(metrics)
    }
}

fn write_record(log: &mut Option<&mut dyn Write>, m: &StepMetrics) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(m)?;
        writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Full training loop: uniform sampling, then clustering once at the KCS
/// switch, then cluster-centered sampling to the end.
pub fn train(
    dataset: &LabeledImageSet,
    backbone: &EmbeddingBackbone,
    arch: VerifierArchitecture,
    hn_config: &HypernetConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(HyperNetwork, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(dataset, backbone, arch, hn_config, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A4D_50);
    let mut index: Option<ClusterIndex> = None;
    let mut history = Vec::with_capacity(cfg.total_steps);
    let n = cfg.images_per_identity;
    for step in 0..cfg.total_steps {
        let mode = trainer.schedule.mode(step);
        if mode == SamplingMode::Kcs && index.is_none() {
            index = Some(build_cluster_index(dataset, backbone, cfg)?);
        }
        let b = trainer.schedule.batch_identities(step);
        let batch = kcs::sample_batch(index.as_ref(), dataset, b, n, mode, &mut rng)?;
        let metrics = trainer.step(dataset, &batch)?;
        write_record(&mut log, &metrics)?;
        history.push(metrics);
    }
    Ok((trainer.into_hypernet(), history))
}

/// Identity clustering for the KCS phase.
pub fn build_cluster_index(
    dataset: &LabeledImageSet,
    backbone: &EmbeddingBackbone,
    cfg: &TrainConfig,
) -> Result<ClusterIndex> {
    let centroids = kcs::compute_identity_centroids(dataset, backbone)?;
    let points: Vec<Vec<f64>> = centroids.into_iter().map(|c| c.centroid).collect();
    let k = cfg.clusters.unwrap_or_else(|| kcs::default_k(points.len()));
    kcs::kmeans(&points, k, 100, cfg.seed ^ 0x4B43_53)
}

/// A single verifier trained directly on the pair task: the conv trunk embeds
/// both images and the head scores the elementwise product of the two feature
/// vectors. Exactly `count_params(arch)` trainable parameters.
pub struct DirectBaseline {
    pub arch: VerifierArchitecture,
    /// Flat trainable parameter vector, same layout as a generated θ.
    pub theta: Tensor,
}

impl DirectBaseline {
    pub fn new(arch: VerifierArchitecture, seed: u64) -> Result<DirectBaseline> {
        arch.validate()?;
        let layout = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = vec![0.0; layout.total_len()];
        for e in layout.entries() {
            let len: usize = e.shape.iter().product();
            let std = if e.name.ends_with(".bias") {
                continue; // biases start at zero
            } else if e.shape.len() == 4 {
                (2.0 / (e.shape[1] * e.shape[2] * e.shape[3]) as f64).sqrt()
            } else {
                (1.0 / e.shape.iter().product::<usize>() as f64).sqrt()
            };
            let dist = Normal::new(0.0, std).unwrap();
            for v in flat[e.offset..e.offset + len].iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(DirectBaseline {
            theta: Tensor::param(flat, &[layout.total_len()]),
            arch,
        })
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn weights(&self) -> Result<WeightSet> {
        WeightSet::new(self.theta.clone(), self.arch.layout())
    }

    /// Conv trunk features `[n, feat]` for a stack of images.
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let ws = self.weights()?;
        let view = |name: &str| {
            ws.tensor(name)
                .ok_or_else(|| Error::Config(format!("layout missing '{name}'")))
        };
        let stem = &self.arch.stem;
        let mut x = images.conv2d_grouped(
            &view("stem.weight")?,
            &view("stem.bias")?,
            stem.stride,
            stem.padding,
            stem.groups,
        )?;
        for (i, blk) in self.arch.blocks.iter().enumerate() {
            x = x
                .conv2d_grouped(
                    &view(&format!("block{i}.weight"))?,
                    &view(&format!("block{i}.bias"))?,
                    blk.stride,
                    blk.padding,
                    blk.groups,
                )?
                .rms_norm_nonparam(1e-5)?
                .gelu();
        }
        x.global_avg_pool()
    }

    /// All-pairs probability matrix: `P[j,k] = σ(w · (g_j ⊙ g_k) + b)`.
    pub fn pair_probability_matrix(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let feat = self.arch.feat_dim();
        let g = self.features(images)?;
        let ws = self.weights()?;
        let w = ws
            .tensor("head.weight")
            .ok_or_else(|| Error::Config("layout missing 'head.weight'".into()))?
            .reshape(&[feat]);
        let b = ws
            .tensor("head.bias")
            .ok_or_else(|| Error::Config("layout missing 'head.bias'".into()))?;
        // w tiled across rows; gradient sums over the copies
        let gw = g.mul(&concat_rows(&vec![w; n])?)?;
        let b_rows = concat_rows(&vec![b; n])?.reshape(&[n]);
        // g broadcast along the network axis: [K, J, feat]
        let tiled = g.reshape(&[n, feat, 1, 1]).tile_channels(n)?.reshape(&[n, n, feat]);
        tiled.per_net_linear(&gw, &b_rows).map(|l| l.sigmoid())
    }

    pub fn score_pair_images(&self, enroll: &Tensor, probe: &Tensor) -> Result<f64> {
        let s = self.arch.input_size;
        if enroll.shape() != [3, s, s] || probe.shape() != [3, s, s] {
            return Err(Error::Dimension {
                op: "baseline_score",
                lhs: enroll.shape().to_vec(),
                rhs: vec![3, s, s],
            });
        }
        let mut data = enroll.to_vec();
        data.extend(probe.to_vec());
        let pair = Tensor::from_vec(data, &[2, 3, s, s]);
        Ok(self.pair_probability_matrix(&pair)?.detach().to_vec()[1])
    }
}

impl crate::config::PairScorer for DirectBaseline {
    fn score_pair(&self, enroll: &Tensor, probe: &Tensor) -> Result<f64> {
        self.score_pair_images(enroll, probe)
    }
}

/// Train the direct baseline with the same batch schedule and weighted BCE as
/// the hypernetwork system. Sampling stays uniform (no embedding space to
/// cluster).
pub fn train_direct_baseline(
    dataset: &LabeledImageSet,
    arch: VerifierArchitecture,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(DirectBaseline, Vec<StepMetrics>)> {
    let baseline = DirectBaseline::new(arch, cfg.seed)?;
    let schedule = Schedule::from_config(cfg);
    if dataset.identity_count() < schedule.final_batch_identities() {
        return Err(Error::Config(format!(
            "dataset has {} identities, final batch needs {}",
            dataset.identity_count(),
            schedule.final_batch_identities()
        )));
    }
    let params = [baseline.theta.clone()];
    let mut opt = SgdMomentum::new(
        SgdConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            warmup_steps: cfg.warmup_steps,
            total_steps: Some(cfg.total_steps),
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A4D_50);
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let start = Instant::now();
        let b = schedule.batch_identities(step);
        let batch = kcs::sample_batch(
            None,
            dataset,
            b,
            cfg.images_per_identity,
            SamplingMode::Uniform,
            &mut rng,
        )?;
        let lambda = lambda_factor(b, cfg.beta)?;
        let images = dataset.batch_tensor(&batch.sample_indices);
        let yhat = baseline.pair_probability_matrix(&images)?;
        let y = target_matrix(&batch.sample_identities);
        let bce = weighted_bce(&yhat, &y, lambda)?;
        let (loss_v, bce_v) = (bce.item(), bce.item());
        bce.backward()?;
        let lr = opt.apply(&params);
        let metrics = StepMetrics {
            step,
            loss: loss_v,
            bce: bce_v,
            norm: 0.0,
            lambda,
            lr,
            batch_size: batch.len(),
            sampling_mode: batch.mode.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        };
        write_record(&mut log, &metrics)?;
        history.push(metrics);
    }
    Ok((baseline, history))
}
