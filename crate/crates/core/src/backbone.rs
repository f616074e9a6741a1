//! Frozen embedding model: image in, unit-norm embedding out.
//!
//! The reference backbone is a small stride-2 conv stack trained in-repo with
//! a classification head on identity labels; the head is discarded and the
//! remaining parameters frozen. Larger pretrained backbones load from file
//! through the same container format.

use crate::error::{Error, Result};
use crate::optim::{SgdConfig, SgdMomentum};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Unit-norm feature vector. Construction enforces `‖e‖₂ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    data: Vec<f64>,
}

impl Embedding {
    /// Normalize a raw vector to unit norm.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Embedding> {
        if v.is_empty() {
            return Err(Error::Contract("empty embedding".into()));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Contract(format!(
                "cannot normalize embedding with norm {norm}"
            )));
        }
        Ok(Embedding { data: v.into_iter().map(|x| x / norm).collect() })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Cosine similarity; for unit vectors this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of the stride-2 conv blocks.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64, 128],
            embedding_dim: 128,
            input_size: 32,
            epochs: 10,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 1e-5,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

/// Frozen convolutional embedder `h_bb`. Parameters never require gradients,
/// so no autodiff graph is recorded through it and concurrent `embed` calls
/// are safe.
#[derive(Debug, Clone)]
pub struct EmbeddingBackbone {
    convs: Vec<ConvLayer>,
    proj_weight: Tensor,
    proj_bias: Tensor,
    input_size: usize,
    embedding_dim: usize,
    /// "reference-trained" or "loaded-from-file".
    pub provenance: String,
}

impl EmbeddingBackbone {
    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn check_frozen(t: &Tensor) -> Tensor {
        debug_assert!(!t.requires_grad());
        t.clone()
    }

    /// Conv trunk plus pooled features: `[n, 3, s, s] -> [n, c_last]`.
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for l in &self.convs {
            x = x.conv2d_grouped(&l.weight, &l.bias, 2, 1, 1)?.gelu();
        }
        x.global_avg_pool()
    }

    /// Batched embedding: `[n, 3, s, s] -> [n, d]` with unit-norm rows.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        if images.rank() != 4
            || images.shape()[1] != 3
            || images.shape()[2] != self.input_size
            || images.shape()[3] != self.input_size
        {
            return Err(Error::Dimension {
                op: "embed",
                lhs: images.shape().to_vec(),
                rhs: vec![0, 3, self.input_size, self.input_size],
            });
        }
        let raw = self
            .features(images)?
            .matmul(&self.proj_weight)?
            .add_row_bias(&self.proj_bias)?;
        let n = raw.shape()[0];
        let d = self.embedding_dim;
        let mut out = raw.to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Tensor::from_vec(out, &[n, d]))
    }

    /// Embed one `[3, s, s]` image.
    pub fn embed(&self, image: &Tensor) -> Result<Embedding> {
        if image.shape() != [3, self.input_size, self.input_size] {
            return Err(Error::Dimension {
                op: "embed",
                lhs: image.shape().to_vec(),
                rhs: vec![3, self.input_size, self.input_size],
            });
        }
        let batch = image.reshape(&[1, 3, self.input_size, self.input_size]);
        let rows = self.embed_batch(&batch)?;
        Embedding::from_unnormalized(rows.to_vec())
    }

    /// Named parameter tensors in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), l.weight.shape().to_vec(), l.weight.to_vec()));
            out.push((format!("conv{i}.bias"), l.bias.shape().to_vec(), l.bias.to_vec()));
        }
        out.push(("proj.weight".into(), self.proj_weight.shape().to_vec(), self.proj_weight.to_vec()));
        out.push(("proj.bias".into(), self.proj_bias.shape().to_vec(), self.proj_bias.to_vec()));
        out
    }

    /// Rebuild a frozen backbone from named tensors (deserialization path).
    pub fn from_named_tensors(
        input_size: usize,
        embedding_dim: usize,
        provenance: impl Into<String>,
        tensors: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<EmbeddingBackbone> {
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, shape, data)| Tensor::from_vec(data.clone(), shape))
                .ok_or_else(|| Error::Config(format!("missing backbone tensor '{name}'")))
        };
        let n_conv = tensors
            .iter()
            .filter(|(n, _, _)| n.starts_with("conv") && n.ends_with(".weight"))
            .count();
        if n_conv == 0 {
            return Err(Error::Config("backbone has no conv layers".into()));
        }
        let mut convs = Vec::new();
        for i in 0..n_conv {
            convs.push(ConvLayer {
                weight: get(&format!("conv{i}.weight"))?,
                bias: get(&format!("conv{i}.bias"))?,
            });
        }
        let proj_weight = get("proj.weight")?;
        let proj_bias = get("proj.bias")?;
        if proj_weight.shape()[1] != embedding_dim || proj_bias.shape() != [embedding_dim] {
            return Err(Error::Config(format!(
                "backbone projection shape {:?} does not match embedding dim {embedding_dim}",
                proj_weight.shape()
            )));
        }
        Ok(EmbeddingBackbone {
            convs,
            proj_weight,
            proj_bias,
            input_size,
            embedding_dim,
            provenance: provenance.into(),
        })
    }
}

fn he_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::param(
        (0..c_out * c_in * k * k).map(|_| dist.sample(rng)).collect(),
        &[c_out, c_in, k, k],
    )
}

fn he_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::param((0..rows * cols).map(|_| dist.sample(rng)).collect(), &[rows, cols])
}

/// Train the reference backbone by identity classification, discard the head,
/// freeze the rest. Returns the frozen backbone and its final training
/// accuracy.
pub fn train_reference_backbone(
    dataset: &crate::data::LabeledImageSet,
    config: &BackboneConfig,
) -> Result<(EmbeddingBackbone, f64)> {
    let n_id = dataset.identity_count();
    if n_id < 2 {
        return Err(Error::Config("backbone training needs at least 2 identities".into()));
    }
    for id in 0..n_id {
        if dataset.indices_of(id).len() < 2 {
            return Err(Error::Config(format!(
                "identity {id} has fewer than 2 images"
            )));
        }
    }
    if dataset.image_size() != config.input_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0}, config expects {1}x{1}",
            dataset.image_size(),
            config.input_size
        )));
    }
    let mut spatial = config.input_size;
    for _ in &config.channels {
        spatial = spatial.div_ceil(2);
        if spatial == 0 {
            return Err(Error::Config("too many conv blocks for the input size".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut convs = Vec::new();
    let mut prev = 3;
    for &c in &config.channels {
        convs.push(ConvLayer {
            weight: he_conv(&mut rng, c, prev, 3),
            bias: Tensor::param(vec![0.0; c], &[c]),
        });
        prev = c;
    }
    let proj_weight = he_linear(&mut rng, prev, config.embedding_dim);
    let proj_bias = Tensor::param(vec![0.0; config.embedding_dim], &[config.embedding_dim]);
    let head_weight = he_linear(&mut rng, config.embedding_dim, n_id);
    let head_bias = Tensor::param(vec![0.0; n_id], &[n_id]);

    let mut params: Vec<Tensor> = Vec::new();
    for l in &convs {
        params.push(l.weight.clone());
        params.push(l.bias.clone());
    }
    params.extend([
        proj_weight.clone(),
        proj_bias.clone(),
        head_weight.clone(),
        head_bias.clone(),
    ]);

    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total = config.epochs * batches_per_epoch;
    let mut opt = SgdMomentum::new(
        SgdConfig {
            lr: config.lr,
            momentum: 0.9,
            weight_decay: config.weight_decay,
            warmup_steps: (total / 20).max(1),
            total_steps: Some(total),
        },
        &params,
    );

    let logits_of = |indices: &[usize]| -> Result<Tensor> {
        let mut x = dataset.batch_tensor(indices);
        for l in &convs {
            x = x.conv2d_grouped(&l.weight, &l.bias, 2, 1, 1)?.gelu();
        }
        x.global_avg_pool()?
            .matmul(&proj_weight)?
            .add_row_bias(&proj_bias)?
            .matmul(&head_weight)?
            .add_row_bias(&head_bias)
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
            logits_of(chunk)?.softmax_cross_entropy(&labels)?.backward()?;
            opt.apply(&params);
        }
    }

    // final training accuracy with the head still attached
    let mut correct = 0usize;
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(config.batch_size) {
        let logits = logits_of(chunk)?.detach();
        let v = logits.to_vec();
        for (row, &idx) in chunk.iter().enumerate() {
            let sl = &v[row * n_id..(row + 1) * n_id];
            let pred = sl
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == dataset.labels()[idx] {
                correct += 1;
            }
        }
    }
    let accuracy = correct as f64 / dataset.len() as f64;

    let freeze = |t: &Tensor| Tensor::from_vec(t.to_vec(), t.shape());
    let backbone = EmbeddingBackbone {
        convs: convs
            .iter()
            .map(|l| ConvLayer { weight: freeze(&l.weight), bias: freeze(&l.bias) })
            .collect(),
        proj_weight: freeze(&proj_weight),
        proj_bias: freeze(&proj_bias),
        input_size: config.input_size,
        embedding_dim: config.embedding_dim,
        provenance: "reference-trained".into(),
    };
    backbone.convs.iter().for_each(|l| {
        EmbeddingBackbone::check_frozen(&l.weight);
        EmbeddingBackbone::check_frozen(&l.bias);
    });
    Ok((backbone, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_identity_dataset, SynthConfig};

    fn small_backbone() -> EmbeddingBackbone {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let convs = vec![
            ConvLayer { weight: he_conv(&mut rng, 8, 3, 3), bias: Tensor::param(vec![0.1; 8], &[8]) },
            ConvLayer { weight: he_conv(&mut rng, 16, 8, 3), bias: Tensor::param(vec![0.1; 16], &[16]) },
        ];
        let freeze = |t: &Tensor| Tensor::from_vec(t.to_vec(), t.shape());
        EmbeddingBackbone {
            convs: convs
                .iter()
                .map(|l| ConvLayer { weight: freeze(&l.weight), bias: freeze(&l.bias) })
                .collect(),
            proj_weight: freeze(&he_linear(&mut rng, 16, 32)),
            proj_bias: Tensor::from_vec(vec![0.0; 32], &[32]),
            input_size: 16,
            embedding_dim: 32,
            provenance: "reference-trained".into(),
        }
    }

    fn random_image(seed: u64, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            (0..3 * s * s).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect(),
            &[3, s, s],
        )
    }

    #[test]
    fn embed_is_deterministic_and_unit_norm() {
        let bb = small_backbone();
        let img = random_image(2, 16);
        let a = bb.embed(&img).unwrap();
        let b = bb.embed(&img).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!((a.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let bb = small_backbone();
        assert!(matches!(
            bb.embed(&random_image(3, 8)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn embed_records_no_gradient_graph() {
        let bb = small_backbone();
        let e = bb.embed(&random_image(4, 16)).unwrap();
        // frozen parameters: nothing in the pipeline requires grad
        assert!(!bb.proj_weight.requires_grad());
        assert!(!bb.convs[0].weight.requires_grad());
        assert_eq!(e.dim(), 32);
    }

    #[test]
    fn embed_batch_matches_single() {
        let bb = small_backbone();
        let imgs = [random_image(5, 16), random_image(6, 16)];
        let mut stacked = imgs[0].to_vec();
        stacked.extend(imgs[1].to_vec());
        let rows = bb.embed_batch(&Tensor::from_vec(stacked, &[2, 3, 16, 16])).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let single = bb.embed(img).unwrap();
            for (a, b) in rows.to_vec()[i * 32..(i + 1) * 32].iter().zip(single.as_slice()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn named_tensor_round_trip_is_bit_identical() {
        let bb = small_backbone();
        let named = bb.named_tensors();
        let back = EmbeddingBackbone::from_named_tensors(16, 32, "loaded-from-file", &named).unwrap();
        let img = random_image(7, 16);
        let a = bb.embed(&img).unwrap();
        let b = back.embed(&img).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn embedding_normalization_contract() {
        let e = Embedding::from_unnormalized(vec![3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-12);
        assert!(Embedding::from_unnormalized(vec![0.0, 0.0]).is_err());
        assert!(Embedding::from_unnormalized(vec![]).is_err());
    }

    fn tiny_train_cfg() -> (SynthConfig, BackboneConfig) {
        let data_cfg = SynthConfig {
            identities: 12,
            samples_per_identity: 6,
            image_size: 16,
            ..SynthConfig::default()
        };
        let bb_cfg = BackboneConfig {
            channels: vec![8, 16, 32],
            embedding_dim: 32,
            input_size: 16,
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            ..BackboneConfig::default()
        };
        (data_cfg, bb_cfg)
    }

    #[test]
    fn reference_training_reaches_high_accuracy() {
        let (data_cfg, bb_cfg) = tiny_train_cfg();
        let ds = synth_identity_dataset(&data_cfg).unwrap();
        let (_, acc) = train_reference_backbone(&ds, &bb_cfg).unwrap();
        assert!(acc >= 0.9, "train accuracy {acc}");
    }

    #[test]
    fn reference_training_is_deterministic() {
        let (data_cfg, bb_cfg) = tiny_train_cfg();
        let ds = synth_identity_dataset(&data_cfg).unwrap();
        let (a, _) = train_reference_backbone(&ds, &bb_cfg).unwrap();
        let (b, _) = train_reference_backbone(&ds, &bb_cfg).unwrap();
        for ((_, _, x), (_, _, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn intra_identity_similarity_exceeds_inter() {
        let (data_cfg, bb_cfg) = tiny_train_cfg();
        let ds = synth_identity_dataset(&data_cfg).unwrap();
        let (bb, _) = train_reference_backbone(&ds, &bb_cfg).unwrap();
        let embs: Vec<Embedding> =
            (0..ds.len()).map(|i| bb.embed(&ds.image_tensor(i)).unwrap()).collect();
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let c = embs[i].cosine(&embs[j]);
                if ds.labels()[i] == ds.labels()[j] {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
        assert!(intra.0 / intra.1 as f64 > inter.0 / inter.1 as f64);
    }

    #[test]
    fn too_few_identities_rejected() {
        let cfg = SynthConfig {
            identities: 2,
            samples_per_identity: 3,
            image_size: 16,
            ..SynthConfig::default()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        // keep only identity 0's images: construction below has 1 identity
        let images: Vec<Vec<f64>> = ds.indices_of(0).iter().map(|&i| ds.pixels(i).to_vec()).collect();
        let labels = vec![0; images.len()];
        let one = crate::data::LabeledImageSet::new(
            images,
            labels,
            vec!["only".into()],
            16,
            "train",
            "test",
        )
        .unwrap();
        let (_, bb_cfg) = tiny_train_cfg();
        assert!(matches!(
            train_reference_backbone(&one, &bb_cfg),
            Err(Error::Config(_))
        ));
    }
}
