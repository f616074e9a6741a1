//! The generator network: embedding in, flat verifier weight vector out.

use crate::backbone::{Embedding, EmbeddingBackbone};
use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Mapping from a flat parameter vector of length `p` to the named, shaped
/// parameter tensors of the verifier. Offsets are contiguous and cover
/// `[0, p)` exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ThetaLayout {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> ThetaLayout {
        let mut offset = 0;
        let entries = entries
            .into_iter()
            .map(|(name, shape)| {
                let e = LayoutEntry { offset, shape: shape.clone(), name };
                offset += shape.iter().product::<usize>();
                e
            })
            .collect();
        ThetaLayout { entries, total: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.total
    }
}

/// A flat generated θ plus layout views over it. The views alias the flat
/// storage, so a write through the flat tensor shows through every view.
#[derive(Debug, Clone)]
pub struct WeightSet {
    flat: Tensor,
    layout: ThetaLayout,
}

impl WeightSet {
    pub fn new(flat: Tensor, layout: ThetaLayout) -> Result<WeightSet> {
        if flat.rank() != 1 || flat.len() != layout.total_len() {
            return Err(Error::Dimension {
                op: "weight_set",
                lhs: flat.shape().to_vec(),
                rhs: vec![layout.total_len()],
            });
        }
        Ok(WeightSet { flat, layout })
    }

    pub fn flat(&self) -> &Tensor {
        &self.flat
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    /// Shaped view of one named parameter tensor.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let e = self.layout.entry(name)?;
        let len: usize = e.shape.iter().product();
        Some(self.flat.narrow(e.offset, len).reshape(&e.shape))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    /// Hidden widths before the final p-dimensional layer.
    pub hidden: Vec<usize>,
    /// Scale applied to the final layer's weight init so freshly generated
    /// verifiers start near-neutral.
    pub final_init_scale: f64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig { hidden: vec![256, 256, 256], final_init_scale: 0.01 }
    }
}

struct HiddenLayer {
    weight: Tensor,
    bias: Tensor,
    ln_gain: Tensor,
    ln_shift: Tensor,
}

/// `h_gen`: hidden linear layers, each followed by LayerNorm and GeLU, then a
/// final linear layer producing the full flat θ.
pub struct HyperNetwork {
    input_dim: usize,
    hidden: Vec<HiddenLayer>,
    final_weight: Tensor,
    final_bias: Tensor,
    layout: ThetaLayout,
}

const LN_EPS: f64 = 1e-5;

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let std = scale / (rows as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::param((0..rows * cols).map(|_| dist.sample(rng)).collect(), &[rows, cols])
}

impl HyperNetwork {
    pub fn new(
        input_dim: usize,
        layout: ThetaLayout,
        config: &HypernetConfig,
        rng: &mut ChaCha8Rng,
    ) -> HyperNetwork {
        let mut hidden = Vec::new();
        let mut prev = input_dim;
        for &width in &config.hidden {
            hidden.push(HiddenLayer {
                weight: init_matrix(rng, prev, width, 1.0),
                bias: Tensor::param(vec![0.0; width], &[width]),
                ln_gain: Tensor::param(vec![1.0; width], &[width]),
                ln_shift: Tensor::param(vec![0.0; width], &[width]),
            });
            prev = width;
        }
        let p = layout.total_len();
        HyperNetwork {
            input_dim,
            hidden,
            final_weight: init_matrix(rng, prev, p, config.final_init_scale),
            final_bias: Tensor::param(vec![0.0; p], &[p]),
            layout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layout.total_len()
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    /// Trainable parameters with stable names, in a fixed order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), l.weight.clone()));
            out.push((format!("hidden{i}.bias"), l.bias.clone()));
            out.push((format!("hidden{i}.ln_gain"), l.ln_gain.clone()));
            out.push((format!("hidden{i}.ln_shift"), l.ln_shift.clone()));
        }
        out.push(("final.weight".into(), self.final_weight.clone()));
        out.push(("final.bias".into(), self.final_bias.clone()));
        out
    }

    /// Rebuild from named parameter tensors (deserialization path).
    pub fn from_params(
        input_dim: usize,
        layout: ThetaLayout,
        tensors: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<HyperNetwork> {
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, shape, data)| Tensor::param(data.clone(), shape))
                .ok_or_else(|| Error::Config(format!("missing hypernet tensor '{name}'")))
        };
        let n_hidden = tensors
            .iter()
            .filter(|(n, _, _)| n.ends_with(".ln_gain"))
            .count();
        let mut hidden = Vec::new();
        for i in 0..n_hidden {
            hidden.push(HiddenLayer {
                weight: get(&format!("hidden{i}.weight"))?,
                bias: get(&format!("hidden{i}.bias"))?,
                ln_gain: get(&format!("hidden{i}.ln_gain"))?,
                ln_shift: get(&format!("hidden{i}.ln_shift"))?,
            });
        }
        Ok(HyperNetwork {
            input_dim,
            hidden,
            final_weight: get("final.weight")?,
            final_bias: get("final.bias")?,
            layout,
        })
    }

    /// Batched weight generation: one row of θ per embedding row.
    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        if embeddings.rank() != 2 || embeddings.shape()[1] != self.input_dim {
            return Err(Error::Dimension {
                op: "hypernet_forward",
                lhs: embeddings.shape().to_vec(),
                rhs: vec![0, self.input_dim],
            });
        }
        let mut x = embeddings.clone();
        for l in &self.hidden {
            x = x
                .matmul(&l.weight)?
                .add_row_bias(&l.bias)?
                .layer_norm(&l.ln_gain, &l.ln_shift, LN_EPS)?
                .gelu();
        }
        x.matmul(&self.final_weight)?.add_row_bias(&self.final_bias)
    }
}

/// Generated weights for a single enrollment embedding.
pub fn generate_weights(hn: &HyperNetwork, e: &Embedding) -> Result<WeightSet> {
    if e.dim() != hn.input_dim() {
        return Err(Error::Dimension {
            op: "generate_weights",
            lhs: vec![e.dim()],
            rhs: vec![hn.input_dim()],
        });
    }
    let row = Tensor::from_vec(e.as_slice().to_vec(), &[1, e.dim()]);
    let theta = hn.forward(&row)?.reshape(&[hn.output_dim()]);
    WeightSet::new(theta, hn.layout().clone())
}

/// Batched equivalent of [`generate_weights`] over stacked embeddings.
pub fn generate_weights_batch(hn: &HyperNetwork, embeddings: &Tensor) -> Result<Tensor> {
    hn.forward(embeddings)
}

/// Multi-image enrollment: embed every image, average the embeddings,
/// re-normalize to unit norm, then generate.
pub fn enroll_multi(
    hn: &HyperNetwork,
    backbone: &EmbeddingBackbone,
    images: &[Tensor],
) -> Result<WeightSet> {
    if images.is_empty() {
        return Err(Error::Contract("enroll_multi requires at least one image".into()));
    }
    let mut mean = vec![0.0; backbone.embedding_dim()];
    for img in images {
        let e = backbone.embed(img)?;
        for (m, v) in mean.iter_mut().zip(e.as_slice()) {
            *m += v / images.len() as f64;
        }
    }
    let e = Embedding::from_unnormalized(mean)?;
    generate_weights(hn, &e)
}

/// Assemble an embedding matrix `[n, d]` from borrowed embeddings.
pub fn embedding_matrix(embeddings: &[Embedding]) -> Result<Tensor> {
    let rows: Vec<Tensor> = embeddings
        .iter()
        .map(|e| Tensor::from_vec(e.as_slice().to_vec(), &[e.dim()]))
        .collect();
    concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::VerifierArchitecture;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn unit_embedding(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        Embedding::from_unnormalized(v).unwrap()
    }

    fn test_hypernet(seed: u64) -> HyperNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HyperNetwork::new(
            16,
            VerifierArchitecture::desk32().layout(),
            &HypernetConfig { hidden: vec![32, 32, 32], final_init_scale: 0.01 },
            &mut rng,
        )
    }

    #[test]
    fn layout_is_contiguous_and_total() {
        let layout = VerifierArchitecture::desk32().layout();
        let mut expect = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, expect);
            expect += e.shape.iter().product::<usize>();
        }
        assert_eq!(expect, layout.total_len());
        assert_eq!(layout.total_len(), 4065);
    }

    #[test]
    fn weight_set_views_alias_flat() {
        let layout = VerifierArchitecture::desk32().layout();
        let ws = WeightSet::new(Tensor::param(vec![0.0; 4065], &[4065]), layout).unwrap();
        let mut patch = vec![0.0; 4065];
        patch[432] = 7.0; // first entry of stem.bias
        ws.flat().set_data(&patch);
        assert_eq!(ws.tensor("stem.bias").unwrap().to_vec()[0], 7.0);
    }

    #[test]
    fn generate_weights_deterministic_and_sized() {
        let hn = test_hypernet(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = unit_embedding(&mut rng, 16);
        let a = generate_weights(&hn, &e).unwrap();
        let b = generate_weights(&hn, &e).unwrap();
        assert_eq!(a.flat().len(), 4065);
        let (av, bv) = (a.flat().to_vec(), b.flat().to_vec());
        assert!(av.iter().zip(&bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn initial_theta_is_small() {
        let hn = test_hypernet(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let e = unit_embedding(&mut rng, 16);
            let theta = generate_weights(&hn, &e).unwrap();
            let norm: f64 = theta.flat().data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1.0, "initial theta norm {norm}");
        }
    }

    #[test]
    fn batch_rows_match_per_sample_loop() {
        let hn = test_hypernet(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let embs: Vec<Embedding> = (0..4).map(|_| unit_embedding(&mut rng, 16)).collect();
        let batch = generate_weights_batch(&hn, &embedding_matrix(&embs).unwrap()).unwrap();
        let p = hn.output_dim();
        for (i, e) in embs.iter().enumerate() {
            let single = generate_weights(&hn, e).unwrap();
            for (a, b) in batch.to_vec()[i * p..(i + 1) * p].iter().zip(single.flat().to_vec()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batch_of_one_reduces_to_single() {
        let hn = test_hypernet(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = unit_embedding(&mut rng, 16);
        let batch = generate_weights_batch(&hn, &embedding_matrix(&[e.clone()]).unwrap()).unwrap();
        let single = generate_weights(&hn, &e).unwrap();
        assert_eq!(batch.to_vec(), single.flat().to_vec());
    }

    #[test]
    fn permuting_rows_permutes_output() {
        let hn = test_hypernet(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let embs: Vec<Embedding> = (0..3).map(|_| unit_embedding(&mut rng, 16)).collect();
        let fwd = generate_weights_batch(&hn, &embedding_matrix(&embs).unwrap()).unwrap();
        let rev: Vec<Embedding> = embs.iter().rev().cloned().collect();
        let bwd = generate_weights_batch(&hn, &embedding_matrix(&rev).unwrap()).unwrap();
        let p = hn.output_dim();
        for i in 0..3 {
            assert_eq!(
                fwd.to_vec()[i * p..(i + 1) * p],
                bwd.to_vec()[(2 - i) * p..(3 - i) * p]
            );
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let hn = test_hypernet(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = unit_embedding(&mut rng, 8);
        assert!(matches!(
            generate_weights(&hn, &e),
            Err(Error::Dimension { .. })
        ));
    }
}
