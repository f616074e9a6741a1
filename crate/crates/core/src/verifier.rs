//! The personal verifier `f`.
//!
//! The architecture is defined functionally: it owns no weights. Every
//! forward pass takes a flat generated parameter vector, addressed through a
//! [`ThetaLayout`](crate::hypernet::ThetaLayout). Batched evaluation runs a
//! whole batch of generated networks as one grouped convolution by tiling the
//! input channels per network, so the hot path contains no per-network loop.

use crate::error::{Error, Result};
use crate::hypernet::{ThetaLayout, WeightSet};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn weight_count(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.c_out
    }

    pub fn out_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// FLOPs for one image: 2 per multiply-accumulate plus 1 per output
    /// element for the bias add.
    pub fn flops(&self, input_hw: (usize, usize)) -> usize {
        let (h, w) = self.out_hw(input_hw);
        let macs_per_out = (self.c_in / self.groups) * self.kernel * self.kernel;
        self.c_out * h * w * (2 * macs_per_out + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide channels {}->{}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        Ok(())
    }
}

/// Stem conv, grouped blocks (each followed by parameter-free RMS
/// normalization and GeLU), global average pooling, and a linear head to one
/// sigmoid output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierArchitecture {
    pub id: String,
    /// Input spatial size; images are `3 x size x size`.
    pub input_size: usize,
    pub stem: ConvSpec,
    pub blocks: Vec<ConvSpec>,
}

impl VerifierArchitecture {
    /// Desk-scale default: 4065 parameters at 32x32 input.
    pub fn desk32() -> Self {
        VerifierArchitecture {
            id: "desk32-v1".into(),
            input_size: 32,
            stem: ConvSpec { c_in: 3, c_out: 16, kernel: 3, stride: 2, padding: 1, groups: 1 },
            blocks: vec![
                ConvSpec { c_in: 16, c_out: 32, kernel: 3, stride: 2, padding: 1, groups: 4 },
                ConvSpec { c_in: 32, c_out: 64, kernel: 3, stride: 2, padding: 1, groups: 8 },
            ],
        }
    }

    /// Config demonstrating the edge budget is attainable at 112x112 input:
    /// ~23k parameters, single-digit MFLOPs.
    pub fn paper_scale() -> Self {
        VerifierArchitecture {
            id: "paper112-v1".into(),
            input_size: 112,
            stem: ConvSpec { c_in: 3, c_out: 16, kernel: 3, stride: 2, padding: 1, groups: 1 },
            blocks: vec![
                ConvSpec { c_in: 16, c_out: 32, kernel: 3, stride: 2, padding: 1, groups: 4 },
                ConvSpec { c_in: 32, c_out: 64, kernel: 3, stride: 2, padding: 1, groups: 8 },
                ConvSpec { c_in: 64, c_out: 128, kernel: 3, stride: 2, padding: 1, groups: 8 },
                ConvSpec { c_in: 128, c_out: 128, kernel: 3, stride: 1, padding: 1, groups: 16 },
            ],
        }
    }

    /// Wider desk-scale variant (ablation axis only, not a tuned result).
    pub fn desk32_larger() -> Self {
        VerifierArchitecture {
            id: "desk32-large-v1".into(),
            input_size: 32,
            stem: ConvSpec { c_in: 3, c_out: 24, kernel: 3, stride: 2, padding: 1, groups: 1 },
            blocks: vec![
                ConvSpec { c_in: 24, c_out: 48, kernel: 3, stride: 2, padding: 1, groups: 4 },
                ConvSpec { c_in: 48, c_out: 96, kernel: 3, stride: 2, padding: 1, groups: 8 },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        // accept both the short names and the versioned ids found in files
        match name {
            "desk32" | "desk32-v1" => Ok(Self::desk32()),
            "paper" | "paper112-v1" => Ok(Self::paper_scale()),
            "larger" | "desk32-large-v1" => Ok(Self::desk32_larger()),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }

    /// Feature width entering the linear head.
    pub fn feat_dim(&self) -> usize {
        self.blocks.last().map_or(self.stem.c_out, |b| b.c_out)
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        if self.stem.c_in != 3 {
            return Err(Error::Config("stem must take 3 input channels".into()));
        }
        let mut c = self.stem.c_out;
        for b in &self.blocks {
            b.validate()?;
            if b.c_in != c {
                return Err(Error::Config(format!(
                    "block input channels {} do not chain from {}",
                    b.c_in, c
                )));
            }
            c = b.c_out;
        }
        Ok(())
    }

    fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        std::iter::once(&self.stem).chain(self.blocks.iter())
    }

    /// Exact trainable-parameter count of one generated verifier.
    pub fn count_params(&self) -> usize {
        let convs: usize = self.convs().map(ConvSpec::param_count).sum();
        convs + self.feat_dim() + 1
    }

    /// FLOPs for one forward pass (2 per multiply-accumulate); convolution
    /// and linear stages only, normalization and activations excluded.
    pub fn count_flops(&self) -> usize {
        let mut hw = (self.input_size, self.input_size);
        let mut total = 0;
        for c in self.convs() {
            total += c.flops(hw);
            hw = c.out_hw(hw);
        }
        total + linear_flops(self.feat_dim(), 1)
    }

    pub fn layout(&self) -> ThetaLayout {
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        entries.push((
            "stem.weight".into(),
            vec![
                self.stem.c_out,
                self.stem.c_in / self.stem.groups,
                self.stem.kernel,
                self.stem.kernel,
            ],
        ));
        entries.push(("stem.bias".into(), vec![self.stem.c_out]));
        for (i, b) in self.blocks.iter().enumerate() {
            entries.push((
                format!("block{i}.weight"),
                vec![b.c_out, b.c_in / b.groups, b.kernel, b.kernel],
            ));
            entries.push((format!("block{i}.bias"), vec![b.c_out]));
        }
        entries.push(("head.weight".into(), vec![1, self.feat_dim()]));
        entries.push(("head.bias".into(), vec![1]));
        ThetaLayout::new(entries)
    }

    /// Ŷ[j, k] = probability that verifier j accepts image k.
    ///
    /// `images: [nB, 3, s, s]`, `thetas: [nB, p]`. The whole batch of
    /// networks runs as one grouped convolution stack; differentiable through
    /// both the image-path activations and the generated weights.
    pub fn batched_predict(&self, images: &Tensor, thetas: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let s = self.input_size;
        if images.rank() != 4 || images.shape()[1] != 3 || images.shape()[2] != s || images.shape()[3] != s {
            return Err(Error::Dimension {
                op: "batched_predict",
                lhs: images.shape().to_vec(),
                rhs: vec![0, 3, s, s],
            });
        }
        let n_images = images.shape()[0];
        let p = self.count_params();
        if thetas.rank() != 2 || thetas.shape()[0] != n_images || thetas.shape()[1] != p {
            return Err(Error::Dimension {
                op: "batched_predict",
                lhs: thetas.shape().to_vec(),
                rhs: vec![n_images, p],
            });
        }
        self.batched_logits(images, thetas).map(|l| l.sigmoid())
    }

    /// Batched forward up to the pre-sigmoid logits `[J_nets, K_images]`.
    fn batched_logits(&self, images: &Tensor, thetas: &Tensor) -> Result<Tensor> {
        let nets = thetas.shape()[0];
        let layout = self.layout();
        let mut offset = 0;
        let mut take = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            let t = thetas.slice_cols(offset, offset + len);
            offset += len;
            t
        };

        // stem (no normalization or activation between stem and first block)
        let w = take(&[
            self.stem.c_out,
            self.stem.c_in / self.stem.groups,
            self.stem.kernel,
            self.stem.kernel,
        ])
        .reshape(&stacked_conv_shape(&self.stem, nets));
        let b = take(&[self.stem.c_out]).reshape(&[nets * self.stem.c_out]);
        // an ungrouped stem reads the same 3 input channels for every net, so
        // the batch of stems is one dense conv over the untiled images
        let mut x = if self.stem.groups == 1 {
            images.conv2d_grouped(&w, &b, self.stem.stride, self.stem.padding, 1)?
        } else {
            images.tile_channels(nets)?.conv2d_grouped(
                &w,
                &b,
                self.stem.stride,
                self.stem.padding,
                nets * self.stem.groups,
            )?
        };

        for blk in self.blocks.iter() {
            let w = take(&[blk.c_out, blk.c_in / blk.groups, blk.kernel, blk.kernel])
                .reshape(&stacked_conv_shape(blk, nets));
            let b = take(&[blk.c_out]).reshape(&[nets * blk.c_out]);
            x = x.conv2d_grouped(&w, &b, blk.stride, blk.padding, nets * blk.groups)?;
            x = x.rms_norm_nonparam(RMS_EPS)?.gelu();
        }

        let feat = self.feat_dim();
        let pooled = x.global_avg_pool()?; // [K, nets*feat]
        let k_images = pooled.shape()[0];
        let pooled = pooled.reshape(&[k_images, nets, feat]);
        let head_w = take(&[feat]).reshape(&[nets, feat]);
        let head_b = take(&[1]).reshape(&[nets]);
        debug_assert_eq!(offset, layout.total_len());
        pooled.per_net_linear(&head_w, &head_b)
    }

    /// Probability that `image` belongs to the identity `theta` was generated
    /// for. Decision is `probability >= tau` (default 0.5) at the call site.
    pub fn verify(&self, image: &Tensor, theta: &WeightSet) -> Result<f64> {
        if image.shape() != [3, self.input_size, self.input_size] {
            return Err(Error::Dimension {
                op: "verify",
                lhs: image.shape().to_vec(),
                rhs: vec![3, self.input_size, self.input_size],
            });
        }
        if theta.layout() != &self.layout() {
            return Err(Error::Config(format!(
                "weight set layout does not match architecture '{}'",
                self.id
            )));
        }
        let img = image.detach().reshape(&[1, 3, self.input_size, self.input_size]);
        let th = theta.flat().detach().reshape(&[1, theta.flat().len()]);
        Ok(self.batched_predict(&img, &th)?.item())
    }
}

const RMS_EPS: f64 = 1e-5;

fn stacked_conv_shape(c: &ConvSpec, nets: usize) -> [usize; 4] {
    [nets * c.c_out, c.c_in / c.groups, c.kernel, c.kernel]
}

/// FLOPs of a dense linear layer `m -> n`.
pub fn linear_flops(m: usize, n: usize) -> usize {
    2 * m * n + n
}

/// Parameters of a dense linear layer `m -> n`.
pub fn linear_params(m: usize, n: usize) -> usize {
    m * n + n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::WeightSet;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| (rng.random::<f64>() - 0.5) * scale).collect()
    }

    #[test]
    fn desk32_param_count() {
        let arch = VerifierArchitecture::desk32();
        // hand sum: 448 + 1184 + 2368 + 65
        assert_eq!(arch.count_params(), 4065);
        assert_eq!(arch.layout().total_len(), 4065);
    }

    #[test]
    fn linear_closed_forms() {
        assert_eq!(linear_params(64, 1), 65);
        assert_eq!(linear_flops(3, 4), 2 * 12 + 4);
    }

    #[test]
    fn doubling_widths_quadruples_conv_params() {
        let arch = VerifierArchitecture::desk32();
        let mut wide = arch.clone();
        wide.stem.c_out *= 2;
        for b in wide.blocks.iter_mut() {
            b.c_in *= 2;
            b.c_out *= 2;
        }
        // exact closed-form values: block weights quadruple, the stem only
        // doubles (its input stays 3 channels), biases double
        let conv_params = |a: &VerifierArchitecture| -> usize {
            a.convs().map(ConvSpec::param_count).sum()
        };
        let weights = |a: &VerifierArchitecture| -> usize {
            a.convs().map(ConvSpec::weight_count).sum()
        };
        let biases = |a: &VerifierArchitecture| -> usize {
            a.convs().map(|c| c.c_out).sum()
        };
        let expect_weights = 4 * weights(&arch) - 2 * arch.stem.weight_count();
        assert_eq!(weights(&wide), expect_weights);
        assert_eq!(biases(&wide), 2 * biases(&arch));
        assert_eq!(conv_params(&wide), expect_weights + 2 * biases(&arch));
    }

    #[test]
    fn conv_flops_hand_count() {
        // 3x3 conv, 1->1 channels, 4x4 output, groups 1: 2*9*16 + 16 = 304
        let c = ConvSpec { c_in: 1, c_out: 1, kernel: 3, stride: 1, padding: 0, groups: 1 };
        assert_eq!(c.flops((6, 6)), 304);
    }

    #[test]
    fn grouped_conv_flops_divide_by_g() {
        let dense = ConvSpec { c_in: 8, c_out: 16, kernel: 3, stride: 1, padding: 1, groups: 1 };
        let grouped = ConvSpec { groups: 4, ..dense };
        let hw = (10, 10);
        let bias = dense.c_out * 10 * 10; // bias FLOPs identical in both
        assert_eq!((grouped.flops(hw) - bias) * 4, dense.flops(hw) - bias);
    }

    #[test]
    fn paper_scale_budget() {
        let arch = VerifierArchitecture::paper_scale();
        let p = arch.count_params();
        let f = arch.count_flops();
        assert!((15_000..=35_000).contains(&p), "params {p}");
        assert!((3_000_000..=8_000_000).contains(&f), "flops {f}");
    }

    #[test]
    fn zero_theta_gives_half() {
        let arch = VerifierArchitecture::desk32();
        let theta = WeightSet::new(Tensor::zeros(&[4065]), arch.layout()).unwrap();
        let img = Tensor::from_vec(vec![0.3; 3 * 32 * 32], &[3, 32, 32]);
        assert_eq!(arch.verify(&img, &theta).unwrap(), 0.5);
    }

    #[test]
    fn verify_output_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = VerifierArchitecture::desk32();
        let theta =
            WeightSet::new(Tensor::from_vec(randv(&mut rng, 4065, 0.5), &[4065]), arch.layout())
                .unwrap();
        let img = Tensor::from_vec(randv(&mut rng, 3 * 32 * 32, 2.0), &[3, 32, 32]);
        let p = arch.verify(&img, &theta).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn batched_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = VerifierArchitecture::desk32();
        let p = arch.count_params();
        for &nb in &[1usize, 2, 4] {
            let imgs = randv(&mut rng, nb * 3 * 32 * 32, 2.0);
            let thetas = randv(&mut rng, nb * p, 0.3);
            let images = Tensor::from_vec(imgs.clone(), &[nb, 3, 32, 32]);
            let th = Tensor::from_vec(thetas.clone(), &[nb, p]);
            let yhat = arch.batched_predict(&images, &th).unwrap();
            assert_eq!(yhat.shape(), &[nb, nb]);
            let got = yhat.to_vec();
            // explicit double loop oracle
            for j in 0..nb {
                let ws = WeightSet::new(
                    Tensor::from_vec(thetas[j * p..(j + 1) * p].to_vec(), &[p]),
                    arch.layout(),
                )
                .unwrap();
                for k in 0..nb {
                    let img = Tensor::from_vec(
                        imgs[k * 3 * 32 * 32..(k + 1) * 3 * 32 * 32].to_vec(),
                        &[3, 32, 32],
                    );
                    let want = arch.verify(&img, &ws).unwrap();
                    assert!(
                        (got[j * nb + k] - want).abs() <= 1e-6,
                        "nb={nb} j={j} k={k}"
                    );
                }
            }
        }
    }

    #[test]
    fn identical_theta_rows_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = VerifierArchitecture::desk32();
        let p = arch.count_params();
        let nb = 3;
        let row = randv(&mut rng, p, 0.3);
        let thetas: Vec<f64> = row.iter().cycle().take(nb * p).cloned().collect();
        let images = Tensor::from_vec(randv(&mut rng, nb * 3 * 32 * 32, 2.0), &[nb, 3, 32, 32]);
        let yhat = arch
            .batched_predict(&images, &Tensor::from_vec(thetas, &[nb, p]))
            .unwrap()
            .to_vec();
        for j in 1..nb {
            for k in 0..nb {
                assert_eq!(yhat[k], yhat[j * nb + k]);
            }
        }
    }

    #[test]
    fn theta_row_count_mismatch_is_dimension_error() {
        let arch = VerifierArchitecture::desk32();
        let images = Tensor::zeros(&[2, 3, 32, 32]);
        let thetas = Tensor::zeros(&[3, arch.count_params()]);
        assert!(matches!(
            arch.batched_predict(&images, &thetas),
            Err(Error::Dimension { .. })
        ));
    }
}
