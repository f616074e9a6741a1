use super::*;
use crate::gradcheck::{finite_diff, max_rel_error};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

#[test]
fn matmul_identity() {
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
    let a = Tensor::from_vec((0..9).map(|v| v as f64 * 0.7 - 2.0).collect(), &[3, 3]);
    let prod = eye.matmul(&a).unwrap();
    assert_eq!(prod.to_vec(), a.to_vec());
}

#[test]
fn matmul_hand() {
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]);
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, 5 * 7);
    let b = randn(&mut rng, 7 * 3);
    let got = Tensor::from_vec(a.clone(), &[5, 7])
        .matmul(&Tensor::from_vec(b.clone(), &[7, 3]))
        .unwrap();
    // independent triple-loop oracle
    let mut want = vec![0.0; 5 * 3];
    for i in 0..5 {
        for j in 0..3 {
            for k in 0..7 {
                want[i * 3 + j] += a[i * 7 + k] * b[k * 3 + j];
            }
        }
    }
    for (g, w) in got.to_vec().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

/// Direct 6-nested-loop grouped convolution, used as the oracle.
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (n, c_in, h, wd): (usize, usize, usize, usize),
    (c_out, k, s, p, g): (usize, usize, usize, usize, usize),
) -> Vec<f64> {
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let h_out = (h + 2 * p - k) / s + 1;
    let w_out = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * c_out * h_out * w_out];
    for img in 0..n {
        for oc in 0..c_out {
            let gi = oc / cout_g;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = b[oc];
                    for ic in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((img * c_in + gi * cin_g + ic) * h + iy as usize) * wd
                                    + ix as usize;
                                let wi = ((oc * cin_g + ic) * k + ky) * k + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((img * c_out + oc) * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_depthwise_1x1() {
    let c = 3;
    let x = Tensor::from_vec((0..2 * c * 4 * 4).map(|v| v as f64 * 0.1).collect(), &[2, c, 4, 4]);
    let w = Tensor::ones(&[c, 1, 1, 1]);
    let b = Tensor::zeros(&[c]);
    let y = x.conv2d_grouped(&w, &b, 1, 0, c).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv_ones_sum() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let b = Tensor::zeros(&[1]);
    let y = x.conv2d_grouped(&w, &b, 1, 0, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c_in, h, w) = (2, 4, 6, 5);
    let (c_out, k, s, p, g) = (6, 3, 2, 1, 2);
    let xd = randn(&mut rng, n * c_in * h * w);
    let wd = randn(&mut rng, c_out * (c_in / g) * k * k);
    let bd = randn(&mut rng, c_out);
    let y = Tensor::from_vec(xd.clone(), &[n, c_in, h, w])
        .conv2d_grouped(
            &Tensor::from_vec(wd.clone(), &[c_out, c_in / g, k, k]),
            &Tensor::from_vec(bd.clone(), &[c_out]),
            s,
            p,
            g,
        )
        .unwrap();
    let want = conv_oracle(&xd, &wd, &bd, (n, c_in, h, w), (c_out, k, s, p, g));
    let got = y.to_vec();
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn conv_rejects_bad_groups() {
    let x = Tensor::zeros(&[1, 4, 4, 4]);
    let w = Tensor::zeros(&[6, 1, 3, 3]);
    let b = Tensor::zeros(&[6]);
    // groups=3 does not divide c_in=4
    assert!(matches!(
        x.conv2d_grouped(&w, &b, 1, 1, 3),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn gelu_values() {
    let y = Tensor::from_vec(vec![0.0, 10.0, 1.0], &[3]).gelu();
    let v = y.to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() <= 1e-6);
    assert!((v[2] - 0.841345).abs() <= 1e-6);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let x = Tensor::from_vec(vec![5.0; 4], &[1, 4]);
    let y = x
        .layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5)
        .unwrap();
    for v in y.to_vec() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let x = Tensor::from_vec(randn(&mut rng, 2 * d), &[2, d]);
    let y = x
        .layer_norm(&Tensor::ones(&[d]), &Tensor::zeros(&[d]), 0.0)
        .unwrap();
    for row in y.to_vec().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn layer_norm_hand_row() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]);
    let y = x
        .layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0)
        .unwrap();
    let want = [-1.224745, 0.0, 1.224745];
    for (a, b) in y.to_vec().iter().zip(want) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn rms_norm_ones_fixed_point() {
    let x = Tensor::ones(&[1, 2, 3, 3]);
    let y = x.rms_norm_nonparam(0.0).unwrap();
    for v in y.to_vec() {
        assert!((v - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn rms_norm_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xd = randn(&mut rng, 8);
    let a = Tensor::from_vec(xd.clone(), &[1, 2, 2, 2]).rms_norm_nonparam(0.0).unwrap();
    let b = Tensor::from_vec(xd.iter().map(|v| v * 4.2).collect(), &[1, 2, 2, 2])
        .rms_norm_nonparam(0.0)
        .unwrap();
    for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn rms_norm_hand_values() {
    let x = Tensor::from_vec(vec![3.0, 4.0], &[1, 1, 1, 2]);
    let y = x.rms_norm_nonparam(0.0).unwrap();
    let v = y.to_vec();
    assert!((v[0] - 0.848528).abs() <= 1e-6);
    assert!((v[1] - 1.131371).abs() <= 1e-6);
}

#[test]
fn sigmoid_values_and_symmetry() {
    let x = Tensor::from_vec(vec![0.0, 2.0, -1.3, 0.4], &[4]);
    let y = x.sigmoid().to_vec();
    assert_eq!(y[0], 0.5);
    assert!((y[1] - 0.880797).abs() <= 1e-6);
    let neg = x.scale(-1.0).sigmoid().to_vec();
    for (a, b) in y.iter().zip(neg) {
        assert!((a - (1.0 - b)).abs() <= 1e-12);
    }
}

#[test]
fn backward_sum_is_ones() {
    let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]);
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_dot_is_2x() {
    let xd = vec![0.5, -1.5, 2.0];
    let x = Tensor::param(xd.clone(), &[3]);
    x.sq_sum().backward().unwrap();
    let g = x.grad().unwrap();
    for (gi, xi) in g.iter().zip(&xd) {
        assert!((gi - 2.0 * xi).abs() <= 1e-12);
    }
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]);
    let y = x.affine(2.0, 0.0);
    assert!(matches!(y.backward(), Err(crate::Error::Contract(_))));
}

#[test]
fn no_grad_without_requires_grad() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]);
    let loss = x.sq_sum();
    loss.backward().unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn backward_linearity() {
    let xd = vec![0.3, -0.7, 1.1, 0.2];
    let (a, b) = (1.7, -0.6);

    let grad_of = |weight_a: f64, weight_b: f64| {
        let x = Tensor::param(xd.clone(), &[4]);
        let l1 = x.gelu().sum_all();
        let l2 = x.sigmoid().sq_sum();
        let total = l1.scale(weight_a).add(&l2.scale(weight_b)).unwrap();
        total.backward().unwrap();
        x.grad().unwrap()
    };

    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    let gc = grad_of(a, b);
    for i in 0..4 {
        assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-10);
    }
}

#[test]
fn forward_deterministic_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let xd = randn(&mut rng, 2 * 4 * 6 * 6);
    let wd = randn(&mut rng, 8 * 2 * 3 * 3);
    let bd = randn(&mut rng, 8);
    let run = || {
        Tensor::from_vec(xd.clone(), &[2, 4, 6, 6])
            .conv2d_grouped(
                &Tensor::from_vec(wd.clone(), &[8, 2, 3, 3]),
                &Tensor::from_vec(bd.clone(), &[8]),
                1,
                1,
                2,
            )
            .unwrap()
            .gelu()
            .rms_norm_nonparam(1e-5)
            .unwrap()
            .to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn views_share_storage() {
    let flat = Tensor::param(vec![0.0; 6], &[6]);
    let view = flat.narrow(2, 2).reshape(&[2, 1]);
    flat.set_data(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(view.to_vec(), vec![3.0, 4.0]);
}

/// Per-op finite-difference check; the full composite check lives in the
/// acceptance suite.
#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..5 {
        let _ = seed;
        // gelu -> layer_norm -> sigmoid -> sum pipeline over a small matrix
        let d = 6;
        let xd = randn(&mut rng, 3 * d);
        let gd = randn(&mut rng, d);
        let sd = randn(&mut rng, d);

        let f = |v: &[f64]| {
            let x = Tensor::from_vec(v.to_vec(), &[3, d]);
            x.gelu()
                .layer_norm(
                    &Tensor::from_vec(gd.clone(), &[d]),
                    &Tensor::from_vec(sd.clone(), &[d]),
                    1e-5,
                )
                .unwrap()
                .sigmoid()
                .sq_sum()
                .item()
        };
        let numeric = finite_diff(f, &xd, 1e-5);

        let x = Tensor::param(xd.clone(), &[3, d]);
        x.gelu()
            .layer_norm(
                &Tensor::from_vec(gd.clone(), &[d]),
                &Tensor::from_vec(sd.clone(), &[d]),
                1e-5,
            )
            .unwrap()
            .sigmoid()
            .sq_sum()
            .backward()
            .unwrap();
        let analytic = x.grad().unwrap();
        assert!(max_rel_error(&analytic, &numeric) <= 1e-4);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, c_in, h, w) = (1, 4, 5, 5);
    let (c_out, k, s, p, g) = (4, 3, 2, 1, 2);
    let xd = randn(&mut rng, n * c_in * h * w);
    let wd = randn(&mut rng, c_out * (c_in / g) * k * k);
    let bd = randn(&mut rng, c_out);

    let loss = |x: &[f64], wv: &[f64], bv: &[f64]| {
        Tensor::from_vec(x.to_vec(), &[n, c_in, h, w])
            .conv2d_grouped(
                &Tensor::from_vec(wv.to_vec(), &[c_out, c_in / g, k, k]),
                &Tensor::from_vec(bv.to_vec(), &[c_out]),
                s,
                p,
                g,
            )
            .unwrap()
            .gelu()
            .sq_sum()
            .item()
    };

    let x = Tensor::param(xd.clone(), &[n, c_in, h, w]);
    let wt = Tensor::param(wd.clone(), &[c_out, c_in / g, k, k]);
    let bt = Tensor::param(bd.clone(), &[c_out]);
    x.conv2d_grouped(&wt, &bt, s, p, g)
        .unwrap()
        .gelu()
        .sq_sum()
        .backward()
        .unwrap();

    let nx = finite_diff(|v| loss(v, &wd, &bd), &xd, 1e-5);
    let nw = finite_diff(|v| loss(&xd, v, &bd), &wd, 1e-5);
    let nb = finite_diff(|v| loss(&xd, &wd, v), &bd, 1e-5);
    assert!(max_rel_error(&x.grad().unwrap(), &nx) <= 1e-4);
    assert!(max_rel_error(&wt.grad().unwrap(), &nw) <= 1e-4);
    assert!(max_rel_error(&bt.grad().unwrap(), &nb) <= 1e-4);
}
