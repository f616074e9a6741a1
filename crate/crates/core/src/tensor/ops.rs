//! Forward ops and their backward rules.
//!
//! Every op builds its output eagerly and records a closure computing the
//! gradient contribution for each parent. Convolution is the hot path: it is
//! lowered to im2col plus a per-(image, group) matrix product and parallelized
//! across images; each output element is produced by one sequential reduction,
//! so results do not depend on the parallel schedule.

use super::Tensor;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use rayon::prelude::*;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

fn binary_same_shape(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    // (grad_out, a_val, b_val) -> (da, db)
    df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    let (na, nb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        out,
        &a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = pa.data();
            let bv = pb.data();
            let mut da = na.then(|| vec![0.0; av.len()]);
            let mut db = nb.then(|| vec![0.0; bv.len()]);
            for i in 0..g.len() {
                let (ga, gb) = df(g[i], av[i], bv[i]);
                if let Some(d) = da.as_mut() {
                    d[i] = ga;
                }
                if let Some(d) = db.as_mut() {
                    d[i] = gb;
                }
            }
            vec![da, db]
        }),
    ))
}

fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    // (grad_out, x_val) -> dx
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let px = x.clone();
    Tensor::from_op(
        out,
        &x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            let xv = px.data();
            vec![Some(
                g.iter().zip(xv.iter()).map(|(&go, &v)| df(go, v)).collect(),
            )]
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_same_shape("add", self, other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_same_shape("sub", self, other, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_same_shape("mul", self, other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// `a * x + b` elementwise with scalar coefficients.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        unary(self, |v| a * v + b, move |g, _| a * g)
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.affine(a, 0.0)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |g, v| g / v)
    }

    /// Clamp to `[lo, hi]`; gradient is passed through strictly inside the
    /// interval and zero at clamped elements.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |v| v.clamp(lo, hi),
            move |g, v| if v > lo && v < hi { g } else { 0.0 },
        )
    }

    /// Clamp to `[lo, hi]` in the forward pass but let the gradient pass
    /// through unchanged everywhere. A numerical guard (for example before a
    /// log), not a true clamp: saturated elements keep learning instead of
    /// going silent.
    pub fn clamp_passthrough(&self, lo: f64, hi: f64) -> Tensor {
        unary(self, move |v| v.clamp(lo, hi), |g, _| g)
    }

    /// Exact-erf GeLU: `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&self) -> Tensor {
        unary(self, gelu_scalar, |g, v| {
            let phi_cdf = 0.5 * (1.0 + libm::erf(v / SQRT_2));
            let phi_pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
            g * (phi_cdf + v * phi_pdf)
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let saved = out.clone();
        Tensor::from_op(
            out,
            &self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(saved.iter())
                        .map(|(&go, &y)| go * y * (1.0 - y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![s],
            &[],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum of squared entries.
    pub fn sq_sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|v| v * v).sum();
        let px = self.clone();
        Tensor::from_op(
            vec![s],
            &[],
            vec![self.clone()],
            Box::new(move |g| {
                let xv = px.data();
                vec![Some(xv.iter().map(|&v| 2.0 * v * g[0]).collect())]
            }),
        )
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous 2-D view")
}

impl Tensor {
    /// Standard matrix product `[m,k] x [k,q] -> [m,q]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(dim_err("matmul", self.shape(), other.shape()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let q = other.shape()[1];
        let out = view2(&self.data(), m, k).dot(&view2(&other.data(), k, q));
        let (pa, pb) = (self.clone(), other.clone());
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            out.into_raw_vec_and_offset().0,
            &[m, q],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let gv = view2(g, m, q);
                let da = na.then(|| {
                    let bd = pb.data();
                    gv.dot(&view2(&bd, k, q).t()).into_raw_vec_and_offset().0
                });
                let db = nb.then(|| {
                    let ad = pa.data();
                    view2(&ad, m, k).t().dot(&gv).into_raw_vec_and_offset().0
                });
                vec![da, db]
            }),
        ))
    }

    /// Add a bias row-vector `[m]` to every row of `[n,m]`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.rank() != 1 || self.shape()[1] != bias.shape()[0] {
            return Err(dim_err("add_row_bias", self.shape(), bias.shape()));
        }
        let (n, m) = (self.shape()[0], self.shape()[1]);
        let bd = bias.to_vec();
        let out: Vec<f64> = self
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(&bd).map(|(&x, &b)| x + b).collect::<Vec<_>>())
            .collect();
        let (nx, nb) = (self.requires_grad(), bias.requires_grad());
        Ok(Tensor::from_op(
            out,
            &[n, m],
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let dx = nx.then(|| g.to_vec());
                let db = nb.then(|| {
                    let mut acc = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![dx, db]
            }),
        ))
    }

    /// Copy of columns `[c0, c1)` of a `[r, c]` matrix.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(c0 <= c1 && c1 <= c);
        let w = c1 - c0;
        let d = self.data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + c0..i * c + c1]);
        }
        drop(d);
        Tensor::from_op(
            out,
            &[r, w],
            vec![self.clone()],
            Box::new(move |g| {
                let mut full = vec![0.0; r * c];
                for i in 0..r {
                    full[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(full)]
            }),
        )
    }
}

/// Stack equal-length 1-D tensors into a `[n, len]` matrix.
pub fn concat_rows(rows: &[Tensor]) -> Result<Tensor> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Contract("concat_rows on empty list".into()))?;
    let m = first.len();
    let mut data = Vec::with_capacity(rows.len() * m);
    for r in rows {
        if r.len() != m {
            return Err(dim_err("concat_rows", first.shape(), r.shape()));
        }
        data.extend_from_slice(&r.data());
    }
    let parents: Vec<Tensor> = rows.to_vec();
    let flags: Vec<bool> = rows.iter().map(|r| r.requires_grad()).collect();
    Ok(Tensor::from_op(
        data,
        &[rows.len(), m],
        parents,
        Box::new(move |g| {
            flags
                .iter()
                .enumerate()
                .map(|(i, &f)| f.then(|| g[i * m..(i + 1) * m].to_vec()))
                .collect()
        }),
    ))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

impl Tensor {
    /// LayerNorm over the last dimension with population variance, then an
    /// affine gain/shift.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if gain.shape() != [d] || shift.shape() != [d] {
            return Err(dim_err("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.len() / d;
        let gd = gain.to_vec();
        let sd = shift.to_vec();
        let xd = self.data();
        let mut out = vec![0.0; self.len()];
        let mut stats = vec![(0.0, 0.0); rows]; // (mean, inv_sigma)
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_sigma = 1.0 / (var + eps).sqrt();
            stats[r] = (mean, inv_sigma);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_sigma * gd[j] + sd[j];
            }
        }
        drop(xd);
        let px = self.clone();
        let (nx, ng, ns) = (self.requires_grad(), gain.requires_grad(), shift.requires_grad());
        Ok(Tensor::from_op(
            out,
            &self.shape().to_vec(),
            vec![self.clone(), gain.clone(), shift.clone()],
            Box::new(move |g| {
                let xv = px.data();
                let mut dx = nx.then(|| vec![0.0; xv.len()]);
                let mut dgain = ng.then(|| vec![0.0; d]);
                let mut dshift = ns.then(|| vec![0.0; d]);
                for r in 0..rows {
                    let (mean, inv_sigma) = stats[r];
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    // xhat and gain-scaled upstream grad
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_sigma).collect();
                    let gh: Vec<f64> = grow.iter().zip(&gd).map(|(&go, &ga)| go * ga).collect();
                    if let Some(dg) = dgain.as_mut() {
                        for j in 0..d {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if let Some(ds) = dshift.as_mut() {
                        for j in 0..d {
                            ds[j] += grow[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_sigma * (gh[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![dx, dgain, dshift]
            }),
        ))
    }

    /// Parameter-free RMS normalization of each channel map over its spatial
    /// extent: `y = x / sqrt(mean(x^2) + eps)` per `(n, c)` slice of
    /// `[N, C, H, W]`.
    pub fn rms_norm_nonparam(&self, eps: f64) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::Contract(format!(
                "rms_norm_nonparam expects [N,C,H,W], got {:?}",
                self.shape()
            )));
        }
        let m = self.shape()[2] * self.shape()[3];
        let maps = self.len() / m;
        let xd = self.data();
        let mut out = vec![0.0; self.len()];
        let mut inv_r = vec![0.0; maps];
        for c in 0..maps {
            let sl = &xd[c * m..(c + 1) * m];
            let ms = sl.iter().map(|v| v * v).sum::<f64>() / m as f64;
            let r = (ms + eps).sqrt();
            inv_r[c] = 1.0 / r;
            for j in 0..m {
                out[c * m + j] = sl[j] * inv_r[c];
            }
        }
        drop(xd);
        let px = self.clone();
        Ok(Tensor::from_op(
            out,
            &self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let xv = px.data();
                let mut dx = vec![0.0; xv.len()];
                for c in 0..maps {
                    let sl = &xv[c * m..(c + 1) * m];
                    let gl = &g[c * m..(c + 1) * m];
                    let ir = inv_r[c];
                    let dot: f64 = gl.iter().zip(sl).map(|(a, b)| a * b).sum();
                    let coef = dot * ir * ir * ir / m as f64;
                    for j in 0..m {
                        dx[c * m + j] = gl[j] * ir - sl[j] * coef;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Lower one (image, group) slab into a `[cin_g*k*k, cols_total]` column
/// matrix, writing the `h_out*w_out` block starting at column `col_off`.
fn im2col(
    x: &[f64],
    d: &ConvDims,
    img: usize,
    group: usize,
    col: &mut [f64],
    cols_total: usize,
    col_off: usize,
) {
    let (k, s, p) = (d.k, d.stride, d.pad as isize);
    let base_c = group * d.cin_g();
    for ci in 0..d.cin_g() {
        let plane = &x[((img * d.c_in) + base_c + ci) * d.h * d.w..][..d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k) + ky) * k + kx;
                let dst = &mut col[row * cols_total + col_off..][..d.h_out * d.w_out];
                for oy in 0..d.h_out {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        dst[oy * d.w_out..(oy + 1) * d.w_out].fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * s) as isize + kx as isize - p;
                        dst[oy * d.w_out + ox] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add one image's column block back onto the input plane (transpose
/// of im2col with the same `[.., cols_total]` layout).
fn col2im(
    col: &[f64],
    d: &ConvDims,
    img: usize,
    group: usize,
    dx: &mut [f64],
    cols_total: usize,
    col_off: usize,
) {
    let (k, s, p) = (d.k, d.stride, d.pad as isize);
    let base_c = group * d.cin_g();
    for ci in 0..d.cin_g() {
        let plane_off = ((img * d.c_in) + base_c + ci) * d.h * d.w;
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k) + ky) * k + kx;
                let src = &col[row * cols_total + col_off..][..d.h_out * d.w_out];
                for oy in 0..d.h_out {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.w_out {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dx[plane_off + iy as usize * d.w + ix as usize] += src[oy * d.w_out + ox];
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Grouped 2-D cross-correlation with bias.
    ///
    /// `x: [N, C_in, H, W]`, `w: [C_out, C_in/g, k, k]`, `bias: [C_out]`.
    pub fn conv2d_grouped(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(dim_err("conv2d_grouped", self.shape(), weight.shape()));
        }
        let (n, c_in, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (c_out, w_cin, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if weight.shape()[3] != k {
            return Err(dim_err("conv2d_grouped", self.shape(), weight.shape()));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide C_in {c_in} and C_out {c_out}"
            )));
        }
        if w_cin != c_in / groups || bias.shape() != [c_out] {
            return Err(dim_err("conv2d_grouped", self.shape(), weight.shape()));
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Config(format!(
                "invalid conv geometry: input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
            )));
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let dims = ConvDims {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            groups,
            h_out,
            w_out,
        };

        let out = conv_forward(&self.data(), &weight.data(), &bias.data(), &dims);
        let (px, pw) = (self.clone(), weight.clone());
        let (nx, nw, nb) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.requires_grad(),
        );
        Ok(Tensor::from_op(
            out,
            &[n, c_out, h_out, w_out],
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g| conv_backward(g, &px.data(), &pw.data(), &dims, nx, nw, nb)),
        ))
    }

    /// Mean over spatial dims: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::Contract(format!(
                "global_avg_pool expects [N,C,H,W], got {:?}",
                self.shape()
            )));
        }
        let m = self.shape()[2] * self.shape()[3];
        let maps = self.len() / m;
        let out: Vec<f64> = self
            .data()
            .chunks(m)
            .map(|sl| sl.iter().sum::<f64>() / m as f64)
            .collect();
        Ok(Tensor::from_op(
            out,
            &[self.shape()[0], self.shape()[1]],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; maps * m];
                for c in 0..maps {
                    let v = g[c] / m as f64;
                    dx[c * m..(c + 1) * m].fill(v);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Repeat the channel block `reps` times: `[N, C, H, W] -> [N, reps*C, H, W]`.
    /// Used to evaluate a batch of verifier networks on the same images via a
    /// single grouped convolution.
    pub fn tile_channels(&self, reps: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::Contract(format!(
                "tile_channels expects [N,C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let block = c * h * w;
        let xd = self.data();
        let mut out = Vec::with_capacity(n * reps * block);
        for img in 0..n {
            let sl = &xd[img * block..(img + 1) * block];
            for _ in 0..reps {
                out.extend_from_slice(sl);
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            &[n, reps * c, h, w],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; n * block];
                for img in 0..n {
                    for r in 0..reps {
                        let src = &g[(img * reps + r) * block..(img * reps + r + 1) * block];
                        let dst = &mut dx[img * block..(img + 1) * block];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-network linear head: `feat [K, J, C]`, `w [J, C]`, `b [J]` ->
    /// `out [J, K]` with `out[j,k] = dot(feat[k,j,:], w[j,:]) + b[j]`.
    /// Rows index networks, columns index evaluated images.
    pub fn per_net_linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::Contract(format!(
                "per_net_linear expects [K,J,C], got {:?}",
                self.shape()
            )));
        }
        let (kn, j, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if w.shape() != [j, c] || b.shape() != [j] {
            return Err(dim_err("per_net_linear", self.shape(), w.shape()));
        }
        let fd = self.data();
        let wd = w.data();
        let bd = b.data();
        let mut out = vec![0.0; j * kn];
        for net in 0..j {
            let wrow = &wd[net * c..(net + 1) * c];
            for img in 0..kn {
                let frow = &fd[(img * j + net) * c..(img * j + net + 1) * c];
                out[net * kn + img] =
                    frow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>() + bd[net];
            }
        }
        drop((fd, wd, bd));
        let (pf, pw) = (self.clone(), w.clone());
        let (nf, nw, nb) = (self.requires_grad(), w.requires_grad(), b.requires_grad());
        Ok(Tensor::from_op(
            out,
            &[j, kn],
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |g| {
                let fd = pf.data();
                let wd = pw.data();
                let mut df = nf.then(|| vec![0.0; kn * j * c]);
                let mut dw = nw.then(|| vec![0.0; j * c]);
                let mut db = nb.then(|| vec![0.0; j]);
                for net in 0..j {
                    for img in 0..kn {
                        let go = g[net * kn + img];
                        if go == 0.0 {
                            continue;
                        }
                        let off = (img * j + net) * c;
                        if let Some(df) = df.as_mut() {
                            for t in 0..c {
                                df[off + t] += go * wd[net * c + t];
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            for t in 0..c {
                                dw[net * c + t] += go * fd[off + t];
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            db[net] += go;
                        }
                    }
                }
                vec![df, dw, db]
            }),
        ))
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let area = d.h_out * d.w_out;
    let col_rows = d.cin_g() * d.k * d.k;
    let cols = d.n * area;
    let out_img = d.c_out * area;
    // One [col_rows, n*area] column matrix per group: the matmuls stay large
    // even when the group count is huge (the batched many-nets case).
    let prods: Vec<Vec<f64>> = (0..d.groups)
        .into_par_iter()
        .map(|gi| {
            let mut col = vec![0.0; col_rows * cols];
            for img in 0..d.n {
                im2col(x, d, img, gi, &mut col, cols, img * area);
            }
            let wg = view2(
                &w[gi * d.cout_g() * col_rows..(gi + 1) * d.cout_g() * col_rows],
                d.cout_g(),
                col_rows,
            );
            wg.dot(&view2(&col, col_rows, cols)).into_raw_vec_and_offset().0
        })
        .collect();
    let mut out = vec![0.0; d.n * out_img];
    for (gi, pv) in prods.iter().enumerate() {
        for oc in 0..d.cout_g() {
            let c_abs = gi * d.cout_g() + oc;
            let bias = b[c_abs];
            for img in 0..d.n {
                let src = &pv[oc * cols + img * area..][..area];
                let dst = &mut out[img * out_img + c_abs * area..][..area];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = v + bias;
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    d: &ConvDims,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Vec<Option<Vec<f64>>> {
    let area = d.h_out * d.w_out;
    let col_rows = d.cin_g() * d.k * d.k;
    let cols = d.n * area;
    let out_img = d.c_out * area;
    let in_img = d.c_in * d.h * d.w;

    // Same group-major batching as the forward pass: per group, gather the
    // output gradient into a [cout_g, n*area] matrix and run two large
    // matmuls. Weight gradients are per-group disjoint, so no cross-thread
    // reduction order is involved.
    let partials: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..d.groups)
        .into_par_iter()
        .map(|gi| {
            let mut gg = vec![0.0; d.cout_g() * cols];
            for img in 0..d.n {
                for oc in 0..d.cout_g() {
                    let c_abs = gi * d.cout_g() + oc;
                    gg[oc * cols + img * area..][..area]
                        .copy_from_slice(&g[img * out_img + c_abs * area..][..area]);
                }
            }
            let gview = view2(&gg, d.cout_g(), cols);
            let dw_g = need_w.then(|| {
                let mut col = vec![0.0; col_rows * cols];
                for img in 0..d.n {
                    im2col(x, d, img, gi, &mut col, cols, img * area);
                }
                gview
                    .dot(&view2(&col, col_rows, cols).t())
                    .into_raw_vec_and_offset()
                    .0
            });
            let dcol_g = need_x.then(|| {
                let wg = view2(
                    &w[gi * d.cout_g() * col_rows..(gi + 1) * d.cout_g() * col_rows],
                    d.cout_g(),
                    col_rows,
                );
                wg.t().dot(&gview).into_raw_vec_and_offset().0
            });
            (dcol_g, dw_g)
        })
        .collect();

    let dx = need_x.then(|| {
        // groups cover disjoint input channels, so the scatter is a plain
        // per-group col2im into the shared buffer
        let mut dx = vec![0.0; d.n * in_img];
        for (gi, (dcol_g, _)) in partials.iter().enumerate() {
            let dcol = dcol_g.as_ref().unwrap();
            for img in 0..d.n {
                col2im(dcol, d, img, gi, &mut dx, cols, img * area);
            }
        }
        dx
    });
    let dw = need_w.then(|| {
        let mut dw = vec![0.0; d.c_out * col_rows];
        for (gi, (_, dw_g)) in partials.iter().enumerate() {
            dw[gi * d.cout_g() * col_rows..(gi + 1) * d.cout_g() * col_rows]
                .copy_from_slice(dw_g.as_ref().unwrap());
        }
        dw
    });
    let db = need_b.then(|| {
        let mut db = vec![0.0; d.c_out];
        for img in 0..d.n {
            let gimg = &g[img * out_img..(img + 1) * out_img];
            for c in 0..d.c_out {
                db[c] += gimg[c * area..(c + 1) * area].iter().sum::<f64>();
            }
        }
        db
    });
    vec![dx, dw, db]
}

// ---------------------------------------------------------------------------
// Classification loss (backbone training)
// ---------------------------------------------------------------------------

impl Tensor {
    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                self.shape(),
                labels.len()
            )));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range {k}")));
        }
        let xd = self.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= (probs[i * k + labels[i]]).max(1e-300).ln();
        }
        loss /= n as f64;
        drop(xd);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            &[],
            vec![self.clone()],
            Box::new(move |g| {
                let scale = g[0] / n as f64;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= 1.0;
                }
                for v in dx.iter_mut() {
                    *v *= scale;
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod shape_tests {
    #[test]
    fn numel_matches() {
        assert_eq!(crate::tensor::numel(&[2, 3, 4]), 24);
        assert_eq!(crate::tensor::numel(&[]), 1);
    }
}
