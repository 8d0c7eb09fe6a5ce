//! Forward and backward kernels for the differentiable op set.
//!
//! Kernels work on raw tensors; [`crate::nn::graph::Graph`] wires them into
//! the tape. All reductions run in a fixed order so results are bit-stable
//! across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Stride and zero-padding for a 3D convolution, ordered (t, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeometry { stride, padding }
    }

    /// Output extents for the given input and kernel extents.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        const AXES: [&str; 3] = ["t", "h", "w"];
        let mut out = [0; 3];
        for i in 0..3 {
            if self.stride[i] == 0 {
                return Err(Error::shape(
                    "conv3d",
                    format!("zero stride on axis {}", AXES[i]),
                ));
            }
            let padded = input[i] + 2 * self.padding[i];
            if padded < kernel[i] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "axis {}: kernel {} exceeds padded input {}",
                        AXES[i], kernel[i], padded
                    ),
                ));
            }
            out[i] = (padded - kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }
}

fn conv_dims<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    geom: &ConvGeometry,
) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("input must be rank 5, got {xs:?}"),
        ));
    }
    if ws.len() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("weight must be rank 5, got {ws:?}"),
        ));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            "conv3d",
            format!(
                "channel dimension: input has {} channels, weight expects {}",
                xs[1], ws[1]
            ),
        ));
    }
    if b.shape() != [ws[0]] {
        return Err(Error::shape(
            "conv3d",
            format!("bias dimension: expected [{}], got {:?}", ws[0], b.shape()),
        ));
    }
    let input = [xs[2], xs[3], xs[4]];
    let kernel = [ws[2], ws[3], ws[4]];
    let output = geom.output_extents(input, kernel)?;
    Ok(ConvDims {
        batch: xs[0],
        c_in: xs[1],
        c_out: ws[0],
        input,
        kernel,
        output,
    })
}

/// Unfolds one batch item into a `[c_in*kt*kh*kw, t'*h'*w']` matrix.
fn im2col<F: Scalar>(x: &[F], d: &ConvDims, geom: &ConvGeometry, cols: &mut [F]) {
    let [it, ih, iw] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot, oh, ow] = d.output;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let p = d.positions();
    let mut row = 0;
    for c in 0..d.c_in {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= it as isize {
                            dst[idx..idx + oh * ow].fill(F::zero());
                            idx += oh * ow;
                            continue;
                        }
                        let plane = &xc[ti as usize * ih * iw..(ti as usize + 1) * ih * iw];
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= ih as isize {
                                dst[idx..idx + ow].fill(F::zero());
                                idx += ow;
                                continue;
                            }
                            let line = &plane[hi as usize * iw..(hi as usize + 1) * iw];
                            for w in 0..ow {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                dst[idx] = if wi < 0 || wi >= iw as isize {
                                    F::zero()
                                } else {
                                    line[wi as usize]
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<F: Scalar>(cols: &[F], d: &ConvDims, geom: &ConvGeometry, dx: &mut [F]) {
    let [it, ih, iw] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot, oh, ow] = d.output;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let p = d.positions();
    let mut row = 0;
    for c in 0..d.c_in {
        let xc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for t in 0..ot {
                        let ti = (t * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= it as isize {
                            idx += oh * ow;
                            continue;
                        }
                        let base_t = ti as usize * ih * iw;
                        for h in 0..oh {
                            let hi = (h * sh + dh) as isize - ph as isize;
                            if hi < 0 || hi >= ih as isize {
                                idx += ow;
                                continue;
                            }
                            let base = base_t + hi as usize * iw;
                            for w in 0..ow {
                                let wi = (w * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < iw as isize {
                                    xc[base + wi as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    geom: &ConvGeometry,
) -> Result<Tensor<F>> {
    let d = conv_dims(x, w, b, geom)?;
    let k = d.rows();
    let p = d.positions();
    let in_item = d.c_in * d.input_volume();
    let out_item = d.c_out * p;
    let mut out = vec![F::zero(); d.batch * out_item];
    let mut cols = vec![F::zero(); k * p];
    for n in 0..d.batch {
        im2col(
            &x.data()[n * in_item..(n + 1) * in_item],
            &d,
            geom,
            &mut cols,
        );
        let y = &mut out[n * out_item..(n + 1) * out_item];
        for (o, row) in y.chunks_mut(p).enumerate() {
            row.fill(b.data()[o]);
        }
        F::gemm(
            d.c_out,
            k,
            p,
            F::one(),
            w.data(),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            F::one(),
            y,
            (p as isize, 1),
        );
    }
    Tensor::new(
        vec![d.batch, d.c_out, d.output[0], d.output[1], d.output[2]],
        out,
    )
}

/// Gradients of [`conv3d`]. The input gradient is skipped when `need_input`
/// is false (e.g. raw clips, which are constants).
pub fn conv3d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    geom: &ConvGeometry,
    dy: &Tensor<F>,
    need_input: bool,
) -> Result<(Option<Tensor<F>>, Tensor<F>, Tensor<F>)> {
    let d = conv_dims(x, w, b, geom)?;
    let k = d.rows();
    let p = d.positions();
    let in_item = d.c_in * d.input_volume();
    let out_item = d.c_out * p;
    let mut dw = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); d.c_out];
    let mut dx = if need_input {
        Some(vec![F::zero(); x.len()])
    } else {
        None
    };
    let mut cols = vec![F::zero(); k * p];
    let mut dcols = vec![F::zero(); if need_input { k * p } else { 0 }];
    for n in 0..d.batch {
        let g = &dy.data()[n * out_item..(n + 1) * out_item];
        for (o, row) in g.chunks(p).enumerate() {
            db[o] += row.iter().copied().sum::<F>();
        }
        im2col(
            &x.data()[n * in_item..(n + 1) * in_item],
            &d,
            geom,
            &mut cols,
        );
        // dW[o, r] += sum_p dy[o, p] * cols[r, p]
        F::gemm(
            d.c_out,
            p,
            k,
            F::one(),
            g,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            F::one(),
            &mut dw,
            (k as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols[r, p] = sum_o w[o, r] * dy[o, p]
            F::gemm(
                k,
                d.c_out,
                p,
                F::one(),
                w.data(),
                (1, k as isize),
                g,
                (p as isize, 1),
                F::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            col2im(&dcols, &d, geom, &mut dx[n * in_item..(n + 1) * in_item]);
        }
    }
    let dx = match dx {
        Some(v) => Some(Tensor::new(x.shape().to_vec(), v)?),
        None => None,
    };
    Ok((
        dx,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

/// Mean over every axis from `from_axis` onward.
fn mean_trailing<F: Scalar>(x: &Tensor<F>, from_axis: usize) -> Tensor<F> {
    let keep: Vec<usize> = x.shape()[..from_axis].to_vec();
    let span: usize = x.shape()[from_axis..].iter().product();
    let inv = F::one() / F::from_f64(span as f64);
    let data = x
        .data()
        .chunks(span)
        .map(|c| c.iter().copied().sum::<F>() * inv)
        .collect();
    Tensor::new(keep, data).expect("pooled shape is consistent")
}

fn spread_trailing<F: Scalar>(
    dy: &Tensor<F>,
    input_shape: &[usize],
    from_axis: usize,
) -> Tensor<F> {
    let span: usize = input_shape[from_axis..].iter().product();
    let inv = F::one() / F::from_f64(span as f64);
    let mut data = Vec::with_capacity(dy.len() * span);
    for &g in dy.data() {
        data.extend(std::iter::repeat(g * inv).take(span));
    }
    Tensor::new(input_shape.to_vec(), data).expect("spread shape is consistent")
}

/// `[b, c, t, h, w] -> [b, c]`
pub fn avg_pool3d_global<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 5 {
        return Err(Error::shape(
            "avg_pool3d_global",
            format!("input must be rank 5, got {:?}", x.shape()),
        ));
    }
    Ok(mean_trailing(x, 2))
}

pub fn avg_pool3d_global_backward<F: Scalar>(dy: &Tensor<F>, input_shape: &[usize]) -> Tensor<F> {
    spread_trailing(dy, input_shape, 2)
}

/// `[b, c, t, h, w] -> [b, c, t]`
pub fn avg_pool2d_spatial<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 5 {
        return Err(Error::shape(
            "avg_pool2d_spatial",
            format!("input must be rank 5, got {:?}", x.shape()),
        ));
    }
    Ok(mean_trailing(x, 3))
}

pub fn avg_pool2d_spatial_backward<F: Scalar>(dy: &Tensor<F>, input_shape: &[usize]) -> Tensor<F> {
    spread_trailing(dy, input_shape, 3)
}

fn linear_dims<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("weight must be rank 2, got {:?}", w.shape()),
        ));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let last = *x.shape().last().expect("tensors have rank >= 1");
    if last != d_in {
        return Err(Error::shape(
            "linear",
            format!("trailing dimension {last} does not match weight input width {d_in}"),
        ));
    }
    if b.shape() != [d_out] {
        return Err(Error::shape(
            "linear",
            format!("bias must be [{d_out}], got {:?}", b.shape()),
        ));
    }
    Ok((x.len() / d_in, d_in, d_out))
}

/// Affine map on the trailing axis: `y = x W^T + b`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (rows, d_in, d_out) = linear_dims(x, w, b)?;
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    F::gemm(
        rows,
        d_in,
        d_out,
        F::one(),
        x.data(),
        (d_in as isize, 1),
        w.data(),
        (1, d_in as isize),
        F::one(),
        &mut out,
        (d_out as isize, 1),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    Tensor::new(shape, out)
}

pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (rows, d_in, d_out) = linear_dims(x, w, b)?;
    let mut dx = vec![F::zero(); x.len()];
    F::gemm(
        rows,
        d_out,
        d_in,
        F::one(),
        dy.data(),
        (d_out as isize, 1),
        w.data(),
        (d_in as isize, 1),
        F::zero(),
        &mut dx,
        (d_in as isize, 1),
    );
    let mut dw = vec![F::zero(); w.len()];
    F::gemm(
        d_out,
        rows,
        d_in,
        F::one(),
        dy.data(),
        (1, d_out as isize),
        x.data(),
        (d_in as isize, 1),
        F::zero(),
        &mut dw,
        (d_in as isize, 1),
    );
    let mut db = vec![F::zero(); d_out];
    for row in dy.data().chunks(d_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

/// Normalised activations and reciprocal standard deviations kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma/beta must be [{d}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let eps = F::from_f64(eps);
    let inv_d = F::one() / F::from_f64(d as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / d);
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd.push(r);
        for (i, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * gamma.data()[i] + beta.data()[i]);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { xhat, rstd },
    ))
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = gamma.len();
    let inv_d = F::one() / F::from_f64(d as f64);
    let mut dx = Vec::with_capacity(dy.len());
    let mut dgamma = vec![F::zero(); d];
    let mut dbeta = vec![F::zero(); d];
    for ((g_row, h_row), &r) in dy
        .data()
        .chunks(d)
        .zip(cache.xhat.chunks(d))
        .zip(&cache.rstd)
    {
        let mut mean_dh = F::zero();
        let mut mean_dh_h = F::zero();
        for i in 0..d {
            let dh = g_row[i] * gamma.data()[i];
            mean_dh += dh;
            mean_dh_h += dh * h_row[i];
            dgamma[i] += g_row[i] * h_row[i];
            dbeta[i] += g_row[i];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for i in 0..d {
            let dh = g_row[i] * gamma.data()[i];
            dx.push(r * (dh - mean_dh - h_row[i] * mean_dh_h));
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).expect("same shape as dy"),
        Tensor::new(vec![d], dgamma).expect("d"),
        Tensor::new(vec![d], dbeta).expect("d"),
    )
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)`.
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::one() + (x * F::from_f64(FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::one() + (x * F::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = F::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Softmax along the trailing axis with max subtraction.
pub fn softmax_rows<F: Scalar>(data: &[F], k: usize, out: &mut [F]) {
    for (row, o) in data.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - m).exp();
            sum += *dst;
        }
        let inv = F::one() / sum;
        o.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Given softmax output `p` and upstream `dp`, writes `p * (dp - <dp, p>)`.
pub fn softmax_rows_backward<F: Scalar>(p: &[F], dp: &[F], k: usize, out: &mut [F]) {
    for ((pr, gr), o) in p.chunks(k).zip(dp.chunks(k)).zip(out.chunks_mut(k)) {
        let dot: F = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..k {
            o[i] = pr[i] * (gr[i] - dot);
        }
    }
}

pub struct AttentionDims {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub fn attention_dims<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
) -> Result<AttentionDims> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::shape(
            "attention",
            format!("q/k/v must be rank 3, got {qs:?} {ks:?} {vs:?}"),
        ));
    }
    if ks != vs {
        return Err(Error::shape(
            "attention",
            format!("key {ks:?} and value {vs:?} differ"),
        ));
    }
    if qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape(
            "attention",
            format!("query {qs:?} incompatible with key {ks:?}"),
        ));
    }
    if heads == 0 || qs[2] % heads != 0 {
        return Err(Error::Config(format!(
            "model width {} is not divisible by {heads} heads",
            qs[2]
        )));
    }
    Ok(AttentionDims {
        batch: qs[0],
        nq: qs[1],
        nk: ks[1],
        dim: qs[2],
        heads,
    })
}

/// Scaled dot-product attention over head-split subspaces of `q`, `k`, `v`
/// (already projected). Returns the concatenated head outputs and the
/// attention probabilities `[b, heads, nq, nk]`.
pub fn attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
) -> Result<(Tensor<F>, Vec<F>)> {
    let dims = attention_dims(q, k, v, heads)?;
    let AttentionDims {
        batch, nq, nk, dim, ..
    } = dims;
    let dk = dims.head_dim();
    let scale = F::one() / F::from_f64(dk as f64).sqrt();
    let mut probs = vec![F::zero(); batch * heads * nq * nk];
    let mut out = vec![F::zero(); batch * nq * dim];
    let mut logits = vec![F::zero(); nq * nk];
    for b in 0..batch {
        let qb = &q.data()[b * nq * dim..];
        let kb = &k.data()[b * nk * dim..];
        let vb = &v.data()[b * nk * dim..];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..nq {
                for j in 0..nk {
                    let mut s = F::zero();
                    for c in 0..dk {
                        s += qb[i * dim + off + c] * kb[j * dim + off + c];
                    }
                    logits[i * nk + j] = s * scale;
                }
            }
            let p = &mut probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            softmax_rows(&logits, nk, p);
            for i in 0..nq {
                let o = &mut out[(b * nq + i) * dim + off..(b * nq + i) * dim + off + dk];
                for j in 0..nk {
                    let pij = p[i * nk + j];
                    for c in 0..dk {
                        o[c] += pij * vb[j * dim + off + c];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![batch, nq, dim], out)?, probs))
}

pub fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    probs: &[F],
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let dims = attention_dims(q, k, v, heads)?;
    let AttentionDims {
        batch, nq, nk, dim, ..
    } = dims;
    let dk = dims.head_dim();
    let scale = F::one() / F::from_f64(dk as f64).sqrt();
    let mut dq = vec![F::zero(); q.len()];
    let mut dkey = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    let mut dp = vec![F::zero(); nq * nk];
    let mut ds = vec![F::zero(); nq * nk];
    for b in 0..batch {
        let qb = &q.data()[b * nq * dim..(b + 1) * nq * dim];
        let kb = &k.data()[b * nk * dim..(b + 1) * nk * dim];
        let vb = &v.data()[b * nk * dim..(b + 1) * nk * dim];
        let gb = &dy.data()[b * nq * dim..(b + 1) * nq * dim];
        for h in 0..heads {
            let off = h * dk;
            let p = &probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            for i in 0..nq {
                for j in 0..nk {
                    let mut s = F::zero();
                    for c in 0..dk {
                        s += gb[i * dim + off + c] * vb[j * dim + off + c];
                    }
                    dp[i * nk + j] = s;
                    let pij = p[i * nk + j];
                    for c in 0..dk {
                        dv[(b * nk + j) * dim + off + c] += pij * gb[i * dim + off + c];
                    }
                }
            }
            softmax_rows_backward(p, &dp, nk, &mut ds);
            for i in 0..nq {
                for j in 0..nk {
                    let g = ds[i * nk + j] * scale;
                    for c in 0..dk {
                        dq[(b * nq + i) * dim + off + c] += g * kb[j * dim + off + c];
                        dkey[(b * nk + j) * dim + off + c] += g * qb[i * dim + off + c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dkey)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
/// Returns the loss and the row probabilities.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Vec<F>)> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits must be [b, k], got {:?}", logits.shape()),
        ));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape(
            "cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = vec![F::zero(); b * k];
    softmax_rows(logits.data(), k, &mut probs);
    let mut loss = F::zero();
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        loss += lse - row[l];
    }
    Ok((loss / F::from_f64(b as f64), probs))
}

pub fn cross_entropy_backward<F: Scalar>(probs: &[F], labels: &[usize], upstream: F) -> Vec<F> {
    let b = labels.len();
    let k = probs.len() / b;
    let scale = upstream / F::from_f64(b as f64);
    let mut g = probs.to_vec();
    for (row, &l) in g.chunks_mut(k).zip(labels) {
        row[l] -= F::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    g
}
