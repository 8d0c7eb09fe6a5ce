//! Brute-force reference implementations shared by the oracle tests.
#![allow(dead_code)]

use dyad::nn::layers::{Linear, MultiHeadAttention};
use dyad::nn::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t64(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, ci, it, ih, iw) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let o = |i: usize, k: usize, s: usize, p: usize| (i + 2 * p - k) / s + 1;
    let (ot, oh, ow) = (
        o(it, kt, stride[0], pad[0]),
        o(ih, kh, stride[1], pad[1]),
        o(iw, kw, stride[2], pad[2]),
    );
    let xa = |bb, c, t: isize, h: isize, ww: isize| -> f64 {
        if t < 0 || h < 0 || ww < 0 || t >= it as isize || h >= ih as isize || ww >= iw as isize {
            0.0
        } else {
            x.data()[(((bb * ci + c) * it + t as usize) * ih + h as usize) * iw + ww as usize]
        }
    };
    let mut out = Vec::new();
    for bb in 0..n {
        for c_o in 0..co {
            for t in 0..ot {
                for h in 0..oh {
                    for ww in 0..ow {
                        let mut s = b.data()[c_o];
                        for c in 0..ci {
                            for a in 0..kt {
                                for bh in 0..kh {
                                    for cw in 0..kw {
                                        let wv = w.data()
                                            [(((c_o * ci + c) * kt + a) * kh + bh) * kw + cw];
                                        s += wv
                                            * xa(
                                                bb,
                                                c,
                                                (t * stride[0] + a) as isize - pad[0] as isize,
                                                (h * stride[1] + bh) as isize - pad[1] as isize,
                                                (ww * stride[2] + cw) as isize - pad[2] as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    (vec![n, co, ot, oh, ow], out)
}

/// `x @ w^T + b` over the last axis, one dot product at a time.
pub fn linear_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    x.data()
        .chunks(d_in)
        .flat_map(|row| {
            (0..d_out).map(move |o| {
                b.data()[o]
                    + (0..d_in)
                        .map(|i| row[i] * w.data()[o * d_in + i])
                        .sum::<f64>()
            })
        })
        .collect()
}

/// Brute-force multi-head attention including the four projections.
pub fn mha_oracle(
    store: &ParamStore<f64>,
    m: &MultiHeadAttention,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
) -> Vec<f64> {
    let proj = |l: &Linear, x: &Tensor<f64>| -> Vec<f64> {
        let (w, b) = (store.value(l.weight).data(), store.value(l.bias).data());
        let d = l.d_in;
        x.data()
            .chunks(d)
            .flat_map(|row| {
                (0..l.d_out).map(move |o| b[o] + (0..d).map(|i| w[o * d + i] * row[i]).sum::<f64>())
            })
            .collect()
    };
    let (b, nq, nk, d) = (q.shape()[0], q.shape()[1], k.shape()[1], q.shape()[2]);
    let (qp, kp, vp) = (proj(&m.query, q), proj(&m.key, k), proj(&m.value, v));
    let dk = d / m.heads;
    let mut heads = vec![0.0; b * nq * d];
    for bb in 0..b {
        for h in 0..m.heads {
            for i in 0..nq {
                let logits: Vec<f64> = (0..nk)
                    .map(|j| {
                        (0..dk)
                            .map(|c| {
                                qp[(bb * nq + i) * d + h * dk + c]
                                    * kp[(bb * nk + j) * d + h * dk + c]
                            })
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..nk {
                    let p = (logits[j] - mx).exp() / z;
                    for c in 0..dk {
                        heads[(bb * nq + i) * d + h * dk + c] +=
                            p * vp[(bb * nk + j) * d + h * dk + c];
                    }
                }
            }
        }
    }
    proj(&m.output, &t64(&[b, nq, d], heads))
}
