//! Substrate ops against brute-force oracles, plus gradient checks.

mod common;

use common::{conv_oracle, linear_oracle, max_rel, mha_oracle, random, t64};
use dyad::nn::gradcheck::{check_inputs, check_op, GradcheckOptions, OP_NAMES};
use dyad::nn::kernels;
use dyad::nn::layers::MultiHeadAttention;
use dyad::nn::{ConvGeometry, Graph, Init, ParamStore, Sgd, Tensor};
use dyad::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv3d_trivial_cases() {
    let g = ConvGeometry::new([1, 1, 1], [0, 0, 0]);
    let y = kernels::conv3d(
        &t64(&[1, 1, 1, 1, 1], vec![2.0]),
        &t64(&[1, 1, 1, 1, 1], vec![3.0]),
        &t64(&[1], vec![0.0]),
        &g,
    )
    .unwrap();
    assert_eq!(y.data(), &[6.0]);
    let ones = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
    let y = kernels::conv3d(&ones, &ones, &t64(&[1], vec![0.0]), &g).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.data(), &[8.0]);
}

#[test]
fn conv3d_matches_loop_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let ci = rng.gen_range(1..4);
        let co = rng.gen_range(1..4);
        let k = [
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        ];
        let stride = [
            rng.gen_range(1..3),
            rng.gen_range(1..3),
            rng.gen_range(1..3),
        ];
        let pad = [
            rng.gen_range(0..2),
            rng.gen_range(0..2),
            rng.gen_range(0..2),
        ];
        let ext = [
            rng.gen_range(k[0]..6),
            rng.gen_range(k[1]..6),
            rng.gen_range(k[2]..6),
        ];
        let n = rng.gen_range(1..3);
        let x = random(&mut rng, &[n, ci, ext[0], ext[1], ext[2]]);
        let w = random(&mut rng, &[co, ci, k[0], k[1], k[2]]);
        let b = random(&mut rng, &[co]);
        let y = kernels::conv3d(&x, &w, &b, &ConvGeometry::new(stride, pad)).unwrap();
        let (shape, oracle) = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(y.shape(), shape.as_slice(), "case {case}");
        let err = max_rel(y.data(), &oracle);
        assert!(err < 1e-6, "case {case}: rel err {err}");
        // single precision within the acceptance tolerance
        let y32 = kernels::conv3d(
            &x.cast::<f32>(),
            &w.cast(),
            &b.cast(),
            &ConvGeometry::new(stride, pad),
        )
        .unwrap();
        assert!(
            max_rel(&y32.to_f64_vec(), &oracle) < 1e-5,
            "case {case} (f32)"
        );
    }
}

#[test]
fn conv3d_shape_errors_name_the_dimension() {
    let g = ConvGeometry::new([1, 1, 1], [0, 0, 0]);
    let x = Tensor::<f64>::zeros(&[1, 2, 3, 3, 3]);
    let err = kernels::conv3d(
        &x,
        &Tensor::zeros(&[1, 3, 1, 1, 1]),
        &Tensor::zeros(&[1]),
        &g,
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Shape { .. }) && err.to_string().contains("channel"),
        "{err}"
    );
    let err = kernels::conv3d(
        &x,
        &Tensor::zeros(&[1, 2, 4, 1, 1]),
        &Tensor::zeros(&[1]),
        &g,
    )
    .unwrap_err();
    assert!(err.to_string().contains("axis t"), "{err}");
}

#[test]
fn pooling_examples_and_oracles() {
    let c = Tensor::<f64>::full(&[2, 3, 2, 3, 4], 5.0);
    assert!(kernels::avg_pool3d_global(&c)
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 5.0).abs() < 1e-12));
    let seq = t64(&[1, 1, 2, 2, 2], (0..8).map(f64::from).collect());
    assert_eq!(kernels::avg_pool3d_global(&seq).unwrap().data(), &[3.5]);
    let c4 = Tensor::<f64>::full(&[1, 2, 3, 2, 2], 4.0);
    assert!(kernels::avg_pool2d_spatial(&c4)
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 4.0).abs() < 1e-12));
    let frames = t64(
        &[1, 1, 2, 2, 2],
        vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0],
    );
    let p = kernels::avg_pool2d_spatial(&frames).unwrap();
    assert_eq!(p.shape(), &[1, 1, 2]);
    assert_eq!(p.data(), &[1.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 4, 3, 5]);
    let (g3, g2) = (
        kernels::avg_pool3d_global(&x).unwrap(),
        kernels::avg_pool2d_spatial(&x).unwrap(),
    );
    for b in 0..2 {
        for c in 0..3 {
            let base = (b * 3 + c) * 60;
            let all: f64 = x.data()[base..base + 60].iter().sum::<f64>() / 60.0;
            assert!((g3.data()[b * 3 + c] - all).abs() < 1e-6);
            for t in 0..4 {
                let f: f64 = x.data()[base + t * 15..base + (t + 1) * 15]
                    .iter()
                    .sum::<f64>()
                    / 15.0;
                assert!((g2.data()[(b * 3 + c) * 4 + t] - f).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn linear_examples_and_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 4]);
    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 5] = 1.0);
    let y = kernels::linear(&x, &t64(&[4, 4], eye), &Tensor::zeros(&[4])).unwrap();
    assert_eq!(y.data(), x.data());
    let b = t64(&[3], vec![1.0, -2.0, 0.5]);
    let y = kernels::linear(&x, &Tensor::zeros(&[3, 4]), &b).unwrap();
    assert_eq!(y.shape(), &[2, 3, 3]);
    assert!(y.data().chunks(3).all(|r| r == b.data()));

    for case in 0..60 {
        let (rows, d_in, d_out) = (
            rng.gen_range(1..7),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        );
        let x = random(&mut rng, &[rows, d_in]);
        let w = random(&mut rng, &[d_out, d_in]);
        let b = random(&mut rng, &[d_out]);
        let y = kernels::linear(&x, &w, &b).unwrap();
        let oracle = linear_oracle(&x, &w, &b);
        assert!(max_rel(y.data(), &oracle) < 1e-6, "case {case}");
    }
    let err = kernels::linear(&x, &Tensor::zeros(&[3, 5]), &Tensor::zeros(&[3])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let m = row.iter().sum::<f64>() / n;
    (m, row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

#[test]
fn layer_norm_statistics() {
    let (g, b) = (Tensor::<f64>::full(&[3], 1.0), Tensor::zeros(&[3]));
    let (y, _) = kernels::layer_norm(&t64(&[1, 3], vec![1.0, 2.0, 3.0]), &g, &b, 1e-5).unwrap();
    let (m, v) = row_stats(y.data());
    assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 2e-5, "{m} {v}");
    let (y, _) = kernels::layer_norm(&t64(&[1, 3], vec![7.0; 3]), &g, &b, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 24;
    let x = random(&mut rng, &[5, 4, d]).map(|v| 3.0 * v + 1.0);
    let (y, _) =
        kernels::layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), 1e-5).unwrap();
    for row in y.data().chunks(d) {
        let (m, v) = row_stats(row);
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4, "{m} {v}");
    }
}

#[test]
fn gelu_matches_independent_erf_and_relu_examples() {
    for x in [-3.0, -1.0, 0.0, 1.0, 3.0f64] {
        let oracle = x * 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        assert!((kernels::gelu_scalar(x) - oracle).abs() < 1e-6, "x = {x}");
        assert!(
            (kernels::gelu_scalar(x as f32) as f64 - oracle).abs() < 1e-6,
            "x = {x} (f32)"
        );
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[4], vec![-2.0, 0.0, 3.0, 0.0])).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0, 0.0]);
    let z = g.gelu(x).unwrap();
    assert_eq!(g.value(z).data()[1], 0.0);
}

#[test]
fn softmax_examples_and_oracle() {
    let mut out = vec![0.0; 2];
    kernels::softmax_rows(&[0.0f64, 0.0], 2, &mut out);
    assert_eq!(out, vec![0.5, 0.5]);
    kernels::softmax_rows(&[1000.0f64, 0.0], 2, &mut out);
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1] >= 0.0 && out[1] < 1e-300);
    let mut out32 = vec![0f32; 2];
    kernels::softmax_rows(&[1000.0f32, 0.0], 2, &mut out32);
    assert!(out32.iter().all(|v| v.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let row: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let mut out = vec![0.0; 9];
    kernels::softmax_rows(&row, 9, &mut out);
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    for (p, v) in out.iter().zip(&row) {
        assert!((p - v.exp() / z).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..12), 1..6)) {
        for row in rows {
            let mut out = vec![0.0; row.len()];
            kernels::softmax_rows(&row, row.len(), &mut out);
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(out.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(seed in any::<u64>(), d in 2usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, d]).map(|v| 10.0 * v);
        let (y, _) = kernels::layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), 1e-5).unwrap();
        for (row, xr) in y.data().chunks(d).zip(x.data().chunks(d)) {
            let (m, v) = row_stats(row);
            let (_, xv) = row_stats(xr);
            prop_assert!(m.abs() < 1e-6);
            // eps shrinks the variance by xv / (xv + eps)
            prop_assert!((v - xv / (xv + 1e-5)).abs() < 1e-9 && (v - 1.0).abs() < 1e-4 + 1e-5 / xv);
        }
    }

    #[test]
    fn pooling_a_constant_returns_it(c in -100.0f64..100.0, t in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let x = Tensor::full(&[2, 3, t, h, w], c);
        for v in kernels::avg_pool3d_global(&x).unwrap().data().iter().chain(kernels::avg_pool2d_spatial(&x).unwrap().data()) {
            prop_assert!((v - c).abs() <= 1e-6);
        }
    }
}

fn run_mha(
    store: &ParamStore<f64>,
    m: &MultiHeadAttention,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::with_params(store);
    let (qv, kv, vv) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
    );
    let y = m.forward(&mut g, qv, kv, vv).unwrap();
    g.value(y).clone()
}

fn identity_mha(d: usize, heads: usize) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let m = MultiHeadAttention::new(&mut store, &mut Init::new(0), "mha", d, heads).unwrap();
    for l in [&m.query, &m.key, &m.value, &m.output] {
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * (d + 1)] = 1.0);
        *store.value_mut(l.weight) = t64(&[d, d], eye);
        *store.value_mut(l.bias) = Tensor::zeros(&[d]);
    }
    (store, m)
}

#[test]
fn attention_trivial_cases() {
    let (store, m) = identity_mha(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random(&mut rng, &[1, 3, 4]);
    let kv = random(&mut rng, &[1, 1, 4]);
    let y = run_mha(&store, &m, &q, &kv, &kv);
    for row in y.data().chunks(4) {
        assert!(max_rel(row, kv.data()) < 1e-12);
    }
    // queries orthogonal to every key: all logits equal, output = mean of V
    let q = t64(&[1, 2, 4], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    let k = t64(
        &[1, 3, 4],
        vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 3.0],
    );
    let v = random(&mut rng, &[1, 3, 4]);
    let mean: Vec<f64> = (0..4)
        .map(|c| (0..3).map(|j| v.data()[j * 4 + c]).sum::<f64>() / 3.0)
        .collect();
    let y = run_mha(&store, &m, &q, &k, &v);
    for row in y.data().chunks(4) {
        assert!(max_rel(row, &mean) < 1e-12);
    }
}

#[test]
fn attention_matches_loop_oracle_and_ignores_kv_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..60 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..4);
        let (b, nq, nk) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..6),
        );
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut store, &mut Init::new(case), "mha", d, heads).unwrap();
        let q = random(&mut rng, &[b, nq, d]);
        let k = random(&mut rng, &[b, nk, d]);
        let v = random(&mut rng, &[b, nk, d]);
        let y = run_mha(&store, &m, &q, &k, &v);
        assert!(
            max_rel(y.data(), &mha_oracle(&store, &m, &q, &k, &v)) < 1e-5,
            "case {case}"
        );

        // the same permutation applied to the rows of K and V
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.reverse();
        perm.rotate_left(nk / 2);
        let shuffle = |t: &Tensor<f64>| {
            let mut out = Vec::new();
            for bb in 0..b {
                for &j in &perm {
                    out.extend_from_slice(&t.data()[(bb * nk + j) * d..(bb * nk + j + 1) * d]);
                }
            }
            t64(&[b, nk, d], out)
        };
        let yp = run_mha(&store, &m, &q, &shuffle(&k), &shuffle(&v));
        let diff = y
            .data()
            .iter()
            .zip(yp.data())
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "case {case}: {diff}");
    }
    let mut store = ParamStore::<f64>::new();
    let err = MultiHeadAttention::new(&mut store, &mut Init::new(0), "bad", 6, 4).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn cross_entropy_examples_and_oracle() {
    let (l, _) = kernels::cross_entropy(&t64(&[1, 2], vec![0.0, 0.0]), &[0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    let (l, _) = kernels::cross_entropy(&t64(&[1, 2], vec![50.0, -50.0]), &[0]).unwrap();
    assert!(l.abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[5, 7]).map(|v| 4.0 * v);
    let labels = [0, 6, 3, 3, 1];
    let (l, _) = kernels::cross_entropy(&logits, &labels).unwrap();
    let oracle = logits
        .data()
        .chunks(7)
        .zip(labels)
        .map(|(row, y)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y])
        .sum::<f64>()
        / 5.0;
    assert!((l - oracle).abs() < 1e-6);
    assert!(matches!(
        kernels::cross_entropy(&logits, &[0, 1, 2, 3, 7]),
        Err(Error::Shape { .. })
    ));
}

fn one_param_store(p: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.register("p", t64(&[1], vec![p])).unwrap();
    s
}

fn set_grad(store: &mut ParamStore<f64>, g: f64) {
    let id = store.find("p").unwrap();
    store.zero_grad();
    store.add_grads(vec![(id, t64(&[1], vec![g]))]).unwrap();
}

#[test]
fn sgd_examples() {
    let mut s = one_param_store(1.0);
    let mut opt = Sgd::new(&s, 1.0, 0.0).unwrap();
    set_grad(&mut s, 0.25);
    opt.step(&mut s).unwrap();
    assert_eq!(s.value(s.find("p").unwrap()).data(), &[0.75]);

    let mut s = one_param_store(3.0);
    let mut opt = Sgd::new(&s, 0.1, 0.9).unwrap();
    for _ in 0..5 {
        set_grad(&mut s, 0.0);
        opt.step(&mut s).unwrap();
    }
    assert_eq!(s.value(s.find("p").unwrap()).data(), &[3.0]);

    // v1 = g1, p1 = p0 - lr*g1; v2 = mu*g1 + g2, p2 = p1 - lr*v2
    let (p0, g1, g2, lr, mu) = (0.5, 0.2, -0.7, 0.003, 0.9);
    let mut s = one_param_store(p0);
    let mut opt = Sgd::new(&s, lr, mu).unwrap();
    set_grad(&mut s, g1);
    opt.step(&mut s).unwrap();
    set_grad(&mut s, g2);
    opt.step(&mut s).unwrap();
    let expected = p0 - lr * g1 - lr * (mu * g1 + g2);
    assert!((s.value(s.find("p").unwrap()).data()[0] - expected).abs() < 1e-7);

    assert!(matches!(Sgd::new(&s, 0.1, 1.0), Err(Error::Config(_))));
}

#[test]
fn gradcheck_linear_and_negative_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [
        ("x", random(&mut rng, &[3, 5])),
        ("w", random(&mut rng, &[4, 5])),
        ("b", random(&mut rng, &[4])),
    ];
    let f = |g: &mut Graph<'_, f64>, v: &[dyad::nn::Var]| g.linear(v[0], v[1], v[2]);
    let report = check_inputs(f, &inputs, &GradcheckOptions::default()).unwrap();
    assert!(report.max_rel_err() < 1e-6, "{}", report.table());

    let corrupted = GradcheckOptions {
        analytic_scale: 1.01,
        ..GradcheckOptions::default()
    };
    let report = check_inputs(f, &inputs, &corrupted).unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_err() > 5e-3);
}

#[test]
fn gradcheck_reports_non_finite_probe_location() {
    // finite at the base point, overflows once nudged upwards
    let x = t64(&[2], vec![1.0, 179_769.313_486_231_5]);
    let err = check_inputs(
        |g, v| g.scale(v[0], 1e303),
        &[("x", x)],
        &GradcheckOptions::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite(what) => assert!(what.contains("x[1]"), "{what}"),
        other => panic!("unexpected {other}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn every_op_passes_gradcheck(seed in any::<u64>()) {
        for op in OP_NAMES {
            let report = check_op(op, seed, &GradcheckOptions { seed, ..GradcheckOptions::default() }).unwrap();
            prop_assert!(report.passed(), "{op} seed {seed}\n{}", report.table());
        }
    }
}
