//! Backbone, projections, GLA and the assembled model.

use dyad::backbone::{Backbone, BackboneConfig};
use dyad::gla::{AttentionMode, ClassificationHead, Gla, GlaConfig, RefinedTokens};
use dyad::model::{DyadModel, ModelConfig, Variant};
use dyad::nn::{Graph, Init, ParamStore, Tensor, Var};
use dyad::projection::{
    ClassToken, Projection, ProjectionConfig, ProjectionMode, TokenLayout, TokenSequence,
};
use dyad::Error;
use proptest::prelude::*;

const D: usize = 16;

fn gla_config(attention: AttentionMode, modules: usize) -> GlaConfig {
    GlaConfig {
        heads: 4,
        modules,
        attention,
        mlp_ratio: 2,
    }
}

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Init::new(seed).uniform(shape, 1.0)
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn rows(t: &Tensor<f64>, b: usize, r: usize) -> &[f64] {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    &t.data()[(b * n + r) * d..(b * n + r + 1) * d]
}

fn standardise(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let m = row.iter().sum::<f64>() / n;
    let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    row.iter().map(|x| (x - m) / (v + 1e-5).sqrt()).collect()
}

#[test]
fn backbone_block_shapes_on_the_default_pyramid() {
    let config = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::new(&mut store, &mut Init::new(1), "bb", &config).unwrap();
    let mut g = Graph::with_params(&store);
    let clip = g
        .constant(Init::new(2).uniform(&[2, 3, 16, 32, 32], 1.0))
        .unwrap();
    let f = backbone.forward(&mut g, clip).unwrap();
    assert_eq!(g.shape(f.g3()), &[2, 24, 4, 8, 8]);
    assert_eq!(g.shape(f.g4()), &[2, 32, 2, 4, 4]);
    assert_eq!(g.shape(f.g5()), &[2, 48, 2, 4, 4]);
    assert_eq!(backbone.num_params(), store.num_elements());

    let bad = g.constant(Tensor::zeros(&[1, 3, 8, 32, 32])).unwrap();
    assert!(matches!(
        backbone.forward(&mut g, bad),
        Err(Error::Config(_))
    ));
}

#[test]
fn both_streams_share_backbone_weights() {
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::new(
        &mut store,
        &mut Init::new(1),
        "bb",
        &BackboneConfig::default(),
    )
    .unwrap();
    let before = store.len();
    let mut g = Graph::with_params(&store);
    let x = random(5, &[1, 3, 16, 32, 32]);
    let (a, b) = (g.constant(x.clone()).unwrap(), g.constant(x).unwrap());
    let (fa, fb) = backbone.dual_forward(&mut g, a, b).unwrap();
    assert_eq!(g.value(fa.g5()).data(), g.value(fb.g5()).data());
    assert_eq!(store.len(), before);
}

fn projected(mode: ProjectionMode, blocks: Vec<usize>) -> (usize, usize) {
    let backbone_config = BackboneConfig::default();
    let config = ProjectionConfig {
        mode,
        blocks,
        dim: D,
    };
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(3);
    let backbone = Backbone::new(&mut store, &mut init, "bb", &backbone_config).unwrap();
    let projection =
        Projection::new(&mut store, &mut init, "proj", &backbone_config, &config).unwrap();
    let clf = ClassToken::new(&mut store, &mut init, "clf", D).unwrap();
    let mut g = Graph::with_params(&store);
    let clip = g
        .constant(Init::new(4).uniform(&[2, 3, 16, 32, 32], 1.0))
        .unwrap();
    let f = backbone.forward(&mut g, clip).unwrap();
    let seq = projection.project(&mut g, &f, clf).unwrap();
    let s = g.shape(seq.tokens).to_vec();
    assert_eq!((s[0], s[2]), (2, D));
    assert_eq!(s[1], config.sequence_len(&backbone_config).unwrap());
    assert_eq!(seq.layout.len(), s[1]);
    (s[1], s[1] - 1)
}

#[test]
fn projection_token_counts() {
    assert_eq!(projected(ProjectionMode::Abstract, vec![3, 4, 5]), (4, 3));
    assert_eq!(projected(ProjectionMode::Abstract, vec![5]), (2, 1));
    // block5 keeps two frames in the default pyramid
    assert_eq!(projected(ProjectionMode::Temporal, vec![3, 4, 5]), (3, 2));
}

#[test]
fn projection_config_rejects_bad_blocks() {
    for blocks in [vec![], vec![0], vec![6], vec![4, 4]] {
        let c = ProjectionConfig {
            blocks,
            ..ProjectionConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}

struct Fixture {
    store: ParamStore<f64>,
    gla: Gla,
}

fn fixture(attention: AttentionMode, modules: usize, seed: u64) -> Fixture {
    let mut store = ParamStore::new();
    let gla = Gla::new(
        &mut store,
        &mut Init::new(seed),
        "gla",
        D,
        &gla_config(attention, modules),
    )
    .unwrap();
    Fixture { store, gla }
}

fn seq(g: &mut Graph<'_, f64>, t: &Tensor<f64>) -> TokenSequence {
    TokenSequence {
        tokens: g.constant(t.clone()).unwrap(),
        layout: TokenLayout::Layers(vec![3, 4, 5]),
    }
}

#[test]
fn query_is_normalised_leader_when_self_attention_is_silent() {
    let mut fx = fixture(AttentionMode::Cross, 1, 7);
    let (w, b) = (
        fx.gla.modules[0].self_attn.output.weight,
        fx.gla.modules[0].self_attn.output.bias,
    );
    *fx.store.value_mut(w) = Tensor::zeros(&[D, D]);
    *fx.store.value_mut(b) = Tensor::zeros(&[D]);
    let leader = random(1, &[2, 4, D]);
    let clf = random(2, &[2, 1, D]);
    let mut g = Graph::with_params(&fx.store);
    let (l, c) = (
        g.constant(leader.clone()).unwrap(),
        g.constant(clf.clone()).unwrap(),
    );
    let q = fx.gla.modules[0].build_query(&mut g, l, Some(c)).unwrap();
    let q = g.value(q);
    assert_eq!(q.shape(), &[2, 5, D]);
    for b in 0..2 {
        for r in 0..4 {
            let want = standardise(rows(&leader, b, r));
            let diff = rows(q, b, r)
                .iter()
                .zip(&want)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "row {r}: {diff}");
        }
        assert_eq!(rows(q, b, 4), rows(&clf, b, 0));
    }
    let wrong = g.constant(Tensor::zeros(&[2, 2, D])).unwrap();
    assert!(matches!(
        fx.gla.modules[0].build_query(&mut g, l, Some(wrong)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn keys_and_values_are_one_projection() {
    let fx = fixture(AttentionMode::Cross, 1, 8);
    let mut g = Graph::with_params(&fx.store);
    let t = g.constant(random(3, &[1, 4, D])).unwrap();
    let (k, v) = fx.gla.modules[0].build_key_value(&mut g, t).unwrap();
    assert_eq!(k, v);
    assert_eq!(g.shape(k), &[1, 4, D]);
}

#[test]
fn single_key_cross_attention_returns_its_value() {
    let fx = fixture(AttentionMode::Cross, 1, 9);
    let m = &fx.gla.modules[0];
    let mut g = Graph::with_params(&fx.store);
    let q = g.constant(random(4, &[1, 5, D])).unwrap();
    let kv = g.constant(random(5, &[1, 1, D])).unwrap();
    let y = m.cross_attend(&mut g, q, kv, kv).unwrap();
    // with one key every softmax weight is 1: LN(q + out(value(kv)))
    let v = m.cross_attn.value.forward(&mut g, kv).unwrap();
    let o = m.cross_attn.output.forward(&mut g, v).unwrap();
    let o = g.reshape(o, &[1, D]).unwrap();
    let o = g.repeat_batch(o, 5).unwrap();
    let o = g.reshape(o, &[1, 5, D]).unwrap();
    let s = g.add(q, o).unwrap();
    let want = m.norm_cross.forward(&mut g, s).unwrap();
    assert!(max_diff(g.value(y), g.value(want)) < 1e-12);
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(t.len());
    for bb in 0..b {
        for &r in perm {
            out.extend_from_slice(&t.data()[(bb * n + r) * d..(bb * n + r + 1) * d]);
        }
    }
    Tensor::new(vec![b, n, d], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn cross_attention_ignores_key_order(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let fx = fixture(AttentionMode::Cross, 1, seed);
        let m = &fx.gla.modules[0];
        let q = random(seed ^ 1, &[2, 5, D]);
        let kv = random(seed ^ 2, &[2, 4, D]);
        let run = |kv: &Tensor<f64>| {
            let mut g = Graph::with_params(&fx.store);
            let (qv, kvv) = (g.constant(q.clone()).unwrap(), g.constant(kv.clone()).unwrap());
            let (k, v) = m.build_key_value(&mut g, kvv).unwrap();
            let y = m.cross_attend(&mut g, qv, k, v).unwrap();
            g.value(y).clone()
        };
        prop_assert!(max_diff(&run(&kv), &run(&permute_rows(&kv, &perm))) <= 1e-6);
    }
}

fn gla_forward(
    fx: &Fixture,
    leader: &Tensor<f64>,
    assistant: &Tensor<f64>,
) -> (Tensor<f64>, RefinedTokens) {
    let mut g = Graph::with_params(&fx.store);
    let (l, a) = (seq(&mut g, leader), seq(&mut g, assistant));
    let r = fx.gla.forward(&mut g, &l, &a).unwrap();
    (g.value(r.tokens).clone(), r)
}

#[test]
fn self_ablation_matches_cross_on_identical_streams() {
    let cross = fixture(AttentionMode::Cross, 1, 10);
    let selfish = fixture(AttentionMode::SelfAblation, 1, 10);
    let x = random(6, &[2, 4, D]);
    let (a, _) = gla_forward(&cross, &x, &x);
    let (b, _) = gla_forward(&selfish, &x, &x);
    assert!(max_diff(&a, &b) < 1e-12);
    // and differs once the assistant stream differs
    let y = random(7, &[2, 4, D]);
    let (a, _) = gla_forward(&cross, &x, &y);
    let (b, _) = gla_forward(&selfish, &x, &y);
    assert!(max_diff(&a, &b) > 1e-3);
}

#[test]
fn one_module_is_query_then_cross_attention_then_mlp() {
    let fx = fixture(AttentionMode::Cross, 1, 11);
    let (leader, assistant) = (random(8, &[2, 4, D]), random(9, &[2, 4, D]));
    let (refined, r) = gla_forward(&fx, &leader, &assistant);
    assert_eq!(refined.shape(), &[2, 5, D]);
    assert_eq!((r.leader_clf, r.assistant_clf), (0, 4));

    let m = &fx.gla.modules[0];
    let mut g = Graph::with_params(&fx.store);
    let l = g.constant(leader).unwrap();
    let a = g.constant(assistant).unwrap();
    let clf = g.narrow(a, 1, 0, 1).unwrap();
    let q = m.build_query(&mut g, l, Some(clf)).unwrap();
    let (k, v) = m.build_key_value(&mut g, a).unwrap();
    let w = m.cross_attend(&mut g, q, k, v).unwrap();
    let z = m.ffn.forward(&mut g, w).unwrap();
    assert!(max_diff(&refined, g.value(z)) < 1e-12);

    let two = fixture(AttentionMode::Cross, 2, 11);
    let (refined, r) = gla_forward(&two, &random(8, &[2, 4, D]), &random(9, &[2, 4, D]));
    assert_eq!(refined.shape(), &[2, 5, D]);
    assert_eq!(r.assistant_clf, 4);
}

#[test]
fn gla_rejects_mismatched_streams() {
    let fx = fixture(AttentionMode::Cross, 1, 12);
    let mut g = Graph::with_params(&fx.store);
    let l = seq(&mut g, &random(1, &[1, 4, D]));
    let a = seq(&mut g, &random(2, &[1, 3, D]));
    assert!(matches!(
        fx.gla.forward(&mut g, &l, &a),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        GlaConfig {
            heads: 5,
            ..GlaConfig::default()
        }
        .validate(D),
        Err(Error::Config(_))
    ));
}

fn classify(
    store: &ParamStore<f64>,
    head: &ClassificationHead,
    tokens: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::with_params(store);
    let t = g.constant(tokens.clone()).unwrap();
    let n = tokens.shape()[1];
    let logits = head
        .classify(
            &mut g,
            &RefinedTokens {
                tokens: t,
                leader_clf: 0,
                assistant_clf: n - 1,
            },
        )
        .unwrap();
    g.value(logits).clone()
}

#[test]
fn head_reads_only_the_class_rows() {
    let mut store = ParamStore::new();
    let head = ClassificationHead::new(&mut store, &mut Init::new(13), "head", D, 6).unwrap();
    let mut x = random(10, &[3, 5, D]);
    let base = classify(&store, &head, &x);
    assert_eq!(base.shape(), &[3, 6]);
    for b in 0..3 {
        for r in 1..4 {
            for c in 0..D {
                x.data_mut()[(b * 5 + r) * D + c] = 100.0 * (c as f64 - 3.0);
            }
        }
    }
    assert_eq!(classify(&store, &head, &x).data(), base.data());

    *store.value_mut(head.linear.bias) = Tensor::zeros(&[6]);
    let mut z = random(11, &[2, 5, D]);
    for b in 0..2 {
        for r in [0, 4] {
            z.data_mut()[(b * 5 + r) * D..(b * 5 + r + 1) * D].fill(0.0);
        }
    }
    assert!(classify(&store, &head, &z).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::with_params(&store);
    let t: Var = g.constant(z).unwrap();
    let bad = RefinedTokens {
        tokens: t,
        leader_clf: 0,
        assistant_clf: 5,
    };
    assert!(matches!(
        head.classify(&mut g, &bad),
        Err(Error::Shape { .. })
    ));
}

fn small_model(variant: Variant, mode: ProjectionMode) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.projection.dim = D;
    c.projection.mode = mode;
    c.gla.heads = 4;
    c.variant = variant;
    c.classes = 4;
    c
}

#[test]
fn every_variant_yields_batch_by_class_logits() {
    let leader = Init::new(20).uniform::<f32>(&[2, 3, 16, 32, 32], 1.0);
    let assistant = Init::new(21).uniform::<f32>(&[2, 3, 16, 32, 32], 1.0);
    for variant in [
        Variant::Gla,
        Variant::LateFusion,
        Variant::LeaderOnly,
        Variant::AssistantOnly,
        Variant::PooledConcat,
        Variant::ProjectedConcat,
    ] {
        let model =
            DyadModel::<f32>::new(&small_model(variant, ProjectionMode::Abstract), 0).unwrap();
        let (logits, streams) = model.predict(&leader, &assistant).unwrap();
        assert_eq!(logits.shape(), &[2, 4], "{variant:?}");
        assert!(logits.all_finite());
        assert_eq!(streams.is_some(), variant == Variant::LateFusion);
    }
    let temporal =
        DyadModel::<f32>::new(&small_model(Variant::Gla, ProjectionMode::Temporal), 0).unwrap();
    assert_eq!(
        temporal.predict(&leader, &assistant).unwrap().0.shape(),
        &[2, 4]
    );
}

#[test]
fn swapping_inputs_exchanges_the_roles() {
    let config = small_model(Variant::Gla, ProjectionMode::Abstract);
    let swapped = ModelConfig {
        swap_inputs: true,
        ..config.clone()
    };
    let (a, b) = (
        DyadModel::<f64>::new(&config, 3).unwrap(),
        DyadModel::<f64>::new(&swapped, 3).unwrap(),
    );
    let leader = Init::new(30).uniform::<f64>(&[1, 3, 16, 32, 32], 1.0);
    let assistant = Init::new(31).uniform::<f64>(&[1, 3, 16, 32, 32], 1.0);
    let (x, _) = a.predict(&assistant, &leader).unwrap();
    let (y, _) = b.predict(&leader, &assistant).unwrap();
    assert_eq!(x.data(), y.data());
}

#[test]
fn model_config_validation() {
    let mut c = small_model(Variant::Gla, ProjectionMode::Abstract);
    c.classes = 0;
    assert!(matches!(
        DyadModel::<f32>::new(&c, 0),
        Err(Error::Config(_))
    ));
    let c = small_model(Variant::ProjectedConcat, ProjectionMode::Temporal);
    assert!(matches!(
        DyadModel::<f32>::new(&c, 0),
        Err(Error::Config(_))
    ));
}
