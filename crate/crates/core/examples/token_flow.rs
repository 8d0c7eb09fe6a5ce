//! Follows one clip pair through the architecture by hand: shared backbone,
//! abstract projection per stream, GLA fusion and the classification head,
//! printing the tensor shape at every stage.
//!
//! cargo run --release --example token_flow

use dyad::model::{Architecture, DyadModel, ModelConfig};
use dyad::nn::Init;

fn main() -> dyad::Result<()> {
    let config = ModelConfig::default();
    let model = DyadModel::<f32>::new(&config, 0)?;
    let Architecture::Gla(net) = &model.arch else {
        unreachable!("default variant is GLA")
    };
    let [c, t, h, w] = config.backbone.clip_shape();
    let mut init = Init::new(1);

    let mut g = model.graph();
    let leader = g.constant(init.uniform(&[1, c, t, h, w], 1.0))?;
    let assistant = g.constant(init.uniform(&[1, c, t, h, w], 1.0))?;
    println!("clip            {:?}", g.shape(leader));

    let (fl, fa) = net.backbone.dual_forward(&mut g, leader, assistant)?;
    for b in 1..=5 {
        println!("block{b}          {:?}", g.shape(fl.block(b)));
    }
    let gl = net.projection.project(&mut g, &fl, net.clf_leader)?;
    let ga = net.projection.project(&mut g, &fa, net.clf_assistant)?;
    println!("leader tokens   {:?}  {:?}", g.shape(gl.tokens), gl.layout);

    let m = &net.gla.modules[0];
    let clf_a = g.narrow(ga.tokens, 1, 0, 1)?;
    let q = m.build_query(&mut g, gl.tokens, Some(clf_a))?;
    let (k, v) = m.build_key_value(&mut g, ga.tokens)?;
    println!(
        "query           {:?}  (leader rows + assistant class token)",
        g.shape(q)
    );
    println!("keys = values   {:?}", g.shape(k));

    let refined = net.gla.forward(&mut g, &gl, &ga)?;
    println!(
        "refined         {:?}  class rows {} and {}",
        g.shape(refined.tokens),
        refined.leader_clf,
        refined.assistant_clf
    );
    let logits = net.head.classify(&mut g, &refined)?;
    println!(
        "logits          {:?}  {:?}",
        g.shape(logits),
        g.value(logits).data()
    );
    let _ = v;
    Ok(())
}
