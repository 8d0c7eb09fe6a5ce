//! Parameter counts, per-layer FLOP ledger and latency for the toy model
//! and the full-scale preset, laid out as a complexity table.
//!
//! cargo run --release --example complexity_report

use std::collections::BTreeMap;

use dyad::harness::complexity::{bench, count_params, estimate_flops, flop_ledger};
use dyad::harness::BenchReport;
use dyad::model::{DyadModel, ModelConfig, Variant};

fn main() -> dyad::Result<()> {
    let toy = DyadModel::<f32>::new(&ModelConfig::default(), 0)?;
    let mut by_op: BTreeMap<&str, u64> = BTreeMap::new();
    for e in flop_ledger(&toy, 1)? {
        *by_op.entry(e.op).or_default() += e.flops;
    }
    println!("toy forward FLOPs by op: {by_op:?}");

    println!("{}", BenchReport::header());
    for variant in [Variant::Gla, Variant::LateFusion, Variant::PooledConcat] {
        let model = DyadModel::<f32>::new(
            &ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            0,
        )?;
        println!(
            "{}",
            bench(&model, &format!("toy {variant:?}"), 10, 10)?.row()
        );
    }

    // too slow to time on a laptop; size and cost only
    let full = DyadModel::<f32>::new(&ModelConfig::full_scale(), 0)?;
    println!(
        "full-scale preset: {:.2}M parameters, {:.2} GFLOPs per clip pair",
        count_params(&full) as f64 / 1e6,
        estimate_flops(&full)? as f64 / 1e9
    );
    Ok(())
}
