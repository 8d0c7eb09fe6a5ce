//! Runs groups of the directional ablation suite on in-memory datasets and
//! prints the report as CSV.
//!
//! cargo run --release --example ablation_suite -- [groups] [epochs]
//!
//! groups: comma-separated from stream, swap, blocks, attention, modules,
//! components, variant (default: attention)

use dyad::harness::{run_ablation_suite, AblationData, RunConfig};
use dyad::synthdata::{ClassTable, Dataset, DatasetSpec, SyncMode};

fn main() -> dyad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let groups: Vec<&str> = args.first().map_or("attention", |s| s).split(',').collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);

    let make = |table, sync| {
        Dataset::in_memory(&DatasetSpec {
            table,
            sync,
            ..DatasetSpec::default()
        })
    };
    let asynchronous = make(ClassTable::Default, SyncMode::Async)?;
    let synchronous = make(ClassTable::Tight, SyncMode::Sync)?;
    let motion_scale = make(ClassTable::MotionScale, SyncMode::Async)?;
    let data = AblationData {
        asynchronous: &asynchronous,
        synchronous: Some(&synchronous),
        motion_scale: Some(&motion_scale),
    };

    let base = RunConfig {
        epochs,
        ..RunConfig::default()
    };
    let report = run_ablation_suite(&base, &data, Some(&groups), |cell, m| match m {
        None => eprintln!("{}/{} on {}", cell.group, cell.cell, cell.dataset),
        Some(m) => eprintln!("  epoch {:>3}  test {:.3}", m.epoch, m.test_accuracy),
    })?;
    print!("{}", report.to_csv());
    Ok(())
}
