//! Trains one model variant on an in-memory synthetic dataset.
//!
//! cargo run --release --example train_synthetic -- [variant] [epochs] [table] [sync|async]
//!
//! variant: gla | late-fusion | leader-only | assistant-only | pooled-concat | projected-concat

use std::time::Instant;

use dyad::harness::{train, RunConfig};
use dyad::model::Variant;
use dyad::synthdata::{ClassTable, Dataset, DatasetSpec, SyncMode};

fn main() -> dyad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant =
        serde_json::from_str(&format!("\"{}\"", args.first().map_or("gla", |s| s)))
            .map_err(|e| dyad::Error::Config(e.to_string()))?;
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let table: ClassTable =
        serde_json::from_str(&format!("\"{}\"", args.get(2).map_or("default", |s| s)))
            .map_err(|e| dyad::Error::Config(e.to_string()))?;
    let sync = if args.get(3).map(String::as_str) == Some("sync") {
        SyncMode::Sync
    } else {
        SyncMode::Async
    };

    let spec = DatasetSpec {
        table,
        sync,
        ..DatasetSpec::default()
    };
    let data = Dataset::in_memory(&spec)?;
    let mut config = RunConfig {
        epochs,
        ..RunConfig::default()
    };
    config.model.variant = variant;
    config.model.classes = data.num_classes();
    println!(
        "{} train / {} test clips, {} classes",
        data.train.len(),
        data.test.len(),
        data.num_classes()
    );

    let start = Instant::now();
    let outcome = train(&config, &data, |m| {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}  ({:.1}s)",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy,
            start.elapsed().as_secs_f64()
        )
    })?;
    println!("final test accuracy {:.3}", outcome.test.accuracy);
    print!("{}", outcome.test.confusion_csv());
    Ok(())
}
