//! Writes a synthetic dataset to disk, reads it back and probes how
//! separable it is with a raw-pixel nearest-neighbour classifier.
//!
//! cargo run --release --example generate_dataset -- [out-dir] [sync|async]

use std::path::PathBuf;

use dyad::synthdata::{
    generate_dataset, nearest_neighbour_accuracy, ClassTable, Dataset, DatasetSpec, PixelView,
    SyncMode,
};

fn main() -> dyad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("target/synthetic", |s| s));
    let sync = if args.get(1).map(String::as_str) == Some("sync") {
        SyncMode::Sync
    } else {
        SyncMode::Async
    };
    let table = if sync == SyncMode::Sync {
        ClassTable::Tight
    } else {
        ClassTable::Default
    };

    let spec = DatasetSpec {
        table,
        sync,
        ..DatasetSpec::default()
    };
    let manifest = generate_dataset(&spec, &out)?;
    println!(
        "wrote {} clip pairs to {}",
        manifest.records.len(),
        out.display()
    );
    for class in spec.class_specs()? {
        println!(
            "  class {}: leader {:?} (amp {}) / assistant {:?} (amp {}, phase {})",
            class.id,
            class.leader.kind,
            class.leader.amplitude,
            class.assistant.kind,
            class.assistant.amplitude,
            class.assistant.phase
        );
    }

    let data = Dataset::load(&out)?;
    println!(
        "{} train / {} test, class counts {:?}",
        data.train.len(),
        data.test.len(),
        data.manifest.class_counts()
    );
    for view in [PixelView::Joint, PixelView::Leader, PixelView::Assistant] {
        println!(
            "1-NN on {view:?} pixels: {:.3}",
            nearest_neighbour_accuracy(&data.train, &data.test, view)?
        );
    }
    Ok(())
}
