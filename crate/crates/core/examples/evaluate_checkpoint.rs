//! Trains briefly with checkpoints on disk, resumes from the mid-run
//! checkpoint, and evaluates the result with multi-crop testing on clips
//! longer than the model's input window.
//!
//! cargo run --release --example evaluate_checkpoint

use dyad::harness::train::{fit, FINAL_CHECKPOINT};
use dyad::harness::{evaluate, Checkpoint, RunConfig, Trainer};
use dyad::model::DyadModel;
use dyad::synthdata::{Dataset, DatasetSpec};

fn main() -> dyad::Result<()> {
    let dir = std::env::temp_dir().join("dyad-evaluate-checkpoint");
    // 24 stored frames against a 16-frame model: crops actually differ
    let data = Dataset::in_memory(&DatasetSpec {
        per_class: 20,
        test_per_class: 5,
        frames: 24,
        ..DatasetSpec::default()
    })?;
    let config = RunConfig {
        epochs: 4,
        checkpoint_every: 2,
        out_dir: Some(dir.clone()),
        ..RunConfig::default()
    };

    let uninterrupted = fit(Trainer::new(&config)?, &data, |m| {
        println!("epoch {}  loss {:.6}", m.epoch, m.train_loss)
    })?;

    let mid = Checkpoint::load(&dir.join("checkpoint-epoch002.glck"))?;
    let resumed = fit(Trainer::from_checkpoint(&mid)?, &data, |m| {
        println!("resumed epoch {}  loss {:.6}", m.epoch, m.train_loss)
    })?;
    let same = uninterrupted.history[2..]
        .iter()
        .zip(&resumed.history)
        .all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits());
    println!("resume reproduces the uninterrupted losses bit for bit: {same}");

    let ckpt = Checkpoint::load(&dir.join(FINAL_CHECKPOINT))?;
    let mut model = DyadModel::new(&ckpt.config.model, ckpt.config.seed)?;
    ckpt.restore_into(&mut model)?;
    for clips in [1, 3, 10] {
        let m = evaluate(&model, &data.test, clips, 8)?;
        println!(
            "{clips:>2} crops: accuracy {:.3}  per class {:?}",
            m.accuracy, m.per_class_accuracy
        );
    }
    Ok(())
}
