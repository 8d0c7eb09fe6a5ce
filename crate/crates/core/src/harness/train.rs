use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, RngState};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{curves_svg, EpochMetrics, Metrics};
use crate::model::DyadModel;
use crate::nn::{Sgd, Tensor};
use crate::synthdata::{ClipPair, Dataset};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const FINAL_CHECKPOINT: &str = "final.glck";
pub const CURVES_FILE: &str = "curves.svg";

/// Separates the shuffling stream from parameter initialisation.
const SHUFFLE_SALT: u64 = 0x51f7_e5a1_7c3d_9b02;

/// Start frames of `n` uniformly spaced crops of length `t` from a clip of
/// `stored` frames. A single crop is centred.
pub fn crop_starts(stored: usize, t: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("clips_per_video must be at least 1".into()));
    }
    if stored < t {
        return Err(Error::Data(format!(
            "clip has {stored} frames, the model needs {t}"
        )));
    }
    let span = stored - t;
    Ok(if n == 1 {
        vec![span / 2]
    } else {
        (0..n)
            .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
            .map(|s| s.min(span))
            .collect()
    })
}

/// Stacks `[c, T, h, w]` windows starting at `starts` into `[b, c, t, h, w]`
/// leader and assistant batches.
pub fn stack_batch(
    pairs: &[&ClipPair],
    starts: &[usize],
    t: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .leader
        .shape()
        .to_vec();
    let (c, stored, h, w) = (first[0], first[1], first[2], first[3]);
    let mut leader = Vec::with_capacity(pairs.len() * c * t * h * w);
    let mut assistant = Vec::with_capacity(leader.capacity());
    for (pair, &start) in pairs.iter().zip(starts) {
        for (clip, out) in [
            (&pair.leader, &mut leader),
            (&pair.assistant, &mut assistant),
        ] {
            if clip.shape() != first.as_slice() {
                return Err(Error::Data(format!(
                    "clip extents {:?} differ from {first:?} within a batch",
                    clip.shape()
                )));
            }
            if start + t > stored {
                return Err(Error::Data(format!(
                    "crop {start}..{} exceeds {stored} frames",
                    start + t
                )));
            }
            let frame = h * w;
            for ch in 0..c {
                let base = ch * stored * frame + start * frame;
                out.extend_from_slice(&clip.data()[base..base + t * frame]);
            }
        }
    }
    let shape = vec![pairs.len(), c, t, h, w];
    Ok((
        Tensor::new(shape.clone(), leader)?,
        Tensor::new(shape, assistant)?,
    ))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Averages softmax scores over `clips_per_video` temporal crops per clip
/// pair and scores the argmax.
pub fn evaluate(
    model: &DyadModel<f32>,
    pairs: &[ClipPair],
    clips_per_video: usize,
    batch_size: usize,
) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let k = model.config.classes;
    let t = model.config.backbone.frames;
    let mut predictions = Vec::with_capacity(pairs.len());
    let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&ClipPair> = chunk.iter().collect();
        let stored = chunk[0].leader.shape().get(1).copied().unwrap_or(0);
        let mut scores = vec![vec![0f64; k]; chunk.len()];
        for start in crop_starts(stored, t, clips_per_video)? {
            let (l, a) = stack_batch(&refs, &vec![start; chunk.len()], t)?;
            let (logits, _) = model.predict(&l, &a)?;
            for (row, score) in logits.data().chunks(k).zip(&mut scores) {
                for (s, p) in score.iter_mut().zip(softmax_row(row)) {
                    *s += p;
                }
            }
        }
        predictions.extend(scores.iter().map(|s| argmax(s)));
    }
    Metrics::from_predictions(&labels, &predictions, k)
}

/// A model, its optimiser and the shuffling RNG: everything that evolves
/// during training.
pub struct Trainer {
    pub config: RunConfig,
    pub model: DyadModel<f32>,
    pub optimizer: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

struct Batch {
    leader: Tensor<f32>,
    assistant: Tensor<f32>,
    labels: Vec<usize>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = DyadModel::new(&config.model, config.seed)?;
        let optimizer = Sgd::new(&model.params, config.learning_rate, config.momentum)?;
        Ok(Trainer {
            config: config.clone(),
            model,
            optimizer,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.config)?;
        ckpt.restore_into(&mut t.model)?;
        let by_name: std::collections::HashMap<&str, &Tensor<f32>> = ckpt
            .optimizer
            .iter()
            .map(|(n, v)| (n.as_str(), v))
            .collect();
        let buffers = t
            .model
            .params
            .iter()
            .map(|p| {
                by_name
                    .get(p.name.as_str())
                    .map(|v| (*v).clone())
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "checkpoint lacks optimiser buffer for `{}`",
                            p.name
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        t.optimizer.set_buffers(buffers)?;
        t.epoch = ckpt.epoch;
        let word_pos: u128 = ckpt
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Data(format!("bad RNG position `{}`", ckpt.rng.word_pos)))?;
        t.rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        t.rng.set_word_pos(word_pos);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names: Vec<String> = self.model.params.iter().map(|p| p.name.clone()).collect();
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState {
                seed: self.rng.get_seed(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            params: self
                .model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: names
                .into_iter()
                .zip(self.optimizer.buffers().iter().cloned())
                .collect(),
        }
    }

    /// Draws this epoch's visiting order and crop offsets.
    fn plan_epoch(&mut self, train: &[ClipPair]) -> Vec<(usize, usize)> {
        let t = self.config.model.backbone.frames;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .into_iter()
            .map(|i| {
                let stored = train[i].leader.shape()[1];
                let start = if stored > t {
                    self.rng.gen_range(0..=stored - t)
                } else {
                    0
                };
                (i, start)
            })
            .collect()
    }

    fn make_batch(train: &[ClipPair], plan: &[(usize, usize)], t: usize) -> Result<Batch> {
        let refs: Vec<&ClipPair> = plan.iter().map(|&(i, _)| &train[i]).collect();
        let starts: Vec<usize> = plan.iter().map(|&(_, s)| s).collect();
        let (leader, assistant) = stack_batch(&refs, &starts, t)?;
        Ok(Batch {
            leader,
            assistant,
            labels: refs.iter().map(|p| p.label).collect(),
        })
    }

    /// One forward/backward/update. Returns the batch loss and predictions.
    fn step(&mut self, batch: Batch, epoch: usize, index: usize) -> Result<(f64, Vec<usize>)> {
        let context = |e: Error, max_grad: f64| match e {
            Error::NonFinite(what) => Error::NonFinite(format!(
                "{what} at epoch {epoch}, batch {index} (max |grad| {max_grad:.3e})"
            )),
            other => other,
        };
        let prev_max = self.model.params.max_abs_grad();
        let k = self.model.config.classes;
        let (loss, preds, grads) = {
            let mut g = self.model.graph();
            let run = |g: &mut crate::nn::Graph<'_, f32>| -> Result<_> {
                let l = g.constant(batch.leader)?;
                let a = g.constant(batch.assistant)?;
                let out = self.model.forward(g, l, a)?;
                let loss = self.model.loss(g, &out, &batch.labels)?;
                Ok((out, loss))
            };
            let (out, loss) = run(&mut g).map_err(|e| context(e, prev_max))?;
            let grads = g.backward(loss)?;
            let preds = g
                .value(out.logits)
                .data()
                .chunks(k)
                .map(|r| argmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect();
            (
                g.value(loss).data()[0] as f64,
                preds,
                g.param_gradients(&grads),
            )
        };
        self.model.params.zero_grad();
        self.model.params.add_grads(grads)?;
        let max_grad = self.model.params.max_abs_grad();
        if !max_grad.is_finite() || !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at epoch {epoch}, batch {index} (max |grad| {max_grad:.3e})"
            )));
        }
        self.optimizer.step(&mut self.model.params)?;
        Ok((loss, preds))
    }

    /// Trains one epoch, then evaluates single-crop test accuracy.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::Data(
                "training needs non-empty train and test splits".into(),
            ));
        }
        if let Some(bad) = data
            .train
            .iter()
            .chain(&data.test)
            .find(|p| p.label >= self.model.config.classes)
        {
            return Err(Error::Data(format!(
                "label {} outside the model's {} classes",
                bad.label, self.model.config.classes
            )));
        }
        let epoch = self.epoch + 1;
        let plan = self.plan_epoch(&data.train);
        let bs = self.config.batch_size;
        let t = self.config.model.backbone.frames;
        let mut total_loss = 0.0;
        let mut correct = 0;
        let depth = self.config.prefetch_depth();
        let mut consume = |trainer: &mut Trainer, index: usize, batch: Batch| -> Result<()> {
            let labels = batch.labels.clone();
            let (loss, preds) = trainer.step(batch, epoch, index)?;
            total_loss += loss * labels.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            Ok(())
        };
        if depth == 0 {
            for (i, chunk) in plan.chunks(bs).enumerate() {
                let batch = Self::make_batch(&data.train, chunk, t)?;
                consume(self, i, batch)?;
            }
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<Batch>>(depth);
                let plan = &plan;
                s.spawn(move || {
                    for chunk in plan.chunks(bs) {
                        if tx.send(Self::make_batch(&data.train, chunk, t)).is_err() {
                            break;
                        }
                    }
                });
                for (i, batch) in rx.into_iter().enumerate() {
                    consume(self, i, batch?)?;
                }
                Ok(())
            })?;
        }
        let n = data.train.len() as f64;
        let test = evaluate(&self.model, &data.test, 1, bs)?;
        self.epoch = epoch;
        Ok(EpochMetrics {
            epoch,
            train_loss: total_loss / n,
            train_accuracy: correct as f64 / n,
            test_accuracy: test.accuracy,
            test_per_class_accuracy: test.per_class_accuracy,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    pub test: Metrics,
}

/// Runs `trainer` up to `config.epochs` epochs, writing metrics, checkpoints
/// and plots to `config.out_dir` when set. `progress` sees every epoch.
pub fn fit(
    mut trainer: Trainer,
    data: &Dataset,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let out = trainer.config.out_dir.clone();
    let target = trainer.config.epochs;
    if let Some(dir) = &out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        if trainer.epoch == 0 {
            fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut history = Vec::new();
    while trainer.epoch < target {
        let m = trainer.run_epoch(data)?;
        progress(&m);
        if let Some(dir) = &out {
            append_line(
                &dir.join(METRICS_FILE),
                &serde_json::to_string(&m).expect("metrics serialise"),
            )?;
            let every = trainer.config.checkpoint_every;
            if every > 0 && m.epoch % every == 0 {
                trainer
                    .checkpoint()
                    .save(&dir.join(format!("checkpoint-epoch{:03}.glck", m.epoch)))?;
            }
        }
        history.push(m);
    }
    let test = evaluate(&trainer.model, &data.test, 1, trainer.config.batch_size)?;
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &out {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        test.write_confusion_csv(&dir.join(CONFUSION_FILE))?;
        if trainer.config.plots {
            let path = dir.join(CURVES_FILE);
            fs::write(&path, curves_svg(&history)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(TrainOutcome {
        history,
        checkpoint,
        test,
    })
}

/// Fresh training run from `config`.
pub fn train(
    config: &RunConfig,
    data: &Dataset,
    progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    fit(Trainer::new(config)?, data, progress)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
