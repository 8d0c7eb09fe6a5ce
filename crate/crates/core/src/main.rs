use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dyad::gla::AttentionMode;
use dyad::harness::ablation::{run_ablation_suite, AblationData};
use dyad::harness::checkpoint::Checkpoint;
use dyad::harness::complexity::{bench, BenchReport};
use dyad::harness::gradcheck::{check_model, gradcheck_config};
use dyad::harness::train::{evaluate, fit, Trainer};
use dyad::harness::RunConfig;
use dyad::model::{DyadModel, Variant};
use dyad::nn::gradcheck::{check_op, GradcheckOptions, OP_NAMES};
use dyad::projection::ProjectionMode;
use dyad::synthdata::{generate_dataset, ClassTable, Dataset, DatasetSpec, SyncMode};
use dyad::{Error, Result};

/// Dual-path dyadic interaction recognition: data generation, training,
/// evaluation, gradient checks, ablations and benchmarks.
#[derive(Parser)]
#[command(name = "dyad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip-pair dataset and its manifest.
    GenData(GenData),
    /// Train a model; writes metrics.jsonl, confusion.csv and checkpoints.
    Train(Train),
    /// Evaluate a checkpoint with multi-crop testing.
    Eval(Eval),
    /// Finite-difference gradient check of one op or the whole model.
    Gradcheck(Gradcheck),
    /// Run the ablation suite and write report.csv.
    Ablate(Ablate),
    /// Parameter count, FLOPs and latency of a config.
    Bench(Bench),
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    Default,
    Tight,
    MotionScale,
}

#[derive(Args)]
struct GenData {
    /// Number of classes taken from the class table.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Clips per class, train and test together.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Clips per class held out for testing [default: per-class / 5, at least 1].
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Lock both streams to one random phase.
    #[arg(long, conflicts_with = "async_mode")]
    sync: bool,
    /// Independent random phase per stream (the default).
    #[arg(long = "async", id = "async_mode")]
    async_mode: bool,
    /// Gaussian pixel-noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Random phase offsets are drawn from 0..jitter frames.
    #[arg(long, default_value_t = 8)]
    jitter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "default")]
    table: TableArg,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Gla,
    LateFusion,
    LeaderOnly,
    AssistantOnly,
    PooledConcat,
    ProjectedConcat,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Abstract,
    Temporal,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Cross,
    SelfAblation,
}

/// Flags that override fields of the run config.
#[derive(Args)]
struct Overrides {
    /// JSON run config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    projection: Option<ModeArg>,
    /// Backbone blocks feeding the abstract projection, e.g. 3,4,5.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Token width d.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Number of stacked fusion modules.
    #[arg(long)]
    modules: Option<usize>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    /// Feed the assistant stream to the query side.
    #[arg(long)]
    swap_inputs: bool,
    #[arg(long)]
    classes: Option<usize>,
    /// Save a checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Prefetch depth for the batch loader (ignored in strict mode).
    #[arg(long)]
    prefetch: Option<usize>,
    /// Allow worker threads (disables strict deterministic mode).
    #[arg(long)]
    no_strict: bool,
    /// Write SVG training curves.
    #[arg(long)]
    plots: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.epochs, self.epochs);
        set!(c.batch_size, self.batch_size);
        set!(c.learning_rate, self.lr);
        set!(c.momentum, self.momentum);
        set!(c.model.projection.blocks, self.blocks.clone());
        set!(c.model.projection.dim, self.dim);
        set!(c.model.gla.heads, self.heads);
        set!(c.model.gla.modules, self.modules);
        set!(c.model.classes, self.classes);
        set!(c.checkpoint_every, self.checkpoint_every);
        set!(c.prefetch, self.prefetch);
        if let Some(v) = self.variant {
            c.model.variant = match v {
                VariantArg::Gla => Variant::Gla,
                VariantArg::LateFusion => Variant::LateFusion,
                VariantArg::LeaderOnly => Variant::LeaderOnly,
                VariantArg::AssistantOnly => Variant::AssistantOnly,
                VariantArg::PooledConcat => Variant::PooledConcat,
                VariantArg::ProjectedConcat => Variant::ProjectedConcat,
            };
        }
        if let Some(m) = self.projection {
            c.model.projection.mode = match m {
                ModeArg::Abstract => ProjectionMode::Abstract,
                ModeArg::Temporal => ProjectionMode::Temporal,
            };
        }
        if let Some(a) = self.attention {
            c.model.gla.attention = match a {
                AttentionArg::Cross => AttentionMode::Cross,
                AttentionArg::SelfAblation => AttentionMode::SelfAblation,
            };
        }
        c.model.swap_inputs |= self.swap_inputs;
        c.strict_deterministic &= !self.no_strict;
        c.plots |= self.plots;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset directory (with manifest.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint; its config is used, --epochs may extend it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Uniformly spaced temporal crops averaged per clip pair.
    #[arg(long, default_value_t = 10)]
    clips: usize,
    /// Evaluate the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// Write the confusion matrix here as CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// An op name or `model` (see --list).
    #[arg(long, default_value = "model")]
    scope: String,
    /// Number of random instances.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pass threshold on the max relative error [default: 1e-5 for ops, 1e-4 for the model].
    #[arg(long)]
    tolerance: Option<f64>,
    /// Coordinates probed per argument [default: all for ops, 4 for the model].
    #[arg(long)]
    probes: Option<usize>,
    /// List available scopes and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct Ablate {
    /// JSON run config every cell starts from.
    #[arg(long)]
    base_config: Option<PathBuf>,
    /// Async dataset directory [default: generated in memory].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sync (tight) dataset directory [default: generated in memory].
    #[arg(long)]
    sync_data: Option<PathBuf>,
    /// Motion-scale dataset directory [default: generated in memory].
    #[arg(long)]
    motion_scale_data: Option<PathBuf>,
    /// Seed for in-memory datasets.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Only these groups (stream, swap, blocks, attention, modules, components, variant).
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<String>>,
    /// Epoch override for every cell.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for report.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    FullScale,
}

#[derive(Args)]
struct Bench {
    /// JSON run config; only its model section is used.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: PresetArg,
    /// Timed forward passes.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Test-time views per video multiplied into the FLOP column.
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also print the per-layer FLOP ledger.
    #[arg(long)]
    ledger: bool,
}

fn gen_data(a: &GenData) -> Result<()> {
    let spec = DatasetSpec {
        table: match a.table {
            TableArg::Default => ClassTable::Default,
            TableArg::Tight => ClassTable::Tight,
            TableArg::MotionScale => ClassTable::MotionScale,
        },
        classes: Some(a.classes),
        per_class: a.per_class,
        test_per_class: a.test_per_class.unwrap_or((a.per_class / 5).max(1)),
        sync: if a.sync {
            SyncMode::Sync
        } else {
            SyncMode::Async
        },
        jitter: a.jitter,
        sigma: a.sigma,
        frames: a.frames,
        height: a.height,
        width: a.width,
        seed: a.seed,
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} clip pairs ({} classes, counts {:?}) to {}",
        manifest.records.len(),
        manifest.class_counts().len(),
        manifest.class_counts(),
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: Option<&Path>) -> Result<Dataset> {
    let dir = dir.ok_or_else(|| {
        Error::Config("a dataset directory is required (--data or data_dir)".into())
    })?;
    Dataset::load(dir)
}

fn train(a: &Train) -> Result<()> {
    let trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            if let Some(e) = a.overrides.epochs {
                t.config.epochs = e;
            }
            if let Some(d) = &a.out {
                t.config.out_dir = Some(d.clone());
            }
            t
        }
        None => {
            let mut config = a.overrides.resolve()?;
            if let Some(d) = &a.data {
                config.data_dir = Some(d.clone());
            }
            if let Some(d) = &a.out {
                config.out_dir = Some(d.clone());
            }
            config.check_paths()?;
            Trainer::new(&config)?
        }
    };
    let data_dir = a.data.clone().or_else(|| trainer.config.data_dir.clone());
    let data = load_data(data_dir.as_deref())?;
    if let Some(dir) = &trainer.config.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, trainer.config.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    let start = Instant::now();
    let outcome = fit(trainer, &data, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}  [{:.1}s]",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "{}",
        serde_json::json!({
            "epochs": outcome.checkpoint.epoch,
            "test_accuracy": outcome.test.accuracy,
            "per_class_accuracy": outcome.test.per_class_accuracy,
        })
    );
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut model = DyadModel::new(&ckpt.config.model, ckpt.config.seed)?;
    ckpt.restore_into(&mut model)?;
    let data = Dataset::load(&a.data)?;
    let split = if a.train_split {
        &data.train
    } else {
        &data.test
    };
    let metrics = evaluate(&model, split, a.clips, ckpt.config.batch_size)?;
    if let Some(path) = &a.confusion {
        metrics.write_confusion_csv(path)?;
    }
    println!(
        "{}",
        serde_json::to_string(&metrics).expect("metrics serialise")
    );
    Ok(())
}

fn gradcheck(a: &Gradcheck) -> Result<()> {
    if a.list {
        for op in OP_NAMES {
            println!("{op}");
        }
        println!("model");
        return Ok(());
    }
    let is_model = a.scope == "model";
    let opts = GradcheckOptions {
        tolerance: a.tolerance.unwrap_or(if is_model { 1e-4 } else { 1e-5 }),
        max_probes: a.probes.or(if is_model { Some(4) } else { None }),
        ..GradcheckOptions::default()
    };
    let mut worst: f64 = 0.0;
    let mut all_passed = true;
    for s in a.seed..a.seed + a.seeds.max(1) {
        let opts = GradcheckOptions {
            seed: s,
            ..opts.clone()
        };
        let report = if is_model {
            check_model(&gradcheck_config(), s, &opts)?
        } else {
            check_op(&a.scope, s, &opts)?
        };
        println!("# scope {} seed {s}", a.scope);
        print!("{}", report.table());
        worst = worst.max(report.max_rel_err());
        all_passed &= report.passed();
    }
    println!(
        "scope {}: max relative error {worst:.3e} over {} seed(s), tolerance {:.0e}: {}",
        a.scope,
        a.seeds.max(1),
        opts.tolerance,
        if all_passed { "PASS" } else { "FAIL" }
    );
    if all_passed {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for {} (max relative error {worst:.3e})",
            a.scope
        )))
    }
}

fn ablate(a: &Ablate) -> Result<()> {
    let mut base = match &a.base_config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    let make = |dir: &Option<PathBuf>, table, sync| -> Result<Dataset> {
        match dir {
            Some(d) => Dataset::load(d),
            None => Dataset::in_memory(&DatasetSpec {
                table,
                sync,
                seed: a.data_seed,
                ..DatasetSpec::default()
            }),
        }
    };
    let asynchronous = make(&a.data, ClassTable::Default, SyncMode::Async)?;
    let synchronous = make(&a.sync_data, ClassTable::Tight, SyncMode::Sync)?;
    let motion_scale = make(
        &a.motion_scale_data,
        ClassTable::MotionScale,
        SyncMode::Async,
    )?;
    let data = AblationData {
        asynchronous: &asynchronous,
        synchronous: Some(&synchronous),
        motion_scale: Some(&motion_scale),
    };
    let groups: Option<Vec<&str>> = a
        .groups
        .as_ref()
        .map(|g| g.iter().map(String::as_str).collect());
    let report = run_ablation_suite(&base, &data, groups.as_deref(), |cell, m| match m {
        None => eprintln!("training {}/{} on {}", cell.group, cell.cell, cell.dataset),
        Some(m) => eprintln!(
            "  epoch {:>3}  loss {:.4}  test {:.3}",
            m.epoch, m.train_loss, m.test_accuracy
        ),
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.write_csv(&a.out.join("report.csv"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn bench_cmd(a: &Bench) -> Result<()> {
    let (model_config, name) = match (&a.config, a.preset) {
        (Some(p), _) => (RunConfig::from_file(p)?.model, p.display().to_string()),
        (None, PresetArg::Toy) => (RunConfig::default().model, "toy".to_string()),
        (None, PresetArg::FullScale) => (RunConfig::full_scale().model, "full-scale".to_string()),
    };
    let model = DyadModel::<f32>::new(&model_config, a.seed)?;
    if a.ledger {
        for e in dyad::harness::complexity::flop_ledger(&model, 1)? {
            println!(
                "{:<10} {:<24} {:>14}",
                e.op,
                format!("{:?}", e.shape),
                e.flops
            );
        }
    }
    let report = bench(&model, &name, a.views, a.repeats)?;
    println!("{}", BenchReport::header());
    println!("{}", report.row());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
