use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use resnext::data::{load_subset, CifarArchive, Dataset, SubsetName};
use resnext::model::equivalence::{verify_blocks, Precision, TOLERANCE_F32, TOLERANCE_F64};
use resnext::model::{count_parameters_for, validate_config, BlockForm, Model, ModelConfig};
use resnext::report::{
    drop_epochs, render_error_vs_epoch, render_error_vs_size, sweep_grid, RunManifest, Series, SizePoint, SweepAxis,
    ARTIFACT_VERSION,
};
use resnext::rng;
use resnext::trainer::{evaluate, read_metrics_csv, write_metrics_csv, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "resnext", version, about = "ResNeXt on CIFAR-10 subsets")]
struct Cli {
    /// Worker threads for batch-parallel kernels (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the Cifar-2/-5/-10 subsets and write their manifests.
    Prepare(PrepareArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a subset's test split.
    Eval(EvalArgs),
    /// Check that the three block forms compute the same function.
    VerifyBlocks(VerifyArgs),
    /// Print the learnable-scalar count and layer table of a config.
    CountParams(CountArgs),
    /// Render SVG plots from metrics CSV files.
    Plot(PlotArgs),
    /// Train a one-axis grid of configurations and plot them together.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "artifacts")]
    out_dir: PathBuf,
    /// Subsets to draw; all three when omitted.
    #[arg(long, value_delimiter = ',')]
    subset: Vec<SubsetName>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 29)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    cardinality: usize,
    #[arg(long, default_value_t = 64)]
    base_width: usize,
    #[arg(long, value_enum, default_value_t = Form::Grouped)]
    form: Form,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Split,
    Concat,
    Grouped,
}

impl From<Form> for BlockForm {
    fn from(f: Form) -> Self {
        match f {
            Form::Split => BlockForm::Split,
            Form::Concat => BlockForm::Concat,
            Form::Grouped => BlockForm::Grouped,
        }
    }
}

#[derive(Args, Clone)]
struct RecipeArgs {
    #[arg(long, default_value = "cifar10")]
    subset: SubsetName,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Learning-rate drop epochs; by default one half and three quarters of
    /// the run.
    #[arg(long, value_delimiter = ',')]
    drop_epochs: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.1)]
    drop_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable random crop and flip.
    #[arg(long)]
    no_augment: bool,
    /// Train on only the first N examples of the subset.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Evaluate on only the first N test examples.
    #[arg(long)]
    test_limit: Option<usize>,
}

impl RecipeArgs {
    fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::scaled(self.epochs);
        if let Some(d) = &self.drop_epochs {
            cfg.lr_drop_epochs = d.clone();
        }
        cfg.batch_size = self.batch_size;
        cfg.base_lr = self.lr;
        cfg.lr_drop_factor = self.drop_factor;
        cfg.momentum = self.momentum;
        cfg.weight_decay = self.weight_decay;
        cfg.seed = self.seed;
        cfg.augment = !self.no_augment;
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "artifacts/run")]
    out_dir: PathBuf,
    /// Re-launch the run described by a run manifest; model and recipe
    /// flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in total (the run stays resumable).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Defaults to the subset recorded next to the checkpoint, else cifar10.
    #[arg(long)]
    subset: Option<SubsetName>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 29)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    cardinality: usize,
    #[arg(long, default_value_t = 64)]
    base_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square test input.
    #[arg(long, default_value_t = 6)]
    spatial: usize,
    /// Largest allowed deviation in 32-bit mode.
    #[arg(long, default_value_t = TOLERANCE_F32)]
    tolerance: f64,
    /// Largest allowed deviation in 64-bit mode.
    #[arg(long, default_value_t = TOLERANCE_F64)]
    tolerance_f64: f64,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotKind {
    ErrorVsEpoch,
    ErrorVsSize,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum, default_value_t = PlotKind::ErrorVsEpoch)]
    kind: PlotKind,
    /// Metrics CSV, one per series.
    #[arg(long = "metrics")]
    metrics: Vec<PathBuf>,
    /// Series labels, in the order of --metrics.
    #[arg(long = "label")]
    labels: Vec<String>,
    /// Learnable-parameter count per series (error-vs-size only).
    #[arg(long = "params")]
    params: Vec<usize>,
    /// Run directory holding run_manifest.txt; supplies metrics, label and
    /// parameter count.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "29")]
    depth: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    cardinality: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    base_width: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Form::Grouped)]
    form: Form,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "artifacts/sweep")]
    out_dir: PathBuf,
    /// Run grid points concurrently.
    #[arg(long)]
    parallel: bool,
}

const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const EPOCH_PLOT_FILE: &str = "error_vs_epoch.svg";
const MANIFEST_FILE: &str = "run_manifest.txt";

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::VerifyBlocks(a) => verify(a),
        Command::CountParams(a) => count(a),
        Command::Plot(a) => plot(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn prepare(args: PrepareArgs) -> Result<ExitCode> {
    let archive = CifarArchive::load(&args.data_dir)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let subsets = if args.subset.is_empty() {
        SubsetName::ALL.to_vec()
    } else {
        args.subset
    };
    for name in subsets {
        let ds = resnext::data::build_subset(&archive.train, &archive.test, &name.spec())?;
        let path = args.out_dir.join(format!("{name}_manifest.txt"));
        fs::write(&path, ds.manifest()).with_context(|| format!("writing {}", path.display()))?;
        println!(
            "{name}: {} train / {} test, classes {} -> {}",
            ds.train.len(),
            ds.test.len(),
            ds.spec.class_names().join(","),
            path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn model_config(m: &ModelArgs, classes: usize) -> Result<ModelConfig> {
    let cfg = ModelConfig::new(m.depth, m.cardinality, m.base_width, classes).with_form(m.form.into());
    validate_config(&cfg)?;
    Ok(cfg)
}

fn series_label(cfg: &ModelConfig, axis: Option<SweepAxis>) -> String {
    match axis {
        Some(SweepAxis::Depth) => format!("{} depth {}", cfg.label(), cfg.depth),
        _ => cfg.label(),
    }
}

fn run_id(subset: SubsetName, cfg: &ModelConfig, seed: u64) -> String {
    format!("{subset}-d{}-{}-s{seed}", cfg.depth, cfg.label())
}

struct RunPlan {
    manifest: RunManifest,
    test_limit: Option<usize>,
    out_dir: PathBuf,
}

fn load_data(data_dir: &Path, plan: &RunPlan) -> Result<Dataset> {
    let ds = load_subset(data_dir, plan.manifest.subset)
        .with_context(|| format!("loading {} from {}", plan.manifest.subset, data_dir.display()))?;
    Ok(ds.limited(plan.manifest.train_limit, plan.test_limit))
}

/// Trains until the recipe (or `stop_after`) is done, saving metrics, the
/// checkpoint, the plot and the manifest after every epoch.
fn execute(plan: &RunPlan, data: &Dataset, resume: bool, stop_after: Option<usize>, quiet: bool) -> Result<Trainer> {
    let m = &plan.manifest;
    fs::create_dir_all(&plan.out_dir).with_context(|| format!("creating {}", plan.out_dir.display()))?;
    let mut trainer = if resume {
        let ck = Checkpoint::load(&m.checkpoint).with_context(|| format!("reading {}", m.checkpoint.display()))?;
        let t = Trainer::from_checkpoint(ck)?;
        t.check_resume(&m.model, &m.train)?;
        ensure!(
            t.stats == data.stats,
            "checkpoint normalization statistics differ from the {} subset",
            m.subset
        );
        let mut t = t;
        t.config.epochs = m.train.epochs;
        t
    } else {
        Trainer::new(m.model, m.train.clone(), data.stats)?
    };
    let write_all = |t: &Trainer| -> Result<()> {
        write_metrics_csv(&m.metrics, &t.history)?;
        t.checkpoint().save(&m.checkpoint)?;
        let series = Series {
            label: series_label(&m.model, None),
            rows: t.history.clone(),
        };
        if !series.rows.is_empty() {
            let svg = render_error_vs_epoch(&[series], &m.train.lr_drop_epochs)?;
            fs::write(&m.plots[0], svg)?;
        }
        fs::write(plan.out_dir.join(MANIFEST_FILE), m.to_text())?;
        Ok(())
    };
    let stop = stop_after.unwrap_or(usize::MAX).min(m.train.epochs);
    while trainer.next_epoch < stop {
        let row = trainer.run_epoch(data)?;
        write_all(&trainer)?;
        if !quiet {
            println!(
                "epoch {:>3}  lr {:<7} train loss {:.4}  train acc {:6.2}%  test loss {:.4}  test err {:6.2}%",
                row.epoch, row.lr, row.train_loss, row.train_acc, row.test_loss, row.test_err
            );
        }
    }
    write_all(&trainer)?;
    Ok(trainer)
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let (manifest, test_limit) = match &args.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (RunManifest::parse(&text)?, args.recipe.test_limit)
        }
        None => {
            let subset = args.recipe.subset;
            let model = model_config(&args.model, subset.spec().num_classes())?;
            let train = args.recipe.train_config();
            (
                RunManifest {
                    run_id: run_id(subset, &model, train.seed),
                    model,
                    train,
                    subset,
                    train_limit: args.recipe.train_limit,
                    metrics: PathBuf::new(),
                    checkpoint: PathBuf::new(),
                    plots: vec![],
                    artifact_version: ARTIFACT_VERSION.into(),
                },
                args.recipe.test_limit,
            )
        }
    };
    manifest.train.validate()?;
    let out = args.out_dir.clone();
    let manifest = RunManifest {
        metrics: out.join(METRICS_FILE),
        checkpoint: out.join(CHECKPOINT_FILE),
        plots: vec![out.join(EPOCH_PLOT_FILE)],
        ..manifest
    };
    let plan = RunPlan {
        manifest,
        test_limit,
        out_dir: out,
    };
    let data = load_data(&args.data_dir, &plan)?;
    let t = execute(&plan, &data, args.resume, args.stop_after, false)?;
    match t.history.last() {
        Some(r) => println!(
            "{}: {} epochs, final test error {:.2}%",
            plan.manifest.run_id, t.next_epoch, r.test_err
        ),
        None => println!("{}: no epochs run", plan.manifest.run_id),
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let subset = match args.subset {
        Some(s) => s,
        None => args
            .checkpoint
            .parent()
            .map(|d| d.join(MANIFEST_FILE))
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|t| RunManifest::parse(&t).ok())
            .map_or(SubsetName::Cifar10, |m| m.subset),
    };
    ensure!(
        subset.spec().num_classes() == ck.model.num_classes,
        "checkpoint has {} classes but {subset} has {}",
        ck.model.num_classes,
        subset.spec().num_classes()
    );
    let batch = ck.train.batch_size;
    let mut trainer = Trainer::from_checkpoint(ck)?;
    let ds = load_subset(&args.data_dir, subset)?.limited(None, args.test_limit);
    let r = evaluate(&mut trainer.model, &ds.test, &trainer.stats, batch)?;
    println!("subset {subset}");
    println!("examples {}", ds.test.len());
    println!("test_loss {:.6}", r.loss);
    println!("test_err {:.2}", r.error);
    Ok(ExitCode::SUCCESS)
}

fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let cfg = ModelConfig::new(args.depth, args.cardinality, args.base_width, 10);
    let report = verify_blocks(&cfg, args.seed, args.spatial)?;
    println!("config {} depth {}", cfg.label(), cfg.depth);
    println!("{:<8} {:<18} {:>12} {:>12}", "prec", "pair", "output", "input grad");
    for (pair, precision, output, grad) in report.pair_maxima() {
        println!(
            "{:<8} {:<18} {:>12.3e} {:>12.3e}",
            match precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
            format!("{}-{}", pair.0, pair.1),
            output,
            grad
        );
    }
    let f32_max = report.max_deviation(Precision::F32);
    let f64_max = report.max_deviation(Precision::F64);
    let ok = report.passes(args.tolerance, args.tolerance_f64);
    println!(
        "max f32 {f32_max:.3e} (tol {:.0e}), max f64 {f64_max:.3e} (tol {:.0e}): {}",
        args.tolerance,
        args.tolerance_f64,
        if ok { "ok" } else { "EXCEEDED" }
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn count(args: CountArgs) -> Result<ExitCode> {
    let cfg = model_config(&args.model, args.classes)?;
    let model = Model::<f32>::build(cfg, &mut rng::seeded(0))?;
    let n = model.count_parameters();
    debug_assert_eq!(n, count_parameters_for(&cfg)?);
    println!("{n}");
    print!("{}", model.summary());
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    series: Series,
    params: Option<usize>,
    drops: Vec<usize>,
}

fn load_series(args: &PlotArgs) -> Result<Vec<Loaded>> {
    let mut out = Vec::new();
    for dir in &args.runs {
        let path = dir.join(MANIFEST_FILE);
        let m = RunManifest::parse(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
        let rows = read_metrics_csv(&m.metrics)?;
        out.push(Loaded {
            series: Series {
                label: m.model.label(),
                rows,
            },
            params: Some(count_parameters_for(&m.model)?),
            drops: m.train.lr_drop_epochs.clone(),
        });
    }
    ensure!(
        args.labels.is_empty() || args.labels.len() == args.metrics.len(),
        "{} labels for {} metrics files",
        args.labels.len(),
        args.metrics.len()
    );
    ensure!(
        args.params.is_empty() || args.params.len() == args.metrics.len(),
        "{} parameter counts for {} metrics files",
        args.params.len(),
        args.metrics.len()
    );
    for (i, path) in args.metrics.iter().enumerate() {
        let rows = read_metrics_csv(path)?;
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map_or("series".into(), |s| s.to_string_lossy().into_owned())
        });
        let drops = drop_epochs(&rows);
        out.push(Loaded {
            series: Series { label, rows },
            params: args.params.get(i).copied(),
            drops,
        });
    }
    Ok(out)
}

fn plot(args: PlotArgs) -> Result<ExitCode> {
    let loaded = load_series(&args)?;
    ensure!(!loaded.is_empty(), "no series given; pass --metrics or --run");
    let svg = match args.kind {
        PlotKind::ErrorVsEpoch => {
            let mut drops: Vec<usize> = loaded.iter().flat_map(|l| l.drops.iter().copied()).collect();
            drops.sort_unstable();
            drops.dedup();
            let series: Vec<Series> = loaded.into_iter().map(|l| l.series).collect();
            render_error_vs_epoch(&series, &drops)?
        }
        PlotKind::ErrorVsSize => {
            let mut points = Vec::new();
            for l in &loaded {
                let Some(p) = l.params else {
                    bail!(
                        "series `{}` needs a parameter count (--params or --run)",
                        l.series.label
                    );
                };
                points.push(SizePoint::from_series(&l.series, p)?);
            }
            render_error_vs_size(&points)?
        }
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, svg).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let subset = args.recipe.subset;
    let classes = subset.spec().num_classes();
    let (axis, grid) = sweep_grid(&args.depth, &args.cardinality, &args.base_width, classes)?;
    let train = args.recipe.train_config();
    train.validate()?;
    let plans: Vec<RunPlan> = grid
        .iter()
        .map(|cfg| {
            let model = cfg.with_form(args.form.into());
            let id = run_id(subset, &model, train.seed);
            let out = args.out_dir.join(&id);
            RunPlan {
                manifest: RunManifest {
                    run_id: id,
                    model,
                    train: train.clone(),
                    subset,
                    train_limit: args.recipe.train_limit,
                    metrics: out.join(METRICS_FILE),
                    checkpoint: out.join(CHECKPOINT_FILE),
                    plots: vec![out.join(EPOCH_PLOT_FILE)],
                    artifact_version: ARTIFACT_VERSION.into(),
                },
                test_limit: args.recipe.test_limit,
                out_dir: out,
            }
        })
        .collect();
    let data = load_data(&args.data_dir, &plans[0])?;
    println!("sweep over {} with {} runs", axis.as_str(), plans.len());
    let run = |p: &RunPlan| -> Result<Series> {
        let t = execute(p, &data, false, None, args.parallel)?;
        println!(
            "{}: final test error {:.2}%",
            p.manifest.run_id,
            t.history.last().map_or(f64::NAN, |r| r.test_err)
        );
        Ok(Series {
            label: series_label(&p.manifest.model, Some(axis)),
            rows: t.history,
        })
    };
    let series: Vec<Series> = if args.parallel {
        plans.par_iter().map(run).collect::<Result<_>>()?
    } else {
        plans.iter().map(run).collect::<Result<_>>()?
    };
    fs::create_dir_all(&args.out_dir)?;
    let epoch_svg = args.out_dir.join(EPOCH_PLOT_FILE);
    fs::write(&epoch_svg, render_error_vs_epoch(&series, &train.lr_drop_epochs)?)?;
    let points = series
        .iter()
        .zip(&plans)
        .map(|(s, p)| SizePoint::from_series(s, count_parameters_for(&p.manifest.model)?))
        .collect::<resnext::Result<Vec<_>>>()?;
    let size_svg = args.out_dir.join("error_vs_size.svg");
    fs::write(&size_svg, render_error_vs_size(&points)?)?;
    let mut listing = format!("axis = {}\n", axis.as_str());
    for p in &plans {
        listing.push_str(&format!("run = {}\n", p.out_dir.join(MANIFEST_FILE).display()));
    }
    listing.push_str(&format!("plots = {},{}\n", epoch_svg.display(), size_svg.display()));
    fs::write(args.out_dir.join("sweep_manifest.txt"), listing)?;
    println!("{}\n{}", epoch_svg.display(), size_svg.display());
    Ok(ExitCode::SUCCESS)
}
