//! `tnet`: batch CLI over the tensor-network toolkit. Every command reads and
//! writes files (TNDS datasets, TNMW models, CSV/SVG reports) and records a
//! plain-text manifest next to its outputs.

mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tnet_core::analysis::{compression_sweep, entropy_map};
use tnet_core::classifier::Topology;
use tnet_core::encoding::{generate_synthetic, load_dataset, save_dataset, split_dataset};
use tnet_core::persistence::{load_model, save_model, sidecar_path};
use tnet_core::poison::{
    default_background_mask, poison_background, poison_single_pixel, PoisonSpec,
    DEFAULT_PIXEL_VARIANCE, DEFAULT_SPECKLE_VARIANCE,
};
use tnet_core::trainer::{init_model, train, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "tnet", version, about = "Train, audit and compress tensor-network image classifiers")]
struct Cli {
    /// Worker thread cap (default: TNET_THREADS env var, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, split or poison TNDS dataset files.
    Dataset {
        #[command(subcommand)]
        sub: DatasetCmd,
    },
    /// Train a classifier with DMRG-style sweeps.
    Train(TrainArgs),
    /// Emit the per-pixel entanglement-entropy map of a model.
    Entropy(EntropyArgs),
    /// Compress a model by Schmidt truncation and sweep thresholds.
    Compress(CompressArgs),
    /// Evaluate a model against one or more datasets.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate a synthetic labeled image dataset.
    Synth {
        /// Number of samples (balanced round-robin over classes).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// Square image side; use --height/--width for non-square.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Multiplicative clutter-noise variance.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into train/test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        /// Train fraction in (0, 1).
        #[arg(long)]
        frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Apply a poisoning attack to a dataset.
    Poison {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        variant: PoisonKind,
        /// Pixel index for --variant pixel.
        #[arg(long)]
        pixel: Option<usize>,
        /// Background-mask half-side for --variant speckle: everything
        /// outside the centered square of side 2*extent is speckled.
        #[arg(long)]
        mask_extent: Option<usize>,
        /// Noise variance (defaults: 1e-4 pixel, 0.02 speckle).
        #[arg(long)]
        variance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PoisonKind {
    Pixel,
    Speckle,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Mps,
    Ttn,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation/test dataset used for sweep metrics and model selection.
    #[arg(long)]
    val: PathBuf,
    #[arg(long, value_enum, default_value_t = TopologyArg::Ttn)]
    topology: TopologyArg,
    /// Maximum bond dimension.
    #[arg(long, default_value_t = 16)]
    chi: usize,
    /// Initial bond dimension.
    #[arg(long, default_value_t = 8)]
    chi_init: usize,
    #[arg(long, default_value_t = 10)]
    sweeps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Relative truncation budget per two-site split.
    #[arg(long, default_value_t = 1e-9)]
    trunc_eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many sweeps without validation-loss improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Output model path; a per-sweep CSV goes to <out>.report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    /// Also print the N highest-entropy pixel coordinates.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Single threshold; writes the compressed model to --out-model.
    #[arg(long, conflicts_with = "eps_grid")]
    eps: Option<f64>,
    /// Logarithmic grid lo:hi:points, e.g. 1e-6:1e-1:10.
    #[arg(long)]
    eps_grid: Option<String>,
    /// Test dataset for accuracy columns.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_svg: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// One or more datasets; paired rows give e.g. the poisoning gap.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Accuracy table; per-dataset confusion matrices go next to it.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

/// 0 success, 2 flag/validation, 3 data/model format, 4 numerical failure.
fn exit_code_for(err: &CliError) -> u8 {
    match err {
        CliError::Usage(_) => 2,
        CliError::Data(_) | CliError::Model(_) | CliError::Io(_) => 3,
        CliError::Numerical(_) => 4,
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Model(String),
    Numerical(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "invalid arguments: {m}"),
            CliError::Data(m) => write!(f, "dataset error: {m}"),
            CliError::Model(m) => write!(f, "model error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<tnet_core::encoding::DataError> for CliError {
    fn from(e: tnet_core::encoding::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<tnet_core::poison::PoisonError> for CliError {
    fn from(e: tnet_core::poison::PoisonError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<tnet_core::persistence::PersistError> for CliError {
    fn from(e: tnet_core::persistence::PersistError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<tnet_core::classifier::ClassifierError> for CliError {
    fn from(e: tnet_core::classifier::ClassifierError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<tnet_core::analysis::AnalysisError> for CliError {
    fn from(e: tnet_core::analysis::AnalysisError) -> Self {
        match e {
            tnet_core::analysis::AnalysisError::BadEpsList
            | tnet_core::analysis::AnalysisError::FeatureOutOfRange { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::Tensor(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("TNET_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads {
        if t == 0 {
            eprintln!("invalid arguments: --threads must be >= 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    let started = Instant::now();
    match cmd {
        Command::Dataset { sub } => run_dataset(sub, started),
        Command::Train(args) => run_train(args, started),
        Command::Entropy(args) => run_entropy(args, started),
        Command::Compress(args) => run_compress(args, started),
        Command::Eval(args) => run_eval(args, started),
    }
}

fn run_dataset(cmd: DatasetCmd, started: Instant) -> Result<(), CliError> {
    match cmd {
        DatasetCmd::Synth { n, classes, size, height, width, noise, seed, out } => {
            let h = height.unwrap_or(size);
            let w = width.unwrap_or(size);
            let ds = generate_synthetic(n, classes, h, w, noise, seed)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples ({h}x{w}, {classes} classes) to {}", ds.len(), out.display());
            Ok(manifest::write(
                &out,
                "dataset synth",
                &[
                    ("n", n.to_string()),
                    ("classes", classes.to_string()),
                    ("height", h.to_string()),
                    ("width", w.to_string()),
                    ("noise", noise.to_string()),
                    ("seed", seed.to_string()),
                    ("out", out.display().to_string()),
                    ("out_sha256", manifest::file_sha256(&out)?),
                ],
                started,
            )?)
        }
        DatasetCmd::Split { input, frac, seed, out_train, out_test } => {
            let ds = load_dataset(&input)?;
            let (tr, te) = split_dataset(&ds, frac, seed)?;
            save_dataset(&tr, &out_train)?;
            save_dataset(&te, &out_test)?;
            println!("split {} -> {} train / {} test", ds.len(), tr.len(), te.len());
            Ok(manifest::write(
                &out_train,
                "dataset split",
                &[
                    ("input", input.display().to_string()),
                    ("input_sha256", manifest::file_sha256(&input)?),
                    ("frac", frac.to_string()),
                    ("seed", seed.to_string()),
                    ("out_train", out_train.display().to_string()),
                    ("out_test", out_test.display().to_string()),
                    ("n_train", tr.len().to_string()),
                    ("n_test", te.len().to_string()),
                ],
                started,
            )?)
        }
        DatasetCmd::Poison { input, variant, pixel, mask_extent, variance, seed, out } => {
            let ds = load_dataset(&input)?;
            let poisoned = match variant {
                PoisonKind::Pixel => {
                    let pixel = pixel.ok_or_else(|| {
                        CliError::Usage("--variant pixel requires --pixel <index>".into())
                    })?;
                    let spec = PoisonSpec::single_pixel(
                        pixel,
                        variance.unwrap_or(DEFAULT_PIXEL_VARIANCE),
                        seed,
                        ds.n_classes,
                    );
                    poison_single_pixel(&ds, &spec)?
                }
                PoisonKind::Speckle => {
                    let extent = mask_extent.ok_or_else(|| {
                        CliError::Usage("--variant speckle requires --mask-extent <pixels>".into())
                    })?;
                    let mask = default_background_mask(ds.height, ds.width, extent)?;
                    let spec = PoisonSpec::background_speckle(
                        mask,
                        variance.unwrap_or(DEFAULT_SPECKLE_VARIANCE),
                        seed,
                        ds.n_classes,
                    );
                    poison_background(&ds, &spec)?
                }
            };
            save_dataset(&poisoned, &out)?;
            println!("poisoned {} samples -> {}", poisoned.len(), out.display());
            Ok(manifest::write(
                &out,
                "dataset poison",
                &[
                    ("input", input.display().to_string()),
                    ("input_sha256", manifest::file_sha256(&input)?),
                    (
                        "variant",
                        match variant {
                            PoisonKind::Pixel => "pixel".into(),
                            PoisonKind::Speckle => "speckle".into(),
                        },
                    ),
                    ("pixel", pixel.map_or("-".into(), |p| p.to_string())),
                    ("mask_extent", mask_extent.map_or("-".into(), |e| e.to_string())),
                    ("variance", variance.map_or("default".into(), |v| v.to_string())),
                    ("seed", seed.to_string()),
                    ("out", out.display().to_string()),
                ],
                started,
            )?)
        }
    }
}

fn run_train(args: TrainArgs, started: Instant) -> Result<(), CliError> {
    let tr = load_dataset(&args.train)?;
    let val = load_dataset(&args.val)?;
    let topology = match args.topology {
        TopologyArg::Mps => Topology::Mps,
        TopologyArg::Ttn => Topology::Ttn,
    };
    let model = init_model(
        topology,
        tr.n_features(),
        tr.n_classes,
        args.chi_init.min(args.chi),
        args.seed,
        tr.height,
        tr.width,
    )?;
    let cfg = TrainConfig {
        max_bond_dim: args.chi,
        n_sweeps: args.sweeps,
        learning_rate: args.lr,
        batch_size: args.batch,
        truncation_eps: args.trunc_eps,
        seed: args.seed,
        patience: args.patience,
    };
    let (trained, rep) = train(&model, &tr, &val, &cfg)?;
    save_model(&trained, &args.out)?;
    let csv_path = report::suffixed(&args.out, ".report.csv");
    report::train_report_csv(&rep, &csv_path)?;
    let best = rep.val_accuracy.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "trained {} sweeps, best val accuracy {best:.4}; model -> {}, report -> {}",
        rep.val_accuracy.len(),
        args.out.display(),
        csv_path.display()
    );
    tnet_core::persistence::save_json(
        &serde_json::json!({
            "command": "train",
            "topology": format!("{topology:?}"),
            "chi": args.chi,
            "chi_init": args.chi_init,
            "sweeps": args.sweeps,
            "lr": args.lr,
            "batch": args.batch,
            "trunc_eps": args.trunc_eps,
            "seed": args.seed,
            "train_sha256": manifest::file_sha256(&args.train)?,
            "val_sha256": manifest::file_sha256(&args.val)?,
        }),
        &sidecar_path(&args.out),
    )?;
    Ok(manifest::write(
        &args.out,
        "train",
        &[
            ("train", args.train.display().to_string()),
            ("train_sha256", manifest::file_sha256(&args.train)?),
            ("val", args.val.display().to_string()),
            ("val_sha256", manifest::file_sha256(&args.val)?),
            ("topology", format!("{topology:?}")),
            ("chi", args.chi.to_string()),
            ("chi_init", args.chi_init.to_string()),
            ("sweeps", args.sweeps.to_string()),
            ("lr", args.lr.to_string()),
            ("batch", args.batch.to_string()),
            ("trunc_eps", args.trunc_eps.to_string()),
            ("seed", args.seed.to_string()),
            ("patience", args.patience.map_or("-".into(), |p| p.to_string())),
            ("best_val_accuracy", format!("{best:.6}")),
            ("out", args.out.display().to_string()),
        ],
        started,
    )?)
}

fn run_entropy(args: EntropyArgs, started: Instant) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let map = entropy_map(&model)?;
    report::entropy_grid_csv(&map, &args.out_csv)?;
    if let Some(svg) = &args.out_svg {
        report::entropy_heatmap_svg(&map, svg)?;
    }
    if let Some(n) = args.top {
        let mut ranked: Vec<(usize, f64)> =
            map.values.iter().cloned().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        println!("top {n} entropy pixels (row, col, nats):");
        for &(i, v) in ranked.iter().take(n) {
            println!("  {}, {}, {v:.6}", i / map.width, i % map.width);
        }
    }
    println!("entropy map ({}x{}) -> {}", map.height, map.width, args.out_csv.display());
    Ok(manifest::write(
        &args.out_csv,
        "entropy",
        &[
            ("model", args.model.display().to_string()),
            ("model_sha256", manifest::file_sha256(&args.model)?),
            ("out_csv", args.out_csv.display().to_string()),
            (
                "out_svg",
                args.out_svg.as_ref().map_or("-".into(), |p| p.display().to_string()),
            ),
        ],
        started,
    )?)
}

fn parse_eps_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("--eps-grid expects lo:hi:points, got '{s}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let points: usize = parts[2].parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi > lo && points >= 2) {
        return Err(CliError::Usage(
            "--eps-grid needs 0 < lo < hi and points >= 2".into(),
        ));
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|i| (llo + (lhi - llo) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

fn run_compress(args: CompressArgs, started: Instant) -> Result<(), CliError> {
    // validate flags before touching any file
    let eps_list = match (&args.eps, &args.eps_grid) {
        (Some(e), None) => vec![*e],
        (None, Some(g)) => parse_eps_grid(g)?,
        (None, None) => parse_eps_grid("1e-6:1e-1:10")?,
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let model = load_model(&args.model)?;
    let test = load_dataset(&args.test)?;
    let reports = compression_sweep(&model, &eps_list, &test)?;
    report::compression_csv(&reports, &args.out_csv)?;
    if let Some(svg) = &args.out_svg {
        report::compression_chart_svg(&reports, svg)?;
    }
    if let Some(out_model) = &args.out_model {
        let eps = *eps_list.last().unwrap();
        let (compressed, _) = tnet_core::analysis::compress(&model, eps)?;
        save_model(&compressed, out_model)?;
        println!("compressed model (eps {eps:e}) -> {}", out_model.display());
    }
    for r in &reports {
        println!(
            "eps {:>9.3e}: params {} -> {} (r {:.3}), accuracy {:.4} -> {:.4}",
            r.eps,
            r.params_before,
            r.params_after,
            r.ratio,
            r.accuracy_before.unwrap_or(f64::NAN),
            r.accuracy_after.unwrap_or(f64::NAN)
        );
    }
    Ok(manifest::write(
        &args.out_csv,
        "compress",
        &[
            ("model", args.model.display().to_string()),
            ("model_sha256", manifest::file_sha256(&args.model)?),
            ("test", args.test.display().to_string()),
            ("test_sha256", manifest::file_sha256(&args.test)?),
            ("eps_list", format!("{eps_list:?}")),
            ("out_csv", args.out_csv.display().to_string()),
        ],
        started,
    )?)
}

fn run_eval(args: EvalArgs, started: Instant) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let mut rows = Vec::new();
    for path in &args.data {
        let ds = load_dataset(path)?;
        let ev = model.evaluate(&ds)?;
        println!("{}: accuracy {:.4} ({} samples)", path.display(), ev.accuracy, ev.n_samples);
        if let Some(out) = &args.out_csv {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let conf = report::suffixed(out, &format!(".{stem}.confusion.csv"));
            report::confusion_csv(&ev, &conf)?;
        }
        rows.push((path.display().to_string(), ev));
    }
    if rows.len() == 2 {
        let gap = rows[0].1.accuracy - rows[1].1.accuracy;
        println!("accuracy gap (first - second): {gap:+.4}");
    }
    if let Some(out) = &args.out_csv {
        report::eval_csv(&rows, out)?;
        manifest::write(
            out,
            "eval",
            &[
                ("model", args.model.display().to_string()),
                ("model_sha256", manifest::file_sha256(&args.model)?),
                (
                    "data",
                    args.data
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ),
                ("out_csv", out.display().to_string()),
            ],
            started,
        )?;
    }
    Ok(())
}
