//! `cvs` — command-line front end for cross-view slice synthesis.
//!
//! A thin, single-threaded shell over the library: each subcommand parses
//! its flags, echoes the resolved configuration (and seed, where one is
//! in play) so a run can be reproduced from its own stdout, calls one
//! library entry point, and writes results only under its `--out` path.
//!
//! Exit codes: 0 success, 2 usage error (bad flags, bad shape syntax,
//! malformed `CVS_THREADS`), 3 data error (missing or unreadable files,
//! invalid configs, shape mismatches), 4 numerical failure (non-finite
//! losses, gradient checks out of tolerance).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cvs_core::metrics::{dump_slice_pngs, evaluate};
use cvs_core::networks::{load_checkpoint, NetConfig};
use cvs_core::selfcheck::{all_passed, format_table, gradient_coverage, gradient_suite};
use cvs_core::training::{infer, train_with, TrainConfig};
use cvs_core::volume::{
    degrade, make_phantom, read_volume, write_volume, DegradationSpec, PhantomKind,
};
use cvs_core::{Error, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "cvs",
    version,
    about = "Self-supervised synthesis of intermediate CT slices",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume and write it as a `.cvol` file.
    GenPhantom(GenPhantomArgs),
    /// Thin out the slices of a volume.
    Degrade(DegradeArgs),
    /// Run the two-stage self-supervised training loop.
    Train(TrainArgs),
    /// Reconstruct a dense volume from a coarse one using a checkpoint.
    Infer(InferArgs),
    /// Score a prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match worker_threads() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::GenPhantom(args) => run_gen_phantom(args, threads),
        Command::Degrade(args) => run_degrade(args, threads),
        Command::Train(args) => run_train(args, threads),
        Command::Infer(args) => run_infer(args, threads),
        Command::Evaluate(args) => run_evaluate(args, threads),
        Command::Gradcheck(args) => run_gradcheck(args, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::NonFinite(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            })
        }
    }
}

/// Resolves `CVS_THREADS`. The variable caps worker threads; every
/// compute kernel in the library is currently single-threaded, so any
/// valid cap resolves to one worker — but garbage values are still
/// rejected rather than silently ignored.
fn worker_threads() -> std::result::Result<usize, String> {
    match std::env::var("CVS_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(1)),
            _ => Err(format!("CVS_THREADS must be a positive integer, got {raw:?}")),
        },
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(format!("CVS_THREADS: {e}")),
    }
}

/// The reproducibility header every subcommand prints before doing work.
fn echo(command: &str, threads: usize, config: &serde_json::Value) {
    println!("command: {command}");
    println!("threads: {threads}");
    println!("config: {config}");
}

/// Output files land exactly where `--out` points; create the parents so
/// a nested path works on a fresh directory tree.
fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-phantom
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenPhantomArgs {
    /// Phantom family: layered_sine, ellipsoids or bandlimited_noise.
    #[arg(long, value_parser = parse_kind)]
    kind: PhantomKind,
    /// Volume shape as HxWxL, e.g. 48x48x33.
    #[arg(long, value_parser = parse_shape)]
    shape: (usize, usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination `.cvol` file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<PhantomKind, String> {
    match s {
        "layered_sine" => Ok(PhantomKind::LayeredSine),
        "ellipsoids" => Ok(PhantomKind::Ellipsoids),
        "bandlimited_noise" => Ok(PhantomKind::BandlimitedNoise),
        other => Err(format!(
            "unknown phantom kind {other:?} (expected layered_sine, ellipsoids or bandlimited_noise)"
        )),
    }
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected HxWxL, got {s:?}"));
    }
    let mut dims = [0usize; 3];
    for (dim, part) in dims.iter_mut().zip(&parts) {
        *dim = part.parse().map_err(|_| format!("bad dimension {part:?} in shape {s:?}"))?;
        if *dim == 0 {
            return Err(format!("all dimensions must be positive, got {s:?}"));
        }
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn run_gen_phantom(args: GenPhantomArgs, threads: usize) -> Result<()> {
    let (h, w, l) = args.shape;
    echo(
        "gen-phantom",
        threads,
        &serde_json::json!({
            "kind": args.kind.to_string(),
            "shape": format!("{h}x{w}x{l}"),
            "seed": args.seed,
            "out": args.out,
        }),
    );
    println!("seed: {}", args.seed);
    let v = make_phantom(args.kind, args.shape, args.seed)?;
    ensure_parent(&args.out)?;
    write_volume(&v, &args.out)?;
    println!("wrote: {} ({h}x{w}x{l})", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// degrade
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    /// Keep every r-th slice unchanged.
    Direct,
    /// Blur along z, subsample, add Gaussian noise.
    #[value(name = "blur_noise")]
    BlurNoise,
}

#[derive(Args)]
struct DegradeArgs {
    /// Source `.cvol` file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Slice-reduction factor (>= 2).
    #[arg(long)]
    factor: u32,
    #[arg(long, value_enum, default_value = "direct")]
    method: MethodArg,
    /// Noise stream for blur_noise; ignored by direct.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run_degrade(args: DegradeArgs, threads: usize) -> Result<()> {
    let spec = match args.method {
        MethodArg::Direct => DegradationSpec::direct(args.factor),
        MethodArg::BlurNoise => DegradationSpec::blur_noise(args.factor, args.seed),
    };
    echo(
        "degrade",
        threads,
        &serde_json::json!({
            "in": args.input,
            "spec": spec,
            "out": args.out,
        }),
    );
    println!("seed: {}", spec.seed);
    let v = read_volume(&args.input)?;
    let coarse = degrade(&v, &spec)?;
    ensure_parent(&args.out)?;
    write_volume(&coarse, &args.out)?;
    let (h, w, l) = coarse.dims();
    println!("wrote: {} ({h}x{w}x{l})", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Training config as JSON; omitted fields take their defaults.
    /// Without a file, the default schedule on the desk-scale network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training volumes (every `*.cvol` inside, sorted by name).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the step log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; epoch numbering and the log carry on
    /// where that run stopped.
    #[arg(long)]
    resume: Option<PathBuf>,

    // Schedule overrides; flags win over the config file.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// All-defaults config: the standard schedule (50 epochs, lr 1e-4,
/// m=10, gamma=0.40, N=2) on the desk-scale architecture.
fn default_train_config(r: usize) -> Result<TrainConfig> {
    let net = serde_json::to_value(NetConfig::desk_scale(r))?;
    Ok(serde_json::from_value(serde_json::json!({ "net": net }))?)
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
        None => default_train_config(args.r.unwrap_or(2))?,
    };
    if let Some(r) = args.r {
        cfg.net.r = r;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(stage1) = args.stage1_epochs {
        cfg.stage1_epochs = stage1;
    }
    if let Some(steps) = args.steps_per_epoch {
        cfg.steps_per_epoch = steps;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(patch) = args.patch {
        cfg.patch = patch;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_training_volumes(dir: &Path) -> Result<Vec<cvs_core::volume::Volume>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "cvol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .cvol volumes found in {}", dir.display())));
    }
    paths.iter().map(read_volume).collect()
}

fn run_train(args: TrainArgs, threads: usize) -> Result<()> {
    let cfg = load_train_config(&args)?;
    cfg.validate()?;
    echo("train", threads, &serde_json::to_value(&cfg)?);
    println!("seed: {}", cfg.seed);
    println!(
        "resolved: m={} gamma={:.2} N={} r={} epochs={} steps_per_epoch={} lr={}",
        cfg.net.memory_items,
        cfg.gamma,
        cfg.n_passes,
        cfg.net.r,
        cfg.epochs,
        cfg.steps_per_epoch,
        cfg.lr
    );

    let volumes = load_training_volumes(&args.data)?;
    println!("data: {} volumes from {}", volumes.len(), args.data.display());

    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let outcome = train_with(&cfg, &volumes, &args.out, resume.as_ref())?;

    println!("trained: {} epochs ({} steps)", outcome.epochs_run, outcome.steps_run);
    if let (Some(first), Some(last)) = (outcome.first_loss, outcome.final_loss) {
        println!("loss: {first:.6} -> {last:.6}");
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Coarse input volume.
    #[arg(long = "in")]
    input: PathBuf,
    /// Expected upsampling factor; must match the checkpoint when given.
    #[arg(long)]
    r: Option<usize>,
    /// Average the three per-view reconstructions instead of returning
    /// the slice-wise one alone.
    #[arg(long)]
    fuse: bool,
    /// With --fuse, blend the axial copy into original slice positions too.
    #[arg(long)]
    include_axial_at_originals: bool,
    #[arg(long)]
    out: PathBuf,
}

fn run_infer(args: InferArgs, threads: usize) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    if let Some(r) = args.r {
        if r != ckpt.config.r {
            return Err(Error::invalid(format!(
                "checkpoint was trained for r={}, but --r {} was requested",
                ckpt.config.r, r
            )));
        }
    }
    echo(
        "infer",
        threads,
        &serde_json::json!({
            "ckpt": args.ckpt,
            "in": args.input,
            "net": ckpt.config,
            "fuse": args.fuse,
            "include_axial_at_originals": args.include_axial_at_originals,
            "out": args.out,
        }),
    );
    let v = read_volume(&args.input)?;
    let result = infer(&ckpt, &v, args.fuse, args.include_axial_at_originals)?;
    let out = result.output();
    ensure_parent(&args.out)?;
    write_volume(out, &args.out)?;
    let (h, w, l) = out.dims();
    println!("wrote: {} ({h}x{w}x{l})", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Low-resolution source; scores the nearest/linear baselines too.
    #[arg(long, requires = "r")]
    lr: Option<PathBuf>,
    /// Upsampling factor the baselines should use.
    #[arg(long, requires = "lr")]
    r: Option<usize>,
    /// Also dump every axial slice of prediction and ground truth as
    /// PNGs next to the report.
    #[arg(long)]
    dump_pngs: bool,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn run_evaluate(args: EvaluateArgs, threads: usize) -> Result<()> {
    echo(
        "evaluate",
        threads,
        &serde_json::json!({
            "pred": args.pred,
            "gt": args.gt,
            "lr": args.lr,
            "r": args.r,
            "dump_pngs": args.dump_pngs,
            "out": args.out,
        }),
    );
    let pred = read_volume(&args.pred)?;
    let gt = read_volume(&args.gt)?;
    let lr = args.lr.as_deref().map(read_volume).transpose()?;
    let baseline = lr.as_ref().zip(args.r).map(|(v, r)| (v, r));
    let report = evaluate(&pred, &gt, baseline)?;

    ensure_parent(&args.out)?;
    let mut file = BufWriter::new(File::create(&args.out)?);
    serde_json::to_writer_pretty(&mut file, &report)?;
    file.write_all(b"\n")?;
    file.flush()?;
    println!("report: {}", serde_json::to_string(&report)?);
    println!("wrote: {}", args.out.display());

    if args.dump_pngs {
        let base = args.out.parent().unwrap_or(Path::new(".")).join("slices");
        dump_slice_pngs(&pred, &base, "pred")?;
        dump_slice_pngs(&gt, &base, "gt")?;
        println!("pngs: {}", base.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Also run the full tiny networks end to end and the parameter
    /// coverage probe (slower).
    #[arg(long)]
    full: bool,
}

fn run_gradcheck(args: GradcheckArgs, threads: usize) -> Result<()> {
    echo("gradcheck", threads, &serde_json::json!({ "full": args.full }));
    let rows = gradient_suite(args.full)?;
    print!("{}", format_table(&rows));
    let mut ok = all_passed(&rows);
    if args.full {
        let dead = gradient_coverage()?;
        if dead.is_empty() {
            println!("coverage: every parameter tensor receives gradient");
        } else {
            println!("coverage: {} parameter tensor(s) never receive gradient: {dead:?}", dead.len());
            ok = false;
        }
    }
    if !ok {
        return Err(Error::non_finite("gradient checks exceeded tolerance"));
    }
    println!("all gradient checks passed");
    Ok(())
}
