use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use shockcal::baselines::{fit_linear, DEFAULT_RIDGE_LAMBDA};
use shockcal::calibnet::{train_autoencoder, train_on, AblationFlags, AutoEncoder, CalibArch, CalibModel, EpochLoss, TrainConfig, TrainingSet};
use shockcal::formats::{CheckpointFile, DatasetFile};
use shockcal::harness::{calibnet_grad_check, compare, format_csv, format_table, srs_csv, srs_svg, Method, Models};
use shockcal::nn::AdamConfig;
use shockcal::signal::ShockSignal;
use shockcal::srs::{default_grid, srs_maximax, DEFAULT_Q};
use shockcal::synth::{generate_dataset, LowEndModel, RigConfig};
use shockcal::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "shockcal", version, about = "Calibrate low-end shock accelerometer records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drop-test dataset (train.shkd and test.shkd).
    Synth(SynthArgs),
    /// Train a calibration network or the autoencoder baseline.
    Train(TrainArgs),
    /// Compare calibration methods on a dataset.
    Eval(EvalArgs),
    /// Shock response spectra of one pair before and after calibration.
    Srs(SrsArgs),
    /// Finite-difference check of the network gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 660)]
    pairs: usize,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500.0)]
    peak_min: f64,
    #[arg(long, default_value_t = 8000.0)]
    peak_max: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Use a perfect low-end sensor (low == high).
    #[arg(long)]
    identity_sensor: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoZ,
    NoLinf,
    NoResidual,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Net,
    Ae,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Remove a model component; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    #[arg(long, value_enum, default_value = "net")]
    kind: Kind,
    /// Loss trace CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Test dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints; repeatable. The autoencoder method falls back to the
    /// trunk of a network checkpoint, which equals a separately trained
    /// autoencoder with the same seed and loss.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Training dataset, needed to fit the linear baseline.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RIDGE_LAMBDA)]
    ridge_lambda: f64,
    #[arg(long, value_parser = parse_method, required = true)]
    method: Vec<Method>,
    /// CSV report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SrsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Signal length, latent width and PPN compression width.
    #[arg(long, default_value = "30,8,4")]
    dims: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)?;
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    let rig = RigConfig {
        n_pairs: a.pairs,
        train_count: a.train,
        peak_range: (a.peak_min, a.peak_max),
        master_seed: a.seed,
        ..RigConfig::default()
    };
    let sensor = if a.identity_sensor { LowEndModel::identity() } else { LowEndModel::default() };
    let data = generate_dataset(&rig, &sensor)?;
    fs::create_dir_all(&a.out)?;
    DatasetFile::new(data.train.clone())?.save(a.out.join("train.shkd"))?;
    DatasetFile::new(data.test.clone())?.save(a.out.join("test.shkd"))?;

    // ten log-spaced bins over the requested peak range
    let (lo, hi) = (a.peak_min.ln(), a.peak_max.ln());
    let bin = |p: f64| ((((p.ln() - lo) / (hi - lo).max(f64::MIN_POSITIVE)) * 10.0) as usize).min(9);
    let mut counts = [[0usize; 2]; 10];
    for (split, pairs) in [&data.train, &data.test].into_iter().enumerate() {
        for p in pairs {
            counts[bin(p.high.max_abs())][split] += 1;
        }
    }
    let mut out = String::from("bin_low_g,bin_high_g,train,test\n");
    for (i, c) in counts.iter().enumerate() {
        let edge = |k: usize| (lo + (hi - lo) * k as f64 / 10.0).exp();
        let _ = writeln!(out, "{:.1},{:.1},{},{}", edge(i), edge(i + 1), c[0], c[1]);
    }
    print!("{out}");
    Ok(())
}

fn loss_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mean_shape_loss,mean_peak_loss\n");
    for e in trace {
        let peak = e.peak.map_or(String::new(), |p| format!("{p:.9}"));
        let _ = writeln!(out, "{},{:.9},{}", e.epoch, e.shape, peak);
    }
    out
}

fn train(a: TrainArgs) -> CmdResult {
    let data = DatasetFile::load(&a.data)?;
    let arch = CalibArch {
        signal_len: data.signal_length,
        ..CalibArch::default()
    };
    let mut flags = AblationFlags::default();
    for ab in &a.ablate {
        match ab {
            Ablation::NoZ => flags.ppn_uses_z = false,
            Ablation::NoLinf => flags.use_linf_term = false,
            Ablation::NoResidual => flags.ppn_residual = false,
        }
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {}", a.lr)).into());
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed: a.seed,
    };
    let set = TrainingSet::from_pairs(&data.pairs, arch.signal_len)?;
    let (checkpoint, trace) = match a.kind {
        Kind::Net => {
            let mut model = CalibModel::new(arch, flags, a.seed)?;
            let trace = train_on(&mut model, &set, &cfg)?;
            (CheckpointFile::Calibnet(model), trace)
        }
        Kind::Ae => {
            let mut ae = AutoEncoder::new(arch, flags.use_linf_term, a.seed)?;
            let trace = train_autoencoder(&mut ae, &set, &cfg)?;
            (CheckpointFile::Autoencoder(ae), trace)
        }
    };
    checkpoint.save(&a.out)?;
    let sidecar = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_file(&sidecar, loss_csv(&trace))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        eprintln!("shape loss {:.6} -> {:.6} over {} epochs", first.shape, last.shape, trace.len());
    }
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> Result<Models, Failure> {
    let mut models = Models::default();
    let mut trunk_fallback = None;
    for p in paths {
        match CheckpointFile::load(p)? {
            CheckpointFile::Calibnet(m) => {
                if m.flags.use_linf_term {
                    trunk_fallback = Some(m.autoencoder());
                }
                models.net = Some(m);
            }
            CheckpointFile::Autoencoder(ae) => models.ae = Some(ae),
        }
    }
    if models.ae.is_none() {
        models.ae = trunk_fallback;
    }
    Ok(models)
}

fn eval(a: EvalArgs) -> CmdResult {
    let data = DatasetFile::load(&a.data)?;
    let mut models = load_models(&a.model)?;
    if a.method.contains(&Method::Lr) {
        if let Some(path) = &a.train_data {
            models.lr = Some(fit_linear(&DatasetFile::load(path)?.pairs, a.ridge_lambda)?);
        }
    }
    let rows = compare(&a.method, &models, &data.pairs)?;
    print!("{}", format_table(&rows));
    if let Some(path) = &a.report {
        write_file(path, format_csv(&rows))?;
    }
    Ok(())
}

fn srs(a: SrsArgs) -> CmdResult {
    let data = DatasetFile::load(&a.data)?;
    let pair = data.pairs.get(a.index).ok_or(Error::IndexOutOfRange {
        index: a.index,
        len: data.pairs.len(),
    })?;
    let calibrated = if pair.low.max_abs() == 0.0 {
        // nothing to calibrate in a silent record
        ShockSignal::new(vec![0.0; pair.low.len()], pair.low.sample_rate)
    } else {
        match CheckpointFile::load(&a.model)? {
            CheckpointFile::Calibnet(m) => m.calibrate(&pair.low)?,
            CheckpointFile::Autoencoder(ae) => ae.predict(&pair.low)?,
        }
    };
    let grid = default_grid();
    let low = srs_maximax(&pair.low, &grid, DEFAULT_Q)?;
    let high = srs_maximax(&pair.high, &grid, DEFAULT_Q)?;
    let cal = srs_maximax(&calibrated, &grid, DEFAULT_Q)?;
    let curves = [("srs_low", &low), ("srs_high", &high), ("srs_calibrated", &cal)];
    write_file(&a.out, srs_csv(&curves))?;
    if let Some(svg) = &a.svg {
        write_file(svg, srs_svg(&curves))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let dims: Vec<usize> = a
        .dims
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("--dims {:?}: {e}", a.dims)))?;
    let [len, latent, compress] = dims[..] else {
        return Err(Error::InvalidConfig(format!("--dims needs three values, got {:?}", a.dims)).into());
    };
    let lines = calibnet_grad_check(CalibArch::reduced(len, latent, compress), a.seed, a.points, a.corrupt)?;
    println!("point,target,checked,skipped,max_rel_err,passed");
    let mut worst = 0.0f64;
    for l in &lines {
        println!(
            "{},{},{},{},{:.3e},{}",
            l.point, l.target, l.report.checked, l.report.skipped, l.report.max_rel_err, l.report.passed
        );
        worst = worst.max(l.report.max_rel_err);
    }
    if lines.iter().all(|l| l.report.passed) {
        println!("gradient check passed: max relative error {worst:.3e}");
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: max relative error {worst:.3e}")))
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SHOCKCAL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("SHOCKCAL_THREADS={v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().map_err(Failure::from).and_then(|_| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Srs(a) => srs(a),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Io(_)) { EXIT_IO } else { EXIT_VALIDATION })
        }
    }
}
