//! `dithercomp`: sweeps, benchmarks and MNIST experiments for pulse-stream
//! arithmetic and k-bit rounding, with CSV output.
//!
//! Every subcommand is a pure function of its flags and seed. Results are
//! reduced in memory and written by a single writer, so re-running with the
//! same configuration reproduces the CSV byte for byte.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dither_core::bitstream::Scheme;
use dither_core::linalg::{self, MatmulExperiment, Variant};
use dither_core::nn::{self, ModelWeights, Split, TrainConfig};
use dither_core::rounding::RoundingMode;
use dither_core::seed::DEFAULT_SEED;
use dither_core::stats::{self, Operation};
use dither_core::Error;

pub mod selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PRESET: i32 = 3;
pub const EXIT_OUTPUT: i32 = 4;
pub const EXIT_CONTRACT: i32 = 5;
pub const EXIT_INGEST: i32 = 6;
pub const EXIT_TRAINING: i32 = 7;

pub const SEED_ENV: &str = "DITHERCOMP_SEED";
pub const MNIST_URL_ENV: &str = "DITHERCOMP_MNIST_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size runs: 1000 pairs × 1000 trials, N = 16..1024, 100×100 matmul.
    Paper,
    /// Desk-scale runs used by the acceptance suite.
    Ci,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Ci => "ci",
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "dithercomp", version, about = "Dither computing and dither rounding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bias, variance and EMSE of encoding a single value.
    ReprSweep(SweepArgs),
    /// Bias, variance and EMSE of the pulse-stream product.
    MultSweep(SweepArgs),
    /// Bias, variance and EMSE of the scaled sum (x + y)/2.
    AddSweep(SweepArgs),
    /// Frobenius error of k-bit quantized products of random matrices.
    MatmulBench(MatmulArgs),
    /// Train the softmax-regression MNIST classifier.
    MnistTrain(TrainArgs),
    /// MNIST accuracy under k-bit rounding of every layer product.
    MnistEval(EvalArgs),
    /// Exact-fraction, AND-algebra and quantizer-clamp invariants.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed.
    #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// CSV output path; defaults to `<subcommand>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    preset: Vec<Preset>,
    /// Comma-separated schemes; all five by default.
    #[arg(long, value_delimiter = ',')]
    scheme: Vec<Scheme>,
    /// Comma-separated sequence lengths.
    #[arg(long = "N", value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct MatmulArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    preset: Vec<Preset>,
    #[arg(long, value_delimiter = ',')]
    mode: Vec<RoundingMode>,
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<u32>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Side length of the square operands.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// Where to write the trained weights; a `.txt` extension selects the text format.
    #[arg(long, default_value = "model.dcwt")]
    model: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    preset: Vec<Preset>,
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// Weights file; trained from scratch with default settings when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    mode: Vec<RoundingMode>,
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<u32>,
    #[arg(long)]
    trials: Option<usize>,
    /// Evaluate only the first `limit` test images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Preset(String),
    Output { path: PathBuf, source: io::Error },
    Core(Error),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Preset(_) => EXIT_PRESET,
            CliError::Output { .. } => EXIT_OUTPUT,
            CliError::Failed(_) => EXIT_CONTRACT,
            CliError::Core(e) => match e {
                Error::Ingest(_) | Error::WeightsFormat(_) => EXIT_INGEST,
                Error::Diverged { .. } => EXIT_TRAINING,
                Error::Io(_) | Error::Csv(_) => EXIT_OUTPUT,
                _ => EXIT_CONTRACT,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Preset(m) => write!(f, "preset conflict: {m}"),
            CliError::Output { path, source } => write!(f, "cannot write {}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (including the program name), runs the subcommand and returns
/// the process exit code. Diagnostics go to stderr, the summary line to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let result = match cli.command {
        Command::ReprSweep(a) => sweep("repr-sweep", Operation::Represent, a),
        Command::MultSweep(a) => sweep("mult-sweep", Operation::Multiply, a),
        Command::AddSweep(a) => sweep("add-sweep", Operation::Average, a),
        Command::MatmulBench(a) => matmul_bench(a),
        Command::MnistTrain(a) => mnist_train(a),
        Command::MnistEval(a) => mnist_eval(a),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary} ({:.1} s)", started.elapsed().as_secs_f64());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("dithercomp: {e}");
            e.exit_code()
        }
    }
}

/// Resolves a list of presets to at most one.
fn single_preset(presets: &[Preset]) -> CliResult<Option<Preset>> {
    match presets {
        [] => Ok(None),
        [first, rest @ ..] => match rest.iter().find(|p| *p != first) {
            Some(other) => Err(CliError::Preset(format!("--preset {first} and --preset {other}"))),
            None => Ok(Some(*first)),
        },
    }
}

/// The preset value unless an explicit flag disagrees with it.
fn pinned<T: PartialEq + fmt::Debug + Clone>(
    flag: &str,
    explicit: Option<T>,
    preset: Option<(Preset, T)>,
    default: T,
) -> CliResult<T> {
    match (explicit, preset) {
        (Some(v), Some((p, pv))) if v != pv => Err(CliError::Preset(format!(
            "--{flag} {v:?} contradicts preset {p} ({pv:?})"
        ))),
        (Some(v), _) => Ok(v),
        (None, Some((_, pv))) => Ok(pv),
        (None, None) => Ok(default),
    }
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    if v.is_empty() {
        None
    } else {
        Some(v)
    }
}

fn powers_of_two(lo: usize, hi: usize) -> Vec<usize> {
    std::iter::successors(Some(lo), |n| Some(n * 2)).take_while(|&n| n <= hi).collect()
}

/// Opens the output early so that an unwritable path fails before any work.
struct Output {
    path: PathBuf,
    file: File,
}

impl Output {
    fn open(out: Option<PathBuf>, default: &str) -> CliResult<Self> {
        let path = out.unwrap_or_else(|| PathBuf::from(format!("{default}.csv")));
        let file = File::create(&path).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        Ok(Self { path, file })
    }

    fn write(mut self, bytes: &[u8]) -> CliResult<PathBuf> {
        self.file
            .write_all(bytes)
            .and_then(|_| self.file.flush())
            .map_err(|source| CliError::Output {
                path: self.path.clone(),
                source,
            })?;
        Ok(self.path)
    }
}

fn sweep(name: &str, op: Operation, a: SweepArgs) -> CliResult<String> {
    let preset = single_preset(&a.preset)?;
    let (p_pairs, p_n) = match preset {
        Some(Preset::Paper) => (Some((Preset::Paper, 1000)), Some((Preset::Paper, powers_of_two(16, 1024)))),
        Some(Preset::Ci) => (Some((Preset::Ci, 200)), Some((Preset::Ci, vec![16, 64, 256, 1024]))),
        None => (None, None),
    };
    let pairs = pinned("pairs", a.pairs, p_pairs, 1000)?;
    let trials = pinned("trials", a.trials, p_pairs, 1000)?;
    let n_list = pinned("N", non_empty(a.n), p_n, powers_of_two(16, 1024))?;
    let schemes = non_empty(a.scheme).unwrap_or_else(|| Scheme::ALL.to_vec());
    if n_list.contains(&0) {
        return Err(CliError::Usage("--N values must be at least 1".into()));
    }
    let out = Output::open(a.common.out, name)?;
    let seed = a.common.seed;

    let mut records = Vec::new();
    for &scheme in &schemes {
        records.extend(stats::sweep(op, scheme, &n_list, pairs, trials, seed)?);
    }
    let mut buf = Vec::new();
    stats::write_csv(&records, &mut buf)?;
    let path = out.write(&buf)?;
    Ok(format!(
        "{name}: {} records ({} schemes x {} N, pairs={pairs}, trials={trials}, seed={seed}) -> {}",
        records.len(),
        schemes.len(),
        n_list.len(),
        path.display()
    ))
}

fn matmul_bench(a: MatmulArgs) -> CliResult<String> {
    let preset = single_preset(&a.preset)?;
    let p_pairs = preset.map(|p| (p, if p == Preset::Paper { 100 } else { 20 }));
    let p_size = preset.map(|p| (p, 100));
    let p_k = preset.map(|p| (p, (1..=8).collect::<Vec<u32>>()));
    let pairs = pinned("pairs", a.pairs, p_pairs, 100)?;
    let size = pinned("size", a.size, p_size, 100)?;
    let k_list = pinned("k", non_empty(a.k), p_k, (1..=8).collect())?;
    let modes = non_empty(a.mode).unwrap_or_else(|| RoundingMode::ALL.to_vec());
    let variants = non_empty(a.variant).unwrap_or_else(|| vec![Variant::PerPartial]);
    if size == 0 {
        return Err(CliError::Usage("--size must be at least 1".into()));
    }
    let out = Output::open(a.common.out, "matmul-bench")?;
    let seed = a.common.seed;

    let mut rows = Vec::new();
    for &variant in &variants {
        let mut exp = MatmulExperiment::square(size, pairs, seed);
        exp.k_list = k_list.clone();
        exp.modes = modes.clone();
        exp.variant = variant;
        rows.extend(linalg::run_matmul_experiment(&exp)?);
    }
    let mut buf = Vec::new();
    linalg::write_csv(&rows, &mut buf)?;
    let path = out.write(&buf)?;
    Ok(format!(
        "matmul-bench: {} rows ({size}x{size}, pairs={pairs}, seed={seed}) -> {}",
        rows.len(),
        path.display()
    ))
}

/// Fetches missing IDX files from `$DITHERCOMP_MNIST_URL/<name>.gz` with `curl`.
fn ensure_mnist(dir: &Path, split: Split) -> CliResult<()> {
    let (images, labels) = nn::idx_paths(dir, split);
    if images.exists() && labels.exists() {
        return Ok(());
    }
    let Ok(base) = std::env::var(MNIST_URL_ENV) else {
        return Ok(());
    };
    fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.to_path_buf(),
        source,
    })?;
    for path in [images, labels].into_iter().filter(|p| !p.exists()) {
        let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let url = format!("{}/{}", base.trim_end_matches('/'), file);
        eprintln!("downloading {url}");
        let status = Process::new("curl")
            .args(["-fsSL", "-o"])
            .arg(&path)
            .arg(&url)
            .status();
        if !matches!(status, Ok(s) if s.success()) {
            let _ = fs::remove_file(&path);
            return Err(CliError::Core(Error::Ingest(dither_core::error::IngestError::Open {
                path,
                source: io::Error::new(io::ErrorKind::NotFound, format!("download from {url} failed")),
            })));
        }
    }
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> CliResult<nn::Dataset> {
    ensure_mnist(dir, split)?;
    Ok(nn::load_dir(dir, split)?)
}

fn is_text_model(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "txt")
}

fn save_model(model: &ModelWeights, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    if is_text_model(path) {
        nn::write_weights_text(model, &mut buf)?;
    } else {
        nn::write_weights(model, &mut buf)?;
    }
    fs::write(path, buf).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads either weights format, telling them apart by the binary magic.
fn load_model(path: &Path) -> CliResult<ModelWeights> {
    let file = File::open(path).map_err(|e| Error::WeightsFormat(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::WeightsFormat(format!("{}: {e}", path.display())))?;
    let model = if bytes.starts_with(b"DCWT") {
        nn::read_weights(&bytes[..])
    } else {
        nn::read_weights_text(&bytes[..])
    };
    Ok(model?)
}

fn mnist_train(a: TrainArgs) -> CliResult<String> {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        lr: a.lr.unwrap_or(defaults.lr),
        batch: a.batch.unwrap_or(defaults.batch),
        seed: a.common.seed,
    };
    let out = Output::open(a.common.out, "mnist-train")?;
    let train = load_split(&a.mnist_dir, Split::Train)?;
    let test = load_split(&a.mnist_dir, Split::Test)?;
    let model = nn::train_softmax(&train, &cfg)?;
    save_model(&model, &a.model)?;
    let train_acc = nn::accuracy(&nn::predict(&model, &train)?, train.labels());
    let test_acc = nn::accuracy(&nn::predict(&model, &test)?, test.labels());

    let mut buf = Vec::new();
    writeln!(buf, "epochs,lr,batch,seed,train_acc,test_acc").map_err(Error::from)?;
    writeln!(
        buf,
        "{},{},{},{},{train_acc},{test_acc}",
        cfg.epochs, cfg.lr, cfg.batch, cfg.seed
    )
    .map_err(Error::from)?;
    let path = out.write(&buf)?;
    Ok(format!(
        "mnist-train: test accuracy {test_acc:.4}, model -> {}, summary -> {}",
        a.model.display(),
        path.display()
    ))
}

fn mnist_eval(a: EvalArgs) -> CliResult<String> {
    let preset = single_preset(&a.preset)?;
    let p_trials = preset.map(|p| (p, if p == Preset::Paper { 1000 } else { 30 }));
    let p_k = preset.map(|p| {
        let ks: Vec<u32> = if p == Preset::Paper { (1..=8).collect() } else { (1..=4).collect() };
        (p, ks)
    });
    let trials = pinned("trials", a.trials, p_trials, 1000)?;
    let k_list = pinned("k", non_empty(a.k), p_k, (1..=8).collect())?;
    let modes = non_empty(a.mode).unwrap_or_else(|| RoundingMode::ALL.to_vec());
    let variants = non_empty(a.variant).unwrap_or_else(|| vec![Variant::PerPartial]);
    let out = Output::open(a.common.out, "mnist-eval")?;
    let seed = a.common.seed;

    let model = match &a.model {
        Some(path) => load_model(path)?,
        None => {
            let train = load_split(&a.mnist_dir, Split::Train)?;
            nn::train_softmax(&train, &TrainConfig::default())?
        }
    };
    let mut test = load_split(&a.mnist_dir, Split::Test)?;
    if let Some(limit) = a.limit {
        test = test.head(limit);
    }
    let rows = nn::run_mnist_experiment(&model, &test, &k_list, &modes, &variants, trials, seed)?;
    let mut buf = Vec::new();
    nn::write_csv(&rows, &mut buf)?;
    let path = out.write(&buf)?;
    Ok(format!(
        "mnist-eval: baseline {:.4}, {} rows over {} test images (trials={trials}, seed={seed}) -> {}",
        rows[0].mean_acc,
        rows.len(),
        test.len(),
        path.display()
    ))
}

fn run_selftest(a: SelftestArgs) -> CliResult<String> {
    let out = Output::open(a.common.out, "selftest")?;
    let checks = selftest::run_all(a.common.seed)?;
    let mut buf = Vec::new();
    writeln!(buf, "suite,check,passed").map_err(Error::from)?;
    for c in &checks {
        writeln!(buf, "{},{},{}", c.suite, c.name, c.passed).map_err(Error::from)?;
    }
    let path = out.write(&buf)?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    if let Some(first) = failed.first() {
        return Err(CliError::Failed(format!(
            "selftest: {} of {} checks failed, first {}/{} (details in {})",
            failed.len(),
            checks.len(),
            first.suite,
            first.name,
            path.display()
        )));
    }
    Ok(format!("selftest: {} checks passed -> {}", checks.len(), path.display()))
}
