//! `beamcast`: dataset generation, WMMSE labeling, GAN training, prediction,
//! evaluation and runtime benchmarks from the command line.
//!
//! Failures print one line `beamcast: error[<category>]: <message>` to
//! stderr. Exit codes: 1 runtime failure, 2 usage or configuration,
//! 3 corrupted or unreadable-version file, 4 filesystem error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beamcast::autodiff::Real;
use beamcast::channel::{generate_dataset, mix_seed, Dataset, SubsetMode};
use beamcast::gan::{GanError, Generator};
use beamcast::io::{self, IoError, RunConfig, SeRow};
use beamcast::linalg::interleaved;
use beamcast::metrics::{benchmark_runtime, evaluate};
use beamcast::trainer::{predict, train, Precision, Schedule, TrainConfig, TrainState};
use beamcast::wmmse::label_dataset;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "beamcast", version, about = "GAN-based high-dimensional beamforming from low-dimensional WMMSE")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed; overrides `scenario.seed` and `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SubsetArg {
    Strided,
    Contiguous,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Paper,
    Standard,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic channels into `<out>/dataset.bin`.
    GenData {
        #[arg(long)]
        samples: Option<usize>,
        /// Train:test ratio, e.g. `4:1`.
        #[arg(long, value_parser = parse_ratio)]
        ratio: Option<[u32; 2]>,
        /// Which antennas form the low-dimensional subset.
        #[arg(long, value_enum)]
        subset: Option<SubsetArg>,
    },
    /// Attach WMMSE beamformers to every sample of a dataset.
    Label {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to overwriting the input.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the generator/critic pair on a labeled dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint instead of a fresh initialization.
        /// Everything but the epoch count then comes from the checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// `standard` swaps the generator and critic update periods.
        #[arg(long, value_enum)]
        schedule: Option<ScheduleArg>,
    },
    /// Run the prediction stage on the test split of a dataset.
    Predict {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split against WMMSE and zero padding.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time full WMMSE against subset WMMSE plus one generator pass.
    Bench {
        #[arg(long)]
        nt_high: Option<usize>,
        #[arg(long)]
        nt_low: Option<usize>,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Time this trained generator; otherwise a fresh one of the configured size.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_ratio(s: &str) -> Result<[u32; 2], String> {
    let (a, b) = s.split_once(':').ok_or("expected A:B")?;
    let part = |p: &str| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}"));
    Ok([part(a)?, part(b)?])
}

#[derive(Debug)]
struct CliError {
    category: &'static str,
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            category: "usage",
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(category: &'static str, e: impl std::fmt::Display) -> Self {
        CliError {
            category,
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let (category, code) = match &e {
            IoError::Corrupt(_) => ("corrupt", 3),
            IoError::Version { .. } => ("version", 3),
            IoError::Model(GanError::Fingerprint { .. }) => ("corrupt", 3),
            IoError::Precision { .. } => ("usage", 2),
            IoError::Io { .. } => ("io", 4),
            IoError::Model(_) | IoError::Encode(_) => ("model", 1),
        };
        CliError {
            category,
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:path => $cat:literal),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::runtime($cat, e)
            }
        }
    )*};
}

runtime_from! {
    beamcast::channel::ChannelError => "channel",
    beamcast::wmmse::WmmseError => "wmmse",
    beamcast::trainer::TrainError => "train",
    beamcast::metrics::MetricsError => "metrics",
    GanError => "model",
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(global: &Global) -> Result<Self, CliError> {
        let mut cfg = match &global.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e {
                IoError::Corrupt(m) => CliError::usage(m),
                other => other.into(),
            })?,
            None => RunConfig::default(),
        };
        if let Some(seed) = global.seed {
            cfg.scenario.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(p) = global.precision {
            cfg.train.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        Ok(Ctx {
            cfg,
            out: global.out.clone(),
        })
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }
}

fn report(line: impl AsRef<str>) {
    println!("{}", line.as_ref());
}

fn gen_data(ctx: &mut Ctx, samples: Option<usize>, ratio: Option<[u32; 2]>) -> Result<(), CliError> {
    let n = samples.unwrap_or(ctx.cfg.samples);
    let [a, b] = ratio.unwrap_or(ctx.cfg.split);
    let ds = generate_dataset(&ctx.cfg.scenario, n, (a, b), ctx.cfg.scenario.seed)?;
    let path = ctx.out.join("dataset.bin");
    io::save_dataset(&path, &ds)?;
    report(format!(
        "wrote {} ({} train / {} test)",
        path.display(),
        ds.train.len(),
        ds.test.len()
    ));
    Ok(())
}

fn label(ctx: &mut Ctx, data: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<(), CliError> {
    let input = ctx.path(data, "dataset.bin");
    let mut ds = load_data(ctx, data)?;
    label_dataset(&mut ds, &ctx.cfg.wmmse_config())?;
    let output = output.clone().unwrap_or(input);
    io::save_dataset(&output, &ds)?;
    report(format!("labeled {} samples into {}", ds.len(), output.display()));
    Ok(())
}

/// Adopts the dataset's scenario so model sizes match the stored channels.
fn load_data(ctx: &mut Ctx, data: &Option<PathBuf>) -> Result<Dataset, CliError> {
    let ds = io::load_dataset(&ctx.path(data, "dataset.bin"))?;
    ctx.cfg.scenario = ds.config.clone();
    Ok(ds)
}

fn precision_for(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<Precision, CliError> {
    match checkpoint {
        Some(p) if p.exists() => Ok(io::checkpoint_precision(p)?),
        _ => Ok(ctx.cfg.train.precision),
    }
}

fn train_cmd<T: Real>(ctx: &Ctx, ds: &Dataset, epochs: Option<usize>, resume: &Option<PathBuf>) -> Result<(), CliError> {
    let mut train_cfg = ctx.cfg.train.clone();
    let mut state = match resume {
        Some(path) => {
            let ck = io::load_checkpoint::<T>(path)?;
            let seed = train_cfg.seed;
            train_cfg = TrainConfig {
                epochs: train_cfg.epochs,
                ..ck.train
            };
            if seed != ck.train.seed {
                return Err(CliError::usage(format!(
                    "checkpoint was trained with seed {}; resuming with seed {seed} would break determinism",
                    ck.train.seed
                )));
            }
            ck.state
        }
        None => TrainState::<T>::new(&ctx.cfg.gan_config(), &train_cfg)?,
    };
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    let started = std::time::Instant::now();
    let trace = train(ds, &mut state, &train_cfg)?;
    let summary = io::train_summary(&trace, state.epoch, started.elapsed().as_secs_f64());
    io::write_json(&ctx.out.join("train_summary.json"), &summary)?;
    io::save_checkpoint(&ctx.out.join("checkpoint.bin"), &state, &train_cfg)?;
    io::write_csv(&ctx.out.join("train_trace.csv"), &io::trace_rows(&trace))?;
    io::write_csv(&ctx.out.join("nmse_vs_iter.csv"), &io::nmse_rows(&trace))?;
    match trace.final_nmse() {
        Some(nmse) => report(format!("trained to epoch {}; test NMSE {nmse:.3} dB", state.epoch)),
        None => report(format!("no epochs run; checkpoint at epoch {}", state.epoch)),
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    nt_high: usize,
    n_users: usize,
    /// Row-major `(re, im)` pairs.
    v: Vec<f64>,
}

fn predict_cmd<T: Real>(ctx: &Ctx, ds: &Dataset, checkpoint: &Path) -> Result<(), CliError> {
    let ck = io::load_checkpoint::<T>(checkpoint)?;
    check_dims(&ck.state.gen, ds)?;
    let wmmse = ctx.cfg.wmmse_config();
    let mut out = Vec::with_capacity(ds.test.len());
    for &index in &ds.test {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ck.train.eval_seed, index as u64));
        let v = predict(&ck.state.gen, &ds.samples[index].h_low, &wmmse, &mut rng)?;
        out.push(Prediction {
            index,
            nt_high: v.nrows(),
            n_users: v.ncols(),
            v: interleaved(&v),
        });
    }
    let path = ctx.out.join("predictions.json");
    io::write_json(&path, &out)?;
    report(format!("wrote {} predictions to {}", out.len(), path.display()));
    Ok(())
}

fn check_dims<T: Real>(gen: &Generator<T>, ds: &Dataset) -> Result<(), CliError> {
    let g = &gen.arch.config;
    let s = &ds.config;
    if (g.n_high, g.n_low, g.n_users) != (s.nt_high, s.nt_low, s.n_users) {
        return Err(CliError::usage(format!(
            "checkpoint expects {}→{} antennas and {} users; dataset has {}→{} and {}",
            g.n_low, g.n_high, g.n_users, s.nt_low, s.nt_high, s.n_users
        )));
    }
    Ok(())
}

fn eval_cmd<T: Real>(ctx: &Ctx, ds: &Dataset, checkpoint: &Path) -> Result<(), CliError> {
    let ck = io::load_checkpoint::<T>(checkpoint)?;
    check_dims(&ck.state.gen, ds)?;
    let report_ = evaluate(ds, &ck.state.gen, &ctx.cfg.wmmse_config(), ck.train.eval_seed)?;
    io::write_json(&ctx.out.join("eval_report.json"), &report_)?;
    let row = SeRow {
        nt_low: report_.nt_low,
        nt_high: report_.nt_high,
        spacing_wavelengths: ds.config.spacing_wavelengths,
        se_wmmse: report_.se_wmmse.mean,
        se_generated: report_.se_generated.mean,
        se_zero_padding: report_.se_zero_padding.mean,
        nmse_db: report_.pooled_nmse_db,
    };
    io::write_csv(&ctx.out.join("se_vs_nlow.csv"), &[row])?;
    report(format!(
        "SE (bits/s/Hz): wmmse {:.3}, generated {:.3}, zero-padding {:.3}; NMSE {:.3} dB",
        report_.se_wmmse.mean, report_.se_generated.mean, report_.se_zero_padding.mean, report_.pooled_nmse_db
    ));
    Ok(())
}

fn bench_cmd<T: Real>(ctx: &Ctx, samples: usize, reps: usize, checkpoint: &Option<PathBuf>) -> Result<(), CliError> {
    let gen = match checkpoint {
        Some(p) => io::load_checkpoint::<T>(p)?.state.gen,
        None => Generator::<T>::new(&ctx.cfg.gan_config(), mix_seed(ctx.cfg.train.seed, 0x6e))?,
    };
    let s = &ctx.cfg.scenario;
    let g = &gen.arch.config;
    if (g.n_high, g.n_low, g.n_users) != (s.nt_high, s.nt_low, s.n_users) {
        return Err(CliError::usage("checkpoint dimensions differ from --nt-high/--nt-low"));
    }
    let ds = generate_dataset(s, samples.max(2), (1, 1), s.seed)?;
    let table = benchmark_runtime(&ds.samples[..samples.min(ds.len())], &ctx.cfg.wmmse_config(), &gen, reps)?;
    io::write_csv(&ctx.out.join("runtime_vs_nt.csv"), std::slice::from_ref(&table))?;
    report(format!(
        "N_t {}→{}: full WMMSE {:.4} s, subset WMMSE + generator {:.4} s, ratio {:.3}",
        table.nt_low, table.nt_high, table.full_wmmse_s, table.pipeline_s, table.ratio
    ));
    Ok(())
}

macro_rules! dispatch {
    ($prec:expr, $f:ident($($arg:expr),*)) => {
        match $prec {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut ctx = Ctx::new(&cli.global)?;
    match &cli.command {
        Command::GenData { samples, ratio, subset } => {
            if let Some(s) = subset {
                ctx.cfg.scenario.subset = match s {
                    SubsetArg::Strided => SubsetMode::Strided,
                    SubsetArg::Contiguous => SubsetMode::Contiguous,
                };
            }
            gen_data(&mut ctx, *samples, *ratio)
        }
        Command::Label { data, output } => label(&mut ctx, data, output),
        Command::Train {
            data,
            epochs,
            resume,
            schedule,
        } => {
            if let Some(s) = schedule {
                ctx.cfg.train.schedule = match s {
                    ScheduleArg::Paper => Schedule::Paper,
                    ScheduleArg::Standard => Schedule::Standard,
                };
            }
            let ds = load_data(&mut ctx, data)?;
            let prec = precision_for(&ctx, resume.as_deref())?;
            dispatch!(prec, train_cmd(&ctx, &ds, *epochs, resume))
        }
        Command::Predict { data, checkpoint } => {
            let ds = load_data(&mut ctx, data)?;
            let ck = ctx.path(checkpoint, "checkpoint.bin");
            let prec = precision_for(&ctx, Some(&ck))?;
            dispatch!(prec, predict_cmd(&ctx, &ds, &ck))
        }
        Command::Eval { data, checkpoint } => {
            let ds = load_data(&mut ctx, data)?;
            let ck = ctx.path(checkpoint, "checkpoint.bin");
            let prec = precision_for(&ctx, Some(&ck))?;
            dispatch!(prec, eval_cmd(&ctx, &ds, &ck))
        }
        Command::Bench {
            nt_high,
            nt_low,
            samples,
            reps,
            checkpoint,
        } => {
            if let Some(n) = nt_high {
                ctx.cfg.scenario.nt_high = *n;
            }
            if let Some(n) = nt_low {
                ctx.cfg.scenario.nt_low = *n;
            }
            let prec = precision_for(&ctx, checkpoint.as_deref())?;
            dispatch!(prec, bench_cmd(&ctx, *samples, *reps, checkpoint))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("beamcast: error[{}]: {}", e.category, e.message);
            ExitCode::from(e.code)
        }
    }
}
