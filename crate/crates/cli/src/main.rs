//! `usgrip`: generate data, train, quantize, evaluate, serve, stream and
//! bench the gesture classifier.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 unreadable or invalid input
//! file, 4 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use usgrip_core::data::{self, Dataset, GenConfig, Split, DOWNSAMPLE_FACTOR};
use usgrip_core::eval::{evaluate, evaluation_lines, format_confusion, BenchReport, SchemeReport, NONDETERMINISTIC};
use usgrip_core::net::{self, ModelGraph, QuantMode, TrainConfig, FRAME_SIDE};
use usgrip_core::quant::{self, Engine, CALIBRATION_SAMPLES};
use usgrip_core::stream::{self, ClientConfig, Policy, ServerConfig};

#[derive(Parser)]
#[command(name = "usgrip", version, about = "Ultrasound gesture recognition pipeline")]
struct Cli {
    /// Seed for generation, splitting, initialisation, shuffling and calibration.
    #[arg(long, global = true, env = "USGRIP_SEED", default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    F16,
    Dynamic,
    Uint8,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Queue,
    #[value(name = "latest_wins")]
    LatestWins,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a stratified train/test split.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        frames_per_class: usize,
        /// Native frame side before downsampling.
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// Store native-resolution frames instead of 80x80.
        #[arg(long)]
        native: bool,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
    },
    /// Train a fresh model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f32,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Write the per-epoch history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Post-training quantization of an f32 model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        scheme: Scheme,
        #[arg(long)]
        out: PathBuf,
        /// Calibration data (uint8 only).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = CALIBRATION_SAMPLES)]
        calibration_samples: usize,
    },
    /// Accuracy and confusion matrix of a model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve predictions over UDP.
    Serve {
        #[arg(long)]
        bind: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "latest_wins")]
        policy: PolicyArg,
        /// Stop after this many seconds (default: run until killed).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Replay dataset frames to a server and report accuracy and latency.
    Stream {
        #[arg(long)]
        target: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        rate: f32,
        /// Pause after each reply, seconds.
        #[arg(long, default_value_t = 0.1)]
        delay: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Send at most this many frames.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Size, accuracy and latency of the f32 model and its three quantized forms.
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Trained f32 model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also save the quantized models here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = CALIBRATION_SAMPLES)]
        calibration_samples: usize,
    },
}

enum Failure {
    BadFile(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<usgrip_core::Error> for Failure {
    fn from(e: usgrip_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn bad_file(path: &Path, e: usgrip_core::Error) -> Failure {
    let e = match &e {
        usgrip_core::Error::Format(f) => anyhow!("{}: {} ({})", path.display(), f, f.code()),
        _ => anyhow!("{}: {e}", path.display()),
    };
    Failure::BadFile(e)
}

/// Loads a dataset, downsampling native frames to the network input size.
fn load_frames(path: &Path) -> Result<Dataset, Failure> {
    let d = data::load_dataset(path).map_err(|e| bad_file(path, e))?;
    if (d.height, d.width) == (FRAME_SIDE, FRAME_SIDE) {
        return Ok(d);
    }
    if (d.height, d.width) == (FRAME_SIDE * DOWNSAMPLE_FACTOR, FRAME_SIDE * DOWNSAMPLE_FACTOR) {
        return Ok(d.downsampled()?);
    }
    Err(Failure::BadFile(anyhow!(
        "{}: frames are {}x{}, expected {FRAME_SIDE}x{FRAME_SIDE} or {}x{}",
        path.display(),
        d.height,
        d.width,
        FRAME_SIDE * DOWNSAMPLE_FACTOR,
        FRAME_SIDE * DOWNSAMPLE_FACTOR
    )))
}

fn load_model(path: &Path) -> Result<ModelGraph, Failure> {
    net::load_model(path).map_err(|e| bad_file(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn indices(d: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => d.indices(Split::Train),
        SplitArg::Test => d.indices(Split::Test),
        SplitArg::All => (0..d.len()).collect(),
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

fn cmd_gen(seed: u64, out: &Path, frames_per_class: usize, size: usize, native: bool, test_fraction: f64) -> CmdResult {
    let config = GenConfig {
        frames_per_class,
        size,
        seed,
        ..GenConfig::default()
    };
    let d = if native {
        data::generate(&config)?
    } else {
        data::generate_downsampled(&config)?
    };
    let means = data::class_means(&d);
    let d = data::split(&d, test_fraction, seed)?;
    let bytes = data::save_dataset(&d, out)?;
    let (lo, hi) = means.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    println!("frames={}", d.len());
    println!("size={}x{}", d.height, d.width);
    println!("train={}", d.count(Split::Train));
    println!("test={}", d.count(Split::Test));
    println!("class_means={:.3},{:.3},{:.3},{:.3}", means[0], means[1], means[2], means[3]);
    println!("class_mean_spread={:.6}", (hi - lo) / lo);
    println!("bytes={bytes}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    seed: u64,
    data_path: &Path,
    out: &Path,
    epochs: usize,
    learning_rate: f32,
    batch_size: usize,
    history_path: Option<&Path>,
) -> CmdResult {
    let mut d = load_frames(data_path)?;
    let config = TrainConfig {
        learning_rate,
        epochs,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    if d.count(Split::Test) == 0 {
        d = data::split(&d, config.test_fraction, seed)?;
    }
    let model = net::build_default_model(seed);
    let start = Instant::now();
    let (trained, history) = net::train(&model, &d, &config)?;
    for e in &history.epochs {
        println!(
            "epoch={} train_loss={:.6} train_accuracy={:.6} test_loss={} test_accuracy={}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.test_loss.map_or("-".into(), |v| format!("{v:.6}")),
            e.test_accuracy.map_or("-".into(), |v| format!("{v:.6}")),
        );
    }
    let bytes = net::save_model(&trained, out)?;
    println!("model_bytes={bytes}");
    eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());
    if let Some(p) = history_path {
        write(p, serde_json::to_string_pretty(&history).context("history json")?)?;
    }
    Ok(())
}

fn quantize_model(
    model: &ModelGraph,
    scheme: Scheme,
    calibration: Option<&Dataset>,
    samples: usize,
    seed: u64,
) -> Result<ModelGraph, Failure> {
    Ok(match scheme {
        Scheme::F16 => quant::quantize_f16(model)?,
        Scheme::Dynamic => quant::quantize_dynamic(model)?,
        Scheme::Uint8 => {
            let d = calibration.ok_or_else(|| anyhow!("uint8 quantization needs --data for calibration"))?;
            let idx = quant::calibration_indices(d, samples, seed);
            let profile = quant::calibrate(model, d, &idx)?;
            quant::quantize_uint8(model, &profile)?
        }
    })
}

fn cmd_quantize(
    seed: u64,
    model_path: &Path,
    scheme: Scheme,
    out: &Path,
    data_path: Option<&Path>,
    samples: usize,
) -> CmdResult {
    let model = load_model(model_path)?;
    let calibration = data_path.map(load_frames).transpose()?;
    let q = quantize_model(&model, scheme, calibration.as_ref(), samples, seed)?;
    let bytes = net::save_model(&q, out)?;
    println!("scheme={}", q.quant.name());
    println!("model_bytes={bytes}");
    println!("payload_bytes={}", q.payload_bytes());
    Ok(())
}

fn cmd_eval(model_path: &Path, data_path: &Path, split: SplitArg, report: Option<&Path>) -> CmdResult {
    let model = load_model(model_path)?;
    let d = load_frames(data_path)?;
    let engine = Engine::prepare(&model)?;
    let idx = indices(&d, split);
    let e = evaluate(&engine, &d, &idx)?;
    let mut text = String::from("# usgrip eval report\n");
    text.push_str(&format!("model.scheme={}\n", model.quant.name()));
    text.push_str(&format!("model.epochs_trained={}\n", model.epochs_trained));
    text.push_str(&format!("split={}\n", split_name(split)));
    text.push_str(&evaluation_lines("eval", &e, false));
    match report {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    println!("accuracy={:.6}", e.accuracy);
    println!("latency_mean_s={:.9}{NONDETERMINISTIC}", e.latency.mean_s);
    print!("{}", format_confusion(&e.confusion));
    Ok(())
}

fn cmd_serve(bind: &str, model_path: &Path, policy: PolicyArg, duration: Option<f64>) -> CmdResult {
    let model = load_model(model_path)?;
    let policy = match policy {
        PolicyArg::Queue => Policy::Queue,
        PolicyArg::LatestWins => Policy::LatestWins,
    };
    let handle = stream::serve(
        bind,
        &model,
        ServerConfig {
            policy,
            ..ServerConfig::default()
        },
    )?;
    eprintln!(
        "serving {} model on {} ({})",
        model.quant.name(),
        handle.local_addr(),
        policy.name()
    );
    let start = Instant::now();
    let mut last = handle.stats();
    loop {
        std::thread::sleep(Duration::from_millis(500));
        let s = handle.stats();
        if s != last {
            eprintln!(
                "stats datagrams={} malformed={} duplicates={} completed={} lost={} superseded={} inferences={} errors={}",
                s.datagrams, s.malformed, s.duplicates, s.completed, s.lost, s.superseded, s.inferences, s.errors
            );
            last = s;
        }
        if duration.is_some_and(|d| start.elapsed().as_secs_f64() >= d) {
            break;
        }
    }
    let s = handle.stop();
    println!("{}", serde_json::to_string(&s).context("stats json")?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_stream(
    target: &str,
    data_path: &Path,
    rate: f32,
    delay: f64,
    report: Option<&Path>,
    split: SplitArg,
    limit: Option<usize>,
) -> CmdResult {
    if !(delay >= 0.0 && delay.is_finite()) {
        return Err(Failure::Runtime(anyhow!("delay must be a non-negative number of seconds")));
    }
    let d = data::load_dataset(data_path).map_err(|e| bad_file(data_path, e))?;
    let mut idx = indices(&d, split);
    if let Some(n) = limit {
        idx.truncate(n);
    }
    let config = ClientConfig {
        rate_hz: rate,
        inter_frame_delay: Duration::from_secs_f64(delay),
        ..ClientConfig::default()
    };
    let r = stream::stream_client(target, &d, &idx, &config)?;
    let json = serde_json::to_string_pretty(&r).context("report json")?;
    match report {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    println!(
        "frames={} replies={} lost={} accuracy={:.6} latency_mean_s={:.6} latency_p95_s={:.6}",
        r.frames, r.replies, r.lost, r.accuracy, r.latency_mean_s, r.latency_p95_s
    );
    Ok(())
}

fn machine() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} cpus={cpus}", std::env::consts::ARCH, std::env::consts::OS)
}

fn cmd_bench(
    seed: u64,
    data_path: &Path,
    model_path: &Path,
    report: Option<&Path>,
    out_dir: Option<&Path>,
    samples: usize,
) -> CmdResult {
    let d = load_frames(data_path)?;
    let base = load_model(model_path)?;
    if base.quant != QuantMode::F32 {
        return Err(Failure::BadFile(anyhow!(
            "{}: bench needs an f32 model, found {}",
            model_path.display(),
            base.quant.name()
        )));
    }
    let mut models = vec![base.clone()];
    for scheme in [Scheme::F16, Scheme::Dynamic, Scheme::Uint8] {
        models.push(quantize_model(&base, scheme, Some(&d), samples, seed)?);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for m in &models {
            net::save_model(m, dir.join(format!("model_{}.uqm", m.quant.name())))?;
        }
    }
    let (train_idx, test_idx) = (d.indices(Split::Train), d.indices(Split::Test));
    let mut schemes = Vec::new();
    for m in &models {
        let engine = Engine::prepare(m)?;
        schemes.push(SchemeReport {
            scheme: m.quant,
            model_file_bytes: net::encode_model(m).len(),
            payload_bytes: m.payload_bytes(),
            train: evaluate(&engine, &d, &train_idx)?,
            test: evaluate(&engine, &d, &test_idx)?,
        });
    }
    let r = BenchReport {
        machine: machine(),
        config: vec![
            ("seed".into(), seed.to_string()),
            ("frames".into(), d.len().to_string()),
            ("train_frames".into(), train_idx.len().to_string()),
            ("test_frames".into(), test_idx.len().to_string()),
            ("calibration_samples".into(), samples.to_string()),
            ("epochs_trained".into(), base.epochs_trained.to_string()),
        ],
        schemes,
        stream: None,
    };
    let text = r.to_text();
    match report {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    print!("{}", r.table());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let seed = cli.seed;
    match cli.command {
        Command::Gen {
            out,
            frames_per_class,
            size,
            native,
            test_fraction,
        } => cmd_gen(seed, &out, frames_per_class, size, native, test_fraction),
        Command::Train {
            data,
            out,
            epochs,
            learning_rate,
            batch_size,
            history,
        } => cmd_train(seed, &data, &out, epochs, learning_rate, batch_size, history.as_deref()),
        Command::Quantize {
            model,
            scheme,
            out,
            data,
            calibration_samples,
        } => cmd_quantize(seed, &model, scheme, &out, data.as_deref(), calibration_samples),
        Command::Eval {
            model,
            data,
            split,
            report,
        } => cmd_eval(&model, &data, split, report.as_deref()),
        Command::Serve {
            bind,
            model,
            policy,
            duration,
        } => cmd_serve(&bind, &model, policy, duration),
        Command::Stream {
            target,
            data,
            rate,
            delay,
            report,
            split,
            limit,
        } => cmd_stream(&target, &data, rate, delay, report.as_deref(), split, limit),
        Command::Bench {
            data,
            model,
            report,
            out_dir,
            calibration_samples,
        } => cmd_bench(seed, &data, &model, report.as_deref(), out_dir.as_deref(), calibration_samples),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::BadFile(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
