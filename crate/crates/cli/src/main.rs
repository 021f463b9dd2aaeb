//! `adhd-eeg`: file-based pipeline stages and the screening service.
//!
//! Exit status: 0 on success, 2 for invalid flags or configurations, 1 for
//! failures while running. Relative paths resolve against `--data-dir`
//! (or `ADHD_EEG_DATA_DIR`) when given.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adhd_eeg::classifier::TrainConfig;
use adhd_eeg::evaluation::FoldGranularity;
use adhd_eeg::importance::{ImportanceConfig, PerturbationMode};
use adhd_eeg::pipeline::PipelineConfig;
use adhd_eeg::stages::{self, CvOptions, ModelOptions, SegmentIndex, StageError, SEGMENTS_INDEX};
use adhd_eeg::synth::SynthConfig;
use adhd_screen_service::session::Thresholds;
use adhd_screen_service::{AppState, ServiceConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adhd-eeg", version, about = "EEG scalogram screening pipeline")]
struct Cli {
    /// Worker threads; 1 keeps every artifact byte-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "ADHD_EEG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-signal dataset (EEG-CSV files and manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Split evenly between ADHD and control.
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 128.0)]
        sample_rate: f64,
    },
    /// Band-pass filter and window every recording of a manifest.
    Preprocess {
        /// manifest.json, or a directory holding one.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        low_hz: f64,
        #[arg(long, default_value_t = 30.0)]
        high_hz: f64,
        #[arg(long, default_value_t = 3.0)]
        window_s: f64,
        #[arg(long, default_value_t = 1.0)]
        hop_s: f64,
    },
    /// Morlet scalograms of a preprocessed segment directory.
    Scalogram {
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6.0)]
        omega0: f64,
        #[arg(long, default_value_t = 64)]
        n_scales: usize,
        #[arg(long, default_value_t = 1.0)]
        min_freq_hz: f64,
        #[arg(long, default_value_t = 30.0)]
        max_freq_hz: f64,
    },
    /// Train on a whole scalogram directory and save a model bundle.
    Train {
        #[arg(long)]
        scalograms: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Cross-validate, or score a trained model with `--model`.
    Evaluate {
        #[arg(long)]
        scalograms: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score this model bundle instead of cross-validating.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        fold_seed: u64,
        #[arg(long, value_enum, default_value_t = Granularity::Subject)]
        granularity: Granularity,
        /// Channel importance repeats per fold; 0 skips importance.
        #[arg(long, default_value_t = 0)]
        importance_repeats: usize,
        #[arg(long, value_enum, default_value_t = Mode::Shuffle)]
        importance_mode: Mode,
        #[arg(long, default_value_t = 0)]
        importance_seed: u64,
        #[command(flatten)]
        model_flags: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Per-channel permutation importance of a trained model.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scalograms: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 19)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = Mode::Shuffle)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the report of an evaluate or importance directory.
    Report { dir: PathBuf },
    /// Run the screening service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Where session logs are kept.
        #[arg(long, default_value = "screen-data")]
        state_dir: PathBuf,
        /// Model bundle for the inference endpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        min_accuracy: f64,
        #[arg(long, default_value_t = 1500.0)]
        max_median_rt_ms: f64,
    },
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 0.25)]
    width_factor: f64,
    #[arg(long, default_value_t = 2)]
    blocks_per_stage: usize,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seeds initialization and batch order (fold f adds f).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Granularity {
    Subject,
    Segment,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Shuffle,
    Noise,
}

impl From<Mode> for PerturbationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Shuffle => PerturbationMode::Shuffle,
            Mode::Noise => PerturbationMode::Noise,
        }
    }
}

impl ModelFlags {
    fn options(&self, init_seed: u64) -> ModelOptions {
        ModelOptions {
            width_factor: self.width_factor,
            blocks_per_stage: self.blocks_per_stage,
            init_seed,
        }
    }
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            shuffle: true,
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::Validation("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let base = cli.data_dir.clone();
    let at = |p: &Path| match &base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    };
    let started = Instant::now();
    let name = command_name(&cli.command);

    match cli.command {
        Command::Synth {
            out,
            subjects,
            seed,
            duration_s,
            sample_rate,
        } => {
            let cfg = SynthConfig {
                seed,
                duration_s,
                sample_rate_hz: sample_rate,
                ..SynthConfig::default().with_subjects(subjects)
            };
            let n = stages::synth(&cfg, &at(&out))?;
            println!("{n} recordings written to {}", out.display());
        }
        Command::Preprocess {
            manifest,
            out,
            low_hz,
            high_hz,
            window_s,
            hop_s,
        } => {
            let mut manifest = at(&manifest);
            if manifest.is_dir() {
                manifest = manifest.join("manifest.json");
            }
            let cfg = PipelineConfig {
                low_hz,
                high_hz,
                window_s,
                hop_s,
                ..PipelineConfig::default()
            };
            let n = stages::preprocess(&manifest, &cfg, &at(&out))?;
            println!("{n} segments written to {}", out.display());
        }
        Command::Scalogram {
            segments,
            out,
            omega0,
            n_scales,
            min_freq_hz,
            max_freq_hz,
        } => {
            let segments = at(&segments);
            let index_path = segments.join(SEGMENTS_INDEX);
            let text = std::fs::read_to_string(&index_path).map_err(|e| Failure::Runtime(format!("{}: {e}", index_path.display())))?;
            let index: SegmentIndex = serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", index_path.display())))?;
            let cfg = PipelineConfig {
                omega0,
                n_scales,
                min_freq_hz,
                max_freq_hz,
                ..index.pipeline
            };
            let n = stages::scalogram(&segments, &cfg, &at(&out))?;
            println!("{n} scalograms written to {}", out.display());
        }
        Command::Train { scalograms, out, model, train } => {
            let log = stages::train(&at(&scalograms), &model.options(train.seed), &train.config(), &at(&out))?;
            for e in &log {
                eprintln!("epoch {:>3}  loss {:.5}  train acc {:.4}", e.epoch, e.mean_loss, e.train_acc);
            }
            println!("model saved to {}", out.display());
        }
        Command::Evaluate {
            scalograms,
            out,
            model: Some(model),
            ..
        } => {
            let r = stages::evaluate_model(&at(&model), &at(&scalograms), &at(&out))?;
            print!("Segment level\n{}\nSubject level (majority vote)\n{}", r.segment.to_table(), r.subject.to_table());
        }
        Command::Evaluate {
            scalograms,
            out,
            model: None,
            k,
            fold_seed,
            granularity,
            importance_repeats,
            importance_mode,
            importance_seed,
            model_flags,
            train,
        } => {
            let cv = CvOptions {
                k,
                fold_seed,
                granularity: match granularity {
                    Granularity::Subject => FoldGranularity::Subject,
                    Granularity::Segment => FoldGranularity::Segment,
                },
                importance: (importance_repeats > 0).then(|| ImportanceConfig {
                    repeats: importance_repeats,
                    mode: importance_mode.into(),
                    seed: importance_seed,
                }),
            };
            let report = stages::cross_validate(
                &at(&scalograms),
                &model_flags.options(train.seed),
                &train.config(),
                &cv,
                &at(&out),
                |msg| eprintln!("[{:>7.1}s] {msg}", started.elapsed().as_secs_f64()),
            )?;
            print!("{}", stages::render_cv_report(&report));
        }
        Command::Importance {
            model,
            scalograms,
            out,
            repeats,
            mode,
            seed,
        } => {
            let cfg = ImportanceConfig {
                repeats,
                mode: mode.into(),
                seed,
            };
            let r = stages::importance(&at(&model), &at(&scalograms), &cfg, &at(&out))?;
            print!("baseline accuracy {:.4}\n{}", r.baseline_accuracy, r.to_tsv());
        }
        Command::Report { dir } => print!("{}", stages::report(&at(&dir))?),
        Command::Serve {
            addr,
            state_dir,
            model,
            min_accuracy,
            max_median_rt_ms,
        } => {
            let cfg = ServiceConfig {
                data_dir: at(&state_dir),
                thresholds: Thresholds {
                    min_accuracy,
                    max_median_rt_ms,
                    ..Thresholds::default()
                },
                model_dir: model.as_deref().map(at),
            };
            serve(addr, &cfg)?;
        }
    }
    eprintln!("{name} finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn serve(addr: SocketAddr, cfg: &ServiceConfig) -> Result<(), Failure> {
    let state = AppState::open(cfg).map_err(|e| Failure::Validation(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Runtime(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        adhd_screen_service::serve(listener, state).await.map_err(|e| Failure::Runtime(e.to_string()))
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Preprocess { .. } => "preprocess",
        Command::Scalogram { .. } => "scalogram",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Importance { .. } => "importance",
        Command::Report { .. } => "report",
        Command::Serve { .. } => "serve",
    }
}
