use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use normscape_cli::commands::{self, EvalSource, Resume};
use normscape_cli::{CliError, RunConfig};
use normscape_core::gradcheck::GradCheckReport;
use normscape_core::model::ModelConfig;
use normscape_core::objective::NormSetting;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "normscape", version, about = "Recursive super-resolution under L1/L2 capacity control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset manifests and report patch and step counts.
    PrepareData {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Generate procedural training and evaluation images.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 3)]
        eval: usize,
        #[arg(long, default_value_t = 128)]
        width: u32,
        #[arg(long, default_value_t = 128)]
        height: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one norm setting.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        setting: NormSetting,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from; `latest` picks the newest one under --out.
        #[arg(long)]
        resume: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        output: Output,
    },
    /// Train several settings and emit the combined landscape.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of all-l2,mix,all-l1.
        #[arg(long, value_delimiter = ',', default_value = "all-l2,mix,all-l1")]
        settings: Vec<NormSetting>,
        /// Train the settings concurrently.
        #[arg(long)]
        parallel: bool,
        /// Continue each setting from its newest checkpoint under --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        output: Output,
    },
    /// Finite-difference check of every layer under every setting.
    Gradcheck {
        /// Model config JSON (a full run config's `model` section is also accepted); defaults to the tiny config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Count weights per subnet and compare with the reference network.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Mean PSNR of the bicubic baseline or a trained checkpoint.
    Eval {
        #[arg(long, conflicts_with = "bicubic", required_unless_present = "bicubic")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bicubic: bool,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[command(flatten)]
        output: Output,
    },
}

fn emit<T: Serialize>(output: &Output, report: &T, text: impl FnOnce(&T) -> String) {
    if output.json {
        println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
    } else {
        print!("{}", text(report));
    }
}

fn layer_line(name: &str, r: &GradCheckReport) -> String {
    format!(
        "  {:<18} max rel {:.2e}  norm rel {:.2e}  {}\n",
        name,
        r.max_rel_error,
        r.norm_rel_error,
        if r.passed { "ok" } else { "FAIL" }
    )
}

fn gradcheck_model(config: Option<&Path>) -> Result<ModelConfig, CliError> {
    let Some(path) = config else { return Ok(ModelConfig::tiny()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str::<ModelConfig>(&text) {
        Ok(m) => Ok(m),
        Err(_) => Ok(RunConfig::load(Some(path))?.model),
    }
}

fn experiment_text(r: &commands::ExperimentReport) -> String {
    let mut s = String::new();
    for st in &r.settings {
        s += &format!(
            "{:<7} epochs {:>2}  steps {} (reference {})  PSNR {:.3} -> {:.3} dB  lr {:.1e} ({} drops)  sparsity {:.4}\n",
            st.setting.as_str(),
            st.epochs,
            st.global_step,
            st.reference_step_budget,
            st.initial_psnr,
            st.final_psnr,
            st.final_lr,
            st.lr_drops,
            st.sparsity.overall
        );
    }
    for c in &r.stage_report.comparisons {
        s += &format!(
            "stage {}: {} {:.3} dB vs {} {:.3} dB\n",
            c.stage, c.first, c.first_mean, c.second, c.second_mean
        );
    }
    s += &format!("wrote {}\n", r.landscape_csv.display());
    s
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PrepareData {
            train_dir,
            eval_dir,
            scale,
            holdout,
            config,
            out,
            output,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = scale {
                cfg.data.scale = s;
                cfg.model.scale_factor = s;
            }
            if let Some(h) = holdout {
                cfg.data.holdout = h;
            }
            let r = commands::prepare_data(&train_dir, eval_dir.as_deref(), &cfg, &out)?;
            emit(&output, &r, |r| {
                let mut s = format!(
                    "train {} / validation {} / eval {} images; {} skipped\n",
                    r.train_images,
                    r.validation_images,
                    r.eval_images,
                    r.skipped.len()
                );
                for k in &r.skipped {
                    s += &format!("  skipped {}: {}\n", k.path.display(), k.reason);
                }
                s += &format!(
                    "{} patches, {} steps/epoch at batch {}, {} steps over {} epochs ({:+} vs the {}-step reference)\n",
                    r.train_patches,
                    r.steps_per_epoch,
                    r.batch_size,
                    r.total_steps,
                    r.epochs,
                    r.step_delta,
                    r.reference_step_budget
                );
                s
            });
        }
        Command::SynthData {
            out,
            train,
            eval,
            width,
            height,
            seed,
        } => {
            let r = commands::synth_data(&out, train, eval, width, height, seed)?;
            println!(
                "wrote {} training images to {} and {} evaluation images to {}",
                r.train,
                r.train_dir.display(),
                r.eval,
                r.eval_dir.display()
            );
        }
        Command::Train {
            config,
            setting,
            out,
            resume,
            epochs,
            output,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.validate()?;
            }
            let resume = match resume.as_deref() {
                None => Resume::Fresh,
                Some("latest") => Resume::Latest,
                Some(p) => Resume::From(PathBuf::from(p)),
            };
            let r = commands::experiment(&cfg, &[setting], &out, &resume, false)?;
            emit(&output, &r, experiment_text);
        }
        Command::Experiment {
            config,
            out,
            settings,
            parallel,
            resume,
            epochs,
            output,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.validate()?;
            }
            let resume = if resume { Resume::Latest } else { Resume::Fresh };
            let r = commands::experiment(&cfg, &settings, &out, &resume, parallel)?;
            emit(&output, &r, experiment_text);
        }
        Command::Gradcheck {
            config,
            patch,
            seed,
            tol,
            output,
        } => {
            let model = gradcheck_model(config.as_deref())?;
            let objective = normscape_core::ObjectiveConfig::default();
            let r = commands::gradcheck(&model, &objective, patch, seed, tol)?;
            emit(&output, &r, |r| {
                let mut s = String::new();
                for c in &r.checks {
                    let setting = c.layers.first().map_or("?", |l| l.setting.as_str());
                    s += &format!("{setting} (draw seed {}, ReLU margin {:.1e})\n", c.seed, c.relu_margin);
                    for l in &c.layers {
                        s += &layer_line(&l.layer, &l.report);
                    }
                }
                s += if r.passed { "PASS\n" } else { "FAIL\n" };
                s
            });
            if !r.passed {
                return Err(CliError::Numeric(format!("gradient check exceeded tolerance {tol:e}")));
            }
        }
        Command::ParamCount { config, output } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let r = commands::param_count(&cfg.model);
            emit(&output, &r, |r| {
                let mut s = String::new();
                for (name, n) in &r.per_layer {
                    s += &format!("  {name:<18} {n:>9}\n");
                }
                s += &format!("Enet {}  Inet {}  Rnet {}\n", r.enet, r.inet, r.rnet);
                s += &format!(
                    "total {} (reference {}, delta {:+}); {} the {} threshold\n",
                    r.total,
                    r.reference_total,
                    r.delta_vs_reference,
                    if r.exceeds_threshold { "exceeds" } else { "DOES NOT exceed" },
                    r.threshold
                );
                s
            });
        }
        Command::Eval {
            checkpoint,
            bicubic: _,
            eval_dir,
            manifest,
            scale,
            output,
        } => {
            let source = match (eval_dir, manifest) {
                (Some(d), _) => EvalSource::Dir(d),
                (None, Some(m)) => EvalSource::Manifest(m),
                (None, None) => return Err(CliError::Usage("--eval-dir or --manifest is required".into())),
            };
            let r = commands::eval(&source, scale, checkpoint.as_deref())?;
            emit(&output, &r, |r| {
                let mut s = String::new();
                for (name, p) in &r.per_image {
                    s += &format!("  {name:<16} {p:.3} dB\n");
                }
                s += &format!(
                    "{} ×{}: mean PSNR {:.3} dB over {} images ({:.1} s)\n",
                    r.mode, r.scale, r.mean_psnr, r.images, r.seconds
                );
                s
            });
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("NORMSCAPE_THREADS") else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("NORMSCAPE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
