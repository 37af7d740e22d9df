use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cfea::config::ExperimentConfig;
use cfea::data::{load_labeled, load_unlabeled, synth_generate, write_synth_dataset};
use cfea::eval::{evaluate, EvalReport, NetworkPredictor};
use cfea::persistence::{load_checkpoint_checked, load_inference_model};
use cfea::trainer::{train, train_from, TrainMode};

mod report;

#[derive(Parser)]
#[command(name = "cfea", version, about = "Unsupervised fundus segmentation adaptation")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source / target / target_test datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmentation network.
    Train {
        /// Directory holding `source/` and `target/` manifests.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Refuse a resume checkpoint whose config hash differs.
        #[arg(long)]
        strict: bool,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Score a checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled manifest, or a directory containing `manifest.jsonl`.
        #[arg(long)]
        test: PathBuf,
        /// Output record (JSON); a text table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a source-only and a CFEA eval record.
    Report {
        #[arg(long)]
        source_only: PathBuf,
        #[arg(long)]
        cfea: PathBuf,
        /// Output directory for the table and the bar chart.
        #[arg(long)]
        out: PathBuf,
    },
}

fn manifest_in(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = synth_generate(&cfg.synth)?;
    let manifests = write_synth_dataset(out, &data)?;
    println!(
        "source {}  target {}  target_test {}",
        data.source.len(),
        data.target.len(),
        data.target_test.len()
    );
    for m in manifests {
        println!("wrote {}", m.display());
    }
    Ok(())
}

fn cmd_train(
    mut cfg: ExperimentConfig,
    data: &Path,
    out: &Path,
    mode: Option<TrainMode>,
    resume: Option<&Path>,
    strict: bool,
    iterations: Option<u64>,
) -> Result<()> {
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(n) = iterations {
        cfg.train.total_iterations = n;
    }
    cfg.validate()?;
    let crop = cfg.crop();
    let source = load_labeled(&manifest_in(&data.join("source")), crop)
        .context("loading source data")?;
    let target = match cfg.train.mode {
        TrainMode::Cfea => Some(
            load_unlabeled(&manifest_in(&data.join("target")), crop)
                .context("loading target data")?,
        ),
        TrainMode::SourceOnly => None,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())
        .with_context(|| format!("writing config into {}", out.display()))?;

    let run = match resume {
        Some(ckpt) => {
            let mut state = load_checkpoint_checked(ckpt, &cfg.train, strict)?;
            // only the run length may be extended on resume
            state.config.total_iterations = cfg.train.total_iterations;
            log::info!("resuming at iteration {}", state.iteration);
            train_from(state, &source, target.as_ref(), out)?
        }
        None => train(&cfg.train, &source, target.as_ref(), out)?,
    };
    println!(
        "trained {} iterations ({}); checkpoint {}, log {}",
        run.state.iteration,
        run.state.config.mode,
        run.final_checkpoint.display(),
        run.metrics_log.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, test: &Path, out: &Path) -> Result<()> {
    let (backbone, params) = load_inference_model(checkpoint)?;
    let crop = cfea::data::CropSettings {
        crop_size: cfg.data.crop_size,
        out_size: backbone.input_size,
    };
    let data = load_labeled(&manifest_in(test), crop).context("loading test data")?;
    let report = evaluate(&NetworkPredictor::new(backbone, params)?, &data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    let table = report.to_table();
    fs::write(out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn read_record(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    EvalReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_report(source_only: &Path, cfea: &Path, out: &Path) -> Result<()> {
    let so = read_record(source_only)?;
    let ad = read_record(cfea)?;
    fs::create_dir_all(out)?;
    let table = report::comparison_table(&so, &ad);
    fs::write(out.join("comparison.txt"), &table)?;
    report::bar_chart(&so, &ad, &out.join("comparison.svg"))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given; see --help");
    };
    match command {
        Command::Synth { out } => cmd_synth(&cfg, &out),
        Command::Train {
            data,
            out,
            mode,
            resume,
            strict,
            iterations,
        } => cmd_train(cfg, &data, &out, mode, resume.as_deref(), strict, iterations),
        Command::Eval {
            checkpoint,
            test,
            out,
        } => cmd_eval(&cfg, &checkpoint, &test, &out),
        Command::Report {
            source_only,
            cfea,
            out,
        } => cmd_report(&source_only, &cfea, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
