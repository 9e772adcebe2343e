//! `pedstress`: simulate cohorts, process session bundles, serve sessions
//! for annotation, fit models and regenerate reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use pedstress_core::pipeline::cohort::{generate_cohort, write_cohort, CohortConfig};
use pedstress_core::pipeline::service::serve_sessions;
use pedstress_core::pipeline::{
    fit_models, load_bundles, rerun_from_cache, run_pipeline_with, write_outputs, PipelineConfig, Stage,
    CONFIG_FILE, REPORT_FILE,
};
use pedstress_core::{PanelDataset, PipelineReport};

/// Exit status when the run finished but logged hard failures.
const HARD_FAILURE_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "pedstress", version, about = "Pedestrian crossing stress analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as an input directory.
    Simulate {
        /// Cohort configuration (TOML); defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured participant count.
        #[arg(long)]
        participants: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline over an input directory.
    Process {
        /// Directory of session bundles, as written by `simulate`.
        input: PathBuf,
        /// Pipeline configuration (TOML); defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve an output directory to the annotation client.
    AnnotateServe {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
    },
    /// Fit the configured models to a panel file.
    Fit {
        /// Panel in the layout of an output directory's `panel.csv`.
        panel: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fit only this model.
        #[arg(long)]
        model: Option<String>,
        /// Directory for the model tables; printed only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute an output directory from its cached intermediates.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// First stage to recompute; `sync` needs the raw inputs.
        #[arg(long, default_value = "model")]
        from_stage: Stage,
        /// Defaults to the configuration stored in the output directory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the recomputed outputs back to the directory.
        #[arg(long)]
        write: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(hard) => {
            warn!("{hard} hard failure(s)");
            ExitCode::from(HARD_FAILURE_EXIT)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Runs one command and returns its hard-failure count.
fn run(command: Command) -> Result<usize> {
    match command {
        Command::Simulate { config, seed, participants, out } => {
            let mut cfg = match config {
                Some(path) => CohortConfig::from_toml(&read(&path)?)?,
                None => CohortConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.participants = participants.unwrap_or(cfg.participants);
            cfg.validate()?;
            let cohort = generate_cohort(&cfg)?;
            write_cohort(&out, &cohort, &cfg).with_context(|| format!("writing {}", out.display()))?;
            let s = &cohort.summary;
            println!(
                "{} sessions ({} completed, {} accidents, {} timed out), {} injected SCRs -> {}",
                s.sessions,
                s.completed,
                s.accidents,
                s.timed_out,
                s.injected_scrs,
                out.display()
            );
            Ok(0)
        }
        Command::Process { input, config, out } => {
            let cfg = pipeline_config(config.as_deref(), None)?;
            let (bundles, failures) =
                load_bundles(&input).with_context(|| format!("reading {}", input.display()))?;
            info!("{} bundles loaded, {} unreadable", bundles.len(), failures.len());
            let report = run_pipeline_with(&bundles, failures, &cfg)?;
            finish(&report, Some(&out))
        }
        Command::AnnotateServe { out, port } => {
            serve_sessions(&out, port)?;
            Ok(0)
        }
        Command::Fit { panel, config, model, out } => {
            let cfg = pipeline_config(config.as_deref(), None)?;
            let file = fs::File::open(&panel).with_context(|| format!("opening {}", panel.display()))?;
            let data = PanelDataset::read_csv(file)?;
            let entries: Vec<_> =
                cfg.models.into_iter().filter(|m| model.as_ref().is_none_or(|n| *n == m.spec.name)).collect();
            if entries.is_empty() {
                bail!("no model named {:?} in the configuration", model.unwrap_or_default());
            }
            let mut hard = 0;
            for m in fit_models(&data, &entries) {
                match &m.result {
                    Ok(f) => {
                        println!("{}", f.table.to_text());
                        if let Some(dir) = &out {
                            fs::create_dir_all(dir)?;
                            fs::write(dir.join(format!("{}.txt", m.name)), f.table.to_text())?;
                            fs::write(dir.join(format!("{}.csv", m.name)), f.table.to_csv())?;
                        }
                    }
                    Err(e) => {
                        hard += usize::from(e.hard);
                        println!("{}: not fitted: {}\n", m.name, e.reason);
                    }
                }
            }
            Ok(hard)
        }
        Command::Report { out, from_stage, config, write } => {
            let cfg = pipeline_config(config.as_deref(), Some(&out))?;
            let report = rerun_from_cache(&out, &cfg, from_stage)?;
            finish(&report, write.then_some(out.as_path()))
        }
    }
}

/// Reads `explicit`, else the configuration stored in `stored_in`, else
/// the defaults.
fn pipeline_config(explicit: Option<&Path>, stored_in: Option<&Path>) -> Result<PipelineConfig> {
    let path = explicit.map(Path::to_path_buf).or_else(|| stored_in.map(|d| d.join(CONFIG_FILE)));
    match path {
        Some(p) => Ok(PipelineConfig::from_toml(&read(&p)?)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn finish(report: &PipelineReport, out: Option<&Path>) -> Result<usize> {
    match out {
        Some(dir) => {
            write_outputs(report, dir).with_context(|| format!("writing {}", dir.display()))?;
            println!(
                "{} sessions processed, {} dropped, {} SCRs -> {}",
                report.sessions.len(),
                report.dropped.len(),
                report.events.len(),
                dir.join(REPORT_FILE).display()
            );
        }
        None => print!("{}", report.render()),
    }
    Ok(report.hard_failures())
}
