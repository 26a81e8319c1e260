//! `mtverify`: runs metamorphic relation suites over clean and mutant
//! classifiers and renders kill matrices.
//!
//! Exit codes: 0 when the suite ran and the matrix was written, 1 when the
//! clean baseline was killed (or an equivariance check failed), 2 on any
//! configuration or input error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mtverify_core::faults::{catalog_json, list_mutants};
use mtverify_core::harness::{
    emit_matrix_loss_curves, emit_report, render_csv, render_text, run_suite, summarize,
    KillMatrix, ReportFormat, RunPlan,
};
use mtverify_core::metamorphic::{check_conv_equivariance, Family, MrId};

#[derive(Parser)]
#[command(
    name = "mtverify",
    version,
    about = "Metamorphic testing of image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a suite plan and write the kill matrix, reports and loss curves.
    Run {
        #[arg(long)]
        plan: PathBuf,
        /// Restrict to these mutants (repeatable); replaces the plan's list.
        #[arg(long = "mutant")]
        mutants: Vec<String>,
        /// Restrict to these relations (repeatable), e.g. `cnn-mr2`.
        #[arg(long = "mr")]
        relations: Vec<MrId>,
        /// Replace the plan's seeds (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Output directory; overrides the plan's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect the mutant catalog.
    Mutants {
        #[command(subcommand)]
        action: MutantsAction,
    },
    /// Render a saved kill matrix.
    Report {
        /// Matrix JSON written by `run`.
        #[arg(long, default_value = "matrix.json")]
        matrix: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that convolution commutes with grid symmetries and channel
    /// reordering.
    Equivariance {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum MutantsAction {
    List {
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Svm,
    Cnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Text => ReportFormat::Text,
        }
    }
}

enum Outcome {
    Done,
    Failed,
}

fn run(
    plan_path: PathBuf,
    mutants: Vec<String>,
    relations: Vec<MrId>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
) -> Result<Outcome> {
    let mut plan = RunPlan::load(&plan_path)
        .with_context(|| format!("loading plan {}", plan_path.display()))?;
    if !mutants.is_empty() {
        plan.mutants = mutants;
    }
    if !relations.is_empty() {
        plan.relations = relations;
    }
    if !seeds.is_empty() {
        plan.seeds = seeds;
    }
    plan.output_dir = match out {
        Some(dir) => dir,
        None if plan.output_dir.is_relative() => plan.base_dir.join(&plan.output_dir),
        None => plan.output_dir.clone(),
    };
    let matrix = match run_suite(&plan) {
        Ok(m) => m,
        Err(e @ mtverify_core::Error::BaselineKilled { .. }) => {
            eprintln!("error: {e}; the relation suite itself is suspect");
            return Ok(Outcome::Failed);
        }
        Err(e) => return Err(e).context("running suite"),
    };
    let dir = &plan.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Text] {
        let name = match format {
            ReportFormat::Json => "matrix.json".to_string(),
            f => format!("report.{}", f.extension()),
        };
        emit_report(&matrix, format, dir.join(name))?;
    }
    let curves = emit_matrix_loss_curves(&matrix, dir.join("curves"))?;
    print!("{}", render_text(&matrix));
    println!();
    print!("{}", summarize(&matrix));
    log::info!("wrote {} loss curves under {}", curves.len(), dir.display());
    Ok(Outcome::Done)
}

fn execute(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run {
            plan,
            mutants,
            relations,
            seeds,
            out,
        } => run(plan, mutants, relations, seeds, out),
        Command::Mutants {
            action: MutantsAction::List { family, json },
        } => {
            if json {
                println!("{}", catalog_json()?);
                return Ok(Outcome::Done);
            }
            let wanted = family.map(|f| match f {
                FamilyArg::Svm => Family::Svm,
                FamilyArg::Cnn => Family::Cnn,
            });
            for m in list_mutants()
                .iter()
                .filter(|m| wanted.is_none_or(|w| w == m.target))
            {
                println!(
                    "{:<6} {:<4} {:<32} {}",
                    m.id,
                    match m.target {
                        Family::Svm => "svm",
                        Family::Cnn => "cnn",
                    },
                    m.category.name(),
                    m.description
                );
            }
            Ok(Outcome::Done)
        }
        Command::Report {
            matrix,
            format,
            out,
        } => {
            let m = KillMatrix::load(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            match out {
                Some(path) => emit_report(&m, format.into(), path)?,
                None => match format {
                    Format::Json => println!("{}", m.to_json()?),
                    Format::Csv => print!("{}", render_csv(&m)),
                    Format::Text => {
                        print!("{}", render_text(&m));
                        println!();
                        print!("{}", summarize(&m));
                    }
                },
            }
            Ok(Outcome::Done)
        }
        Command::Equivariance { trials, seed } => {
            let r = check_conv_equivariance(trials, seed)?;
            println!(
                "worked example:   {}",
                if r.worked_example { "ok" } else { "MISMATCH" }
            );
            println!(
                "layer checks:     {} ({} failed, max relative error {:.3e})",
                r.layer_checks, r.layer_failures, r.layer_max_relative_error
            );
            println!(
                "network checks:   {} ({} failed, max relative error {:.3e})",
                r.network_checks, r.network_failures, r.network_max_relative_error
            );
            Ok(if r.passed() {
                Outcome::Done
            } else {
                Outcome::Failed
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
