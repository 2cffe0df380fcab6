//! Command-line front end. Configuration comes from an optional TOML file,
//! the `CIRKIT_SEED` environment variable and `--section.key value`
//! overrides, in increasing precedence.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::error::{Error, Result};
use config::RunConfig;
use experiment::{ExperimentName, RunCache};

#[derive(Debug, Parser)]
#[command(name = "cirkit", version, about = "Mine web image pairs, synthesize instructions, train and evaluate a composed-image-retrieval encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the file and CIRKIT_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean page groups and mine scored image pairs.
    Mine(Common),
    /// Turn mined pairs into instruction triplets.
    Instruct(Common),
    /// Train the fusion encoder on triplets.
    Train(Common),
    /// Score a checkpoint on an evaluation dataset.
    Eval(Common),
    /// Run an ablation or the data-scaling curve.
    Experiment {
        /// data_scaling, query_neg_ablation, arch_ablation or instruction_ablation.
        name: ExperimentName,
        #[command(flatten)]
        common: Common,
    },
    /// Render a result CSV as an SVG chart.
    Plot(Common),
    /// Generate the planted-relation benchmark files.
    Synth(Common),
    /// Write the demo mining corpus and its config into a directory.
    Demo {
        dir: PathBuf,
    },
}

fn common(cmd: &Command) -> Option<&Common> {
    match cmd {
        Command::Mine(c)
        | Command::Instruct(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::Plot(c)
        | Command::Synth(c) => Some(c),
        Command::Experiment { common, .. } => Some(common),
        Command::Demo { .. } => None,
    }
}

fn help_footer() -> String {
    format!(
        "Configuration keys (override with --<key> <value>; defaults shown):\n{}\n\nThe {} environment variable overrides `seed` from the file.",
        config::defaults_listing(),
        config::SEED_ENV
    )
}

/// Parses `args` (including the program name). Help and version requests
/// surface as a clap error, which prints itself.
pub fn parse(args: Vec<String>) -> std::result::Result<(Command, Vec<(String, String)>), CliError> {
    let (rest, overrides) = config::extract_overrides(args).map_err(CliError::Run)?;
    let footer = help_footer();
    let cmd = Cli::command()
        .after_help(footer.clone())
        .mut_subcommands(|s| s.after_help(footer.clone()));
    let matches = cmd.try_get_matches_from(rest).map_err(CliError::Usage)?;
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Usage)?;
    Ok((cli.command, overrides))
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

/// Resolves the run configuration for a parsed command.
pub fn resolve(common: &Common, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

/// Executes a command, returning the lines to print on success.
pub fn execute(command: Command, overrides: Vec<(String, String)>) -> Result<Vec<String>> {
    let cfg = match common(&command) {
        Some(c) => Some(resolve(c, overrides)?),
        None if !overrides.is_empty() => {
            return Err(Error::config("this command takes no configuration overrides"));
        }
        None => None,
    };
    let cfg = || cfg.as_ref().expect("command has a configuration");
    let mut out = Vec::new();
    match command {
        Command::Mine(_) => {
            let s = commands::cmd_mine(cfg())?;
            out.push(format!("{} pairs -> {}", s.pairs.len(), cfg().paths.pairs.display()));
            out.push(serde_json::to_string(&s.stats)?);
        }
        Command::Instruct(_) => {
            let g = commands::cmd_instruct(cfg())?;
            out.push(format!("{} triplets -> {}", g.triplets.len(), cfg().paths.triplets.display()));
            out.push(serde_json::to_string(&g.stats)?);
        }
        Command::Train(_) => {
            let t = commands::cmd_train(cfg())?;
            out.push(format!(
                "{} steps, best step {}{} -> {}",
                t.steps,
                t.best_step,
                t.best_val.map(|v| format!(" (val R@1 {v:.4})")).unwrap_or_default(),
                cfg().paths.checkpoint.display()
            ));
        }
        Command::Eval(_) => {
            let r = commands::cmd_eval(cfg())?;
            for (k, v) in &r.metrics {
                out.push(format!("{k}\t{v:.4}"));
            }
        }
        Command::Experiment { name, .. } => {
            let e = experiment::run_experiment(cfg(), name, &mut RunCache::default())?;
            for (k, r) in &e.rows {
                out.push(format!(
                    "{}\tseed {}\tbudget {}\tR@1 {:.4}\tself_R@1 {:.4}",
                    k.variant.as_str(),
                    k.seed,
                    k.budget,
                    r.r1,
                    r.self_r1
                ));
            }
            out.push(format!("results -> {}", e.csv.display()));
        }
        Command::Plot(_) => {
            let p = &cfg().plot;
            let spec = plot::PlotSpec {
                title: &p.y,
                x: &p.x,
                y: &p.y,
                group: &p.group,
                log_x: p.log_x,
            };
            plot::plot_file(&p.input, &p.output, &spec)?;
            out.push(format!("plot -> {}", p.output.display()));
        }
        Command::Synth(_) => {
            let b = commands::cmd_synth(cfg())?;
            out.push(format!(
                "{} triplets, {} val and {} test queries",
                b.triplets.len(),
                b.val.cases.len(),
                b.test.cases.len()
            ));
        }
        Command::Demo { dir } => {
            let cfg_path = commands::cmd_demo(&dir)?;
            out.push(format!("demo corpus -> {}", cfg_path.display()));
        }
    }
    Ok(out)
}

/// Full entry point; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    match parse(args) {
        Err(CliError::Usage(e)) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
        Ok((command, overrides)) => match execute(command, overrides) {
            Ok(lines) => {
                for l in lines {
                    println!("{l}");
                }
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    }
}
