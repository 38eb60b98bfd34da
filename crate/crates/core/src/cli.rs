//! Command-line front end. Every subcommand reads an optional experiment
//! config file and applies flag overrides on top of it.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::KeepPercent;
use crate::error::{PrtError, Result};
use crate::experiment::{
    run_in, stage_cluster, stage_dict, stage_evaluate, stage_generate, stage_pretrain, stage_prt,
    stage_tl, ExperimentConfig, Workspace,
};

#[derive(Debug, Parser)]
#[command(
    name = "prt",
    version,
    about = "Pre-text representation transfer experiments on synthetic two-domain data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate source, unlabeled and target datasets
    Generate(CommonArgs),
    /// Train the source model
    Pretrain(CommonArgs),
    /// Cluster the unlabeled pool into pseudo-labels
    Cluster(CommonArgs),
    /// Pre-text representation transfer on the pseudo-labels
    Prt(CommonArgs),
    /// Fine-tune per (ratio, fold) cell
    Tl(CommonArgs),
    /// Build per-cell feature dictionaries
    Dict(CommonArgs),
    /// Score every cell and write the report
    Evaluate(CommonArgs),
    /// Run every stage end to end
    RunAll(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config file (`key = value` per line)
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated percentages of positives kept, from 10,25,50,75,100
    #[arg(long)]
    ratios: Option<String>,
    /// Number of folds
    #[arg(long)]
    folds: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(raw) = &self.ratios {
            cfg.ratios = raw
                .split(',')
                .map(|s| {
                    let p = s.trim().parse().map_err(|_| {
                        PrtError::config(format!("--ratios: `{}` is not a percentage", s.trim()))
                    })?;
                    KeepPercent::new(p)
                })
                .collect::<Result<_>>()?;
        }
        if let Some(folds) = self.folds {
            cfg.fold_count = folds;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<()> {
    let (args, run): (&CommonArgs, fn(&ExperimentConfig, &Workspace) -> Result<()>) = match &command
    {
        Command::Generate(a) => (a, |c, w| stage_generate(c, w)),
        Command::Pretrain(a) => (a, |c, w| {
            let acc = stage_pretrain(c, w)?;
            println!("source training accuracy {acc:.4}");
            Ok(())
        }),
        Command::Cluster(a) => (a, |c, w| {
            let model = stage_cluster(c, w)?;
            println!("k = {}, inertia = {:.6}", model.k(), model.inertia());
            Ok(())
        }),
        Command::Prt(a) => (a, |c, w| stage_prt(c, w)),
        Command::Tl(a) => (a, |c, w| stage_tl(c, w)),
        Command::Dict(a) => (a, |c, w| stage_dict(c, w)),
        Command::Evaluate(a) => (a, |c, w| {
            print!("{}", stage_evaluate(c, w)?.to_text());
            Ok(())
        }),
        Command::RunAll(a) => (a, |c, w| {
            print!("{}", run_in(c, w)?.to_text());
            Ok(())
        }),
    };
    let cfg = args.resolve()?;
    let ws = Workspace::new(&cfg.out_dir);
    run(&cfg, &ws)
}

/// Parses `argv` (program name first) and runs the subcommand.
///
/// Returns 0 on success, 1 on a runtime or config failure and 2 on a usage
/// error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["prt", "frobnicate"]), 2);
        assert_eq!(run(["prt", "tl", "--bogus"]), 2);
        assert_eq!(run(["prt"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(["prt", "run-all", "--help"]), 0);
        assert_eq!(run(["prt", "--help"]), 0);
    }

    #[test]
    fn bad_ratio_flag_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            run(["prt", "generate", "--out", out, "--ratios", "10,33"]),
            1
        );
    }
}
