use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oca_cli::commands::{self, EvalArgs, Experiment};
use oca_cli::CliResult;
use oca_core::retrieval::PadMode;
use oca_core::{Mode, Part, Role};

#[derive(Parser)]
#[command(
    name = "oca",
    version,
    about = "Backward-compatible embedding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the old model or a new model for every configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        role: Role,
        /// Objective for role=new; defaults to the config's train.mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Comma-separated seeds overriding the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Embed a dataset with a trained checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        part: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a query store against a gallery store.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// How to compare stores of different dimension.
        #[arg(long)]
        pad: Option<PadMode>,
        /// Keep each query's own record in its ranking.
        #[arg(long)]
        no_self_exclusion: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval cases, pairwise compatibility fractions and ECC for every seed.
    CompatReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config } => {
            let exp = Experiment::load(&config)?;
            for f in commands::gen_data(&exp)? {
                println!("{}  {}", f.sha256, f.path.display());
            }
        }
        Command::Train {
            config,
            role,
            mode,
            seeds,
        } => {
            let exp = Experiment::load(&config)?;
            for o in commands::train(&exp, role, mode, seeds.as_deref())? {
                println!("{}  {}", o.manifest, o.checkpoint.display());
            }
        }
        Command::Extract {
            checkpoint,
            data,
            part,
            out,
        } => {
            let store = commands::extract(&checkpoint, &data, part, &out)?;
            println!(
                "{} records, dim {}  {}",
                store.len(),
                store.dim(),
                out.display()
            );
        }
        Command::Eval {
            query,
            gallery,
            pad,
            no_self_exclusion,
            k,
            out,
        } => {
            let r = commands::eval(&EvalArgs {
                query: &query,
                gallery: &gallery,
                pad,
                self_exclusion: !no_self_exclusion,
                k_list: k,
                out: &out,
            })?;
            println!(
                "{}  mAP@1.0 {:.4}  CMC-1 {:.4}",
                r.case(),
                r.map_at_1,
                r.cmc_1
            );
        }
        Command::CompatReport {
            config,
            mode,
            seeds,
        } => {
            let exp = Experiment::load(&config)?;
            let r = commands::compat_report(&exp, mode, seeds.as_deref())?;
            commands::render_report(&r, std::io::stdout().lock())
                .map_err(|e| oca_cli::CliError::Usage(format!("writing to stdout: {e}")))?;
            println!("report: {}", exp.layout.report(r.mode).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
