use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refproto::Mode;
use refproto_cli::{cmd_ablate, cmd_dump_embeddings, cmd_run, cmd_verify_trace, CliResult, Invocation};

#[derive(Parser)]
#[command(name = "refproto", version, about = "Desk-scale federated learning with sparse adapter updates and prototype alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes metrics.csv and trace.jsonl.
    Run(Common),
    /// Run all four ablation modes; writes metrics.csv, ablation.csv and <mode>/trace.jsonl.
    Ablate(Common),
    /// Replay a run and write the final per-client test embeddings to embeddings.csv.
    DumpEmbeddings(Common),
    /// Recheck ledgers, ordering and uplink fields of an existing trace.
    VerifyTrace {
        /// Trace file, or a directory containing trace.jsonl.
        trace: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no_erpa, no_apud, neither (ablation labels such as "w/o ERPA" also work).
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl From<Common> for Invocation {
    fn from(c: Common) -> Self {
        Invocation {
            config: c.config,
            out: c.out,
            seed: c.seed,
            mode: c.mode,
            rounds: c.rounds,
        }
    }
}

fn dispatch(command: Command) -> CliResult<String> {
    Ok(match command {
        Command::Run(c) => {
            let inv = Invocation::from(c);
            let result = cmd_run(&inv)?;
            format!("ok run final_mean_acc={} {inv}", result.final_accuracy())
        }
        Command::Ablate(c) => {
            let inv = Invocation::from(c);
            let rows = cmd_ablate(&inv)?;
            let mut s = String::from("mode,final_mean_acc,uplink_values,uplink_total\n");
            for r in rows {
                s += &format!("{},{},{},{}\n", r.mode, r.final_mean_acc, r.uplink_values, r.uplink_total);
            }
            s + &format!("ok ablate {inv}")
        }
        Command::DumpEmbeddings(c) => {
            let inv = Invocation::from(c);
            let n = cmd_dump_embeddings(&inv)?;
            format!("ok dump-embeddings rows={n} {inv}")
        }
        Command::VerifyTrace { trace } => {
            cmd_verify_trace(&trace)?;
            format!("ok verify-trace path={}", trace.display())
        }
    })
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let refproto_cli::CliError::Check(findings) = &e {
                for f in findings {
                    println!("{f}");
                }
            }
            eprintln!("error {e}");
            ExitCode::FAILURE
        }
    }
}
