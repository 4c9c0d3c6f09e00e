use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use delaysync::exec::{self, Execution};
use delaysync::pipeline::{self, PipelineError, EXIT_PASS, EXIT_VERDICT_FAIL};
use delaysync::scenario::Scenario;

/// Synthesize and validate delayed-synchronization protocols from scenario files.
#[derive(Debug, Parser)]
#[command(name = "delaysync", version)]
struct Cli {
    /// Reserved; the pipeline is deterministic and ignores it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print failures.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Design, simulate and report. Each scenario writes into <out>/<file stem>.
    Run {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Output root; defaults to $DELAYSYNC_OUT, then ./delaysync-out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Design and print certificates without simulating.
    Verify { file: PathBuf },
}

fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DELAYSYNC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("delaysync-out"))
}

fn load(path: &Path) -> Result<Scenario, PipelineError> {
    Ok(Scenario::load(path)?)
}

fn run_one(path: &Path, root: &Path) -> (i32, String) {
    let outcome = load(path).and_then(|s| pipeline::run_scenario(&s, &pipeline::output_dir_for(root, path)));
    match outcome {
        Ok(o) => {
            let r = &o.report;
            let line = format!(
                "{}: {} (terminal error {:.3e}, relative {:.3e}) -> {}",
                path.display(),
                if r.verdict { "pass" } else { "fail" },
                r.terminal_error,
                r.terminal_error / r.scale,
                o.out_dir.display()
            );
            (o.exit_code(), line)
        }
        Err(e) => (e.exit_code(), format!("{}: error: {e}", path.display())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { files, out } => {
            let root = output_root(out);
            let results = exec::map(Execution::default(), &files, |f| run_one(f, &root));
            for (code, line) in &results {
                if *code == EXIT_PASS {
                    if !cli.quiet {
                        println!("{line}");
                    }
                } else {
                    eprintln!("{line}");
                }
            }
            results.iter().map(|r| r.0).max().unwrap_or(EXIT_PASS)
        }
        Command::Verify { file } => match load(&file).and_then(|s| pipeline::verify_design(&s)) {
            Ok(v) => {
                if !cli.quiet || !v.passed {
                    print!("{}", v.text);
                }
                if v.passed {
                    EXIT_PASS
                } else {
                    eprintln!("{}: certificate margin not met", file.display());
                    EXIT_VERDICT_FAIL
                }
            }
            Err(e) => {
                eprintln!("{}: error: {e}", file.display());
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
