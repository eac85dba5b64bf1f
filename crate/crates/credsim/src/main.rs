//! credsim: run credential-dumping scenarios against a modeled machine.
//!
//! Exit codes: 0 success, 1 parse/validation error, 2 invariant violation
//! detected during a run, 3 I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use credsim::matrix::{build_matrix, check_monotonicity, parse_configs, render_matrix};
use credsim::report::{render_report, Format};
use credsim::runner::run_scenario;
use credsim::scenario::parse_scenario;
use credsim_core::attacks::TechniqueId;

#[derive(Parser)]
#[command(
    name = "credsim",
    version,
    about = "Deterministic LSASS credential-dumping simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print (or write) its report.
    Run {
        /// Scenario file (.scn).
        scenario: PathBuf,
        /// Output format: text or json.
        #[arg(long, default_value = "text")]
        format: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every technique against every policy configuration.
    Matrix {
        /// Base scenario providing the fixture.
        scenario: PathBuf,
        /// Configurations file ([config <name>] sections).
        #[arg(long)]
        configs: PathBuf,
        /// Output format: text or json.
        #[arg(long, default_value = "text")]
        format: String,
        /// Write the matrix here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// List the modeled techniques or defenses.
    List {
        /// What to list: techniques or defenses.
        what: String,
    },
    /// Parse and validate a scenario without running it.
    Check {
        /// Scenario file (.scn).
        scenario: PathBuf,
    },
}

const EXIT_PARSE: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_IO: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_PARSE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("credsim: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_IO, format!("cannot read {}: {e}", path.display())))
}

fn emit(bytes: &[u8], output: Option<&Path>) -> Result<(), Failure> {
    match output {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| fail(EXIT_IO, format!("cannot write to stdout: {e}"))),
    }
}

fn parse_format(format: &str) -> Result<Format, Failure> {
    format.parse::<Format>().map_err(|e| fail(EXIT_PARSE, e))
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Run {
            scenario,
            format,
            output,
        } => {
            let format = parse_format(&format)?;
            let text = read_file(&scenario)?;
            let parsed = parse_scenario(&text).map_err(|e| fail(EXIT_PARSE, e))?;
            let report = run_scenario(&parsed).map_err(|e| fail(EXIT_VIOLATION, e))?;
            emit(&render_report(&report, format), output.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Matrix {
            scenario,
            configs,
            format,
            output,
        } => {
            let format = parse_format(&format)?;
            let scenario_text = read_file(&scenario)?;
            let base = parse_scenario(&scenario_text).map_err(|e| fail(EXIT_PARSE, e))?;
            let configs_text = read_file(&configs)?;
            let configs = parse_configs(&configs_text).map_err(|e| fail(EXIT_PARSE, e))?;
            let matrix = build_matrix(&base, &configs).map_err(|e| fail(EXIT_VIOLATION, e))?;
            let violations = check_monotonicity(&matrix);
            emit(
                &render_matrix(&matrix, &violations, format == Format::Json),
                output.as_deref(),
            )?;
            if violations.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_VIOLATION))
            }
        }
        Command::List { what } => {
            match what.as_str() {
                "techniques" => {
                    for technique in TechniqueId::ALL {
                        println!("{:24} {}", technique.id(), technique.display());
                    }
                }
                "defenses" => {
                    for line in [
                        "honey_token                user= domain= password=",
                        "allowlist_monitor          action=warn|terminate (paths from [allowlist])",
                        "lsass_api_hook             action=terminate|prompt watch=... modules=...",
                        "alpc_block                 restore=true|false require_integrity=system",
                        "wdigest_disable",
                        "ppl_enable",
                        "credential_guard",
                        "debug_privilege_restriction allow=Group1,Group2",
                        "protected_users            members=user1,user2",
                        "restricted_admin_rdp",
                        "disable_lm_ntlm",
                        "signature_scan             keywords=mimikatz",
                    ] {
                        println!("{line}");
                    }
                }
                other => {
                    return Err(fail(
                        EXIT_PARSE,
                        format!("unknown list target {other:?} (techniques|defenses)"),
                    ))
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { scenario } => {
            let text = read_file(&scenario)?;
            let parsed = parse_scenario(&text).map_err(|e| fail(EXIT_PARSE, e))?;
            println!(
                "ok: {} ({} accounts, {} policies, {} attacks)",
                parsed.name,
                parsed.fixture.accounts.len(),
                parsed.policies.len(),
                parsed.attacks.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
