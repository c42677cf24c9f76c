//! Command-line driver: argument parsing, configuration and dispatch.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;
use serde::Serialize;

use crate::commands::{execute, Command};
use crate::config::{resolve, Overrides, RunConfig};

/// Exit code for validation and usage errors.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for numerical failures (divergence, caps, budgets).
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "rwre",
    version,
    about = "Random walks in balanced random environments"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: String,
    version: &'static str,
    threads: usize,
    config: &'a RunConfig,
}

fn write_manifest(cmd: Command, cfg: &RunConfig) -> anyhow::Result<()> {
    let threads = rayon::current_num_threads();
    let manifest = Manifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        threads,
        config: cfg,
    };
    std::fs::write(
        cfg.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    // The TOML copy is a loadable config: `rwre --config manifest.toml <cmd>`.
    let toml = format!("# rwre {}\n{}", cmd.name(), cfg.to_toml()?);
    std::fs::write(cfg.out.join("manifest.toml"), toml)?;
    Ok(())
}

fn run_parsed(cli: Cli) -> anyhow::Result<String> {
    let cfg = resolve(&cli.overrides)?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_manifest(cli.command, &cfg)?;
    execute(cli.command, &cfg)
}

/// Exit code for an error: numerical failures map to 2, everything else to 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<rwre_core::RwreError>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match run_parsed(cli) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            exit_code(&e)
        }
    }
}
