//! `edgedet` command-line front end.
//!
//! Commands: `build`, `analyze`, `quantize`, `prune`, `infer`, `eval`,
//! `bench` and `synth`. Every command is reachable in-process through
//! [`run`], which returns the process exit code:
//!
//! | code | meaning                          |
//! |------|----------------------------------|
//! | 0    | success (model fits its budgets) |
//! | 1    | usage error                      |
//! | 2    | budget verdict no-fit            |
//! | 3    | data error                       |

mod args;
pub mod bench;
mod commands;
pub mod config;
pub mod dataset;
pub mod imageio;
pub mod pipeline;

use std::io::Write;
use std::path::PathBuf;

use clap::Parser;

pub use args::Cli;
pub use bench::BenchResult;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NO_FIT: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    /// The report was emitted; the model exceeds a budget.
    #[error("model does not fit its budgets")]
    NoFit,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("model file: {0}")]
    Container(#[from] edgedet::ir::container::ContainerError),
    #[error("graph: {0}")]
    Graph(#[from] edgedet::ir::GraphError),
    #[error(transparent)]
    Compress(#[from] edgedet::compress::CompressError),
    #[error("execution: {0}")]
    Exec(#[from] edgedet::engine::ExecError),
    #[error("postprocess: {0}")]
    Postprocess(#[from] edgedet::postprocess::PostprocessError),
    #[error("metrics: {0}")]
    Metrics(#[from] edgedet::metrics::MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::NoFit => EXIT_NO_FIT,
            _ => EXIT_DATA,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

/// Parse `args` (program name first) and run the command, writing results to
/// `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::NoFit) => EXIT_NO_FIT,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
