//! Shared plumbing for the `rgbz-*` binaries.

use std::path::Path;
use std::process::ExitCode;

use log::error;
use rgbz::pipeline::PipelineError;

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

/// Logs the error and maps it to the process exit code.
pub fn fail(e: &PipelineError) -> ExitCode {
    error!("{e}");
    ExitCode::from(e.exit_code() as u8)
}
