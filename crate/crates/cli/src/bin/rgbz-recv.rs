//! Receives a relay channel, prepares replay buffers and feeds the sink.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info, warn};
use rgbz::pipeline::{exit, run_receiver, CodecChoice, ReceiverConfig, SinkMode, DEFAULT_QUEUE_DEPTH};
use rgbz::replay::ResampleMode;

#[derive(Parser)]
#[command(version, about = "Receive an RGBZ stream from a relay")]
struct Args {
    /// Signaling server, host:port.
    #[arg(long)]
    signal: String,
    #[arg(long)]
    channel: u64,
    /// `ref`, `h264`, or `external:<command template>`.
    #[arg(long, default_value = "ref")]
    codec: CodecChoice,
    /// `nearest` or `bilinear`.
    #[arg(long, default_value = "nearest")]
    resample: ResampleMode,
    /// `validate`, `dump` or `both`.
    #[arg(long, default_value = "validate")]
    sink: SinkMode,
    /// Directory for `frame_<seq>.ppm` / `.pgm` in dump modes.
    #[arg(long, default_value = ".")]
    dump_dir: PathBuf,
    /// Write the latency report as JSON.
    #[arg(long)]
    latency_json: Option<PathBuf>,
    /// Write the receiver report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
    /// Receiver clock minus sender clock, microseconds.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    clock_offset_us: i64,
    /// Validation failures tolerated before exiting with status 6.
    #[arg(long, default_value_t = 0)]
    max_validation_failures: u64,
    #[arg(long, default_value_t = DEFAULT_QUEUE_DEPTH)]
    queue_depth: usize,
}

fn main() -> ExitCode {
    rgbz_cli::init_logging();
    let args = Args::parse();
    let mut cfg = ReceiverConfig::new(args.signal, args.channel);
    cfg.codec = args.codec;
    cfg.resample = args.resample;
    cfg.sink = args.sink;
    cfg.dump_dir = Some(args.dump_dir);
    cfg.clock_offset_us = args.clock_offset_us;
    cfg.queue_depth = args.queue_depth;
    let report = match run_receiver(&cfg) {
        Ok(r) => r,
        Err(e) => return rgbz_cli::fail(&e),
    };
    info!(
        "{} frames, {} gaps, {} wire bytes, {} validation failures{}",
        report.frames_received,
        report.gaps,
        report.wire_bytes,
        report.validation_failures,
        if report.truncated { ", truncated" } else { "" }
    );
    match &report.latency {
        Some(l) => info!(
            "latency us: min {} median {} p95 {} max {} (n={})",
            l.min_us, l.median_us, l.p95_us, l.max_us, l.count
        ),
        None => warn!("no latency samples recorded"),
    }
    if let Some(path) = &args.latency_json {
        match &report.latency {
            Some(l) => {
                if let Err(e) = rgbz_cli::write_json(path, l) {
                    error!("{}: {e}", path.display());
                    return ExitCode::from(exit::SOURCE as u8);
                }
            }
            None => error!("not writing {}: no latency samples", path.display()),
        }
    }
    if let Some(path) = &args.report_json {
        if let Err(e) = rgbz_cli::write_json(path, &report) {
            error!("{}: {e}", path.display());
            return ExitCode::from(exit::SOURCE as u8);
        }
    }
    match report.check_validation(args.max_validation_failures) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => rgbz_cli::fail(&e),
    }
}
