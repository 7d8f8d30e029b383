//! Streams a container or a synthetic scene to a relay channel.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info};
use rgbz::frame::FrameRate;
use rgbz::pipeline::{exit, run_sender, CodecChoice, Pacing, SenderConfig, SourceSpec, DEFAULT_QUEUE_DEPTH};
use rgbz::synth::{Pattern, SynthParams};

#[derive(Parser)]
#[command(version, about = "Send an RGBZ stream through a relay")]
struct Args {
    /// `.rgbz` container to send.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    source: Option<PathBuf>,
    /// Render a synthetic scene instead of reading a file.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value = "orbiting-sphere")]
    pattern: Pattern,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
    #[arg(long, default_value_t = 60)]
    frames: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Signaling server, host:port.
    #[arg(long)]
    signal: String,
    #[arg(long)]
    channel: u64,
    /// `ref`, `h264`, or `external:<command template>`.
    #[arg(long, default_value = "ref")]
    codec: CodecChoice,
    /// Pacing rate; defaults to the source rate (30 for synthetic).
    #[arg(long)]
    fps: Option<FrameRate>,
    #[arg(long)]
    as_fast_as_possible: bool,
    /// Zero pixels with disparity below this value.
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_QUEUE_DEPTH)]
    queue_depth: usize,
    /// Write the sender report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
}

fn main() -> ExitCode {
    rgbz_cli::init_logging();
    let args = Args::parse();
    let source = match args.source {
        Some(p) => SourceSpec::File(p),
        None => {
            let mut p = SynthParams::new(
                args.width,
                args.height,
                args.fps.unwrap_or(FrameRate::integer(30).unwrap()),
                args.frames,
                args.pattern,
            );
            p.seed = args.seed;
            SourceSpec::Synthetic(p)
        }
    };
    let mut cfg = SenderConfig::new(source, args.signal, args.channel);
    cfg.codec = args.codec;
    cfg.fps = args.fps;
    cfg.cutoff = args.cutoff;
    cfg.queue_depth = args.queue_depth;
    if args.as_fast_as_possible {
        cfg.pacing = Pacing::AsFastAsPossible;
    }
    let report = match run_sender(&cfg) {
        Ok(r) => r,
        Err(e) => return rgbz_cli::fail(&e),
    };
    info!(
        "{} frames, {} packets, {} wire bytes, {:.3} s, {} late",
        report.frames_sent, report.packets, report.wire_bytes, report.wall_time_s, report.late_frames
    );
    if let Some(path) = &args.report_json {
        if let Err(e) = rgbz_cli::write_json(path, &report) {
            error!("{}: {e}", path.display());
            return ExitCode::from(exit::SOURCE as u8);
        }
    }
    ExitCode::SUCCESS
}
