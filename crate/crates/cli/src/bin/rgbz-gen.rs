//! Writes a synthetic `.rgbz` container.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info};
use rgbz::container::container_len;
use rgbz::frame::{DisparityRange, FrameRate};
use rgbz::pipeline::exit;
use rgbz::synth::{gen_synthetic, Pattern, SynthParams};

#[derive(Parser)]
#[command(version, about = "Generate a synthetic RGBZ container")]
struct Args {
    /// Output file.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
    /// Frames per second, `30` or `30000/1001`.
    #[arg(long, default_value = "30")]
    fps: FrameRate,
    #[arg(long, default_value_t = 60)]
    frames: u32,
    /// `orbiting-sphere` or `gradient-sweep`.
    #[arg(long, default_value = "orbiting-sphere")]
    pattern: Pattern,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disparity range in diopters.
    #[arg(long, default_value_t = 0.0)]
    range_min: f64,
    #[arg(long, default_value_t = 4.0)]
    range_max: f64,
}

fn main() -> ExitCode {
    rgbz_cli::init_logging();
    let args = Args::parse();
    let range = match DisparityRange::new(args.range_min, args.range_max) {
        Ok(r) => r,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(exit::SOURCE as u8);
        }
    };
    let mut params = SynthParams::new(args.width, args.height, args.fps, args.frames, args.pattern);
    params.seed = args.seed;
    params.range = range;
    match gen_synthetic(params, &args.out) {
        Ok(()) => {
            info!(
                "wrote {} ({} frames, {} bytes)",
                args.out.display(),
                args.frames,
                container_len(args.width, args.height, args.frames)
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{}: {e}", args.out.display());
            ExitCode::from(exit::SOURCE as u8)
        }
    }
}
