//! Signaling registry and relay service.

use std::io::Write;
use std::net::SocketAddr;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::Parser;
use log::{error, info};
use rgbz::pipeline::exit;
use rgbz::relay::{run_relay, RelayConfig, DEFAULT_MAX_CHANNELS, DEFAULT_TTL_SECONDS};

#[derive(Parser)]
#[command(version, about = "Run the channel signaling server and relay")]
struct Args {
    /// Address for signaling requests.
    #[arg(long, default_value = "0.0.0.0:7000")]
    signal_bind: SocketAddr,
    /// Address for relay attach connections.
    #[arg(long, default_value = "0.0.0.0:7001")]
    relay_bind: SocketAddr,
    /// Port handed out in grants, if clients reach the relay through a forward.
    #[arg(long)]
    advertised_port: Option<u16>,
    /// Seconds an unpaired channel is kept.
    #[arg(long, default_value_t = DEFAULT_TTL_SECONDS)]
    ttl_seconds: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_CHANNELS)]
    max_channels: usize,
    /// Seconds between stats log lines; 0 disables them.
    #[arg(long, default_value_t = 10)]
    stats_interval: u64,
}

fn main() -> ExitCode {
    rgbz_cli::init_logging();
    let args = Args::parse();
    let config = RelayConfig {
        signal_addr: args.signal_bind,
        relay_addr: args.relay_bind,
        ttl: Duration::from_secs(args.ttl_seconds),
        max_channels: args.max_channels,
        advertised_port: args.advertised_port,
    };
    let handle = match run_relay(config) {
        Ok(h) => h,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(exit::TRANSPORT as u8);
        }
    };
    // Machine-readable lines for scripts that bind port 0.
    println!("signal {}", handle.signal_addr());
    println!("relay {}", handle.relay_addr());
    let _ = std::io::stdout().flush();
    info!(
        "signaling on {}, relay on {}",
        handle.signal_addr(),
        handle.relay_addr()
    );
    let mut last = None;
    loop {
        thread::sleep(Duration::from_secs(args.stats_interval.max(1)));
        let stats = handle.stats();
        if args.stats_interval > 0 && last != Some(stats) {
            info!(
                "{} channels registered, {} active, {} paired total, {} bytes forwarded",
                stats.channels_registered, stats.channels_active, stats.channels_paired, stats.bytes_forwarded
            );
            last = Some(stats);
        }
    }
}
