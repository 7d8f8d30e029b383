//! Sender and receiver endpoints.
//!
//! Sender: source, pacing, optional background suppression, pack and encode
//! run in one stage; socket writes run in another, joined by a bounded
//! queue. Receiver: socket reads, decode and unpack run in one stage;
//! replay preparation and the sink in another.
//!
//! Each sent access unit carries the wall-clock time (UNIX microseconds) at
//! which its frame was released by the pacer. The receiver records a latency
//! sample when the packet carrying it is complete.

use std::collections::VecDeque;
use std::fs::File;
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::codec::{
    ref_decode, ref_encode, CodecError, CodecId, EncodedAccessUnit, ExternalDecoder, ExternalEncoder,
    H264_DECODE_TEMPLATE, H264_ENCODE_TEMPLATE,
};
use crate::container::{ContainerError, ContainerReader};
use crate::frame::{suppress_background, FrameRate, RgbzFrame, StreamHeader};
use crate::latency::{unix_time_us, LatencyRecorder, LatencyReport};
use crate::relay::{attach, register, RelayError, Role};
use crate::replay::{prepare_into, sink_consume, write_dump, ResampleMode, SinkDump, SlmBuffer};
use crate::superframe::{pack_superframe, unpack_superframe, Superframe};
use crate::synth::{SynthParams, SynthSource};
use crate::transport::{StreamReceiver, StreamSender, TransportError};

pub const DEFAULT_QUEUE_DEPTH: usize = 4;

/// Process exit codes shared by the endpoints.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const SOURCE: i32 = 2;
    pub const SIGNALING: i32 = 3;
    pub const TRANSPORT: i32 = 4;
    pub const DESYNC: i32 = 5;
    pub const VALIDATION: i32 = 6;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("source error: {0}")]
    Source(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("signaling failed: {0}")]
    Signaling(#[source] RelayError),
    #[error("relay attach failed: {0}")]
    Relay(#[source] RelayError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
    #[error("{failures} frames failed validation (threshold {threshold})")]
    Validation { failures: u64, threshold: u64 },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Source(_) | Self::Config(_) => exit::SOURCE,
            Self::Signaling(_) => exit::SIGNALING,
            Self::Relay(_) | Self::Codec(_) => exit::TRANSPORT,
            Self::Transport(e) => {
                if e.is_desync() || matches!(e, TransportError::Protocol(_) | TransportError::Format(_)) {
                    exit::DESYNC
                } else {
                    exit::TRANSPORT
                }
            }
            Self::Validation { .. } => exit::VALIDATION,
        }
    }
}

impl From<ContainerError> for PipelineError {
    fn from(e: ContainerError) -> Self {
        Self::Source(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecChoice {
    Ref,
    /// Command template for this side's transcoder.
    External(String),
    /// ffmpeg with libx264 using the built-in templates.
    H264,
}

impl FromStr for CodecChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ref" => return Ok(Self::Ref),
            "h264" => return Ok(Self::H264),
            _ => {}
        }
        match s.strip_prefix("external:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(Self::External(cmd.to_string())),
            _ => Err(format!("expected `ref`, `h264` or `external:<command>`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SourceSpec {
    File(PathBuf),
    Synthetic(SynthParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    Realtime,
    AsFastAsPossible,
}

#[derive(Debug, Clone)]
pub struct SenderConfig {
    pub source: SourceSpec,
    pub signal: String,
    pub channel_id: u64,
    pub codec: CodecChoice,
    pub pacing: Pacing,
    /// Overrides the source frame rate.
    pub fps: Option<FrameRate>,
    /// Disparity below which pixels are zeroed.
    pub cutoff: Option<f64>,
    pub queue_depth: usize,
}

impl SenderConfig {
    pub fn new(source: SourceSpec, signal: impl Into<String>, channel_id: u64) -> Self {
        Self {
            source,
            signal: signal.into(),
            channel_id,
            codec: CodecChoice::Ref,
            pacing: Pacing::Realtime,
            fps: None,
            cutoff: None,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct SenderReport {
    pub frames_sent: u64,
    pub access_units: u64,
    pub packets: u64,
    pub wire_bytes: u64,
    pub payload_bytes: u64,
    /// Superframe bytes per frame before encoding.
    pub raw_bytes_per_frame: usize,
    pub wall_time_s: f64,
    /// Frames released more than half an interval after their deadline.
    pub late_frames: u64,
    /// Gaps between consecutive frame releases.
    pub release_intervals_us: Vec<u64>,
    /// Content checksum of each frame as packed, after suppression.
    pub frame_checksums: Vec<u32>,
}

type FrameIter = Box<dyn Iterator<Item = Result<RgbzFrame, ContainerError>> + Send>;

fn open_source(spec: &SourceSpec) -> Result<(StreamHeader, FrameIter), PipelineError> {
    match spec {
        SourceSpec::File(path) => {
            let r: ContainerReader<BufReader<File>> =
                ContainerReader::open(path).map_err(|e| PipelineError::Source(format!("{}: {e}", path.display())))?;
            Ok((*r.header(), Box::new(r)))
        }
        SourceSpec::Synthetic(p) => {
            let s = SynthSource::new(*p).map_err(|e| PipelineError::Source(e.to_string()))?;
            Ok((s.header(), Box::new(s.map(Ok))))
        }
    }
}

enum Encoder {
    Ref,
    External(Box<ExternalEncoder>),
}

struct Produced {
    late_frames: u64,
    release_intervals_us: Vec<u64>,
    frame_checksums: Vec<u32>,
    raw_bytes_per_frame: usize,
}

fn produce(
    frames: FrameIter,
    hdr: StreamHeader,
    cfg: &SenderConfig,
    mut encoder: Encoder,
    out: SyncSender<(u64, EncodedAccessUnit)>,
) -> Result<Produced, PipelineError> {
    let interval = Duration::from_micros(hdr.fps.frame_time_us(1));
    let mut stats = Produced {
        late_frames: 0,
        release_intervals_us: Vec::new(),
        frame_checksums: Vec::new(),
        raw_bytes_per_frame: 0,
    };
    let start = Instant::now();
    let mut last_release: Option<Instant> = None;
    let mut last_ts = 0;
    // Receiver hung up; the writer stage reports why.
    let closed = || PipelineError::Transport(TransportError::Protocol("send stage stopped".into()));
    for (i, frame) in frames.enumerate() {
        let mut frame = frame?;
        if cfg.pacing == Pacing::Realtime {
            let deadline = start + Duration::from_micros(hdr.fps.frame_time_us(i as u64));
            let now = Instant::now();
            if now < deadline {
                thread::sleep(deadline - now);
            } else if now - deadline > interval / 2 {
                stats.late_frames += 1;
                debug!("frame {i} released {:?} late", now - deadline);
            }
        }
        let released = Instant::now();
        if let Some(prev) = last_release {
            stats.release_intervals_us.push((released - prev).as_micros() as u64);
        }
        last_release = Some(released);
        let ts = unix_time_us().max(last_ts);
        last_ts = ts;

        if let Some(cutoff) = cfg.cutoff {
            frame =
                suppress_background(&frame, cutoff, &hdr.range).map_err(|e| PipelineError::Source(e.to_string()))?;
        }
        let sf = pack_superframe(&frame).map_err(|e| PipelineError::Source(e.to_string()))?;
        stats.raw_bytes_per_frame = sf.data().len();
        stats.frame_checksums.push(frame.content_checksum());
        match &mut encoder {
            Encoder::Ref => out.send((ts, ref_encode(&sf)?)).map_err(|_| closed())?,
            Encoder::External(enc) => {
                enc.feed(&sf)?;
                while let Some(au) = enc.try_recv()? {
                    out.send((ts, au)).map_err(|_| closed())?;
                }
            }
        }
    }
    if let Encoder::External(enc) = &mut encoder {
        let flush = enc.close()?;
        for au in flush.remaining {
            out.send((last_ts, au)).map_err(|_| closed())?;
        }
    }
    Ok(stats)
}

/// Streams one source to the relay. Blocks until end of stream is sent.
pub fn run_sender(cfg: &SenderConfig) -> Result<SenderReport, PipelineError> {
    let (mut hdr, frames) = open_source(&cfg.source)?;
    if let Some(fps) = cfg.fps {
        hdr.fps = fps;
    }
    if let Some(c) = cfg.cutoff {
        if !(c >= hdr.range.min() && c <= hdr.range.max()) {
            return Err(PipelineError::Config(format!(
                "cutoff {c} outside disparity range [{}, {}]",
                hdr.range.min(),
                hdr.range.max()
            )));
        }
    }
    let encoder = match &cfg.codec {
        CodecChoice::Ref => Encoder::Ref,
        CodecChoice::External(t) => Encoder::External(Box::new(ExternalEncoder::open(&hdr, t)?)),
        CodecChoice::H264 => Encoder::External(Box::new(ExternalEncoder::open(&hdr, H264_ENCODE_TEMPLATE)?)),
    };
    let grant = register(cfg.signal.as_str(), Role::Sender, cfg.channel_id).map_err(PipelineError::Signaling)?;
    let conn = attach(&grant, Role::Sender).map_err(PipelineError::Relay)?;
    info!(
        "sender attached to relay {}:{} on channel {}",
        grant.relay_host, grant.relay_port, cfg.channel_id
    );

    let started = Instant::now();
    let mut tx = StreamSender::new(&conn, cfg.channel_id);
    tx.send_header(&hdr)?;
    let (q_tx, q_rx) = sync_channel(cfg.queue_depth.max(1));
    let producer_cfg = cfg.clone();
    let producer = thread::Builder::new()
        .name("rgbz-encode".into())
        .spawn(move || produce(frames, hdr, &producer_cfg, encoder, q_tx))
        .expect("spawn encode stage");
    let mut send_result = Ok(());
    for (ts, au) in q_rx.iter() {
        if let Err(e) = tx.send_unit(ts, &au) {
            send_result = Err(e);
            break;
        }
    }
    drop(q_rx);
    let produced = producer.join().expect("encode stage panicked");
    send_result?;
    let produced = produced?;
    let (sent, _) = tx.finish()?;
    let _ = conn.shutdown(Shutdown::Write);
    let report = SenderReport {
        frames_sent: produced.frame_checksums.len() as u64,
        access_units: sent.access_units,
        packets: sent.packets,
        wire_bytes: sent.wire_bytes,
        payload_bytes: sent.payload_bytes,
        raw_bytes_per_frame: produced.raw_bytes_per_frame,
        wall_time_s: started.elapsed().as_secs_f64(),
        late_frames: produced.late_frames,
        release_intervals_us: produced.release_intervals_us,
        frame_checksums: produced.frame_checksums,
    };
    info!(
        "sent {} frames, {} bytes in {:.3} s ({} late)",
        report.frames_sent, report.wire_bytes, report.wall_time_s, report.late_frames
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkMode {
    /// Check buffer invariants and gather statistics.
    Validate,
    /// Write PPM/PGM files only.
    Dump,
    Both,
}

impl FromStr for SinkMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validate" => Ok(Self::Validate),
            "dump" => Ok(Self::Dump),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown sink mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    pub signal: String,
    pub channel_id: u64,
    pub codec: CodecChoice,
    pub resample: ResampleMode,
    pub sink: SinkMode,
    pub dump_dir: Option<PathBuf>,
    /// Receiver clock minus sender clock, in microseconds.
    pub clock_offset_us: i64,
    pub queue_depth: usize,
}

impl ReceiverConfig {
    pub fn new(signal: impl Into<String>, channel_id: u64) -> Self {
        Self {
            signal: signal.into(),
            channel_id,
            codec: CodecChoice::Ref,
            resample: ResampleMode::Nearest,
            sink: SinkMode::Validate,
            dump_dir: None,
            clock_offset_us: 0,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ReceiverReport {
    pub frames_received: u64,
    pub frames_sunk: u64,
    pub access_units: u64,
    pub gaps: u64,
    pub truncated: bool,
    pub packets: u64,
    pub wire_bytes: u64,
    pub payload_bytes: u64,
    pub validation_failures: u64,
    /// Content checksum of each unpacked frame, in arrival order.
    pub frame_checksums: Vec<u32>,
    /// CRC-32 of each buffer handed to the sink.
    pub buffer_checksums: Vec<u32>,
    #[serde(skip)]
    pub latency: Option<LatencyReport>,
}

impl ReceiverReport {
    pub fn check_validation(&self, threshold: u64) -> Result<(), PipelineError> {
        if self.validation_failures > threshold {
            return Err(PipelineError::Validation {
                failures: self.validation_failures,
                threshold,
            });
        }
        Ok(())
    }
}

struct Sunk {
    frames: u64,
    failures: u64,
    checksums: Vec<u32>,
}

fn sink_stage(frames: Receiver<RgbzFrame>, hdr: StreamHeader, cfg: ReceiverConfig) -> Result<Sunk, PipelineError> {
    let dump = cfg.dump_dir.clone().map(|dir| SinkDump { dir });
    let mut out = Sunk {
        frames: 0,
        failures: 0,
        checksums: Vec::new(),
    };
    // One buffer for the stream; each frame rewrites only the embed window.
    let mut buf = SlmBuffer::zeroed(hdr.range);
    for frame in frames.iter() {
        out.frames += 1;
        if let Err(e) = prepare_into(&frame, cfg.resample, &mut buf) {
            warn!("frame {}: replay preparation failed: {e}", frame.seq);
            out.failures += 1;
            continue;
        }
        let result = match cfg.sink {
            SinkMode::Validate => sink_consume(&buf, frame.seq, None).map(|s| s.checksum),
            SinkMode::Both => sink_consume(&buf, frame.seq, dump.as_ref()).map(|s| s.checksum),
            SinkMode::Dump => {
                write_dump(&buf, frame.seq, dump.as_ref().expect("checked")).map(|_| crc32fast::hash(buf.elements()))
            }
        };
        match result {
            Ok(c) => out.checksums.push(c),
            Err(crate::replay::ReplayError::Io(e)) => {
                return Err(PipelineError::Config(format!("dump failed: {e}")));
            }
            Err(e) => {
                warn!("frame {}: {e}", frame.seq);
                out.failures += 1;
            }
        }
    }
    Ok(out)
}

enum Decoder {
    Ref,
    External(Box<ExternalDecoder>),
}

/// Receives one stream from the relay until end of stream or disconnect.
pub fn run_receiver(cfg: &ReceiverConfig) -> Result<ReceiverReport, PipelineError> {
    if cfg.sink != SinkMode::Validate && cfg.dump_dir.is_none() {
        return Err(PipelineError::Config("dump sink needs a dump directory".into()));
    }
    let grant = register(cfg.signal.as_str(), Role::Receiver, cfg.channel_id).map_err(PipelineError::Signaling)?;
    if !grant
        .relay_host
        .parse::<std::net::IpAddr>()
        .is_ok_and(|ip| ip.is_loopback())
        && cfg.clock_offset_us == 0
    {
        warn!("relay is not on this host; latency samples include any sender/receiver clock offset");
    }
    let conn: TcpStream = attach(&grant, Role::Receiver).map_err(PipelineError::Relay)?;
    info!("receiver attached on channel {}", cfg.channel_id);
    let anchor = (Instant::now(), unix_time_us());
    let wall_us = |at: Instant| anchor.1 + at.saturating_duration_since(anchor.0).as_micros() as u64;

    let mut rx = StreamReceiver::new(&conn);
    let hdr = rx.read_header()?;
    let mut decoder = match &cfg.codec {
        CodecChoice::Ref => Decoder::Ref,
        CodecChoice::External(t) => Decoder::External(Box::new(ExternalDecoder::open(&hdr, t)?)),
        CodecChoice::H264 => Decoder::External(Box::new(ExternalDecoder::open(&hdr, H264_DECODE_TEMPLATE)?)),
    };
    let (f_tx, f_rx) = sync_channel::<RgbzFrame>(cfg.queue_depth.max(1));
    let sink_cfg = cfg.clone();
    let sink = thread::Builder::new()
        .name("rgbz-sink".into())
        .spawn(move || sink_stage(f_rx, hdr, sink_cfg))
        .expect("spawn sink stage");

    let mut latency = LatencyRecorder::new(cfg.clock_offset_us);
    let mut checksums = Vec::new();
    // Timestamps of units fed to an external decoder, matched to its output in order.
    let mut pending: VecDeque<(u64, u64)> = VecDeque::new();
    let emit = move |sf: Superframe, ts: u64, seq: u64, checksums: &mut Vec<u32>| -> Result<bool, PipelineError> {
        let frame =
            unpack_superframe(&sf, &hdr, ts, seq).map_err(|e| TransportError::Protocol(format!("unit {seq}: {e}")))?;
        checksums.push(frame.content_checksum());
        Ok(f_tx.send(frame).is_ok())
    };
    let result = (|| -> Result<(), PipelineError> {
        while let Some(u) = rx.next_unit()? {
            latency.record(u.timestamp_us, wall_us(u.received_at));
            match &mut decoder {
                Decoder::Ref => {
                    if u.unit.codec_id() != CodecId::RefLossless {
                        return Err(TransportError::Protocol(format!("unit {} is not REF_LOSSLESS", u.seq)).into());
                    }
                    if !emit(ref_decode(&u.unit)?, u.timestamp_us, u.seq, &mut checksums)? {
                        break;
                    }
                }
                Decoder::External(dec) => {
                    dec.feed(&u.unit)?;
                    pending.push_back((u.timestamp_us, u.seq));
                    while let Some(sf) = dec.try_recv()? {
                        let (ts, seq) = pending.pop_front().unwrap_or((u.timestamp_us, u.seq));
                        emit(sf, ts, seq, &mut checksums)?;
                    }
                }
            }
        }
        if let Decoder::External(dec) = &mut decoder {
            let last = (0, 0);
            for sf in dec.close()?.remaining {
                let (ts, seq) = pending.pop_front().unwrap_or(last);
                emit(sf, ts, seq, &mut checksums)?;
            }
        }
        Ok(())
    })();
    drop(emit);
    let sunk = sink.join().expect("sink stage panicked");
    result?;
    let sunk = sunk?;
    let end = rx.into_report();
    if end.truncated {
        warn!("stream ended without END_OF_STREAM");
    }
    let latency = if latency.is_empty() {
        None
    } else {
        Some(latency.finish().expect("non-empty"))
    };
    Ok(ReceiverReport {
        frames_received: checksums.len() as u64,
        frames_sunk: sunk.frames,
        access_units: end.units,
        gaps: end.gaps,
        truncated: end.truncated,
        packets: end.packets,
        wire_bytes: end.wire_bytes,
        payload_bytes: end.payload_bytes,
        validation_failures: sunk.failures,
        frame_checksums: checksums,
        buffer_checksums: sunk.checksums,
        latency,
    })
}
