//! Packet framing for streaming access units over a byte stream.
//!
//! Every packet is a 36-byte big-endian header followed by `payload_len`
//! payload bytes:
//!
//! ```text
//! off len field
//!   0   4 magic "3CPT"
//!   4   1 version (1)
//!   5   1 packet type: 0 STREAM_HEADER, 1 ACCESS_UNIT, 2 END_OF_STREAM
//!   6   2 flags (bit 0 keyframe)
//!   8   8 channel id
//!  16   8 sequence number
//!  24   8 timestamp, microseconds on the sender clock
//!  32   4 payload length
//! ```
//!
//! The byte-exact description with hex dumps lives in `docs/wire.md`.

use std::io::{self, Read, Write};
use std::time::Instant;

use thiserror::Error;

use crate::codec::{CodecError, EncodedAccessUnit};
use crate::frame::{StreamHeader, STREAM_HEADER_LEN};

pub const PACKET_MAGIC: [u8; 4] = *b"3CPT";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 36;
pub const MAX_PAYLOAD_LEN: u32 = 64 * 1024 * 1024;

const READ_CHUNK: usize = 256 * 1024;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("stream desynchronized: bad magic {found:02x?}")]
    Desync { found: Vec<u8> },
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("unknown packet type {0}")]
    PacketType(u8),
    #[error("payload length {0} exceeds the {MAX_PAYLOAD_LEN} byte bound")]
    Sanity(u32),
    #[error("packet format error: {0}")]
    Format(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection failed after seq {last_sent_seq:?}: {source}")]
    Reset {
        last_sent_seq: Option<u64>,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl TransportError {
    /// Framing is lost and the connection must be dropped.
    pub fn is_desync(&self) -> bool {
        matches!(
            self,
            Self::Desync { .. } | Self::Version(_) | Self::PacketType(_) | Self::Sanity(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PacketType {
    StreamHeader = 0,
    AccessUnit = 1,
    EndOfStream = 2,
}

impl PacketType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::StreamHeader),
            1 => Some(Self::AccessUnit),
            2 => Some(Self::EndOfStream),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub ptype: PacketType,
    pub flags: u16,
    pub channel_id: u64,
    pub seq: u64,
    pub timestamp_us: u64,
    pub payload_len: u32,
}

impl PacketHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&PACKET_MAGIC);
        b[4] = PROTOCOL_VERSION;
        b[5] = self.ptype as u8;
        b[6..8].copy_from_slice(&self.flags.to_be_bytes());
        b[8..16].copy_from_slice(&self.channel_id.to_be_bytes());
        b[16..24].copy_from_slice(&self.seq.to_be_bytes());
        b[24..32].copy_from_slice(&self.timestamp_us.to_be_bytes());
        b[32..36].copy_from_slice(&self.payload_len.to_be_bytes());
        b
    }

    pub fn parse(b: &[u8; HEADER_LEN]) -> Result<Self, TransportError> {
        if b[0..4] != PACKET_MAGIC {
            return Err(TransportError::Desync {
                found: b[0..4].to_vec(),
            });
        }
        if b[4] != PROTOCOL_VERSION {
            return Err(TransportError::Version(b[4]));
        }
        let ptype = PacketType::from_tag(b[5]).ok_or(TransportError::PacketType(b[5]))?;
        let u64_at = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
        let payload_len = u32::from_be_bytes(b[32..36].try_into().unwrap());
        if payload_len > MAX_PAYLOAD_LEN {
            return Err(TransportError::Sanity(payload_len));
        }
        Ok(Self {
            ptype,
            flags: u16::from_be_bytes([b[6], b[7]]),
            channel_id: u64_at(8),
            seq: u64_at(16),
            timestamp_us: u64_at(24),
            payload_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePacket {
    pub header: PacketHeader,
    pub payload: Vec<u8>,
}

impl FramePacket {
    pub fn stream_header(channel_id: u64, hdr: &StreamHeader) -> Self {
        let payload = hdr.to_bytes().to_vec();
        Self {
            header: PacketHeader {
                ptype: PacketType::StreamHeader,
                flags: 0,
                channel_id,
                seq: 0,
                timestamp_us: 0,
                payload_len: payload.len() as u32,
            },
            payload,
        }
    }

    pub fn access_unit(channel_id: u64, seq: u64, timestamp_us: u64, au: &EncodedAccessUnit) -> Self {
        let payload = au.to_bytes();
        Self {
            header: PacketHeader {
                ptype: PacketType::AccessUnit,
                flags: au.flags(),
                channel_id,
                seq,
                timestamp_us,
                payload_len: payload.len() as u32,
            },
            payload,
        }
    }

    pub fn end_of_stream(channel_id: u64, seq: u64, timestamp_us: u64) -> Self {
        Self {
            header: PacketHeader {
                ptype: PacketType::EndOfStream,
                flags: 0,
                channel_id,
                seq,
                timestamp_us,
                payload_len: 0,
            },
            payload: Vec::new(),
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_packet(p: &FramePacket) -> Result<Vec<u8>, TransportError> {
    if p.header.payload_len as usize != p.payload.len() {
        return Err(TransportError::Format(format!(
            "payload_len {} but payload is {} bytes",
            p.header.payload_len,
            p.payload.len()
        )));
    }
    if p.header.payload_len > MAX_PAYLOAD_LEN {
        return Err(TransportError::Sanity(p.header.payload_len));
    }
    if p.header.ptype == PacketType::EndOfStream && !p.payload.is_empty() {
        return Err(TransportError::Format("END_OF_STREAM carries a payload".into()));
    }
    let mut out = Vec::with_capacity(p.wire_len());
    out.extend_from_slice(&p.header.to_bytes());
    out.extend_from_slice(&p.payload);
    Ok(out)
}

/// Incremental packet parser. Feed arbitrary chunks with [`push`](Self::push),
/// then pull complete packets with [`next_packet`](Self::next_packet).
/// Bytes beyond the last complete packet are retained.
#[derive(Debug, Default)]
pub struct PacketDecoder {
    buf: Vec<u8>,
    pos: usize,
    pending: Option<PacketHeader>,
}

impl PacketDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) {
        if self.pos > 0 && self.pos >= self.buf.len() / 2 {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
        self.buf.extend_from_slice(chunk);
    }

    /// Bytes received but not yet returned as part of a packet.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn next_packet(&mut self) -> Result<Option<FramePacket>, TransportError> {
        let avail = &self.buf[self.pos..];
        let header = match self.pending {
            Some(h) => h,
            None => {
                let n = avail.len().min(4);
                if avail[..n] != PACKET_MAGIC[..n] {
                    return Err(TransportError::Desync {
                        found: avail[..n].to_vec(),
                    });
                }
                if avail.len() < HEADER_LEN {
                    return Ok(None);
                }
                let h = PacketHeader::parse(avail[..HEADER_LEN].try_into().unwrap())?;
                self.pos += HEADER_LEN;
                self.pending = Some(h);
                h
            }
        };
        let len = header.payload_len as usize;
        if self.buf.len() - self.pos < len {
            return Ok(None);
        }
        let payload = self.buf[self.pos..self.pos + len].to_vec();
        self.pos += len;
        self.pending = None;
        Ok(Some(FramePacket { header, payload }))
    }
}

/// Decodes every complete packet in `bytes`, fed as the given chunks.
pub fn decode_all<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> Result<Vec<FramePacket>, TransportError> {
    let mut dec = PacketDecoder::new();
    let mut out = Vec::new();
    for chunk in chunks {
        dec.push(chunk);
        while let Some(p) = dec.next_packet()? {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct SendReport {
    pub packets: u64,
    pub access_units: u64,
    /// Packet payload bytes of ACCESS_UNIT packets.
    pub payload_bytes: u64,
    /// Every byte written, headers included.
    pub wire_bytes: u64,
}

/// Writes one stream: header packet, access units, end-of-stream.
pub struct StreamSender<W: Write> {
    writer: W,
    channel_id: u64,
    next_seq: u64,
    last_timestamp: Option<u64>,
    report: SendReport,
    started: bool,
}

impl<W: Write> StreamSender<W> {
    pub fn new(writer: W, channel_id: u64) -> Self {
        Self {
            writer,
            channel_id,
            next_seq: 0,
            last_timestamp: None,
            report: SendReport::default(),
            started: false,
        }
    }

    fn last_sent(&self) -> Option<u64> {
        self.next_seq.checked_sub(1)
    }

    fn write_packet(&mut self, p: &FramePacket) -> Result<(), TransportError> {
        let header = p.header.to_bytes();
        let last_sent_seq = self.last_sent();
        let io = |source| TransportError::Reset { last_sent_seq, source };
        self.writer.write_all(&header).map_err(io)?;
        self.writer.write_all(&p.payload).map_err(io)?;
        self.report.packets += 1;
        self.report.wire_bytes += p.wire_len() as u64;
        Ok(())
    }

    pub fn send_header(&mut self, hdr: &StreamHeader) -> Result<(), TransportError> {
        if self.started {
            return Err(TransportError::Protocol("stream header already sent".into()));
        }
        self.started = true;
        self.write_packet(&FramePacket::stream_header(self.channel_id, hdr))?;
        self.writer.flush().map_err(|source| TransportError::Reset {
            last_sent_seq: None,
            source,
        })
    }

    /// Sends one unit and returns its sequence number.
    pub fn send_unit(&mut self, timestamp_us: u64, au: &EncodedAccessUnit) -> Result<u64, TransportError> {
        if !self.started {
            return Err(TransportError::Protocol("access unit before stream header".into()));
        }
        if self.last_timestamp.is_some_and(|t| timestamp_us < t) {
            return Err(TransportError::Protocol(format!(
                "timestamp {timestamp_us} goes backwards"
            )));
        }
        let seq = self.next_seq;
        let p = FramePacket::access_unit(self.channel_id, seq, timestamp_us, au);
        self.write_packet(&p)?;
        self.next_seq += 1;
        self.last_timestamp = Some(timestamp_us);
        self.report.access_units += 1;
        self.report.payload_bytes += p.payload.len() as u64;
        Ok(seq)
    }

    /// Skips a sequence number, as an encoder overrun drop would.
    pub fn skip_seq(&mut self) {
        self.next_seq += 1;
    }

    pub fn finish(mut self) -> Result<(SendReport, W), TransportError> {
        let ts = self.last_timestamp.unwrap_or(0);
        let p = FramePacket::end_of_stream(self.channel_id, self.next_seq, ts);
        self.write_packet(&p)?;
        let last_sent_seq = self.last_sent();
        self.writer
            .flush()
            .map_err(|source| TransportError::Reset { last_sent_seq, source })?;
        Ok((self.report, self.writer))
    }

    pub fn report(&self) -> &SendReport {
        &self.report
    }
}

pub fn send_stream<W: Write>(
    writer: W,
    channel_id: u64,
    hdr: &StreamHeader,
    units: impl IntoIterator<Item = (u64, EncodedAccessUnit)>,
) -> Result<SendReport, TransportError> {
    let mut tx = StreamSender::new(writer, channel_id);
    tx.send_header(hdr)?;
    for (ts, au) in units {
        tx.send_unit(ts, &au)?;
    }
    Ok(tx.finish()?.0)
}

#[derive(Debug, Clone)]
pub struct ReceivedUnit {
    pub seq: u64,
    pub timestamp_us: u64,
    pub unit: EncodedAccessUnit,
    /// When the last byte of the packet was parsed.
    pub received_at: Instant,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct EndReport {
    pub channel_id: u64,
    pub units: u64,
    pub packets: u64,
    pub payload_bytes: u64,
    pub wire_bytes: u64,
    /// Sequence numbers missing between received access units.
    pub gaps: u64,
    /// Connection closed before END_OF_STREAM.
    pub truncated: bool,
}

/// Reads one stream from a connection.
pub struct StreamReceiver<R: Read> {
    reader: R,
    decoder: PacketDecoder,
    header: Option<StreamHeader>,
    expected_seq: u64,
    report: EndReport,
    done: bool,
    buf: Vec<u8>,
}

impl<R: Read> StreamReceiver<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            decoder: PacketDecoder::new(),
            header: None,
            expected_seq: 0,
            report: EndReport::default(),
            done: false,
            buf: vec![0; READ_CHUNK],
        }
    }

    fn next_packet(&mut self) -> Result<Option<FramePacket>, TransportError> {
        loop {
            if let Some(p) = self.decoder.next_packet()? {
                self.report.packets += 1;
                self.report.wire_bytes += p.wire_len() as u64;
                return Ok(Some(p));
            }
            let n = match self.reader.read(&mut self.buf) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) if is_disconnect(&e) => 0,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return Ok(None);
            }
            self.decoder.push(&self.buf[..n]);
        }
    }

    /// Reads up to and including the STREAM_HEADER packet.
    pub fn read_header(&mut self) -> Result<StreamHeader, TransportError> {
        if let Some(h) = self.header {
            return Ok(h);
        }
        let p = self
            .next_packet()?
            .ok_or_else(|| TransportError::Protocol("connection closed before stream header".into()))?;
        if p.header.ptype != PacketType::StreamHeader {
            return Err(TransportError::Protocol(format!(
                "{:?} packet before stream header",
                p.header.ptype
            )));
        }
        if p.payload.len() != STREAM_HEADER_LEN {
            return Err(TransportError::Format(format!(
                "stream header payload is {} bytes",
                p.payload.len()
            )));
        }
        let hdr = StreamHeader::from_bytes(&p.payload)
            .ok_or_else(|| TransportError::Format("invalid stream header fields".into()))?;
        self.report.channel_id = p.header.channel_id;
        self.header = Some(hdr);
        Ok(hdr)
    }

    /// Next access unit, or `None` once the stream has ended (cleanly or not;
    /// see [`EndReport::truncated`]).
    pub fn next_unit(&mut self) -> Result<Option<ReceivedUnit>, TransportError> {
        if self.done {
            return Ok(None);
        }
        if self.header.is_none() {
            self.read_header()?;
        }
        let Some(p) = self.next_packet()? else {
            self.done = true;
            self.report.truncated = true;
            return Ok(None);
        };
        if p.header.channel_id != self.report.channel_id {
            return Err(TransportError::Protocol(format!(
                "packet for channel {} on stream {}",
                p.header.channel_id, self.report.channel_id
            )));
        }
        match p.header.ptype {
            PacketType::StreamHeader => Err(TransportError::Protocol("repeated stream header".into())),
            PacketType::EndOfStream => {
                self.done = true;
                if self.decoder.buffered() > 0 {
                    return Err(TransportError::Protocol("bytes after END_OF_STREAM".into()));
                }
                Ok(None)
            }
            PacketType::AccessUnit => {
                let seq = p.header.seq;
                if seq < self.expected_seq {
                    return Err(TransportError::Protocol(format!(
                        "seq {seq} out of order (expected at least {})",
                        self.expected_seq
                    )));
                }
                self.report.gaps += seq - self.expected_seq;
                self.expected_seq = seq + 1;
                self.report.units += 1;
                self.report.payload_bytes += p.payload.len() as u64;
                let unit = EncodedAccessUnit::from_bytes(p.header.flags, &p.payload)?;
                Ok(Some(ReceivedUnit {
                    seq,
                    timestamp_us: p.header.timestamp_us,
                    unit,
                    received_at: Instant::now(),
                }))
            }
        }
    }

    pub fn report(&self) -> &EndReport {
        &self.report
    }

    pub fn into_report(self) -> EndReport {
        self.report
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
    )
}

pub fn recv_stream<R: Read>(reader: R) -> Result<(StreamHeader, Vec<ReceivedUnit>, EndReport), TransportError> {
    let mut rx = StreamReceiver::new(reader);
    let hdr = rx.read_header()?;
    let mut units = Vec::new();
    while let Some(u) = rx.next_unit()? {
        units.push(u);
    }
    Ok((hdr, units, rx.into_report()))
}
