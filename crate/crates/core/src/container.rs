//! `.rgbz` container: a file of RGBZ frames standing in for a live capture.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "RGBZ"
//!      4     1  version = 1
//!      5     2  width          u16 BE
//!      7     2  height         u16 BE
//!      9     2  fps numerator  u16 BE
//!     11     2  fps denominator u16 BE
//!     13     8  range min      f64 BE
//!     21     8  range max      f64 BE
//!     29     4  frame count    u32 BE
//!     33        frames, each: timestamp_us u64 BE, w*h*4 RGB0 bytes, w*h depth codes
//! ```
//!
//! The file length must equal `33 + count * (8 + 5*w*h)` exactly, and
//! timestamps must be strictly increasing. Readers check the length
//! arithmetic before yielding any frame.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::frame::{ColorImage, DepthMap, DisparityRange, FrameError, FrameRate, RgbzFrame, StreamHeader, RGB0_BPP};

pub const CONTAINER_MAGIC: [u8; 4] = *b"RGBZ";
pub const CONTAINER_VERSION: u8 = 1;
pub const CONTAINER_HEADER_LEN: usize = 33;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {found:02x?} at offset 0")]
    Magic { found: [u8; 4] },
    #[error("unsupported container version {found} at offset 4")]
    Version { found: u8 },
    #[error("invalid header field at offset {offset}: {reason}")]
    Header { offset: u64, reason: String },
    #[error("file truncated: frame {frame} at offset {offset} is incomplete")]
    Truncated { frame: u64, offset: u64 },
    #[error("header declares {declared} frames but file length holds {actual}")]
    LengthMismatch { declared: u32, actual: u64 },
    #[error("frame {frame} at offset {offset}: timestamp {timestamp_us} not after {previous_us}")]
    Timestamp {
        frame: u64,
        offset: u64,
        timestamp_us: u64,
        previous_us: u64,
    },
    #[error("frame is {width}x{height}, container is {expected_w}x{expected_h}")]
    FrameSize {
        width: usize,
        height: usize,
        expected_w: usize,
        expected_h: usize,
    },
    #[error("wrote {written} frames, header declares {declared}")]
    Count { declared: u32, written: u64 },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Bytes per stored frame for content of `width x height`.
pub fn frame_record_len(width: usize, height: usize) -> u64 {
    8 + (width * height * (RGB0_BPP + 1)) as u64
}

/// Total file size for `count` frames.
pub fn container_len(width: usize, height: usize, count: u32) -> u64 {
    CONTAINER_HEADER_LEN as u64 + u64::from(count) * frame_record_len(width, height)
}

fn encode_header(hdr: &StreamHeader, count: u32) -> [u8; CONTAINER_HEADER_LEN] {
    let mut b = [0u8; CONTAINER_HEADER_LEN];
    b[0..4].copy_from_slice(&CONTAINER_MAGIC);
    b[4] = CONTAINER_VERSION;
    b[5..7].copy_from_slice(&(hdr.width() as u16).to_be_bytes());
    b[7..9].copy_from_slice(&(hdr.height() as u16).to_be_bytes());
    b[9..11].copy_from_slice(&hdr.fps.num.to_be_bytes());
    b[11..13].copy_from_slice(&hdr.fps.den.to_be_bytes());
    b[13..21].copy_from_slice(&hdr.range.min().to_be_bytes());
    b[21..29].copy_from_slice(&hdr.range.max().to_be_bytes());
    b[29..33].copy_from_slice(&count.to_be_bytes());
    b
}

fn decode_header(b: &[u8; CONTAINER_HEADER_LEN]) -> Result<(StreamHeader, u32), ContainerError> {
    if b[0..4] != CONTAINER_MAGIC {
        return Err(ContainerError::Magic {
            found: b[0..4].try_into().unwrap(),
        });
    }
    if b[4] != CONTAINER_VERSION {
        return Err(ContainerError::Version { found: b[4] });
    }
    let u16_at = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]);
    let f64_at = |i: usize| f64::from_be_bytes(b[i..i + 8].try_into().unwrap());
    let bad = |offset: u64, reason: String| ContainerError::Header { offset, reason };
    let fps =
        FrameRate::new(u16_at(9), u16_at(11)).ok_or_else(|| bad(9, format!("fps {}/{}", u16_at(9), u16_at(11))))?;
    let range = DisparityRange::new(f64_at(13), f64_at(21)).map_err(|e| bad(13, e.to_string()))?;
    let hdr = StreamHeader::new(usize::from(u16_at(5)), usize::from(u16_at(7)), fps, range)
        .map_err(|e| bad(5, e.to_string()))?;
    Ok((hdr, u32::from_be_bytes(b[29..33].try_into().unwrap())))
}

/// Streaming reader over a container whose total length is known.
pub struct ContainerReader<R: Read> {
    reader: R,
    header: StreamHeader,
    count: u32,
    next: u64,
    last_ts: Option<u64>,
}

impl ContainerReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::new(BufReader::with_capacity(1 << 20, file), len)
    }
}

impl<R: Read> ContainerReader<R> {
    /// Reads and validates the header against `total_len`, the byte length of
    /// the whole container.
    pub fn new(mut reader: R, total_len: u64) -> Result<Self, ContainerError> {
        if total_len < CONTAINER_HEADER_LEN as u64 {
            return Err(ContainerError::Header {
                offset: total_len,
                reason: format!("file is {total_len} bytes, header needs {CONTAINER_HEADER_LEN}"),
            });
        }
        let mut b = [0u8; CONTAINER_HEADER_LEN];
        reader.read_exact(&mut b)?;
        let (header, count) = decode_header(&b)?;
        let record = frame_record_len(header.width(), header.height());
        let body = total_len - CONTAINER_HEADER_LEN as u64;
        let whole = body / record;
        if !body.is_multiple_of(record) {
            return Err(ContainerError::Truncated {
                frame: whole,
                offset: CONTAINER_HEADER_LEN as u64 + whole * record,
            });
        }
        if whole != u64::from(count) {
            return Err(ContainerError::LengthMismatch {
                declared: count,
                actual: whole,
            });
        }
        Ok(Self {
            reader,
            header,
            count,
            next: 0,
            last_ts: None,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn frame_count(&self) -> u32 {
        self.count
    }

    fn offset_of(&self, frame: u64) -> u64 {
        CONTAINER_HEADER_LEN as u64 + frame * frame_record_len(self.header.width(), self.header.height())
    }

    fn read_frame(&mut self) -> Result<RgbzFrame, ContainerError> {
        let index = self.next;
        let offset = self.offset_of(index);
        let (w, h) = (self.header.width(), self.header.height());
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                ContainerError::Truncated { frame: index, offset }
            } else {
                e.into()
            }
        };
        let mut ts = [0u8; 8];
        self.reader.read_exact(&mut ts).map_err(truncated)?;
        let ts = u64::from_be_bytes(ts);
        if let Some(prev) = self.last_ts.filter(|&p| ts <= p) {
            return Err(ContainerError::Timestamp {
                frame: index,
                offset,
                timestamp_us: ts,
                previous_us: prev,
            });
        }
        let mut color = vec![0u8; w * h * RGB0_BPP];
        self.reader.read_exact(&mut color).map_err(truncated)?;
        let mut codes = vec![0u8; w * h];
        self.reader.read_exact(&mut codes).map_err(truncated)?;
        self.next += 1;
        self.last_ts = Some(ts);
        Ok(RgbzFrame::new(
            ColorImage::new(w, h, color)?,
            DepthMap::from_codes(w, h, codes)?,
            ts,
            index,
        )?)
    }
}

impl<R: Read> Iterator for ContainerReader<R> {
    type Item = Result<RgbzFrame, ContainerError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= u64::from(self.count) {
            return None;
        }
        let r = self.read_frame();
        if r.is_err() {
            // Stop after the first error.
            self.count = 0;
        }
        Some(r)
    }
}

/// Streaming writer; the frame count is fixed up front.
pub struct ContainerWriter<W: Write> {
    writer: W,
    header: StreamHeader,
    declared: u32,
    written: u64,
    last_ts: Option<u64>,
}

impl ContainerWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: &StreamHeader, count: u32) -> Result<Self, ContainerError> {
        Self::new(BufWriter::with_capacity(1 << 20, File::create(path)?), header, count)
    }
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut writer: W, header: &StreamHeader, count: u32) -> Result<Self, ContainerError> {
        writer.write_all(&encode_header(header, count))?;
        Ok(Self {
            writer,
            header: *header,
            declared: count,
            written: 0,
            last_ts: None,
        })
    }

    /// Writes a frame using its own `timestamp_us`; `seq` is not stored.
    pub fn write_frame(&mut self, frame: &RgbzFrame) -> Result<(), ContainerError> {
        let offset =
            CONTAINER_HEADER_LEN as u64 + self.written * frame_record_len(self.header.width(), self.header.height());
        if frame.width() != self.header.width() || frame.height() != self.header.height() {
            return Err(ContainerError::FrameSize {
                width: frame.width(),
                height: frame.height(),
                expected_w: self.header.width(),
                expected_h: self.header.height(),
            });
        }
        if self.written >= u64::from(self.declared) {
            return Err(ContainerError::Count {
                declared: self.declared,
                written: self.written + 1,
            });
        }
        if let Some(prev) = self.last_ts.filter(|&p| frame.timestamp_us <= p) {
            return Err(ContainerError::Timestamp {
                frame: self.written,
                offset,
                timestamp_us: frame.timestamp_us,
                previous_us: prev,
            });
        }
        self.writer.write_all(&frame.timestamp_us.to_be_bytes())?;
        self.writer.write_all(frame.color().data())?;
        self.writer.write_all(frame.depth().codes())?;
        self.written += 1;
        self.last_ts = Some(frame.timestamp_us);
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, ContainerError> {
        if self.written != u64::from(self.declared) {
            return Err(ContainerError::Count {
                declared: self.declared,
                written: self.written,
            });
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

pub fn write_container(
    path: impl AsRef<Path>,
    header: &StreamHeader,
    frames: &[RgbzFrame],
) -> Result<(), ContainerError> {
    let count = u32::try_from(frames.len()).map_err(|_| ContainerError::Count {
        declared: u32::MAX,
        written: frames.len() as u64,
    })?;
    let mut w = ContainerWriter::create(path, header, count)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()?;
    Ok(())
}

/// Reads every frame; `seq` is set to the frame index.
pub fn read_container(path: impl AsRef<Path>) -> Result<(StreamHeader, Vec<RgbzFrame>), ContainerError> {
    let r = ContainerReader::open(path)?;
    let hdr = *r.header();
    let frames = r.collect::<Result<Vec<_>, _>>()?;
    Ok((hdr, frames))
}
