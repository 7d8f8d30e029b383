//! Receiver-side geometry chain feeding the hologram engine.
//!
//! A 640x480 frame is upscaled 2x to 1280x960, centered in a 2048x1024
//! effective field of zeros, and the field is placed in the top half of a
//! zeroed 2048x2048 buffer. Each buffer element is four bytes, R, G, B, Z,
//! where Z is the 8-bit disparity code; the [`DisparityRange`] travels
//! alongside to interpret it.
//!
//! The buffer is row-major with no stride gaps. This layout is the handoff
//! ABI for the hologram engine.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::frame::{ColorImage, DepthMap, DisparityRange, RgbzFrame, RGB0_BPP};

pub const SOURCE_WIDTH: usize = 640;
pub const SOURCE_HEIGHT: usize = 480;
pub const UPSCALED_WIDTH: usize = 1280;
pub const UPSCALED_HEIGHT: usize = 960;
pub const FIELD_WIDTH: usize = 2048;
pub const FIELD_HEIGHT: usize = 1024;
pub const SLM_WIDTH: usize = 2048;
pub const SLM_HEIGHT: usize = 2048;
/// Top-left corner of the upscaled frame inside the effective field.
pub const EMBED_X: usize = (FIELD_WIDTH - UPSCALED_WIDTH) / 2;
pub const EMBED_Y: usize = (FIELD_HEIGHT - UPSCALED_HEIGHT) / 2;
pub const ELEMENT_BYTES: usize = 4;
pub const SLM_BYTES: usize = SLM_WIDTH * SLM_HEIGHT * ELEMENT_BYTES;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("expected {expected_w}x{expected_h} input, got {width}x{height}")]
    Dimension {
        width: usize,
        height: usize,
        expected_w: usize,
        expected_h: usize,
    },
    #[error("buffer invariant violated: {0}")]
    Validation(String),
    #[error("sink dump failed: {0}")]
    Io(#[from] std::io::Error),
}

fn check_dims(width: usize, height: usize, expected_w: usize, expected_h: usize) -> Result<(), ReplayError> {
    if width != expected_w || height != expected_h {
        return Err(ReplayError::Dimension {
            width,
            height,
            expected_w,
            expected_h,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResampleMode {
    #[default]
    Nearest,
    /// Bilinear on color; depth is always nearest.
    Bilinear,
}

impl std::str::FromStr for ResampleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown resample mode `{other}`")),
        }
    }
}

fn replicate_2x<T: Copy>(src: &[T], w: usize, h: usize, bpp: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len() * 4);
    for y in 0..h {
        let row = &src[y * w * bpp..(y + 1) * w * bpp];
        let start = out.len();
        for px in row.chunks_exact(bpp) {
            out.extend_from_slice(px);
            out.extend_from_slice(px);
        }
        out.extend_from_within(start..);
    }
    out
}

/// 2x bilinear with half-pixel centers: output samples sit at source
/// offsets -1/4 and +1/4 around each source pixel, giving fixed 3/4, 1/4
/// weights per axis. Edges clamp.
fn bilinear_2x_rgb0(src: &[u8], w: usize, h: usize) -> Vec<u8> {
    let ow = 2 * w;
    // Horizontal pass, values scaled by 4.
    let mut horiz = vec![0u16; ow * h * 3];
    for y in 0..h {
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            for c in 0..3 {
                let at = |xx: usize| u16::from(src[(y * w + xx) * RGB0_BPP + c]);
                let base = 3 * at(x);
                horiz[(y * ow + 2 * x) * 3 + c] = base + at(left);
                horiz[(y * ow + 2 * x + 1) * 3 + c] = base + at(right);
            }
        }
    }
    // Vertical pass, scaled by 16, rounded half up.
    let oh = 2 * h;
    let mut out = vec![0u8; ow * oh * RGB0_BPP];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..ow {
            for c in 0..3 {
                let at = |yy: usize| u32::from(horiz[(yy * ow + x) * 3 + c]);
                let base = 3 * at(y);
                out[((2 * y) * ow + x) * RGB0_BPP + c] = ((base + at(up) + 8) >> 4) as u8;
                out[((2 * y + 1) * ow + x) * RGB0_BPP + c] = ((base + at(down) + 8) >> 4) as u8;
            }
        }
    }
    out
}

/// Upscales color and depth by exactly 2x.
pub fn upscale_frame(frame: &RgbzFrame, mode: ResampleMode) -> RgbzFrame {
    let (w, h) = (frame.width(), frame.height());
    let color = match mode {
        ResampleMode::Nearest => replicate_2x(frame.color().data(), w, h, RGB0_BPP),
        ResampleMode::Bilinear => bilinear_2x_rgb0(frame.color().data(), w, h),
    };
    let codes = replicate_2x(frame.depth().codes(), w, h, 1);
    let validity = replicate_2x(frame.depth().validity(), w, h, 1);
    RgbzFrame::new(
        ColorImage::new(2 * w, 2 * h, color).expect("upscaled color keeps RGB0 layout"),
        DepthMap::new(2 * w, 2 * h, codes, validity).expect("upscaled depth sized to match"),
        frame.timestamp_us,
        frame.seq,
    )
    .expect("color and depth upscaled identically")
}

/// A rectangle of R,G,B,Z elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElementGrid {
    width: usize,
    height: usize,
    elements: Vec<u8>,
}

impl ElementGrid {
    pub fn new(width: usize, height: usize, elements: Vec<u8>) -> Result<Self, ReplayError> {
        if elements.len() != width * height * ELEMENT_BYTES {
            return Err(ReplayError::Validation(format!(
                "{} element bytes for {width}x{height}",
                elements.len()
            )));
        }
        Ok(Self {
            width,
            height,
            elements,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn elements(&self) -> &[u8] {
        &self.elements
    }

    pub fn element(&self, x: usize, y: usize) -> [u8; 4] {
        let i = (y * self.width + x) * ELEMENT_BYTES;
        self.elements[i..i + 4].try_into().unwrap()
    }
}

/// Places a 1280x960 frame at ([`EMBED_X`], [`EMBED_Y`]) in a zeroed
/// 2048x1024 field.
pub fn embed_in_field(frame: &RgbzFrame) -> Result<ElementGrid, ReplayError> {
    check_dims(frame.width(), frame.height(), UPSCALED_WIDTH, UPSCALED_HEIGHT)?;
    let mut elements = vec![0u8; FIELD_WIDTH * FIELD_HEIGHT * ELEMENT_BYTES];
    let color = frame.color().data();
    let codes = frame.depth().codes();
    for y in 0..UPSCALED_HEIGHT {
        let dst_row = ((EMBED_Y + y) * FIELD_WIDTH + EMBED_X) * ELEMENT_BYTES;
        let dst = &mut elements[dst_row..dst_row + UPSCALED_WIDTH * ELEMENT_BYTES];
        let src = &color[y * UPSCALED_WIDTH * RGB0_BPP..(y + 1) * UPSCALED_WIDTH * RGB0_BPP];
        dst.copy_from_slice(src);
        for (el, &z) in dst
            .chunks_exact_mut(ELEMENT_BYTES)
            .zip(&codes[y * UPSCALED_WIDTH..(y + 1) * UPSCALED_WIDTH])
        {
            el[3] = z;
        }
    }
    ElementGrid::new(FIELD_WIDTH, FIELD_HEIGHT, elements)
}

/// 2048x2048 R,G,B,Z buffer plus the range for interpreting Z.
#[derive(Debug, Clone, PartialEq)]
pub struct SlmBuffer {
    elements: Vec<u8>,
    pub range: DisparityRange,
}

impl SlmBuffer {
    /// Wraps raw bytes without checking content invariants; see [`sink_consume`].
    pub fn from_raw(elements: Vec<u8>, range: DisparityRange) -> Result<Self, ReplayError> {
        if elements.len() != SLM_BYTES {
            return Err(ReplayError::Validation(format!(
                "buffer is {} bytes, expected {SLM_BYTES}",
                elements.len()
            )));
        }
        Ok(Self { elements, range })
    }

    pub fn zeroed(range: DisparityRange) -> Self {
        Self {
            elements: vec![0u8; SLM_BYTES],
            range,
        }
    }

    pub fn elements(&self) -> &[u8] {
        &self.elements
    }

    pub fn element(&self, x: usize, y: usize) -> [u8; 4] {
        let i = (y * SLM_WIDTH + x) * ELEMENT_BYTES;
        self.elements[i..i + 4].try_into().unwrap()
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.elements[y * SLM_WIDTH * ELEMENT_BYTES..(y + 1) * SLM_WIDTH * ELEMENT_BYTES]
    }
}

/// Puts the 2048x1024 field in the top half of a zeroed 2048x2048 buffer.
pub fn pad_to_slm(field: &ElementGrid, range: DisparityRange) -> Result<SlmBuffer, ReplayError> {
    check_dims(field.width, field.height, FIELD_WIDTH, FIELD_HEIGHT)?;
    let mut elements = vec![0u8; SLM_BYTES];
    elements[..field.elements.len()].copy_from_slice(&field.elements);
    SlmBuffer::from_raw(elements, range)
}

pub fn prepare_for_replay(
    frame: &RgbzFrame,
    mode: ResampleMode,
    range: DisparityRange,
) -> Result<SlmBuffer, ReplayError> {
    let mut buf = SlmBuffer::zeroed(range);
    prepare_into(frame, mode, &mut buf)?;
    Ok(buf)
}

/// Same result as upscale, embed, pad, written straight into `buf`. Only the
/// embed window is rewritten; everything outside it must already be zero,
/// as it is in a [`SlmBuffer::zeroed`] buffer or one reused from a previous
/// call. This lets a receiver keep one buffer for the whole stream.
pub fn prepare_into(frame: &RgbzFrame, mode: ResampleMode, buf: &mut SlmBuffer) -> Result<(), ReplayError> {
    check_dims(frame.width(), frame.height(), SOURCE_WIDTH, SOURCE_HEIGHT)?;
    let bilinear = match mode {
        ResampleMode::Nearest => None,
        ResampleMode::Bilinear => Some(bilinear_2x_rgb0(frame.color().data(), SOURCE_WIDTH, SOURCE_HEIGHT)),
    };
    let color = frame.color().data();
    let codes = frame.depth().codes();
    let row_bytes = SLM_WIDTH * ELEMENT_BYTES;
    let window = EMBED_X * ELEMENT_BYTES..(EMBED_X + UPSCALED_WIDTH) * ELEMENT_BYTES;
    let elements = &mut buf.elements;
    for y in 0..UPSCALED_HEIGHT {
        let sy = y / 2;
        let dst = &mut elements[(EMBED_Y + y) * row_bytes..][window.clone()];
        let z = &codes[sy * SOURCE_WIDTH..(sy + 1) * SOURCE_WIDTH];
        match &bilinear {
            Some(up) => {
                dst.copy_from_slice(&up[y * UPSCALED_WIDTH * RGB0_BPP..(y + 1) * UPSCALED_WIDTH * RGB0_BPP]);
                for (pair, &z) in dst.chunks_exact_mut(2 * ELEMENT_BYTES).zip(z) {
                    pair[3] = z;
                    pair[7] = z;
                }
            }
            None if y % 2 == 1 => {
                let prev = (EMBED_Y + y - 1) * row_bytes;
                elements.copy_within(
                    prev + window.start..prev + window.end,
                    (EMBED_Y + y) * row_bytes + window.start,
                );
            }
            None => {
                let src = &color[sy * SOURCE_WIDTH * RGB0_BPP..(sy + 1) * SOURCE_WIDTH * RGB0_BPP];
                for ((pair, px), &z) in dst
                    .chunks_exact_mut(2 * ELEMENT_BYTES)
                    .zip(src.chunks_exact(RGB0_BPP))
                    .zip(z)
                {
                    let el = [px[0], px[1], px[2], z];
                    pair[..4].copy_from_slice(&el);
                    pair[4..].copy_from_slice(&el);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SinkStats {
    pub seq: u64,
    /// Elements with any nonzero byte.
    pub nonzero_elements: u64,
    /// Per-channel value histograms in R, G, B, Z order.
    pub histograms: [Vec<u64>; 4],
    /// CRC-32 of the whole buffer.
    pub checksum: u32,
}

/// Where the sink writes `frame_<seq>.ppm` (color) and `frame_<seq>.pgm` (Z).
#[derive(Debug, Clone)]
pub struct SinkDump {
    pub dir: PathBuf,
}

impl SinkDump {
    pub fn paths(&self, seq: u64) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("frame_{seq}.ppm")),
            self.dir.join(format!("frame_{seq}.pgm")),
        )
    }
}

/// Branch-free OR over fixed chunks so the compiler can vectorize it.
fn all_zero(bytes: &[u8]) -> bool {
    let mut chunks = bytes.chunks_exact(64);
    chunks.all(|c| c.iter().fold(0u8, |a, &b| a | b) == 0) && chunks.remainder().iter().all(|&b| b == 0)
}

fn validate(buf: &SlmBuffer) -> Result<(), ReplayError> {
    if buf.elements.len() != SLM_BYTES {
        return Err(ReplayError::Validation(format!(
            "length {} != {SLM_BYTES}",
            buf.elements.len()
        )));
    }
    let row_bytes = SLM_WIDTH * ELEMENT_BYTES;
    for y in FIELD_HEIGHT..SLM_HEIGHT {
        if !all_zero(buf.row(y)) {
            return Err(ReplayError::Validation(format!(
                "padding region not zero: nonzero byte in row {y}"
            )));
        }
    }
    let left = EMBED_X * ELEMENT_BYTES;
    let right = (EMBED_X + UPSCALED_WIDTH) * ELEMENT_BYTES;
    for y in 0..FIELD_HEIGHT {
        let row = &buf.elements[y * row_bytes..(y + 1) * row_bytes];
        let inside_rows = (EMBED_Y..EMBED_Y + UPSCALED_HEIGHT).contains(&y);
        let outside_zero = if inside_rows {
            all_zero(&row[..left]) && all_zero(&row[right..])
        } else {
            all_zero(row)
        };
        if !outside_zero {
            return Err(ReplayError::Validation(format!(
                "field outside embed window not zero: row {y}"
            )));
        }
    }
    Ok(())
}

fn write_pnm(path: &Path, magic: &str, channels: &[usize], buf: &SlmBuffer) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{SLM_WIDTH} {SLM_HEIGHT}\n255\n")?;
    let mut row = Vec::with_capacity(SLM_WIDTH * channels.len());
    for y in 0..SLM_HEIGHT {
        row.clear();
        for el in buf.row(y).chunks_exact(ELEMENT_BYTES) {
            row.extend(channels.iter().map(|&c| el[c]));
        }
        w.write_all(&row)?;
    }
    w.flush()
}

/// Writes the color plane as a binary PPM and the Z plane as a binary PGM,
/// without validating.
pub fn write_dump(buf: &SlmBuffer, seq: u64, dump: &SinkDump) -> Result<(), ReplayError> {
    let (ppm, pgm) = dump.paths(seq);
    write_pnm(&ppm, "P6", &[0, 1, 2], buf)?;
    write_pnm(&pgm, "P5", &[3], buf)?;
    Ok(())
}

/// Validates the buffer invariants and gathers statistics. With `dump`, also
/// writes the color plane as a binary PPM and the Z plane as a binary PGM.
pub fn sink_consume(buf: &SlmBuffer, seq: u64, dump: Option<&SinkDump>) -> Result<SinkStats, ReplayError> {
    validate(buf)?;
    let mut counts = [[0u64; 256]; 4];
    let mut nonzero = 0u64;
    // Everything outside the embed window is zero once validated.
    for y in EMBED_Y..EMBED_Y + UPSCALED_HEIGHT {
        let row = buf.row(y);
        let window = &row[EMBED_X * ELEMENT_BYTES..(EMBED_X + UPSCALED_WIDTH) * ELEMENT_BYTES];
        for el in window.chunks_exact(ELEMENT_BYTES) {
            let [r, g, b, z] = [el[0], el[1], el[2], el[3]];
            counts[0][usize::from(r)] += 1;
            counts[1][usize::from(g)] += 1;
            counts[2][usize::from(b)] += 1;
            counts[3][usize::from(z)] += 1;
            nonzero += u64::from((r | g | b | z) != 0);
        }
    }
    let window_elements = (UPSCALED_WIDTH * UPSCALED_HEIGHT) as u64;
    let zero_outside = (SLM_WIDTH * SLM_HEIGHT) as u64 - window_elements;
    let histograms = counts.map(|mut h| {
        h[0] += zero_outside;
        h.to_vec()
    });
    if let Some(d) = dump {
        write_dump(buf, seq, d)?;
    }
    Ok(SinkStats {
        seq,
        nonzero_elements: nonzero,
        histograms,
        checksum: crc32fast::hash(&buf.elements),
    })
}
