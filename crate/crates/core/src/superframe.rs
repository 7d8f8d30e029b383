//! Codec-facing superframe: the color image with its depth map stacked
//! underneath as a grayscale RGB0 image of the same width.
//!
//! The byte layout is the raw-video interchange format handed to codecs:
//! row-major, top to bottom, RGB0, no padding or stride gaps.

use thiserror::Error;

use crate::frame::{ColorImage, DepthMap, FrameError, RgbzFrame, StreamHeader, RGB0_BPP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuperframeError {
    #[error("zero superframe dimension {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("superframe {width}x{height} does not match stream {expected_w}x{expected_h}")]
    Format {
        width: usize,
        height: usize,
        expected_w: usize,
        expected_h: usize,
    },
    #[error("superframe height {0} is odd")]
    OddHeight(usize),
    #[error("superframe buffer is {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superframe {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Superframe {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, SuperframeError> {
        if width == 0 || height == 0 {
            return Err(SuperframeError::ZeroDimension { width, height });
        }
        if !height.is_multiple_of(2) {
            return Err(SuperframeError::OddHeight(height));
        }
        let expected = width * height * RGB0_BPP;
        if data.len() != expected {
            return Err(SuperframeError::Length {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Full height, twice the content height.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    fn half_len(&self) -> usize {
        self.data.len() / 2
    }

    pub fn color_half(&self) -> &[u8] {
        &self.data[..self.half_len()]
    }

    pub fn depth_half(&self) -> &[u8] {
        &self.data[self.half_len()..]
    }

    /// Every depth-half pixel has R == G == B and a zero fourth byte.
    pub fn depth_half_is_grayscale(&self) -> bool {
        self.depth_half()
            .chunks_exact(RGB0_BPP)
            .all(|p| p[0] == p[1] && p[1] == p[2] && p[3] == 0)
    }
}

/// Bytes in a superframe for content of `width x height`.
pub fn superframe_byte_size(width: usize, height: usize) -> Result<usize, SuperframeError> {
    if width == 0 || height == 0 {
        return Err(SuperframeError::ZeroDimension { width, height });
    }
    Ok(width * height * 2 * RGB0_BPP)
}

pub fn pack_superframe(frame: &RgbzFrame) -> Result<Superframe, SuperframeError> {
    let (w, h) = (frame.width(), frame.height());
    let (dw, dh) = (frame.depth().width(), frame.depth().height());
    if dw != w || dh != h {
        return Err(FrameError::Mismatch {
            color_w: w,
            color_h: h,
            depth_w: dw,
            depth_h: dh,
        }
        .into());
    }
    let mut data = Vec::with_capacity(superframe_byte_size(w, h)?);
    data.extend_from_slice(frame.color().data());
    data.extend(frame.depth().codes().iter().flat_map(|&c| [c, c, c, 0]));
    Superframe::new(w, h * 2, data)
}

/// Splits a superframe back into color and depth. Depth codes are recovered
/// as `round((R + G + B) / 3)` so channel noise from lossy codecs averages
/// out; for grayscale input this is exactly R. Color padding bytes are forced
/// to zero. Timestamp and sequence come from the caller.
pub fn unpack_superframe(
    sf: &Superframe,
    hdr: &StreamHeader,
    timestamp_us: u64,
    seq: u64,
) -> Result<RgbzFrame, SuperframeError> {
    if sf.width != hdr.width() || sf.height != 2 * hdr.height() {
        return Err(SuperframeError::Format {
            width: sf.width,
            height: sf.height,
            expected_w: hdr.width(),
            expected_h: 2 * hdr.height(),
        });
    }
    let (w, h) = (hdr.width(), hdr.height());
    let mut color = sf.color_half().to_vec();
    for px in color.chunks_exact_mut(RGB0_BPP) {
        px[3] = 0;
    }
    let codes = sf
        .depth_half()
        .chunks_exact(RGB0_BPP)
        .map(|p| ((u16::from(p[0]) + u16::from(p[1]) + u16::from(p[2]) + 1) / 3) as u8)
        .collect();
    let frame = RgbzFrame::new(
        ColorImage::new(w, h, color)?,
        DepthMap::from_codes(w, h, codes)?,
        timestamp_us,
        seq,
    )?;
    Ok(frame)
}
