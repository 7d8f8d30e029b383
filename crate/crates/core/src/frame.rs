//! RGBZ domain types and the capture-side processing chain.
//!
//! Depth is carried as an 8-bit quantized disparity code (diopters mapped
//! linearly onto `0..=255` over a [`DisparityRange`]) alongside a per-pixel
//! validity mask marking sensor holes.

use thiserror::Error;

/// Bytes per pixel in the RGB0 layout.
pub const RGB0_BPP: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("invalid dimensions {width}x{height}: {reason}")]
    Dimension {
        width: usize,
        height: usize,
        reason: &'static str,
    },
    #[error("buffer length {actual} does not match expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("RGB0 padding byte at pixel {pixel} is {value}, expected 0")]
    Padding { pixel: usize, value: u8 },
    #[error("invalid disparity range [{min}, {max}]")]
    Range { min: f64, max: f64 },
    #[error("depth map has no valid pixels to fill from")]
    Unfillable,
    #[error("color {color_w}x{color_h} and depth {depth_w}x{depth_h} dimensions differ")]
    Mismatch {
        color_w: usize,
        color_h: usize,
        depth_w: usize,
        depth_h: usize,
    },
    #[error("cutoff {cutoff} D outside disparity range [{min}, {max}]")]
    Cutoff { cutoff: f64, min: f64, max: f64 },
}

/// Color image in RGB0 layout (R, G, B, 0 per pixel, row-major, no stride gaps).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, FrameError> {
        let expected = width * height * RGB0_BPP;
        if data.len() != expected {
            return Err(FrameError::Length {
                expected,
                actual: data.len(),
            });
        }
        if let Some((pixel, px)) = data.chunks_exact(RGB0_BPP).enumerate().find(|(_, px)| px[3] != 0) {
            return Err(FrameError::Padding { pixel, value: px[3] });
        }
        Ok(Self { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * RGB0_BPP],
        }
    }

    /// Builds an image from packed RGB triples.
    pub fn from_rgb(width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<Self, FrameError> {
        if rgb.len() != width * height {
            return Err(FrameError::Length {
                expected: width * height,
                actual: rgb.len(),
            });
        }
        let data = rgb.iter().flat_map(|&[r, g, b]| [r, g, b, 0]).collect();
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * RGB0_BPP;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * RGB0_BPP;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Disparity interval in diopters mapped onto the 8-bit code space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisparityRange {
    min_diopters: f64,
    max_diopters: f64,
}

impl DisparityRange {
    pub fn new(min_diopters: f64, max_diopters: f64) -> Result<Self, FrameError> {
        let ok =
            min_diopters.is_finite() && max_diopters.is_finite() && min_diopters >= 0.0 && min_diopters < max_diopters;
        if !ok {
            return Err(FrameError::Range {
                min: min_diopters,
                max: max_diopters,
            });
        }
        Ok(Self {
            min_diopters,
            max_diopters,
        })
    }

    pub fn min(&self) -> f64 {
        self.min_diopters
    }

    pub fn max(&self) -> f64 {
        self.max_diopters
    }

    pub fn span(&self) -> f64 {
        self.max_diopters - self.min_diopters
    }

    /// Width of one quantization step in diopters.
    pub fn step(&self) -> f64 {
        self.span() / 255.0
    }
}

impl Default for DisparityRange {
    /// 0 to 4 diopters: infinity down to 25 cm.
    fn default() -> Self {
        Self {
            min_diopters: 0.0,
            max_diopters: 4.0,
        }
    }
}

/// Quantized disparity codes plus a validity mask (`false` marks a sensor hole).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    codes: Vec<u8>,
    validity: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, codes: Vec<u8>, validity: Vec<bool>) -> Result<Self, FrameError> {
        let expected = width * height;
        for len in [codes.len(), validity.len()] {
            if len != expected {
                return Err(FrameError::Length { expected, actual: len });
            }
        }
        Ok(Self {
            width,
            height,
            codes,
            validity,
        })
    }

    /// A map where every pixel is valid.
    pub fn from_codes(width: usize, height: usize, codes: Vec<u8>) -> Result<Self, FrameError> {
        let validity = vec![true; codes.len()];
        Self::new(width, height, codes, validity)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn code(&self, x: usize, y: usize) -> u8 {
        self.codes[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.validity[y * self.width + x]
    }

    pub fn all_valid(&self) -> bool {
        self.validity.iter().all(|&v| v)
    }
}

/// One color frame and its aligned depth map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbzFrame {
    color: ColorImage,
    depth: DepthMap,
    pub timestamp_us: u64,
    pub seq: u64,
}

impl RgbzFrame {
    pub fn new(color: ColorImage, depth: DepthMap, timestamp_us: u64, seq: u64) -> Result<Self, FrameError> {
        if color.width != depth.width || color.height != depth.height {
            return Err(FrameError::Mismatch {
                color_w: color.width,
                color_h: color.height,
                depth_w: depth.width,
                depth_h: depth.height,
            });
        }
        Ok(Self {
            color,
            depth,
            timestamp_us,
            seq,
        })
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn color(&self) -> &ColorImage {
        &self.color
    }

    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }

    pub fn into_parts(self) -> (ColorImage, DepthMap) {
        (self.color, self.depth)
    }

    /// True when color and depth content are identical, ignoring metadata.
    pub fn same_content(&self, other: &RgbzFrame) -> bool {
        self.color == other.color && self.depth.codes == other.depth.codes
    }

    /// CRC-32 over color bytes followed by depth codes.
    pub fn content_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.color.data);
        h.update(&self.depth.codes);
        h.finalize()
    }
}

/// Frames per second as a rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrameRate {
    pub num: u16,
    pub den: u16,
}

impl FrameRate {
    pub fn new(num: u16, den: u16) -> Option<Self> {
        (num > 0 && den > 0).then_some(Self { num, den })
    }

    pub fn integer(fps: u16) -> Option<Self> {
        Self::new(fps, 1)
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// Duration of frame `index` from the stream start, in microseconds.
    pub fn frame_time_us(&self, index: u64) -> u64 {
        index * 1_000_000 * u64::from(self.den) / u64::from(self.num)
    }
}

/// Parses `30` or `30000/1001`.
impl std::str::FromStr for FrameRate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (num, den) = s.split_once('/').unwrap_or((s, "1"));
        let parse = |v: &str| {
            v.trim()
                .parse::<u16>()
                .map_err(|e| format!("bad frame rate `{s}`: {e}"))
        };
        Self::new(parse(num)?, parse(den)?).ok_or_else(|| format!("frame rate `{s}` must be positive"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum PixelFormat {
    Rgb0_8 = 0,
}

impl PixelFormat {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Rgb0_8),
            _ => None,
        }
    }
}

/// Per-stream metadata announced before any access unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    width: usize,
    height: usize,
    pub fps: FrameRate,
    pub range: DisparityRange,
    pub pixel_format: PixelFormat,
}

/// Serialized size of a [`StreamHeader`].
pub const STREAM_HEADER_LEN: usize = 25;

impl StreamHeader {
    pub fn new(width: usize, height: usize, fps: FrameRate, range: DisparityRange) -> Result<Self, FrameError> {
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(FrameError::Dimension {
                width,
                height,
                reason: "stream dimensions must be positive and even",
            });
        }
        if width > usize::from(u16::MAX) || height > usize::from(u16::MAX) {
            return Err(FrameError::Dimension {
                width,
                height,
                reason: "stream dimensions must fit in 16 bits",
            });
        }
        Ok(Self {
            width,
            height,
            fps,
            range,
            pixel_format: PixelFormat::Rgb0_8,
        })
    }

    /// 640x480 at 30 fps over the default disparity range.
    pub fn vga() -> Self {
        Self::new(640, 480, FrameRate::integer(30).unwrap(), DisparityRange::default()).unwrap()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Layout: width u16, height u16, fps num u16, fps den u16, range min f64,
    /// range max f64, pixel format u8. All big-endian.
    pub fn to_bytes(&self) -> [u8; STREAM_HEADER_LEN] {
        let mut out = [0u8; STREAM_HEADER_LEN];
        out[0..2].copy_from_slice(&(self.width as u16).to_be_bytes());
        out[2..4].copy_from_slice(&(self.height as u16).to_be_bytes());
        out[4..6].copy_from_slice(&self.fps.num.to_be_bytes());
        out[6..8].copy_from_slice(&self.fps.den.to_be_bytes());
        out[8..16].copy_from_slice(&self.range.min().to_be_bytes());
        out[16..24].copy_from_slice(&self.range.max().to_be_bytes());
        out[24] = self.pixel_format as u8;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != STREAM_HEADER_LEN {
            return None;
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let f64_at = |i: usize| f64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        let fps = FrameRate::new(u16_at(4), u16_at(6))?;
        let range = DisparityRange::new(f64_at(8), f64_at(16)).ok()?;
        let pixel_format = PixelFormat::from_tag(bytes[24])?;
        let mut hdr = Self::new(usize::from(u16_at(0)), usize::from(u16_at(2)), fps, range).ok()?;
        hdr.pixel_format = pixel_format;
        Some(hdr)
    }
}

/// Device orientation as clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    #[default]
    Up,
    Cw90,
    Cw180,
    Cw270,
}

impl Orientation {
    pub fn from_degrees(degrees: u32) -> Option<Self> {
        match degrees {
            0 => Some(Self::Up),
            90 => Some(Self::Cw90),
            180 => Some(Self::Cw180),
            270 => Some(Self::Cw270),
            _ => None,
        }
    }

    fn quarter_turns(self) -> usize {
        match self {
            Self::Up => 0,
            Self::Cw90 => 1,
            Self::Cw180 => 2,
            Self::Cw270 => 3,
        }
    }
}

/// Maps a raw disparity onto the 8-bit code space with round-half-up.
pub fn quantize_value(d: f64, range: &DisparityRange) -> u8 {
    let norm = ((d - range.min()) / range.span()).clamp(0.0, 1.0);
    (norm * 255.0 + 0.5).floor() as u8
}

pub fn quantize_disparity(
    width: usize,
    height: usize,
    raw: &[f64],
    range: &DisparityRange,
) -> Result<DepthMap, FrameError> {
    if width == 0 || height == 0 {
        return Err(FrameError::Dimension {
            width,
            height,
            reason: "empty disparity image",
        });
    }
    if raw.len() != width * height {
        return Err(FrameError::Length {
            expected: width * height,
            actual: raw.len(),
        });
    }
    let mut codes = Vec::with_capacity(raw.len());
    let mut validity = Vec::with_capacity(raw.len());
    for &d in raw {
        if d.is_finite() {
            codes.push(quantize_value(d, range));
            validity.push(true);
        } else {
            codes.push(0);
            validity.push(false);
        }
    }
    DepthMap::new(width, height, codes, validity)
}

pub fn dequantize_disparity(code: u8, range: &DisparityRange) -> f64 {
    range.min() + (f64::from(code) / 255.0) * range.span()
}

/// Fills sensor holes with the lower median of valid codes in the smallest
/// odd square window (3x3, 5x5, ...) that contains any. Valid pixels are
/// copied through untouched.
pub fn fill_depth_gaps(map: &DepthMap) -> Result<DepthMap, FrameError> {
    if map.all_valid() {
        return Ok(map.clone());
    }
    if !map.validity.iter().any(|&v| v) {
        return Err(FrameError::Unfillable);
    }
    let (w, h) = (map.width, map.height);
    let max_radius = w.max(h);
    let mut codes = map.codes.clone();
    let mut window = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if map.validity[y * w + x] {
                continue;
            }
            for r in 1..=max_radius {
                window.clear();
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                for wy in y0..=y1 {
                    let row = wy * w;
                    window.extend(
                        (x0..=x1)
                            .filter(|&wx| map.validity[row + wx])
                            .map(|wx| map.codes[row + wx]),
                    );
                }
                if !window.is_empty() {
                    window.sort_unstable();
                    codes[y * w + x] = window[(window.len() - 1) / 2];
                    break;
                }
            }
        }
    }
    DepthMap::new(w, h, codes, vec![true; w * h])
}

/// Rotates a `w x h` row-major plane of `bpp`-byte pixels clockwise by `turns`.
fn rotate_plane<T: Copy>(src: &[T], w: usize, h: usize, bpp: usize, turns: usize) -> Vec<T> {
    if turns == 0 {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(src.len());
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    for oy in 0..oh {
        for ox in 0..ow {
            let (sx, sy) = match turns {
                1 => (oy, h - 1 - ox),
                2 => (w - 1 - ox, h - 1 - oy),
                _ => (w - 1 - oy, ox),
            };
            let i = (sy * w + sx) * bpp;
            out.extend_from_slice(&src[i..i + bpp]);
        }
    }
    out
}

pub fn apply_orientation(frame: &RgbzFrame, o: Orientation) -> RgbzFrame {
    let turns = o.quarter_turns();
    let (w, h) = (frame.width(), frame.height());
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let color = ColorImage {
        width: ow,
        height: oh,
        data: rotate_plane(&frame.color.data, w, h, RGB0_BPP, turns),
    };
    let depth = DepthMap {
        width: ow,
        height: oh,
        codes: rotate_plane(&frame.depth.codes, w, h, 1, turns),
        validity: rotate_plane(&frame.depth.validity, w, h, 1, turns),
    };
    RgbzFrame {
        color,
        depth,
        timestamp_us: frame.timestamp_us,
        seq: frame.seq,
    }
}

/// Zeroes color and depth of every pixel behind the cutoff plane.
///
/// A pixel is background when its dequantized disparity is below `cutoff`,
/// or when its code is 0 (at or beyond the far end of the range).
pub fn suppress_background(frame: &RgbzFrame, cutoff: f64, range: &DisparityRange) -> Result<RgbzFrame, FrameError> {
    if !(cutoff >= range.min() && cutoff <= range.max()) {
        return Err(FrameError::Cutoff {
            cutoff,
            min: range.min(),
            max: range.max(),
        });
    }
    let lut: [bool; 256] = std::array::from_fn(|c| c == 0 || dequantize_disparity(c as u8, range) < cutoff);
    let mut out = frame.clone();
    for (i, code) in out.depth.codes.iter_mut().enumerate() {
        if lut[usize::from(*code)] {
            *code = 0;
            out.color.data[i * RGB0_BPP..(i + 1) * RGB0_BPP].fill(0);
        }
    }
    Ok(out)
}
