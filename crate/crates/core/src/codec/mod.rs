//! Codec boundary between superframes and encoded access units.
//!
//! Two paths exist: the built-in lossless reference codec ([`reference`]) and
//! external transcoder processes driven over their standard streams
//! ([`external`]).

pub mod external;
pub mod reference;

use std::time::Duration;

use thiserror::Error;

pub use external::{
    expand_template, ExternalCodec, ExternalDecoder, ExternalEncoder, FlushReport, H264_DECODE_TEMPLATE,
    H264_ENCODE_TEMPLATE,
};
pub use reference::{ref_decode, ref_encode};

use crate::superframe::SuperframeError;

/// Default time allowed for a transcoder to produce output before it is
/// declared stuck.
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

/// Default bound on the per-pixel depth code error tolerated from lossy codecs.
pub const DEFAULT_MAX_DEPTH_CODE_ERROR: u8 = 4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bitstream error: {0}")]
    Bitstream(String),
    #[error("access unit is {actual:?}, adapter expects {expected:?}")]
    Adapter { expected: CodecId, actual: CodecId },
    #[error("empty access unit payload")]
    EmptyPayload,
    #[error("failed to spawn transcoder `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid transcoder command template: {0}")]
    Template(String),
    #[error("transcoder produced no output within {0:?}")]
    Timeout(Duration),
    #[error("transcoder failed ({status}): {diagnostics}")]
    Transcoder { status: String, diagnostics: String },
    #[error(transparent)]
    Superframe(#[from] SuperframeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum CodecId {
    RefLossless = 0,
    External = 1,
}

impl CodecId {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::RefLossless),
            1 => Some(Self::External),
            _ => None,
        }
    }
}

pub const FLAG_KEYFRAME: u16 = 0x0001;

/// One encoded frame's worth of bitstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedAccessUnit {
    codec_id: CodecId,
    flags: u16,
    payload: Vec<u8>,
}

impl EncodedAccessUnit {
    pub fn new(codec_id: CodecId, flags: u16, payload: Vec<u8>) -> Result<Self, CodecError> {
        if payload.is_empty() {
            return Err(CodecError::EmptyPayload);
        }
        // The reference codec is intra-only.
        let flags = if codec_id == CodecId::RefLossless {
            flags | FLAG_KEYFRAME
        } else {
            flags
        };
        Ok(Self {
            codec_id,
            flags,
            payload,
        })
    }

    pub fn codec_id(&self) -> CodecId {
        self.codec_id
    }

    pub fn flags(&self) -> u16 {
        self.flags
    }

    pub fn is_keyframe(&self) -> bool {
        self.flags & FLAG_KEYFRAME != 0
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Serialized form carried in ACCESS_UNIT packets: codec id byte
    /// followed by the payload. Flags travel in the packet header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.payload.len());
        out.push(self.codec_id as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(flags: u16, bytes: &[u8]) -> Result<Self, CodecError> {
        let (&tag, payload) = bytes
            .split_first()
            .ok_or_else(|| CodecError::Bitstream("empty access unit".into()))?;
        let codec_id =
            CodecId::from_tag(tag).ok_or_else(|| CodecError::Bitstream(format!("unknown codec id {tag}")))?;
        Self::new(codec_id, flags, payload.to_vec())
    }
}

/// Largest per-pixel difference between the depth halves of two superframes,
/// measured as recovered depth codes.
pub fn max_depth_code_error(a: &crate::superframe::Superframe, b: &crate::superframe::Superframe) -> Option<u8> {
    if a.width() != b.width() || a.height() != b.height() {
        return None;
    }
    let code = |p: &[u8]| (u16::from(p[0]) + u16::from(p[1]) + u16::from(p[2]) + 1) / 3;
    a.depth_half()
        .chunks_exact(4)
        .zip(b.depth_half().chunks_exact(4))
        .map(|(x, y)| code(x).abs_diff(code(y)) as u8)
        .max()
}
