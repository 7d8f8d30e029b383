//! Channel rendezvous: a signaling registry that hands out per-channel keys
//! and a byte-agnostic relay that splices one sender connection to one
//! receiver connection per channel.
//!
//! Signaling is one text request per TCP connection:
//!
//! ```text
//! -> REG <sender|receiver> <channel_id>\n
//! <- OK <relay_port> <key_hex>\n        or   ERR <code> <message>\n
//! ```
//!
//! A relay connection opens with a 29-byte attach preamble: `"3CPA"`, role
//! byte (0x01 sender, 0x02 receiver), channel id u64 BE, 16-byte key. The relay
//! answers 0x00 once the connection is parked or paired, or 0xFF followed by
//! a reason byte before closing.

mod client;
mod registry;
mod server;

use std::fmt;
use std::io;
use std::str::FromStr;

use thiserror::Error;

pub use client::{attach, register};
pub use registry::{AttachOutcome, ChannelRegistry};
pub use server::{run_relay, RelayConfig, RelayHandle};

pub const ATTACH_MAGIC: [u8; 4] = *b"3CPA";
pub const PREAMBLE_LEN: usize = 4 + 1 + 8 + 16;
pub const ATTACH_OK: u8 = 0x00;
pub const ATTACH_REJECTED: u8 = 0xFF;

pub const DEFAULT_TTL_SECONDS: u64 = 120;
pub const DEFAULT_MAX_CHANNELS: usize = 256;

pub type ChannelKey = [u8; 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Sender,
    Receiver,
}

impl Role {
    pub fn wire_byte(self) -> u8 {
        match self {
            Self::Sender => 0x01,
            Self::Receiver => 0x02,
        }
    }

    pub fn from_wire_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(Self::Sender),
            0x02 => Some(Self::Receiver),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sender => "sender",
            Self::Receiver => "receiver",
        })
    }
}

impl FromStr for Role {
    type Err = RelayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sender" => Ok(Self::Sender),
            "receiver" => Ok(Self::Receiver),
            other => Err(RelayError::BadRequest(format!("unknown role `{other}`"))),
        }
    }
}

/// Reason byte following [`ATTACH_REJECTED`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectReason {
    BadPreamble = 0x01,
    UnknownChannel = 0x02,
    BadKey = 0x03,
    RoleTaken = 0x04,
    ShuttingDown = 0x05,
}

impl RejectReason {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(Self::BadPreamble),
            0x02 => Some(Self::UnknownChannel),
            0x03 => Some(Self::BadKey),
            0x04 => Some(Self::RoleTaken),
            0x05 => Some(Self::ShuttingDown),
            _ => None,
        }
    }
}

/// Credential pair letting both ends of a channel rendezvous at the relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGrant {
    pub channel_id: u64,
    pub relay_host: String,
    pub relay_port: u16,
    pub key: ChannelKey,
}

impl ChannelGrant {
    pub fn key_hex(&self) -> String {
        hex::encode(self.key)
    }
}

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("channel {channel_id}: {role} already attached")]
    Conflict { channel_id: u64, role: Role },
    #[error("channel capacity of {0} reached")]
    Capacity(usize),
    #[error("unknown channel {0}")]
    UnknownChannel(u64),
    #[error("bad key for channel {0}")]
    Auth(u64),
    #[error("attach rejected: {0:?}")]
    Rejected(Option<RejectReason>),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("signaling error: {0}")]
    Signaling(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Signaling error codes.
pub(crate) mod code {
    pub const BAD_REQUEST: u16 = 400;
    pub const CONFLICT: u16 = 409;
    pub const CAPACITY: u16 = 503;
}

pub(crate) fn encode_preamble(role: Role, channel_id: u64, key: &ChannelKey) -> [u8; PREAMBLE_LEN] {
    let mut b = [0u8; PREAMBLE_LEN];
    b[0..4].copy_from_slice(&ATTACH_MAGIC);
    b[4] = role.wire_byte();
    b[5..13].copy_from_slice(&channel_id.to_be_bytes());
    b[13..29].copy_from_slice(key);
    b
}

pub(crate) fn decode_preamble(b: &[u8; PREAMBLE_LEN]) -> Option<(Role, u64, ChannelKey)> {
    if b[0..4] != ATTACH_MAGIC {
        return None;
    }
    let role = Role::from_wire_byte(b[4])?;
    let channel_id = u64::from_be_bytes(b[5..13].try_into().unwrap());
    let key = b[13..29].try_into().unwrap();
    Some((role, channel_id, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preamble_round_trip() {
        let key = [7u8; 16];
        let b = encode_preamble(Role::Receiver, 42, &key);
        assert_eq!(&b[..5], b"3CPA\x02");
        assert_eq!(&b[5..13], &[0, 0, 0, 0, 0, 0, 0, 42]);
        assert_eq!(decode_preamble(&b), Some((Role::Receiver, 42, key)));
        let mut bad = b;
        bad[4] = 3;
        assert_eq!(decode_preamble(&bad), None);
    }

    #[test]
    fn role_parsing() {
        assert_eq!("sender".parse::<Role>().unwrap(), Role::Sender);
        assert!("both".parse::<Role>().is_err());
    }
}
