use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::{
    code, encode_preamble, ChannelGrant, ChannelKey, RejectReason, RelayError, Role, ATTACH_OK, ATTACH_REJECTED,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

fn connect(addr: impl ToSocketAddrs) -> Result<TcpStream, RelayError> {
    let mut last = None;
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last
        .map(RelayError::Io)
        .unwrap_or_else(|| RelayError::Signaling("address resolved to nothing".into())))
}

/// Requests a grant for `channel_id` from the signaling server. The relay
/// host in the grant is the host the signaling server was reached at.
pub fn register(signal: impl ToSocketAddrs, role: Role, channel_id: u64) -> Result<ChannelGrant, RelayError> {
    let mut conn = connect(signal)?;
    let relay_host = conn.peer_addr()?.ip().to_string();
    conn.set_read_timeout(Some(CONNECT_TIMEOUT))?;
    conn.write_all(format!("REG {role} {channel_id}\n").as_bytes())?;
    let mut line = String::new();
    BufReader::new(&conn).read_line(&mut line)?;
    let fields: Vec<&str> = line.trim_end().splitn(3, ' ').collect();
    match fields.as_slice() {
        ["OK", port, key_hex] => {
            let relay_port = port
                .parse()
                .map_err(|_| RelayError::Signaling(format!("bad relay port `{port}`")))?;
            let key: ChannelKey = hex::decode(key_hex)
                .ok()
                .and_then(|k| k.try_into().ok())
                .ok_or_else(|| RelayError::Signaling(format!("bad key `{key_hex}`")))?;
            Ok(ChannelGrant {
                channel_id,
                relay_host,
                relay_port,
                key,
            })
        }
        ["ERR", c, msg] => match c.parse::<u16>() {
            Ok(code::CONFLICT) => Err(RelayError::Conflict { channel_id, role }),
            Ok(code::CAPACITY) => Err(RelayError::Capacity(
                msg.split(' ').find_map(|w| w.parse().ok()).unwrap_or(0),
            )),
            _ => Err(RelayError::BadRequest(msg.to_string())),
        },
        _ => Err(RelayError::Signaling(format!(
            "unexpected response `{}`",
            line.trim_end()
        ))),
    }
}

/// Connects to the relay named in `grant` and attaches as `role`. Returns
/// once the relay acknowledges; bytes flow after the counterpart attaches.
pub fn attach(grant: &ChannelGrant, role: Role) -> Result<TcpStream, RelayError> {
    let mut conn = connect((grant.relay_host.as_str(), grant.relay_port))?;
    conn.set_nodelay(true)?;
    conn.write_all(&encode_preamble(role, grant.channel_id, &grant.key))?;
    conn.set_read_timeout(Some(CONNECT_TIMEOUT))?;
    let mut ack = [0u8; 1];
    conn.read_exact(&mut ack)?;
    match ack[0] {
        ATTACH_OK => {
            conn.set_read_timeout(None)?;
            Ok(conn)
        }
        ATTACH_REJECTED => {
            let mut reason = [0u8; 1];
            let reason = conn
                .read_exact(&mut reason)
                .ok()
                .and_then(|_| RejectReason::from_byte(reason[0]));
            Err(match reason {
                Some(RejectReason::UnknownChannel) => RelayError::UnknownChannel(grant.channel_id),
                Some(RejectReason::BadKey) => RelayError::Auth(grant.channel_id),
                Some(RejectReason::RoleTaken) => RelayError::Conflict {
                    channel_id: grant.channel_id,
                    role,
                },
                other => RelayError::Rejected(other),
            })
        }
        other => Err(RelayError::Signaling(format!("unexpected attach reply 0x{other:02x}"))),
    }
}
