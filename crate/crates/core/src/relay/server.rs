use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::registry::{AttachOutcome, ChannelRegistry};
use super::{
    code, decode_preamble, RejectReason, RelayError, Role, ATTACH_OK, ATTACH_REJECTED, DEFAULT_MAX_CHANNELS,
    DEFAULT_TTL_SECONDS, PREAMBLE_LEN,
};

const IO_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_REQUEST_LINE: u64 = 256;
const SPLICE_BUF: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub signal_addr: SocketAddr,
    pub relay_addr: SocketAddr,
    pub ttl: Duration,
    pub max_channels: usize,
    /// Port advertised in grants; defaults to the bound relay port.
    pub advertised_port: Option<u16>,
}

impl RelayConfig {
    /// Both listeners on ephemeral loopback ports.
    pub fn loopback() -> Self {
        Self {
            signal_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            relay_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            ttl: Duration::from_secs(DEFAULT_TTL_SECONDS),
            max_channels: DEFAULT_MAX_CHANNELS,
            advertised_port: None,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    channels_paired: AtomicU64,
    bytes_forwarded: AtomicU64,
}

struct Shared {
    registry: Mutex<ChannelRegistry<TcpStream>>,
    active: Mutex<HashMap<u64, Vec<TcpStream>>>,
    shutdown: AtomicBool,
    advertised_port: u16,
    counters: Counters,
}

/// Running relay service. Dropping the handle shuts the service down.
pub struct RelayHandle {
    signal_addr: SocketAddr,
    relay_addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayStats {
    pub channels_registered: usize,
    pub channels_active: usize,
    pub channels_paired: u64,
    pub bytes_forwarded: u64,
}

fn bind(addr: SocketAddr) -> Result<TcpListener, RelayError> {
    TcpListener::bind(addr).map_err(|source| RelayError::Bind {
        addr: addr.to_string(),
        source,
    })
}

/// Binds both listeners and serves until [`RelayHandle::shutdown`].
pub fn run_relay(config: RelayConfig) -> Result<RelayHandle, RelayError> {
    let signal = bind(config.signal_addr)?;
    let relay = bind(config.relay_addr)?;
    let signal_addr = signal.local_addr()?;
    let relay_addr = relay.local_addr()?;
    let shared = Arc::new(Shared {
        registry: Mutex::new(ChannelRegistry::new(config.ttl, config.max_channels)),
        active: Mutex::new(HashMap::new()),
        shutdown: AtomicBool::new(false),
        advertised_port: config.advertised_port.unwrap_or(relay_addr.port()),
        counters: Counters::default(),
    });
    log::info!("signaling on {signal_addr}, relay on {relay_addr}");

    let mut threads = Vec::new();
    let s = shared.clone();
    threads.push(thread::spawn(move || {
        accept_loop(signal, &s, |conn, shared| handle_signal(conn, &shared))
    }));
    let s = shared.clone();
    threads.push(thread::spawn(move || accept_loop(relay, &s, handle_attach)));
    let s = shared.clone();
    let period = (config.ttl / 4).clamp(Duration::from_millis(10), Duration::from_secs(1));
    threads.push(thread::spawn(move || reaper(&s, period)));

    Ok(RelayHandle {
        signal_addr,
        relay_addr,
        shared,
        threads,
    })
}

impl RelayHandle {
    pub fn signal_addr(&self) -> SocketAddr {
        self.signal_addr
    }

    pub fn relay_addr(&self) -> SocketAddr {
        self.relay_addr
    }

    pub fn stats(&self) -> RelayStats {
        RelayStats {
            channels_registered: self.shared.registry.lock().unwrap().len(),
            channels_active: self.shared.active.lock().unwrap().len(),
            channels_paired: self.shared.counters.channels_paired.load(Ordering::Relaxed),
            bytes_forwarded: self.shared.counters.bytes_forwarded.load(Ordering::Relaxed),
        }
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shared.shutdown.load(Ordering::SeqCst)
    }

    /// Stops accepting, closes parked and spliced connections, joins the
    /// service threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        for addr in [self.signal_addr, self.relay_addr] {
            let _ = TcpStream::connect_timeout(&wake_addr(addr), Duration::from_millis(200));
        }
        for conn in self.shared.registry.lock().unwrap().clear() {
            let _ = conn.shutdown(Shutdown::Both);
        }
        for conns in self.shared.active.lock().unwrap().values() {
            for c in conns {
                let _ = c.shutdown(Shutdown::Both);
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        match a {
            SocketAddr::V4(_) => a.set_ip([127, 0, 0, 1].into()),
            SocketAddr::V6(_) => a.set_ip(std::net::Ipv6Addr::LOCALHOST.into()),
        }
    }
    a
}

fn accept_loop(
    listener: TcpListener,
    shared: &Arc<Shared>,
    handler: impl Fn(TcpStream, Arc<Shared>) + Send + Sync + Copy + 'static,
) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(conn) => {
                let s = shared.clone();
                thread::spawn(move || handler(conn, s));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

fn reaper(shared: &Shared, period: Duration) {
    const SLICE: Duration = Duration::from_millis(20);
    let mut next = Instant::now() + period;
    while !shared.shutdown.load(Ordering::SeqCst) {
        // Short sleeps keep shutdown prompt.
        let now = Instant::now();
        if now < next {
            thread::sleep(SLICE.min(next - now));
            continue;
        }
        next = now + period;
        let expired = shared.registry.lock().unwrap().evict_expired(Instant::now());
        for conn in expired {
            let _ = conn.shutdown(Shutdown::Both);
        }
    }
}

fn handle_signal(mut conn: TcpStream, shared: &Shared) {
    let _ = conn.set_read_timeout(Some(IO_TIMEOUT));
    let mut line = String::new();
    let read = BufReader::new((&conn).take(MAX_REQUEST_LINE)).read_line(&mut line);
    let response = match read {
        Ok(_) if line.ends_with('\n') => signal_response(line.trim_end(), shared),
        Ok(_) => format!("ERR {} request line missing or too long\n", code::BAD_REQUEST),
        Err(e) => {
            log::debug!("signaling read failed: {e}");
            return;
        }
    };
    let _ = conn.write_all(response.as_bytes());
}

fn signal_response(line: &str, shared: &Shared) -> String {
    let parts: Vec<&str> = line.split(' ').collect();
    let parsed = match parts.as_slice() {
        ["REG", role, id] => role.parse::<Role>().ok().zip(id.parse::<u64>().ok()),
        _ => None,
    };
    let Some((role, channel_id)) = parsed else {
        return format!("ERR {} malformed request\n", code::BAD_REQUEST);
    };
    if shared.shutdown.load(Ordering::SeqCst) {
        return format!("ERR {} shutting down\n", code::CAPACITY);
    }
    let result = shared
        .registry
        .lock()
        .unwrap()
        .register(role, channel_id, Instant::now());
    match result {
        Ok(key) => {
            log::debug!("registered {role} on channel {channel_id}");
            format!("OK {} {}\n", shared.advertised_port, hex::encode(key))
        }
        Err(RelayError::Conflict { .. }) => {
            format!(
                "ERR {} {role} already attached on channel {channel_id}\n",
                code::CONFLICT
            )
        }
        Err(RelayError::Capacity(n)) => format!("ERR {} capacity of {n} channels reached\n", code::CAPACITY),
        Err(e) => format!("ERR {} {e}\n", code::BAD_REQUEST),
    }
}

fn reject(mut conn: TcpStream, reason: RejectReason) {
    log::debug!("attach rejected: {reason:?}");
    let _ = conn.write_all(&[ATTACH_REJECTED, reason as u8]);
    let _ = conn.shutdown(Shutdown::Both);
}

fn handle_attach(mut conn: TcpStream, shared: Arc<Shared>) {
    let _ = conn.set_nodelay(true);
    let _ = conn.set_read_timeout(Some(IO_TIMEOUT));
    let mut preamble = [0u8; PREAMBLE_LEN];
    if conn.read_exact(&mut preamble).is_err() {
        return reject(conn, RejectReason::BadPreamble);
    }
    let _ = conn.set_read_timeout(None);
    let Some((role, channel_id, key)) = decode_preamble(&preamble) else {
        return reject(conn, RejectReason::BadPreamble);
    };
    if shared.shutdown.load(Ordering::SeqCst) {
        return reject(conn, RejectReason::ShuttingDown);
    }
    let ack = match conn.try_clone() {
        Ok(c) => c,
        Err(_) => return,
    };
    // The ack goes out under the registry lock so a parked connection is
    // always acknowledged before its counterpart starts splicing into it.
    let mut registry = shared.registry.lock().unwrap();
    let outcome = registry.attach(role, channel_id, &key, conn, Instant::now());
    match outcome {
        Err((reason, conn)) => {
            drop(registry);
            reject(conn, reason);
        }
        Ok(AttachOutcome::Parked) => {
            let _ = (&ack).write_all(&[ATTACH_OK]);
            log::debug!("{role} parked on channel {channel_id}");
        }
        Ok(AttachOutcome::Paired { sender, receiver }) => {
            let _ = (&ack).write_all(&[ATTACH_OK]);
            drop(registry);
            log::info!("channel {channel_id} paired");
            shared.counters.channels_paired.fetch_add(1, Ordering::Relaxed);
            splice(channel_id, sender, receiver, shared);
        }
    }
}

fn splice(channel_id: u64, sender: TcpStream, receiver: TcpStream, shared: Arc<Shared>) {
    let clones = (
        sender.try_clone(),
        receiver.try_clone(),
        sender.try_clone(),
        receiver.try_clone(),
    );
    let (Ok(sender_back), Ok(receiver_back), Ok(sender_keep), Ok(receiver_keep)) = clones else {
        shared.registry.lock().unwrap().finish(channel_id);
        return;
    };
    shared
        .active
        .lock()
        .unwrap()
        .insert(channel_id, vec![sender_keep, receiver_keep]);
    if shared.shutdown.load(Ordering::SeqCst) {
        let _ = sender.shutdown(Shutdown::Both);
        let _ = receiver.shutdown(Shutdown::Both);
    }
    let sh = shared.clone();
    let forward = thread::spawn(move || pump(sender, receiver, &sh));
    let sh = shared.clone();
    let backward = thread::spawn(move || pump(receiver_back, sender_back, &sh));
    let _ = forward.join();
    let _ = backward.join();
    shared.active.lock().unwrap().remove(&channel_id);
    shared.registry.lock().unwrap().finish(channel_id);
    log::info!("channel {channel_id} closed");
}

/// Copies `src` into `dst` until EOF, then half-closes `dst`.
fn pump(mut src: TcpStream, mut dst: TcpStream, shared: &Shared) {
    let mut buf = vec![0u8; SPLICE_BUF];
    loop {
        let n = match src.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        if dst.write_all(&buf[..n]).is_err() {
            // Far side is gone; make the writer notice.
            let _ = src.shutdown(Shutdown::Both);
            break;
        }
        shared.counters.bytes_forwarded.fetch_add(n as u64, Ordering::Relaxed);
    }
    let _ = dst.shutdown(Shutdown::Write);
}
