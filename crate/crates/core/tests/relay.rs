//! Relay service over loopback sockets.

mod common;

use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rgbz::relay::{attach, register, run_relay, RelayConfig, RelayError, Role};

fn payload(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

fn pair(signal: &str, channel: u64) -> (TcpStream, TcpStream) {
    let rg = register(signal, Role::Receiver, channel).unwrap();
    let sg = register(signal, Role::Sender, channel).unwrap();
    assert_eq!(rg.key, sg.key);
    let rx = attach(&rg, Role::Receiver).unwrap();
    let tx = attach(&sg, Role::Sender).unwrap();
    (tx, rx)
}

/// Sends `data` from sender to receiver and returns what the receiver read.
fn transfer(mut tx: TcpStream, mut rx: TcpStream, data: Vec<u8>) -> Vec<u8> {
    let writer = thread::spawn(move || {
        tx.write_all(&data).unwrap();
        tx.shutdown(Shutdown::Write).unwrap();
        tx
    });
    let mut got = Vec::new();
    rx.read_to_end(&mut got).unwrap();
    drop(writer.join().unwrap());
    got
}

#[test]
fn ten_megabytes_byte_exact() {
    let relay = common::relay();
    let signal = relay.signal_addr().to_string();
    let (tx, rx) = pair(&signal, 1);
    let data = payload(1, 10 * 1024 * 1024);
    let got = transfer(tx, rx, data.clone());
    assert_eq!(crc32fast::hash(&got), crc32fast::hash(&data));
    assert!(got == data);
    relay.shutdown();
}

#[test]
fn eight_channels_isolated() {
    let relay = common::relay();
    let signal = relay.signal_addr().to_string();
    let handles: Vec<_> = (0..8u64)
        .map(|ch| {
            let signal = signal.clone();
            thread::spawn(move || {
                let (tx, rx) = pair(&signal, 100 + ch);
                let data = payload(ch, 2 * 1024 * 1024 + ch as usize * 4099);
                let got = transfer(tx, rx, data.clone());
                (crc32fast::hash(&data), data.len(), crc32fast::hash(&got), got.len())
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (sent_crc, sent_len, got_crc, got_len) in &results {
        assert_eq!((sent_crc, sent_len), (got_crc, got_len));
    }
    let mut crcs: Vec<u32> = results.iter().map(|r| r.0).collect();
    crcs.dedup();
    assert_eq!(crcs.len(), 8);
    relay.shutdown();
}

#[test]
fn forwarding_starts_promptly() {
    let relay = common::relay();
    let (mut tx, mut rx) = pair(&relay.signal_addr().to_string(), 9);
    for _ in 0..5 {
        let t = Instant::now();
        tx.write_all(b"x").unwrap();
        let mut b = [0u8; 1];
        rx.read_exact(&mut b).unwrap();
        assert!(t.elapsed() < Duration::from_millis(100), "{:?}", t.elapsed());
    }
    // The reverse path is spliced too.
    rx.write_all(b"ack").unwrap();
    let mut b = [0u8; 3];
    tx.read_exact(&mut b).unwrap();
    assert_eq!(&b, b"ack");
}

#[test]
fn wrong_key_rejected() {
    let relay = common::relay();
    let signal = relay.signal_addr().to_string();
    let mut grant = register(signal.as_str(), Role::Sender, 5).unwrap();
    grant.key[0] ^= 0xFF;
    assert!(matches!(attach(&grant, Role::Sender), Err(RelayError::Auth(5))));
}

#[test]
fn unknown_channel_rejected() {
    let relay = common::relay();
    let mut grant = register(relay.signal_addr(), Role::Sender, 5).unwrap();
    grant.channel_id = 6;
    assert!(matches!(
        attach(&grant, Role::Sender),
        Err(RelayError::UnknownChannel(6))
    ));
}

#[test]
fn duplicate_role_conflicts() {
    let relay = common::relay();
    let grant = register(relay.signal_addr(), Role::Sender, 5).unwrap();
    let _first = attach(&grant, Role::Sender).unwrap();
    assert!(matches!(
        register(relay.signal_addr(), Role::Sender, 5),
        Err(RelayError::Conflict {
            channel_id: 5,
            role: Role::Sender
        })
    ));
    assert!(matches!(attach(&grant, Role::Sender), Err(RelayError::Conflict { .. })));
}

#[test]
fn capacity_limit_enforced() {
    let mut cfg = RelayConfig::loopback();
    cfg.max_channels = 2;
    let relay = run_relay(cfg).unwrap();
    register(relay.signal_addr(), Role::Sender, 1).unwrap();
    register(relay.signal_addr(), Role::Sender, 2).unwrap();
    assert!(matches!(
        register(relay.signal_addr(), Role::Sender, 3),
        Err(RelayError::Capacity(2))
    ));
    // Existing channels still accept their other role.
    register(relay.signal_addr(), Role::Receiver, 2).unwrap();
}

#[test]
fn unpaired_channel_expires() {
    let mut cfg = RelayConfig::loopback();
    cfg.ttl = Duration::from_millis(200);
    let relay = run_relay(cfg).unwrap();
    let grant = register(relay.signal_addr(), Role::Sender, 4).unwrap();
    let mut parked = attach(&grant, Role::Sender).unwrap();
    parked.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let t = Instant::now();
    let mut b = [0u8; 1];
    // The relay closes the parked connection on expiry.
    assert_eq!(parked.read(&mut b).unwrap_or(0), 0);
    assert!(t.elapsed() < Duration::from_secs(2));
    assert_eq!(relay.stats().channels_registered, 0);
    assert!(matches!(
        attach(&grant, Role::Receiver),
        Err(RelayError::UnknownChannel(4))
    ));
}

#[test]
fn malformed_signaling_gets_400() {
    let relay = common::relay();
    let mut s = TcpStream::connect(relay.signal_addr()).unwrap();
    s.write_all(b"HELLO\n").unwrap();
    let mut reply = String::new();
    s.read_to_string(&mut reply).unwrap();
    assert!(reply.starts_with("ERR 400 "), "{reply}");
}

#[test]
fn bad_preamble_rejected_with_reason() {
    let relay = common::relay();
    let mut s = TcpStream::connect(relay.relay_addr()).unwrap();
    s.write_all(&[b'X'; 29]).unwrap();
    let mut reply = Vec::new();
    s.read_to_end(&mut reply).unwrap();
    assert_eq!(reply, vec![0xFF, 0x01]);
}

#[test]
fn shutdown_closes_active_channels() {
    let relay = common::relay();
    let (_tx, mut rx) = pair(&relay.signal_addr().to_string(), 3);
    let stats = relay.stats();
    assert_eq!(stats.channels_paired, 1);
    let t = Instant::now();
    relay.shutdown();
    rx.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut b = [0u8; 1];
    assert_eq!(rx.read(&mut b).unwrap_or(0), 0);
    assert!(t.elapsed() < Duration::from_secs(3));
}

#[test]
fn channel_can_be_reused_after_close() {
    let relay = common::relay();
    let signal = relay.signal_addr().to_string();
    for round in 0..2 {
        let (tx, rx) = pair(&signal, 77);
        let got = transfer(tx, rx, payload(round, 1000));
        assert_eq!(got, payload(round, 1000));
        // Let the relay tear the splice down.
        let t = Instant::now();
        while relay.stats().channels_registered > 0 && t.elapsed() < Duration::from_secs(2) {
            thread::sleep(Duration::from_millis(5));
        }
    }
    assert_eq!(relay.stats().channels_paired, 2);
}
