//! External transcoder adapters driven with `cat` as an identity codec.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use rgbz::codec::{CodecError, CodecId, ExternalCodec, ExternalDecoder, ExternalEncoder};
use rgbz::superframe::{pack_superframe, Superframe};

fn superframes(n: u64) -> Vec<Superframe> {
    (0..n)
        .map(|i| pack_superframe(&common::noise_frame(32, 24, i)).unwrap())
        .collect()
}

#[test]
fn cat_pair_round_trips_thirty_frames_in_order() {
    let hdr = common::header(32, 24);
    let input = superframes(30);
    let mut codec = ExternalCodec::open(&hdr, "cat", "cat").unwrap();
    let mut out = Vec::new();
    for sf in &input {
        codec.feed(sf).unwrap();
        while let Some(f) = codec.try_recv().unwrap() {
            out.push(f);
        }
    }
    let report = codec.close().unwrap();
    out.extend(report.remaining);
    assert_eq!((report.frames_in, report.frames_out), (30, 30));
    assert_eq!(out, input);
}

#[test]
fn encoder_and_decoder_sessions_with_cat() {
    let hdr = common::header(32, 24);
    let input = superframes(5);
    let mut enc = ExternalEncoder::open(&hdr, "cat").unwrap();
    for sf in &input {
        enc.feed(sf).unwrap();
    }
    let flush = enc.close().unwrap();
    assert_eq!(flush.frames_in, 5);
    let mut units = Vec::new();
    while let Some(u) = enc.try_recv().unwrap() {
        units.push(u);
    }
    units.extend(flush.remaining);
    assert!(!units.is_empty());
    assert!(units[0].is_keyframe());
    assert!(units.iter().all(|u| u.codec_id() == CodecId::External));
    let bytes: Vec<u8> = units.iter().flat_map(|u| u.payload().to_vec()).collect();
    let expected: Vec<u8> = input.iter().flat_map(|s| s.data().to_vec()).collect();
    assert_eq!(bytes, expected);

    let mut dec = ExternalDecoder::open(&hdr, "cat").unwrap();
    for u in &units {
        dec.feed(u).unwrap();
    }
    let mut frames = Vec::new();
    for _ in 0..5 {
        frames.push(dec.recv().unwrap().unwrap());
    }
    let flush = dec.close().unwrap();
    assert!(flush.remaining.is_empty());
    assert_eq!(frames, input);
}

#[test]
fn nonexistent_command_is_spawn_error() {
    let hdr = common::header(32, 24);
    let err = ExternalEncoder::open(&hdr, "/nonexistent/transcoder --flag")
        .err()
        .unwrap();
    assert!(matches!(err, CodecError::Spawn { ref command, .. } if command.contains("/nonexistent/transcoder")));
}

#[test]
fn killed_transcoder_errors_without_hanging() {
    let hdr = common::header(32, 24);
    let frames = superframes(3);
    let mut codec = ExternalCodec::open(&hdr, "cat", "cat").unwrap();
    codec.set_timeout(Duration::from_secs(2));
    codec.feed(&frames[0]).unwrap();
    let status = Command::new("kill")
        .args(["-9", &codec.encoder_pid().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    let started = Instant::now();
    let mut failed = false;
    for sf in frames.iter().cycle().take(200) {
        if codec.feed(sf).is_err() {
            failed = true;
            break;
        }
    }
    let closed = codec.close();
    assert!(failed || closed.is_err(), "killed transcoder went unnoticed");
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn stalled_transcoder_times_out() {
    let hdr = common::header(32, 24);
    // Never reads its input.
    let mut enc = ExternalEncoder::open(&hdr, "sleep 30").unwrap();
    enc.set_timeout(Duration::from_millis(300));
    let started = Instant::now();
    let frames = superframes(1);
    let mut result = Ok(());
    for _ in 0..200 {
        result = enc.feed(&frames[0]);
        if result.is_err() {
            break;
        }
    }
    assert!(matches!(result, Err(CodecError::Timeout(_))), "{result:?}");
    assert!(enc.close().is_err());
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn failing_transcoder_reports_status_and_close_is_idempotent() {
    let hdr = common::header(32, 24);
    let mut enc = ExternalEncoder::open(&hdr, "sh -c 'echo boom >&2; exit 3'").unwrap();
    let first = enc.close();
    match first {
        Err(CodecError::Transcoder { status, diagnostics }) => {
            assert!(status.contains('3'), "{status}");
            assert!(diagnostics.contains("boom"), "{diagnostics}");
        }
        other => panic!("unexpected {other:?}"),
    }
    let again = enc.close().unwrap();
    assert!(again.remaining.is_empty());
}

#[test]
fn decoder_rejects_reference_units() {
    let hdr = common::header(32, 24);
    let mut dec = ExternalDecoder::open(&hdr, "cat").unwrap();
    let au = rgbz::codec::ref_encode(&superframes(1)[0]).unwrap();
    assert!(matches!(dec.feed(&au), Err(CodecError::Adapter { .. })));
    dec.close().unwrap();
}

#[test]
fn wrong_size_superframe_rejected() {
    let hdr = common::header(32, 24);
    let mut enc = ExternalEncoder::open(&hdr, "cat").unwrap();
    let other = pack_superframe(&common::noise_frame(16, 8, 0)).unwrap();
    assert!(enc.feed(&other).is_err());
    enc.close().unwrap();
}
