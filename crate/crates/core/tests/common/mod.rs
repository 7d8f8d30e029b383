#![allow(dead_code)]

use std::thread;

use rgbz::frame::{ColorImage, DepthMap, FrameRate, RgbzFrame, StreamHeader};
use rgbz::pipeline::{
    run_receiver, run_sender, ReceiverConfig, ReceiverReport, SenderConfig, SenderReport, SourceSpec,
};
use rgbz::relay::{run_relay, RelayConfig, RelayHandle};
use rgbz::synth::{Pattern, SynthParams};

pub fn relay() -> RelayHandle {
    run_relay(RelayConfig::loopback()).expect("loopback relay")
}

pub fn header(w: usize, h: usize) -> StreamHeader {
    StreamHeader::new(w, h, FrameRate::integer(30).unwrap(), Default::default()).unwrap()
}

/// Deterministic noisy frame.
pub fn noise_frame(w: usize, h: usize, seed: u64) -> RgbzFrame {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rgb: Vec<[u8; 3]> = (0..w * h).map(|_| rng.gen()).collect();
    let codes = (0..w * h).map(|_| rng.gen()).collect();
    RgbzFrame::new(
        ColorImage::from_rgb(w, h, &rgb).unwrap(),
        DepthMap::from_codes(w, h, codes).unwrap(),
        seed,
        seed,
    )
    .unwrap()
}

pub fn vga_synthetic(frames: u32) -> SynthParams {
    let mut p = SynthParams::new(
        640,
        480,
        FrameRate::integer(30).unwrap(),
        frames,
        Pattern::OrbitingSphere,
    );
    p.seed = 7;
    p
}

/// Runs a receiver and a sender on one channel of `relay` concurrently.
pub fn run_pair(
    relay: &RelayHandle,
    channel: u64,
    source: SourceSpec,
    tweak_sender: impl FnOnce(&mut SenderConfig),
    tweak_receiver: impl FnOnce(&mut ReceiverConfig),
) -> (SenderReport, ReceiverReport) {
    let signal = relay.signal_addr().to_string();
    let mut rcfg = ReceiverConfig::new(signal.clone(), channel);
    tweak_receiver(&mut rcfg);
    let receiver = thread::spawn(move || run_receiver(&rcfg));
    let mut scfg = SenderConfig::new(source, signal, channel);
    tweak_sender(&mut scfg);
    let sent = run_sender(&scfg).expect("sender");
    let received = receiver.join().unwrap().expect("receiver");
    (sent, received)
}
