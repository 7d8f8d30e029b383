//! RGBZ video streaming: capture-side depth processing, superframe packing,
//! codec piggybacking, framed TCP transport through a rendezvous relay, and
//! receiver-side preparation of 2048x2048 R,G,B,Z buffers for a hologram
//! engine.

pub mod codec;
pub mod container;
pub mod frame;
pub mod latency;
pub mod pipeline;
pub mod relay;
pub mod replay;
pub mod superframe;
pub mod synth;
pub mod transport;
