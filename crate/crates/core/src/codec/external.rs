//! External transcoder adapters.
//!
//! A transcoder is any child process that reads one byte stream on standard
//! input and writes another on standard output, e.g. an `ffmpeg` invocation
//! reading `-f rawvideo -pix_fmt rgb0`. Each process gets a feed thread and a
//! drain thread so that writing input and reading output progress
//! independently; the feed side is bounded to two frames.
//!
//! Command templates are split shell-style and may reference `{width}`,
//! `{height}` (superframe height, twice the content height),
//! `{content_height}` and `{fps}`.
//!
//! Encoded output has no framing of its own, so [`ExternalEncoder`] emits one
//! access unit per read from the transcoder's standard output. Only the first
//! unit is flagged as a keyframe. Decode latency in frames depends on the
//! transcoder; output order always matches input order.

use std::io::{self, Read, Write};
use std::process::{Child, ChildStdout, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{CodecError, CodecId, EncodedAccessUnit, DEFAULT_HANDSHAKE_TIMEOUT, FLAG_KEYFRAME};
use crate::frame::StreamHeader;
use crate::superframe::{superframe_byte_size, Superframe};

/// ffmpeg + libx264 encoder reading raw superframes, writing an Annex B stream.
pub const H264_ENCODE_TEMPLATE: &str = "ffmpeg -hide_banner -loglevel error -f rawvideo -pix_fmt rgb0 \
     -s {width}x{height} -r {fps} -i - -c:v libx264 -preset ultrafast -tune zerolatency -crf 10 -f h264 -";
/// ffmpeg decoder for [`H264_ENCODE_TEMPLATE`] output, writing raw superframes.
pub const H264_DECODE_TEMPLATE: &str = "ffmpeg -hide_banner -loglevel error -f h264 -i - -f rawvideo -pix_fmt rgb0 -";

const FEED_DEPTH: usize = 2;
const CHUNK_READ: usize = 256 * 1024;

/// Counts returned when a session is closed, plus output drained during close.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushReport<T> {
    pub frames_in: u64,
    pub frames_out: u64,
    pub remaining: Vec<T>,
}

/// Expands placeholders and splits the template into argv.
pub fn expand_template(template: &str, hdr: &StreamHeader) -> Result<Vec<String>, CodecError> {
    let fps = if hdr.fps.den == 1 {
        hdr.fps.num.to_string()
    } else {
        format!("{}/{}", hdr.fps.num, hdr.fps.den)
    };
    let expanded = template
        .replace("{width}", &hdr.width().to_string())
        .replace("{height}", &(2 * hdr.height()).to_string())
        .replace("{content_height}", &hdr.height().to_string())
        .replace("{fps}", &fps);
    let argv =
        shlex::split(&expanded).ok_or_else(|| CodecError::Template(format!("unbalanced quoting in `{template}`")))?;
    if argv.is_empty() {
        return Err(CodecError::Template("empty command".into()));
    }
    Ok(argv)
}

#[derive(Debug, Clone, Copy)]
enum Framing {
    /// Fixed-size raw superframes.
    Raw(usize),
    /// Whatever each read returns.
    Chunks,
}

struct Transcoder {
    command: String,
    child: Child,
    feed: Option<SyncSender<Vec<u8>>>,
    feed_thread: Option<JoinHandle<io::Result<()>>>,
    output: Option<Receiver<io::Result<Vec<u8>>>>,
    drain_thread: Option<JoinHandle<()>>,
    stderr_thread: Option<JoinHandle<String>>,
    status: Option<ExitStatus>,
    timeout: Duration,
}

impl Transcoder {
    fn spawn(argv: &[String], stdin: Stdio, framing: Option<Framing>) -> Result<Self, CodecError> {
        let command = argv.join(" ");
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(stdin)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| CodecError::Spawn {
                command: command.clone(),
                source,
            })?;

        let (feed, feed_thread) = match child.stdin.take() {
            Some(mut stdin) => {
                let (tx, rx) = mpsc::sync_channel::<Vec<u8>>(FEED_DEPTH);
                let handle = thread::spawn(move || {
                    for buf in rx {
                        stdin.write_all(&buf)?;
                    }
                    stdin.flush()
                });
                (Some(tx), Some(handle))
            }
            None => (None, None),
        };

        let (output, drain_thread) = match framing {
            Some(framing) => {
                let stdout = child.stdout.take().expect("stdout is piped");
                let (tx, rx) = mpsc::channel();
                let handle = thread::spawn(move || drain(stdout, framing, tx));
                (Some(rx), Some(handle))
            }
            None => (None, None),
        };

        let mut stderr = child.stderr.take().expect("stderr is piped");
        let stderr_thread = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            String::from_utf8_lossy(&buf).into_owned()
        });

        Ok(Self {
            command,
            child,
            feed,
            feed_thread,
            output,
            drain_thread,
            stderr_thread: Some(stderr_thread),
            status: None,
            timeout: DEFAULT_HANDSHAKE_TIMEOUT,
        })
    }

    fn take_stdout(&mut self) -> Option<ChildStdout> {
        self.child.stdout.take()
    }

    fn send(&mut self, buf: Vec<u8>) -> Result<(), CodecError> {
        let feed = self.feed.as_ref().ok_or_else(|| CodecError::Transcoder {
            status: "input closed".into(),
            diagnostics: String::new(),
        })?;
        let deadline = Instant::now() + self.timeout;
        let mut buf = buf;
        loop {
            match feed.try_send(buf) {
                Ok(()) => return Ok(()),
                Err(mpsc::TrySendError::Full(b)) if Instant::now() < deadline => {
                    buf = b;
                    thread::sleep(Duration::from_millis(1));
                }
                Err(mpsc::TrySendError::Full(_)) => {
                    // Child stopped reading; killing it unblocks the feed thread.
                    let _ = self.child.kill();
                    return Err(CodecError::Timeout(self.timeout));
                }
                Err(mpsc::TrySendError::Disconnected(_)) => {
                    // Feed thread exited: the child's input is gone.
                    return Err(self.fail("transcoder stopped accepting input"));
                }
            }
        }
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, CodecError> {
        let Some(rx) = self.output.as_ref() else {
            return Ok(None);
        };
        match rx.recv_timeout(timeout) {
            Ok(Ok(buf)) => Ok(Some(buf)),
            Ok(Err(e)) => Err(CodecError::Bitstream(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(CodecError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Ok(None),
        }
    }

    fn try_recv(&mut self) -> Result<Option<Vec<u8>>, CodecError> {
        let Some(rx) = self.output.as_ref() else {
            return Ok(None);
        };
        match rx.try_recv() {
            Ok(Ok(buf)) => Ok(Some(buf)),
            Ok(Err(e)) => Err(CodecError::Bitstream(e.to_string())),
            Err(_) => Ok(None),
        }
    }

    fn fail(&mut self, what: &str) -> CodecError {
        let status = match self.child.try_wait() {
            Ok(Some(s)) => s.to_string(),
            _ => what.to_string(),
        };
        CodecError::Transcoder {
            status,
            diagnostics: self.command.clone(),
        }
    }

    /// Closes input, drains remaining output and reaps the child.
    fn finish(&mut self) -> Result<Vec<Vec<u8>>, CodecError> {
        self.feed.take();
        let mut rest = Vec::new();
        let mut drain_error = None;
        let mut deadline = Instant::now() + self.timeout;
        let mut killed = false;
        loop {
            let mut progressed = false;
            let mut disconnected = true;
            if let Some(rx) = self.output.as_ref() {
                disconnected = false;
                loop {
                    match rx.try_recv() {
                        Ok(Ok(buf)) => {
                            rest.push(buf);
                            progressed = true;
                        }
                        Ok(Err(e)) => drain_error = Some(e),
                        Err(mpsc::TryRecvError::Empty) => break,
                        Err(mpsc::TryRecvError::Disconnected) => {
                            disconnected = true;
                            break;
                        }
                    }
                }
            }
            let feed_done = self.feed_thread.as_ref().is_none_or(|h| h.is_finished());
            if disconnected && feed_done {
                break;
            }
            if progressed {
                deadline = Instant::now() + self.timeout;
            } else if Instant::now() >= deadline && !killed {
                // Child stopped consuming or producing; unblock both threads.
                let _ = self.child.kill();
                killed = true;
            }
            thread::sleep(Duration::from_millis(1));
        }
        self.output.take();
        let feed_result = self.feed_thread.take().map(|h| h.join());
        if let Some(h) = self.drain_thread.take() {
            let _ = h.join();
        }
        if killed {
            self.status = self.child.wait().ok();
            return Err(CodecError::Timeout(self.timeout));
        }
        let status = self.wait_with_deadline()?;
        let diagnostics = self
            .stderr_thread
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default();
        if !status.success() {
            return Err(CodecError::Transcoder {
                status: status.to_string(),
                diagnostics,
            });
        }
        if let Some(Ok(Err(e))) = feed_result {
            return Err(CodecError::Transcoder {
                status: format!("input write failed: {e}"),
                diagnostics,
            });
        }
        if let Some(e) = drain_error {
            return Err(CodecError::Bitstream(e.to_string()));
        }
        Ok(rest)
    }

    fn wait_with_deadline(&mut self) -> Result<ExitStatus, CodecError> {
        if let Some(s) = self.status {
            return Ok(s);
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(s)) => {
                    self.status = Some(s);
                    return Ok(s);
                }
                Ok(None) if Instant::now() >= deadline => {
                    let _ = self.child.kill();
                    let s = self.child.wait().ok();
                    self.status = s;
                    return Err(CodecError::Timeout(self.timeout));
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    return Err(CodecError::Transcoder {
                        status: e.to_string(),
                        diagnostics: String::new(),
                    })
                }
            }
        }
    }
}

impl Drop for Transcoder {
    fn drop(&mut self) {
        if self.status.is_none() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

fn drain(mut stdout: ChildStdout, framing: Framing, tx: mpsc::Sender<io::Result<Vec<u8>>>) {
    loop {
        let item = match framing {
            Framing::Chunks => {
                let mut buf = vec![0u8; CHUNK_READ];
                match stdout.read(&mut buf) {
                    Ok(0) => return,
                    Ok(n) => {
                        buf.truncate(n);
                        Ok(buf)
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => Err(e),
                }
            }
            Framing::Raw(len) => {
                let mut buf = vec![0u8; len];
                let mut filled = 0;
                while filled < len {
                    match stdout.read(&mut buf[filled..]) {
                        Ok(0) => break,
                        Ok(n) => filled += n,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            return;
                        }
                    }
                }
                match filled {
                    0 => return,
                    n if n == len => Ok(buf),
                    n => Err(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        format!("transcoder ended with a partial frame of {n}/{len} bytes"),
                    )),
                }
            }
        };
        let stop = item.is_err();
        if tx.send(item).is_err() || stop {
            return;
        }
    }
}

fn check_dims(sf: &Superframe, hdr: &StreamHeader) -> Result<(), CodecError> {
    if sf.width() != hdr.width() || sf.height() != 2 * hdr.height() {
        return Err(crate::superframe::SuperframeError::Format {
            width: sf.width(),
            height: sf.height(),
            expected_w: hdr.width(),
            expected_h: 2 * hdr.height(),
        }
        .into());
    }
    Ok(())
}

/// Raw superframes in, opaque access units out.
pub struct ExternalEncoder {
    proc: Transcoder,
    hdr: StreamHeader,
    frames_in: u64,
    units_out: u64,
    closed: bool,
}

impl ExternalEncoder {
    pub fn open(hdr: &StreamHeader, template: &str) -> Result<Self, CodecError> {
        let argv = expand_template(template, hdr)?;
        Ok(Self {
            proc: Transcoder::spawn(&argv, Stdio::piped(), Some(Framing::Chunks))?,
            hdr: *hdr,
            frames_in: 0,
            units_out: 0,
            closed: false,
        })
    }

    pub fn pid(&self) -> u32 {
        self.proc.child.id()
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.proc.timeout = timeout;
    }

    pub fn feed(&mut self, sf: &Superframe) -> Result<(), CodecError> {
        check_dims(sf, &self.hdr)?;
        self.proc.send(sf.data().to_vec())?;
        self.frames_in += 1;
        Ok(())
    }

    fn wrap(&mut self, chunk: Vec<u8>) -> Result<EncodedAccessUnit, CodecError> {
        let flags = if self.units_out == 0 { FLAG_KEYFRAME } else { 0 };
        self.units_out += 1;
        EncodedAccessUnit::new(CodecId::External, flags, chunk)
    }

    /// Next unit if one is ready.
    pub fn try_recv(&mut self) -> Result<Option<EncodedAccessUnit>, CodecError> {
        match self.proc.try_recv()? {
            Some(chunk) => self.wrap(chunk).map(Some),
            None => Ok(None),
        }
    }

    /// Waits up to the handshake timeout for the next unit; `None` at end of output.
    pub fn recv(&mut self) -> Result<Option<EncodedAccessUnit>, CodecError> {
        let timeout = self.proc.timeout;
        match self.proc.recv(timeout)? {
            Some(chunk) => self.wrap(chunk).map(Some),
            None => Ok(None),
        }
    }

    pub fn close(&mut self) -> Result<FlushReport<EncodedAccessUnit>, CodecError> {
        if self.closed {
            return Ok(FlushReport {
                frames_in: self.frames_in,
                frames_out: self.units_out,
                remaining: Vec::new(),
            });
        }
        self.closed = true;
        let rest = self.proc.finish()?;
        let remaining = rest.into_iter().map(|c| self.wrap(c)).collect::<Result<Vec<_>, _>>()?;
        Ok(FlushReport {
            frames_in: self.frames_in,
            frames_out: self.units_out,
            remaining,
        })
    }
}

/// Access units in, raw superframes out.
pub struct ExternalDecoder {
    proc: Transcoder,
    hdr: StreamHeader,
    units_in: u64,
    frames_out: u64,
    closed: bool,
}

impl ExternalDecoder {
    pub fn open(hdr: &StreamHeader, template: &str) -> Result<Self, CodecError> {
        let argv = expand_template(template, hdr)?;
        let frame_len = superframe_byte_size(hdr.width(), hdr.height())?;
        Ok(Self {
            proc: Transcoder::spawn(&argv, Stdio::piped(), Some(Framing::Raw(frame_len)))?,
            hdr: *hdr,
            units_in: 0,
            frames_out: 0,
            closed: false,
        })
    }

    pub fn pid(&self) -> u32 {
        self.proc.child.id()
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.proc.timeout = timeout;
    }

    pub fn feed(&mut self, au: &EncodedAccessUnit) -> Result<(), CodecError> {
        if au.codec_id() != CodecId::External {
            return Err(CodecError::Adapter {
                expected: CodecId::External,
                actual: au.codec_id(),
            });
        }
        self.proc.send(au.payload().to_vec())?;
        self.units_in += 1;
        Ok(())
    }

    fn wrap(&mut self, buf: Vec<u8>) -> Result<Superframe, CodecError> {
        self.frames_out += 1;
        Ok(Superframe::new(self.hdr.width(), 2 * self.hdr.height(), buf)?)
    }

    pub fn try_recv(&mut self) -> Result<Option<Superframe>, CodecError> {
        match self.proc.try_recv()? {
            Some(buf) => self.wrap(buf).map(Some),
            None => Ok(None),
        }
    }

    pub fn recv(&mut self) -> Result<Option<Superframe>, CodecError> {
        let timeout = self.proc.timeout;
        match self.proc.recv(timeout)? {
            Some(buf) => self.wrap(buf).map(Some),
            None => Ok(None),
        }
    }

    pub fn close(&mut self) -> Result<FlushReport<Superframe>, CodecError> {
        if self.closed {
            return Ok(FlushReport {
                frames_in: self.units_in,
                frames_out: self.frames_out,
                remaining: Vec::new(),
            });
        }
        self.closed = true;
        let rest = self.proc.finish()?;
        let remaining = rest.into_iter().map(|b| self.wrap(b)).collect::<Result<Vec<_>, _>>()?;
        Ok(FlushReport {
            frames_in: self.units_in,
            frames_out: self.frames_out,
            remaining,
        })
    }
}

/// Encoder and decoder processes joined by an OS pipe: superframes in,
/// decoded superframes out. Used to measure what a lossy codec does to the
/// depth half.
pub struct ExternalCodec {
    encoder: Transcoder,
    decoder: Transcoder,
    hdr: StreamHeader,
    frames_in: u64,
    frames_out: u64,
    closed: bool,
}

impl ExternalCodec {
    pub fn open(hdr: &StreamHeader, encode_template: &str, decode_template: &str) -> Result<Self, CodecError> {
        let enc_argv = expand_template(encode_template, hdr)?;
        let dec_argv = expand_template(decode_template, hdr)?;
        let frame_len = superframe_byte_size(hdr.width(), hdr.height())?;
        let mut encoder = Transcoder::spawn(&enc_argv, Stdio::piped(), None)?;
        let pipe = encoder.take_stdout().expect("encoder stdout is piped");
        let decoder = Transcoder::spawn(&dec_argv, Stdio::from(pipe), Some(Framing::Raw(frame_len)))?;
        Ok(Self {
            encoder,
            decoder,
            hdr: *hdr,
            frames_in: 0,
            frames_out: 0,
            closed: false,
        })
    }

    pub fn encoder_pid(&self) -> u32 {
        self.encoder.child.id()
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.encoder.timeout = timeout;
        self.decoder.timeout = timeout;
    }

    pub fn feed(&mut self, sf: &Superframe) -> Result<(), CodecError> {
        check_dims(sf, &self.hdr)?;
        self.encoder.send(sf.data().to_vec())?;
        self.frames_in += 1;
        Ok(())
    }

    fn wrap(&mut self, buf: Vec<u8>) -> Result<Superframe, CodecError> {
        self.frames_out += 1;
        Ok(Superframe::new(self.hdr.width(), 2 * self.hdr.height(), buf)?)
    }

    pub fn try_recv(&mut self) -> Result<Option<Superframe>, CodecError> {
        match self.decoder.try_recv()? {
            Some(buf) => self.wrap(buf).map(Some),
            None => Ok(None),
        }
    }

    pub fn recv(&mut self) -> Result<Option<Superframe>, CodecError> {
        let timeout = self.decoder.timeout;
        match self.decoder.recv(timeout)? {
            Some(buf) => self.wrap(buf).map(Some),
            None => Ok(None),
        }
    }

    pub fn close(&mut self) -> Result<FlushReport<Superframe>, CodecError> {
        if self.closed {
            return Ok(FlushReport {
                frames_in: self.frames_in,
                frames_out: self.frames_out,
                remaining: Vec::new(),
            });
        }
        self.closed = true;
        let enc = self.encoder.finish();
        let dec = self.decoder.finish();
        enc?;
        let remaining = dec?.into_iter().map(|b| self.wrap(b)).collect::<Result<Vec<_>, _>>()?;
        Ok(FlushReport {
            frames_in: self.frames_in,
            frames_out: self.frames_out,
            remaining,
        })
    }
}
