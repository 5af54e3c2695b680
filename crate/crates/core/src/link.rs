//! Wire protocol between the controller and the perception process.
//!
//! Frames travel controller -> perception over a reliable stream, each
//! message preceded by its length as a little-endian `u32`:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FRM1"
//!      4     4  seq            (u32 LE)
//!      8     8  timestamp_us   (u64 LE)
//!     16     2  width          (u16 LE)
//!     18     2  height         (u16 LE)
//!     20     1  kind           (0 = pseudo-depth raw16, 1 = reference raw16)
//!     21   2wh  samples        (u16 LE, row-major)
//! ```
//!
//! Decisions travel back as single ASCII datagrams: `"<DIR> <seq> <fraction>"`,
//! e.g. `"LEFT 42 0.1200"`.

use std::collections::VecDeque;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::percept::{AvoidCommandMsg, Direction};
use crate::simcam::{DepthMap, RAW_MAX};

pub const FRAME_MAGIC: [u8; 4] = *b"FRM1";
pub const FRAME_HEADER_LEN: usize = 21;
pub const DEFAULT_FRAME_PORT: u16 = 47001;
pub const DEFAULT_COMMAND_PORT: u16 = 47002;
pub const FRAME_ADDR_ENV: &str = "SERVOSIM_FRAME_ADDR";
pub const COMMAND_ADDR_ENV: &str = "SERVOSIM_CMD_ADDR";
pub const DEFAULT_STALENESS: f64 = 0.6;
/// Frames held while the perception peer is unreachable.
pub const FRAME_BACKLOG: usize = 8;

const MAX_DATAGRAM: usize = 64;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated message: {declared} bytes declared, {available} available")]
    Truncated { declared: usize, available: usize },
    #[error("length mismatch: header implies {expected} bytes, message has {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("unknown command token {0:?}")]
    UnknownToken(String),
    #[error("non-numeric command field {0:?}")]
    BadNumber(String),
    #[error("trailing data after command")]
    TrailingGarbage,
    #[error("command is not ASCII")]
    NotAscii,
    #[error("peer closed the connection")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    PseudoDepth = 0,
    Reference = 1,
}

impl FrameKind {
    fn from_byte(b: u8) -> Result<Self, LinkError> {
        match b {
            0 => Ok(FrameKind::PseudoDepth),
            1 => Ok(FrameKind::Reference),
            k => Err(LinkError::UnknownKind(k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMessage {
    pub seq: u32,
    pub timestamp_us: u64,
    pub width: u16,
    pub height: u16,
    pub kind: FrameKind,
    pub samples: Vec<u16>,
}

impl FrameMessage {
    /// Quantizes a depth map to raw16 samples.
    pub fn from_depth(seq: u32, timestamp_us: u64, kind: FrameKind, depth: &DepthMap) -> Self {
        Self {
            seq,
            timestamp_us,
            width: depth.width as u16,
            height: depth.height as u16,
            kind,
            samples: depth.values.iter().map(|v| v.round().clamp(0.0, RAW_MAX) as u16).collect(),
        }
    }

    pub fn to_depth(&self) -> DepthMap {
        DepthMap::new(
            self.width as usize,
            self.height as usize,
            self.samples.iter().map(|&s| s as f64).collect(),
        )
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + 2 * self.samples.len()
    }
}

/// Encodes one frame message (without the stream length prefix).
pub fn encode_frame(msg: &FrameMessage) -> Vec<u8> {
    debug_assert_eq!(msg.samples.len(), msg.width as usize * msg.height as usize);
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    out.extend_from_slice(&msg.timestamp_us.to_le_bytes());
    out.extend_from_slice(&msg.width.to_le_bytes());
    out.extend_from_slice(&msg.height.to_le_bytes());
    out.push(msg.kind as u8);
    for s in &msg.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Decodes exactly one frame message.
pub fn decode_frame(bytes: &[u8]) -> Result<FrameMessage, LinkError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(LinkError::Truncated {
            declared: FRAME_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FRAME_MAGIC {
        return Err(LinkError::BadMagic(magic));
    }
    let seq = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let timestamp_us = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let width = u16::from_le_bytes(bytes[16..18].try_into().unwrap());
    let height = u16::from_le_bytes(bytes[18..20].try_into().unwrap());
    let kind = FrameKind::from_byte(bytes[20])?;
    let expected = FRAME_HEADER_LEN + 2 * width as usize * height as usize;
    if bytes.len() < expected {
        return Err(LinkError::Truncated {
            declared: expected,
            available: bytes.len(),
        });
    }
    if bytes.len() != expected {
        return Err(LinkError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let samples = bytes[FRAME_HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(FrameMessage {
        seq,
        timestamp_us,
        width,
        height,
        kind,
        samples,
    })
}

/// Length prefix plus message, ready to write to a stream.
pub fn encode_framed(msg: &FrameMessage) -> Vec<u8> {
    let body = encode_frame(msg);
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one complete length-prefixed message. Fails rather than
/// returning a partial message when fewer bytes than declared are present.
pub fn decode_framed(bytes: &[u8]) -> Result<FrameMessage, LinkError> {
    if bytes.len() < 4 {
        return Err(LinkError::Truncated {
            declared: 4,
            available: bytes.len(),
        });
    }
    let declared = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if body.len() < declared {
        return Err(LinkError::Truncated {
            declared,
            available: body.len(),
        });
    }
    if body.len() > declared {
        return Err(LinkError::LengthMismatch {
            expected: declared,
            actual: body.len(),
        });
    }
    decode_frame(body)
}

/// Reassembles length-prefixed messages from an arbitrary byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<FrameMessage>, LinkError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let declared = u32::from_le_bytes(self.buf[0..4].try_into().unwrap()) as usize;
        if self.buf.len() < 4 + declared {
            return Ok(None);
        }
        let msg = decode_frame(&self.buf[4..4 + declared]);
        self.buf.drain(..4 + declared);
        msg.map(Some)
    }

    pub fn pending_bytes(&self) -> usize {
        self.buf.len()
    }
}

pub fn encode_command(cmd: &AvoidCommandMsg) -> Vec<u8> {
    format!("{} {} {:.4}", cmd.direction.token(), cmd.seq, cmd.white_fraction).into_bytes()
}

fn is_decimal(s: &str) -> bool {
    let mut parts = s.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

pub fn decode_command(bytes: &[u8]) -> Result<AvoidCommandMsg, LinkError> {
    let text = std::str::from_utf8(bytes).map_err(|_| LinkError::NotAscii)?;
    if !text.is_ascii() {
        return Err(LinkError::NotAscii);
    }
    let mut fields = text.split(' ');
    let token = fields.next().unwrap_or("");
    let direction = Direction::from_token(token).ok_or_else(|| LinkError::UnknownToken(token.to_string()))?;
    let seq_text = fields.next().unwrap_or("");
    if seq_text.is_empty() || !seq_text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(LinkError::BadNumber(seq_text.to_string()));
    }
    let seq = seq_text.parse::<u32>().map_err(|_| LinkError::BadNumber(seq_text.to_string()))?;
    let frac_text = fields.next().unwrap_or("");
    if !is_decimal(frac_text) {
        return Err(LinkError::BadNumber(frac_text.to_string()));
    }
    let white_fraction = frac_text.parse::<f64>().map_err(|_| LinkError::BadNumber(frac_text.to_string()))?;
    if fields.next().is_some() {
        return Err(LinkError::TrailingGarbage);
    }
    Ok(AvoidCommandMsg {
        direction,
        seq,
        white_fraction,
    })
}

/// A command together with how long ago it arrived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceivedCommand {
    pub msg: AvoidCommandMsg,
    pub received_at: f64,
    pub stale: bool,
}

/// Latest-wins command slot with a staleness window. Times are in seconds on
/// whatever clock the caller supplies.
#[derive(Debug, Clone)]
pub struct LatestCommand {
    staleness: f64,
    latest: Option<(AvoidCommandMsg, f64)>,
}

impl LatestCommand {
    pub fn new(staleness: f64) -> Self {
        Self { staleness, latest: None }
    }

    /// Stores `msg` if it is newer than what we hold. Returns whether it was kept.
    pub fn offer(&mut self, msg: AvoidCommandMsg, now: f64) -> bool {
        if self.latest.is_some_and(|(held, _)| msg.seq <= held.seq) {
            return false;
        }
        self.latest = Some((msg, now));
        true
    }

    pub fn latest(&self, now: f64) -> Option<ReceivedCommand> {
        self.latest.map(|(msg, at)| ReceivedCommand {
            msg,
            received_at: at,
            stale: now - at > self.staleness,
        })
    }

    /// Newest command if it is still within the staleness window.
    pub fn fresh(&self, now: f64) -> Option<AvoidCommandMsg> {
        self.latest(now).filter(|c| !c.stale).map(|c| c.msg)
    }
}

/// Bounded FIFO that drops the oldest entry when full.
#[derive(Debug)]
pub struct DropOldest<T> {
    cap: usize,
    items: VecDeque<T>,
    dropped: usize,
}

impl<T> DropOldest<T> {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            items: VecDeque::with_capacity(cap),
            dropped: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.cap {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    /// Empties the queue, returning only the newest entry.
    pub fn take_newest(&mut self) -> Option<T> {
        let newest = self.items.pop_back();
        self.dropped += self.items.len();
        self.items.clear();
        newest
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

/// Resolves an endpoint from an explicit value, then the environment, then
/// the loopback default.
pub fn resolve_addr(explicit: Option<&str>, env_var: &str, default_port: u16) -> io::Result<SocketAddr> {
    let text = explicit
        .map(str::to_string)
        .or_else(|| std::env::var(env_var).ok())
        .unwrap_or_else(|| format!("127.0.0.1:{default_port}"));
    text.parse()
        .map_err(|e| io::Error::new(ErrorKind::InvalidInput, format!("bad address {text:?}: {e}")))
}

/// Controller end: streams frames out and receives command datagrams.
#[derive(Debug)]
pub struct ControllerLink {
    frame_addr: SocketAddr,
    stream: Option<TcpStream>,
    backlog: DropOldest<Vec<u8>>,
    cmd_socket: UdpSocket,
    commands: LatestCommand,
}

/// Opens the controller side of the two channels: binds the command datagram
/// socket and connects the frame stream if the perception peer is listening.
pub fn run_channel_pair(
    frame_endpoint: SocketAddr,
    command_endpoint: SocketAddr,
    staleness_window: f64,
) -> Result<ControllerLink, LinkError> {
    let cmd_socket = UdpSocket::bind(command_endpoint)?;
    cmd_socket.set_nonblocking(true)?;
    let mut link = ControllerLink {
        frame_addr: frame_endpoint,
        stream: None,
        backlog: DropOldest::new(FRAME_BACKLOG),
        cmd_socket,
        commands: LatestCommand::new(staleness_window),
    };
    link.try_connect();
    Ok(link)
}

impl ControllerLink {
    pub fn command_addr(&self) -> io::Result<SocketAddr> {
        self.cmd_socket.local_addr()
    }

    pub fn set_frame_addr(&mut self, addr: SocketAddr) {
        self.frame_addr = addr;
        self.stream = None;
    }

    pub fn is_connected(&self) -> bool {
        self.stream.is_some()
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.len()
    }

    fn try_connect(&mut self) -> bool {
        if self.stream.is_none() {
            if let Ok(s) = TcpStream::connect_timeout(&self.frame_addr, Duration::from_millis(200)) {
                let _ = s.set_nodelay(true);
                self.stream = Some(s);
            }
        }
        self.stream.is_some()
    }

    /// Sends a frame, buffering up to [`FRAME_BACKLOG`] frames while the
    /// peer is absent.
    pub fn send_frame(&mut self, msg: &FrameMessage) -> Result<(), LinkError> {
        self.backlog.push(encode_framed(msg));
        if !self.try_connect() {
            return Ok(());
        }
        while let Some(bytes) = self.backlog.pop() {
            let stream = self.stream.as_mut().expect("connected");
            if let Err(e) = stream.write_all(&bytes) {
                self.stream = None;
                if matches!(e.kind(), ErrorKind::BrokenPipe | ErrorKind::ConnectionReset) {
                    return Err(LinkError::Closed);
                }
                return Err(e.into());
            }
        }
        Ok(())
    }

    fn recv_datagram(&self) -> Result<Option<AvoidCommandMsg>, LinkError> {
        let mut buf = [0u8; MAX_DATAGRAM];
        match self.cmd_socket.recv(&mut buf) {
            Ok(n) => match decode_command(&buf[..n]) {
                Ok(m) => Ok(Some(m)),
                Err(e) => {
                    log::warn!("dropping malformed command datagram: {e}");
                    Ok(None)
                }
            },
            Err(e) if e.kind() == ErrorKind::WouldBlock => Err(LinkError::Io(e)),
            Err(e) => Err(e.into()),
        }
    }

    /// Drains pending datagrams into the latest-wins slot. Never blocks.
    pub fn poll(&mut self, now: f64) -> Result<(), LinkError> {
        loop {
            match self.recv_datagram() {
                Ok(Some(m)) => {
                    self.commands.offer(m, now);
                }
                Ok(None) => {}
                Err(LinkError::Io(e)) if e.kind() == ErrorKind::WouldBlock => return Ok(()),
                Err(e) => return Err(e),
            }
        }
    }

    pub fn latest(&self, now: f64) -> Option<ReceivedCommand> {
        self.commands.latest(now)
    }

    /// Blocks until a command with `seq >= min_seq` arrives or `timeout`
    /// elapses. Used to run the two ends in lockstep under a simulated clock.
    pub fn wait_for(&mut self, min_seq: u32, timeout: Duration) -> Result<Option<AvoidCommandMsg>, LinkError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.recv_datagram() {
                Ok(Some(m)) if m.seq >= min_seq => return Ok(Some(m)),
                Ok(_) => {}
                Err(LinkError::Io(e)) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    std::thread::sleep(Duration::from_micros(200));
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Closes the frame stream so the peer sees end-of-stream.
    pub fn close(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Drop for ControllerLink {
    fn drop(&mut self) {
        self.close();
    }
}

/// Perception end: accepts the frame stream and sends command datagrams.
#[derive(Debug)]
pub struct PerceptionLink {
    listener: TcpListener,
    stream: Option<TcpStream>,
    decoder: FrameDecoder,
    cmd_socket: UdpSocket,
    cmd_target: SocketAddr,
}

impl PerceptionLink {
    pub fn bind(frame_endpoint: SocketAddr, command_target: SocketAddr) -> Result<Self, LinkError> {
        let listener = TcpListener::bind(frame_endpoint)?;
        let local = if command_target.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
        let cmd_socket = UdpSocket::bind(local)?;
        Ok(Self {
            listener,
            stream: None,
            decoder: FrameDecoder::default(),
            cmd_socket,
            cmd_target: command_target,
        })
    }

    pub fn frame_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Waits for the controller to connect.
    pub fn accept(&mut self) -> Result<(), LinkError> {
        let (stream, _) = self.listener.accept()?;
        let _ = stream.set_nodelay(true);
        self.stream = Some(stream);
        Ok(())
    }

    /// Blocks until at least one complete frame is available and returns
    /// everything decoded so far. `Err(Closed)` at end of stream.
    pub fn recv_frames(&mut self) -> Result<Vec<FrameMessage>, LinkError> {
        if self.stream.is_none() {
            self.accept()?;
        }
        let mut out = Vec::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            while let Some(f) = self.decoder.next_frame()? {
                out.push(f);
            }
            if !out.is_empty() {
                return Ok(out);
            }
            let stream = self.stream.as_mut().expect("accepted");
            let n = match stream.read(&mut buf) {
                Ok(n) => n,
                Err(e) if e.kind() == ErrorKind::ConnectionReset => 0,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return Err(LinkError::Closed);
            }
            self.decoder.push(&buf[..n]);
        }
    }

    pub fn send_command(&self, msg: &AvoidCommandMsg) -> Result<(), LinkError> {
        self.cmd_socket.send_to(&encode_command(msg), self.cmd_target)?;
        Ok(())
    }
}
