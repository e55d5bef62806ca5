//! Messages, their wire framing, and the link delay model.
//!
//! Frame layout: `u32` length of the rest, `u8` kind, vector clock as a `u16`
//! entry count followed by (`u16` worker, `u64` step) pairs, then the payload:
//! the sender's `u16` id and the bincode-encoded body. All integers are
//! little-endian.

use std::io::{Read, Write};
use std::net::TcpStream;

use serde::{Deserialize, Serialize};

use crate::causality::{VectorClock, WorkerId};
use crate::error::{Error, Result};

use super::learner::{Counter, LearnerState, Metadata};
use super::syncer::GlobalFragment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    Metadata = 1,
    FragmentPullRequest = 2,
    FragmentPayload = 3,
    GlobalFragment = 4,
    RecoveryRequest = 5,
    RecoveryPayload = 6,
    Stop = 7,
}

impl MessageKind {
    fn from_u8(v: u8) -> Result<Self> {
        use MessageKind::*;
        Ok(match v {
            1 => Metadata,
            2 => FragmentPullRequest,
            3 => FragmentPayload,
            4 => GlobalFragment,
            5 => RecoveryRequest,
            6 => RecoveryPayload,
            7 => Stop,
            _ => return Err(Error::Codec(format!("unknown message kind {v}"))),
        })
    }
}

/// A learner's answer to a pull: its fragment as of the pull, plus the
/// counters and version that go with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulledFragment {
    pub learner: u16,
    pub round: u64,
    pub fragment: u32,
    pub t_m: u64,
    pub counter: Counter,
    pub version: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Body {
    Metadata(Metadata),
    PullRequest { round: u64, fragment: u32 },
    Payload(PulledFragment),
    Global(GlobalFragment),
    RecoveryRequest { t_s: u64 },
    RecoveryPayload { t_s: u64, peer_known: u64, state: Option<Box<LearnerState>> },
    Stop,
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Metadata(_) => MessageKind::Metadata,
            Body::PullRequest { .. } => MessageKind::FragmentPullRequest,
            Body::Payload(_) => MessageKind::FragmentPayload,
            Body::Global(_) => MessageKind::GlobalFragment,
            Body::RecoveryRequest { .. } => MessageKind::RecoveryRequest,
            Body::RecoveryPayload { .. } => MessageKind::RecoveryPayload,
            Body::Stop => MessageKind::Stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: WorkerId,
    pub vclock: VectorClock,
    pub body: Body,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

pub fn encode_frame(m: &Message) -> Result<Vec<u8>> {
    let mut rest = vec![m.kind() as u8];
    let n = u16::try_from(m.vclock.len()).map_err(|_| Error::Codec("vector clock too large".into()))?;
    rest.extend_from_slice(&n.to_le_bytes());
    for (w, s) in m.vclock.entries() {
        rest.extend_from_slice(&w.to_wire().to_le_bytes());
        rest.extend_from_slice(&s.to_le_bytes());
    }
    rest.extend_from_slice(&m.sender.to_wire().to_le_bytes());
    rest.extend(bincode::serialize(&m.body)?);
    let len = u32::try_from(rest.len()).map_err(|_| Error::Codec("frame too large".into()))?;
    let mut out = len.to_le_bytes().to_vec();
    out.extend(rest);
    Ok(out)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Codec("truncated frame".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one frame body (everything after the length prefix).
pub fn decode_frame_body(bytes: &[u8]) -> Result<Message> {
    let mut c = Cursor(bytes);
    let kind = MessageKind::from_u8(c.take(1)?[0])?;
    let n = c.u16()?;
    let mut vclock = VectorClock::new();
    for _ in 0..n {
        let w = WorkerId::from_wire(c.u16()?);
        vclock.observe(w, c.u64()?);
    }
    let sender = WorkerId::from_wire(c.u16()?);
    let body: Body = bincode::deserialize(c.0)?;
    if body.kind() != kind {
        return Err(Error::Codec(format!("frame kind {kind:?} does not match body {:?}", body.kind())));
    }
    Ok(Message { sender, vclock, body })
}

pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    let mut c = Cursor(bytes);
    let len = u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize;
    if c.0.len() != len {
        return Err(Error::Codec(format!("frame declares {len} bytes, found {}", c.0.len())));
    }
    decode_frame_body(c.0)
}

pub fn write_frame<W: Write>(w: &mut W, m: &Message) -> Result<()> {
    w.write_all(&encode_frame(m)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut body)?;
    decode_frame_body(&body)
}

/// Framed messages over one TCP connection.
pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpLink { stream })
    }

    pub fn connect(addr: &str) -> Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn send(&mut self, m: &Message) -> Result<()> {
        write_frame(&mut self.stream, m)
    }

    pub fn recv(&mut self) -> Result<Message> {
        read_frame(&mut self.stream)
    }
}

/// Latency plus serialization delay; `bandwidth` in bits per second, 0 for
/// an unlimited link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency: f64,
    pub bandwidth: f64,
}

impl LinkModel {
    pub fn delay(&self, bits: f64) -> f64 {
        if self.bandwidth > 0.0 {
            self.latency + bits / self.bandwidth
        } else {
            self.latency
        }
    }
}

/// Delivery clock of one directed link: nothing overtakes an earlier message.
#[derive(Debug, Clone, Copy, Default)]
pub struct FifoClock {
    last: f64,
}

impl FifoClock {
    pub fn deliver_at(&mut self, now: f64, delay: f64) -> f64 {
        self.last = (now + delay).max(self.last);
        self.last
    }
}
