//! Binary framing for peer messages.
//!
//! ```text
//! "ICP2" | version u16 | type u8 | flags u8 | payload length u64 | payload | crc32
//! ```
//!
//! Everything is little-endian and the CRC (IEEE) covers header and payload.

use thiserror::Error;

use crate::controller::ControlDirective;
use crate::metrics::MetricVector;
use crate::tensor::ParamVector;

pub const MAGIC: [u8; 4] = *b"ICP2";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const CRC_LEN: usize = 4;

pub const FLAG_G_PREV: u8 = 1;
pub const FLAG_DIRECTIVE: u8 = 1 << 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated: need at least {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("header declares {declared} payload bytes but frame carries {actual}")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("crc mismatch: frame says {expected:08x}, computed {actual:08x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("flags {flags:#04x} not valid for message type {kind}")]
    BadFlags { kind: u8, flags: u8 },
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
    #[error("cannot encode: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum MessageKind {
    ModelPacket = 1,
    ScoreReport = 2,
    ControlDirective = 3,
}

impl MessageKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::ModelPacket),
            2 => Some(Self::ScoreReport),
            3 => Some(Self::ControlDirective),
            _ => None,
        }
    }
}

/// The model handed to the one-hop successor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPacket {
    pub sender: u32,
    pub cycle: u32,
    pub site_rounds: u32,
    pub metrics: MetricVector,
    pub params: ParamVector,
    /// Sender's reference gradient on its characteristic set.
    pub g_prev: Option<ParamVector>,
    pub directive: Option<ControlDirective>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub institution: u32,
    pub cycle: u32,
    pub metrics: MetricVector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Model(ModelPacket),
    Score(ScoreReport),
    Directive(ControlDirective),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Model(_) => MessageKind::ModelPacket,
            Message::Score(_) => MessageKind::ScoreReport,
            Message::Directive(_) => MessageKind::ControlDirective,
        }
    }
}

/// Payload length declared in an encoded header; `None` when the header is
/// incomplete.
pub fn declared_payload_len(header: &[u8]) -> Option<u64> {
    let bytes: [u8; 8] = header.get(8..16)?.try_into().ok()?;
    Some(u64::from_le_bytes(bytes))
}

pub fn frame_len(payload_len: u64) -> Option<u64> {
    payload_len.checked_add((HEADER_LEN + CRC_LEN) as u64)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_metrics(out: &mut Vec<u8>, m: &MetricVector) {
    for v in [m.psnr, m.ssim, m.mse] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `count u64` then the raw little-endian f32 values.
pub fn encode_param_vector(out: &mut Vec<u8>, p: &ParamVector) {
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for v in p.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_directive(out: &mut Vec<u8>, d: &ControlDirective) {
    put_u32(out, d.sequence.len() as u32);
    for &k in &d.sequence {
        put_u32(out, k);
    }
    for &s in &d.site_rounds {
        put_u32(out, s);
    }
    put_u32(out, d.trans_rounds);
    put_u32(out, d.streak);
    out.push(u8::from(d.converged));
}

fn check_metrics(m: &MetricVector) -> Result<(), WireError> {
    if m.psnr.is_nan() || m.ssim.is_nan() || m.mse.is_nan() {
        return Err(WireError::Invalid("metrics contain NaN"));
    }
    Ok(())
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut payload = Vec::new();
    let mut flags = 0u8;
    match msg {
        Message::Model(p) => {
            if p.params.is_empty() {
                return Err(WireError::Invalid("empty parameter vector"));
            }
            if let Some(g) = &p.g_prev {
                if g.len() != p.params.len() {
                    return Err(WireError::Invalid("g_prev length differs from params"));
                }
            }
            check_metrics(&p.metrics)?;
            put_u32(&mut payload, p.sender);
            put_u32(&mut payload, p.cycle);
            put_u32(&mut payload, p.site_rounds);
            put_metrics(&mut payload, &p.metrics);
            encode_param_vector(&mut payload, &p.params);
            if let Some(g) = &p.g_prev {
                flags |= FLAG_G_PREV;
                encode_param_vector(&mut payload, g);
            }
            if let Some(d) = &p.directive {
                d.validate().map_err(|_| WireError::Invalid("inconsistent directive"))?;
                flags |= FLAG_DIRECTIVE;
                put_directive(&mut payload, d);
            }
        }
        Message::Score(s) => {
            check_metrics(&s.metrics)?;
            put_u32(&mut payload, s.institution);
            put_u32(&mut payload, s.cycle);
            put_metrics(&mut payload, &s.metrics);
        }
        Message::Directive(d) => {
            d.validate().map_err(|_| WireError::Invalid("inconsistent directive"))?;
            put_directive(&mut payload, d);
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(msg.kind() as u8);
    out.push(flags);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(WireError::Malformed("payload ends early"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn metrics(&mut self) -> Result<MetricVector, WireError> {
        let m = MetricVector {
            psnr: self.f64()?,
            ssim: self.f64()?,
            mse: self.f64()?,
        };
        if m.psnr.is_nan() || m.ssim.is_nan() || m.mse.is_nan() {
            return Err(WireError::Malformed("metrics contain NaN"));
        }
        Ok(m)
    }

    fn params(&mut self) -> Result<ParamVector, WireError> {
        let count = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if count.checked_mul(4).map_or(true, |b| b > remaining) {
            return Err(WireError::Malformed("parameter count exceeds payload"));
        }
        let raw = self.take(count as usize * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ParamVector::new(values).map_err(|_| WireError::Malformed("non-finite parameter"))
    }

    fn directive(&mut self) -> Result<ControlDirective, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(WireError::Malformed("sequence length exceeds payload"));
        }
        let sequence = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let site_rounds = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let trans_rounds = self.u32()?;
        let streak = self.u32()?;
        let converged = match self.u8()? {
            0 => false,
            1 => true,
            _ => return Err(WireError::Malformed("converged flag is not 0 or 1")),
        };
        let d = ControlDirective {
            sequence,
            site_rounds,
            trans_rounds,
            streak,
            converged,
        };
        d.validate()
            .map_err(|_| WireError::Malformed("inconsistent directive"))?;
        Ok(d)
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Malformed("trailing bytes after payload"));
        }
        Ok(())
    }
}

/// Parses one frame. Checks run in a fixed order: size, magic, version,
/// declared length, CRC, then the payload itself.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN + CRC_LEN,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let declared = declared_payload_len(bytes).unwrap();
    let actual = (bytes.len() - HEADER_LEN - CRC_LEN) as u64;
    if declared != actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    let body_end = bytes.len() - CRC_LEN;
    let expected = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if expected != computed {
        return Err(WireError::CrcMismatch {
            expected,
            actual: computed,
        });
    }

    let kind_byte = bytes[6];
    let flags = bytes[7];
    let kind = MessageKind::from_u8(kind_byte).ok_or(WireError::UnknownType(kind_byte))?;
    let allowed = match kind {
        MessageKind::ModelPacket => FLAG_G_PREV | FLAG_DIRECTIVE,
        _ => 0,
    };
    if flags & !allowed != 0 {
        return Err(WireError::BadFlags { kind: kind_byte, flags });
    }
    let mut r = Reader {
        buf: &bytes[HEADER_LEN..body_end],
        pos: 0,
    };
    let msg = match kind {
        MessageKind::ModelPacket => {
            let sender = r.u32()?;
            let cycle = r.u32()?;
            let site_rounds = r.u32()?;
            let metrics = r.metrics()?;
            let params = r.params()?;
            if params.is_empty() {
                return Err(WireError::Malformed("empty parameter vector"));
            }
            let g_prev = if flags & FLAG_G_PREV != 0 {
                let g = r.params()?;
                if g.len() != params.len() {
                    return Err(WireError::Malformed("g_prev length differs from params"));
                }
                Some(g)
            } else {
                None
            };
            let directive = if flags & FLAG_DIRECTIVE != 0 {
                Some(r.directive()?)
            } else {
                None
            };
            Message::Model(ModelPacket {
                sender,
                cycle,
                site_rounds,
                metrics,
                params,
                g_prev,
                directive,
            })
        }
        MessageKind::ScoreReport => Message::Score(ScoreReport {
            institution: r.u32()?,
            cycle: r.u32()?,
            metrics: r.metrics()?,
        }),
        MessageKind::ControlDirective => Message::Directive(r.directive()?),
    };
    r.finish()?;
    Ok(msg)
}

/// Reads a stand-alone parameter-vector encoding (no frame).
pub fn decode_param_vector(bytes: &[u8]) -> Result<ParamVector, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let p = r.params()?;
    r.finish()?;
    Ok(p)
}

/// Reads consecutive parameter-vector encodings until the buffer is empty.
pub fn decode_param_vectors(bytes: &[u8]) -> Result<Vec<ParamVector>, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < r.buf.len() {
        out.push(r.params()?);
    }
    Ok(out)
}
