//! Ordered, reliable delivery of encoded frames between nodes.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};

use thiserror::Error;

use super::wire::{declared_payload_len, frame_len, CRC_LEN, HEADER_LEN};

/// Frames larger than this are refused by the socket reader.
pub const MAX_FRAME: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no endpoint registered for node {0}")]
    UnknownNode(u32),
    #[error("frame of {0} bytes exceeds the transport limit")]
    FrameTooLarge(u64),
    #[error("socket i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: u32,
    pub to: u32,
    pub bytes: Vec<u8>,
}

/// Delivery is FIFO across the whole transport: `recv` returns envelopes in
/// the order they were sent.
pub trait Transport {
    fn name(&self) -> &'static str;
    fn send(&mut self, envelope: Envelope) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Option<Envelope>, TransportError>;
}

#[derive(Debug, Default)]
pub struct InProcess {
    queue: VecDeque<Envelope>,
}

impl InProcess {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for InProcess {
    fn name(&self) -> &'static str {
        "inproc"
    }

    fn send(&mut self, envelope: Envelope) -> Result<(), TransportError> {
        self.queue.push_back(envelope);
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Envelope>, TransportError> {
        Ok(self.queue.pop_front())
    }
}

/// TCP transport: one listener per node, one stream per ordered pair of
/// nodes. Frames go over the wire exactly as encoded; the reader uses the
/// length in the header to find the frame end.
pub struct Socket {
    listeners: BTreeMap<u32, TcpListener>,
    outgoing: HashMap<(u32, u32), TcpStream>,
    incoming: HashMap<(u32, u32), TcpStream>,
    /// Delivery order, kept by the sending side.
    pending: VecDeque<(u32, u32)>,
}

impl Socket {
    /// Binds one listener per `(node, address)`; port 0 picks a free port.
    pub fn bind(addresses: &[(u32, SocketAddr)]) -> Result<Self, TransportError> {
        let mut listeners = BTreeMap::new();
        for &(node, addr) in addresses {
            listeners.insert(node, TcpListener::bind(addr)?);
        }
        Ok(Self {
            listeners,
            outgoing: HashMap::new(),
            incoming: HashMap::new(),
            pending: VecDeque::new(),
        })
    }

    /// Loopback listeners on ephemeral ports.
    pub fn loopback(nodes: &[u32]) -> Result<Self, TransportError> {
        let addrs: Vec<_> = nodes
            .iter()
            .map(|&n| (n, SocketAddr::from(([127, 0, 0, 1], 0))))
            .collect();
        Self::bind(&addrs)
    }

    pub fn local_addr(&self, node: u32) -> Result<SocketAddr, TransportError> {
        Ok(self
            .listeners
            .get(&node)
            .ok_or(TransportError::UnknownNode(node))?
            .local_addr()?)
    }

    fn connect(&mut self, from: u32, to: u32) -> Result<(), TransportError> {
        if self.outgoing.contains_key(&(from, to)) {
            return Ok(());
        }
        let listener = self.listeners.get(&to).ok_or(TransportError::UnknownNode(to))?;
        let stream = TcpStream::connect(listener.local_addr()?)?;
        stream.set_nodelay(true)?;
        let (accepted, _) = listener.accept()?;
        self.outgoing.insert((from, to), stream);
        self.incoming.insert((from, to), accepted);
        Ok(())
    }
}

fn read_frame(stream: &mut TcpStream) -> Result<Vec<u8>, TransportError> {
    let mut frame = vec![0u8; HEADER_LEN];
    stream.read_exact(&mut frame)?;
    let payload = declared_payload_len(&frame).expect("full header");
    let total = frame_len(payload)
        .filter(|&t| t <= MAX_FRAME)
        .ok_or(TransportError::FrameTooLarge(payload))?;
    frame.resize(total as usize, 0);
    stream.read_exact(&mut frame[HEADER_LEN..])?;
    debug_assert!(frame.len() >= HEADER_LEN + CRC_LEN);
    Ok(frame)
}

impl Transport for Socket {
    fn name(&self) -> &'static str {
        "socket"
    }

    fn send(&mut self, envelope: Envelope) -> Result<(), TransportError> {
        if !self.listeners.contains_key(&envelope.from) {
            return Err(TransportError::UnknownNode(envelope.from));
        }
        self.connect(envelope.from, envelope.to)?;
        let stream = self.outgoing.get_mut(&(envelope.from, envelope.to)).unwrap();
        stream.write_all(&envelope.bytes)?;
        stream.flush()?;
        self.pending.push_back((envelope.from, envelope.to));
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Envelope>, TransportError> {
        let Some((from, to)) = self.pending.pop_front() else {
            return Ok(None);
        };
        let stream = self.incoming.get_mut(&(from, to)).expect("connected on send");
        let bytes = read_frame(stream)?;
        Ok(Some(Envelope { from, to, bytes }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControlDirective;
    use crate::proto::wire::{encode, Message};

    fn frame(n: u32) -> Vec<u8> {
        encode(&Message::Directive(ControlDirective {
            sequence: vec![n, n + 1],
            site_rounds: vec![1, 1],
            trans_rounds: 1,
            streak: 0,
            converged: false,
        }))
        .unwrap()
    }

    fn exercise(t: &mut dyn Transport) -> Vec<Envelope> {
        let sends = [(1, 2, frame(1)), (2, 3, frame(2)), (1, 2, frame(3)), (3, 1, frame(4))];
        for (from, to, bytes) in sends.iter().cloned() {
            t.send(Envelope { from, to, bytes }).unwrap();
        }
        let mut got = Vec::new();
        while let Some(e) = t.recv().unwrap() {
            got.push(e);
        }
        got
    }

    #[test]
    fn transports_deliver_identically() {
        let a = exercise(&mut InProcess::new());
        let b = exercise(&mut Socket::loopback(&[1, 2, 3]).unwrap());
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn socket_rejects_unknown_nodes() {
        let mut s = Socket::loopback(&[1]).unwrap();
        assert!(matches!(
            s.send(Envelope {
                from: 1,
                to: 7,
                bytes: frame(1)
            }),
            Err(TransportError::UnknownNode(7))
        ));
    }
}
