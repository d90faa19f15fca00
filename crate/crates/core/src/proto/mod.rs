//! One-hop model transfer in the serverless ring: wire format, node state
//! machine and transports.

pub mod node;
pub mod transport;
pub mod wire;

pub use node::{Event, Node, NodeState, Outgoing, ProtocolError};
pub use transport::{Envelope, InProcess, Socket, Transport, TransportError};
pub use wire::{decode, encode, Message, MessageKind, ModelPacket, ScoreReport, WireError};
