//! Per-institution protocol state machine. It decides who holds the model
//! and where it goes next; the training itself happens outside.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{Message, MessageKind, ModelPacket};
use crate::controller::ControlDirective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeState {
    Idle,
    AwaitingModel,
    Training,
    Evaluating,
    Broadcasting,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// Leaves `Idle`; the initiator goes straight to `Training`.
    Start {
        initiator: bool,
    },
    Received(Message),
    TrainingComplete,
    /// Local evaluation finished; `packet` is what goes to the successor.
    /// The directive inside it, if any, replaces the node's own and decides
    /// the successor; a converged directive starts the final broadcast.
    EvaluationComplete {
        packet: ModelPacket,
    },
    /// The final broadcast packet has been handed to the transport.
    BroadcastFlushed,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Start { .. } => "start",
            Event::Received(m) => match m.kind() {
                MessageKind::ModelPacket => "model-packet",
                MessageKind::ScoreReport => "score-report",
                MessageKind::ControlDirective => "control-directive",
            },
            Event::TrainingComplete => "training-complete",
            Event::EvaluationComplete { .. } => "evaluation-complete",
            Event::BroadcastFlushed => "broadcast-flushed",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("node {node}: event `{event}` is illegal in state {state:?}")]
    IllegalEvent {
        node: u32,
        state: NodeState,
        event: &'static str,
    },
    #[error("node {node} is not in the directive sequence")]
    NotInSequence { node: u32 },
    #[error("node {node}: outgoing packet names sender {sender}")]
    WrongSender { node: u32, sender: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: u32,
    pub message: Message,
}

#[derive(Debug, Clone)]
pub struct Node {
    id: u32,
    state: NodeState,
    directive: ControlDirective,
    /// Last model received; forwarded verbatim (re-signed) while broadcasting.
    inbox: Option<ModelPacket>,
}

impl Node {
    pub fn new(id: u32, directive: ControlDirective) -> Self {
        Self {
            id,
            state: NodeState::Idle,
            directive,
            inbox: None,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn state(&self) -> NodeState {
        self.state
    }

    pub fn directive(&self) -> &ControlDirective {
        &self.directive
    }

    pub fn inbox(&self) -> Option<&ModelPacket> {
        self.inbox.as_ref()
    }

    pub fn holds_token(&self) -> bool {
        matches!(self.state, NodeState::Training | NodeState::Evaluating)
    }

    fn illegal(&self, event: &Event) -> ProtocolError {
        ProtocolError::IllegalEvent {
            node: self.id,
            state: self.state,
            event: event.name(),
        }
    }

    fn position(&self, d: &ControlDirective) -> Result<usize, ProtocolError> {
        d.sequence
            .iter()
            .position(|&k| k == self.id)
            .ok_or(ProtocolError::NotInSequence { node: self.id })
    }

    /// Next hop along the sequence of a converged directive, if any.
    fn broadcast_successor(&self, d: &ControlDirective) -> Result<Option<u32>, ProtocolError> {
        let pos = self.position(d)?;
        Ok(d.sequence.get(pos + 1).copied())
    }

    /// Applies one event. On error the node is left untouched.
    pub fn advance(&mut self, event: Event) -> Result<Vec<Outgoing>, ProtocolError> {
        use NodeState::*;
        if self.state == Terminated {
            return Err(self.illegal(&event));
        }
        match (self.state, event) {
            (Idle, Event::Start { initiator }) => {
                self.position(&self.directive.clone())?;
                self.state = if initiator { Training } else { AwaitingModel };
                Ok(Vec::new())
            }
            (_, Event::Received(Message::Model(p)))
                if p.directive.as_ref().is_some_and(|d| d.converged) && self.state != Broadcasting =>
            {
                let d = p.directive.clone().unwrap();
                let next = self.broadcast_successor(&d)?;
                self.directive = d;
                let mut forward = p.clone();
                forward.sender = self.id;
                self.inbox = Some(p);
                self.state = Broadcasting;
                Ok(next
                    .map(|to| Outgoing {
                        to,
                        message: Message::Model(forward),
                    })
                    .into_iter()
                    .collect())
            }
            (AwaitingModel, Event::Received(Message::Model(p))) => {
                if let Some(d) = &p.directive {
                    self.position(d)?;
                    self.directive = d.clone();
                }
                self.inbox = Some(p);
                self.state = Training;
                Ok(Vec::new())
            }
            (Idle | AwaitingModel, Event::Received(Message::Directive(d))) => {
                self.position(&d)?;
                self.directive = d;
                Ok(Vec::new())
            }
            (Training, Event::TrainingComplete) => {
                self.state = Evaluating;
                Ok(Vec::new())
            }
            (Evaluating, Event::EvaluationComplete { packet }) => {
                if packet.sender != self.id {
                    return Err(ProtocolError::WrongSender {
                        node: self.id,
                        sender: packet.sender,
                    });
                }
                let directive = packet.directive.clone().unwrap_or_else(|| self.directive.clone());
                if directive.converged {
                    let next = self.broadcast_successor(&directive)?;
                    self.directive = directive;
                    self.state = Broadcasting;
                    return Ok(next
                        .map(|to| Outgoing {
                            to,
                            message: Message::Model(packet),
                        })
                        .into_iter()
                        .collect());
                }
                let to = if packet.directive.is_some() {
                    // cycle boundary: the new order starts over
                    self.position(&directive)?;
                    directive.sequence[0]
                } else {
                    let pos = self.position(&directive)?;
                    directive.sequence[(pos + 1) % directive.sequence.len()]
                };
                self.directive = directive;
                self.state = AwaitingModel;
                Ok(vec![Outgoing {
                    to,
                    message: Message::Model(packet),
                }])
            }
            (Broadcasting, Event::BroadcastFlushed) => {
                self.state = Terminated;
                Ok(Vec::new())
            }
            (_, event) => Err(self.illegal(&event)),
        }
    }
}
