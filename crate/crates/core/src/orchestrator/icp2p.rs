//! Ring training driven through the node state machines and a transport.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use crate::continual::reference_gradient;
use crate::controller::{odm_decide, ControlDirective};
use crate::data::{InstitutionDataset, Split};
use crate::metrics::MetricVector;
use crate::nn::DenoiserModel;
use crate::proto::{
    decode, encode, Envelope, Event, InProcess, Message, ModelPacket, Node, NodeState, Outgoing, Socket, Transport,
};
use crate::tensor::{ParamVector, Tensor};

use super::local::{train_round, Correction, RoundKey};
use super::report::{CorrectionStats, TranscriptEntry};
use super::{
    evaluate_split, initial_model, record_cycle, record_inputs, training_patches, validate_inputs, RunConfig, RunError,
    RunReport, TransportKind,
};

struct Ring {
    index: BTreeMap<u32, usize>,
    nodes: BTreeMap<u32, Node>,
    /// Each node's current copy of the weights.
    holdings: BTreeMap<u32, ParamVector>,
    transport: Box<dyn Transport>,
    in_flight: VecDeque<Vec<u8>>,
    report: RunReport,
}

impl Ring {
    fn check_token(&self) -> Result<(), RunError> {
        let holders = self.nodes.values().filter(|n| n.holds_token()).count();
        if holders > 1 {
            return Err(RunError::TokenInvariant(holders));
        }
        Ok(())
    }

    fn advance(&mut self, id: u32, event: Event) -> Result<(), RunError> {
        let node = self.nodes.get_mut(&id).expect("known node");
        let out = node.advance(event)?;
        let broadcasting = node.state() == NodeState::Broadcasting;
        self.check_token()?;
        for o in out {
            self.send(id, o, broadcasting)?;
        }
        if broadcasting {
            self.nodes.get_mut(&id).unwrap().advance(Event::BroadcastFlushed)?;
        }
        Ok(())
    }

    fn send(&mut self, from: u32, out: Outgoing, broadcast: bool) -> Result<(), RunError> {
        let bytes = encode(&out.message)?;
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        self.report.transcript.push(TranscriptEntry {
            index: self.report.transcript.len() as u64,
            from,
            to: out.to,
            kind: out.message.kind(),
            len: bytes.len() as u64,
            crc,
        });
        let stats = &mut self.report.messages;
        stats.model_packets += 1;
        stats.bytes += bytes.len() as u64;
        if broadcast {
            stats.broadcast_forwards += 1;
        }
        self.in_flight.push_back(bytes.clone());
        self.transport.send(Envelope {
            from,
            to: out.to,
            bytes,
        })?;
        Ok(())
    }

    fn deliver_all(&mut self) -> Result<(), RunError> {
        while let Some(env) = self.transport.recv()? {
            if self.in_flight.pop_front().as_deref() != Some(env.bytes.as_slice()) {
                return Err(RunError::CorruptDelivery);
            }
            let msg = decode(&env.bytes)?;
            if let Message::Model(p) = &msg {
                self.holdings.insert(env.to, p.params.clone());
            }
            self.advance(env.to, Event::Received(msg))?;
        }
        Ok(())
    }

    fn holder(&self) -> Option<u32> {
        self.nodes
            .values()
            .find(|n| n.state() == NodeState::Training)
            .map(|n| n.id())
    }
}

/// Ring-ordered federated continual learning with projected updates and the
/// controller deciding order and budgets between cycles. Runs until the
/// controller declares convergence or `T` cycles are done, then broadcasts
/// the final model around the ring.
pub fn run_icp2pfl(cfg: &RunConfig, datasets: &[InstitutionDataset]) -> Result<RunReport, RunError> {
    let started = Instant::now();
    validate_inputs(cfg, datasets, 2)?;
    let tc = &cfg.train;
    let ids: Vec<u32> = datasets.iter().map(|d| d.id()).collect();
    let patches = datasets
        .iter()
        .map(|d| training_patches(tc, d))
        .collect::<Result<Vec<_>, _>>()?;
    let characteristic: Vec<Vec<(Tensor, Tensor)>> = datasets
        .iter()
        .map(|d| d.patches(Split::Characteristic, tc.patch, tc.stride))
        .collect::<Result<_, _>>()?;

    let transport: Box<dyn Transport> = match &cfg.transport {
        TransportKind::InProcess => Box::new(InProcess::new()),
        TransportKind::Socket(addrs) if addrs.is_empty() => Box::new(Socket::loopback(&ids)?),
        TransportKind::Socket(addrs) => Box::new(Socket::bind(addrs)?),
    };
    let first = ControlDirective::initial(ids.clone(), tc);
    let mut ring = Ring {
        index: ids.iter().enumerate().map(|(i, &k)| (k, i)).collect(),
        nodes: ids.iter().map(|&k| (k, Node::new(k, first.clone()))).collect(),
        holdings: BTreeMap::new(),
        transport,
        in_flight: VecDeque::new(),
        report: RunReport::new("icp2pfl".into(), tc.seed, ids.clone()),
    };
    record_inputs(&mut ring.report, datasets, tc)?;
    for &k in &ids {
        ring.advance(k, Event::Start { initiator: k == ids[0] })?;
    }

    let init = initial_model(cfg);
    let mut cycle = 0u32;
    let mut global_round = 0u32;
    let mut cycle_metrics: BTreeMap<u32, MetricVector> = BTreeMap::new();

    while let Some(k) = ring.holder() {
        let slot = ring.index[&k];
        let node = &ring.nodes[&k];
        let directive = node.directive().clone();
        let incoming = node.inbox().cloned();
        let anchor = incoming.as_ref().map(|p| p.params.clone());
        let g_prev = incoming.as_ref().and_then(|p| p.g_prev.clone());

        let mut model = match (&anchor, tc.fine_tune) {
            (Some(a), true) => DenoiserModel::from_params(cfg.arch, a.clone())?,
            (None, _) => init.clone(),
            (Some(_), false) => DenoiserModel::new(
                cfg.arch,
                crate::data::splitmix64(tc.seed ^ (u64::from(k) << 32) ^ u64::from(cycle)),
            ),
        };
        let rounds = directive.rounds_for(k).expect("holder is in its own sequence");
        let mut stats = CorrectionStats {
            cycle: cycle + 1,
            institution: k,
            steps: 0,
            projected_steps: 0,
            mean_l1_gap: 0.0,
        };
        let correction = Correction {
            epsilon: tc.epsilon,
            g_prev: g_prev.as_ref(),
            anchor: anchor.as_ref(),
        };
        for round in 0..rounds {
            let key = RoundKey {
                institution: k,
                cycle,
                round,
                global_round,
            };
            train_round(
                &mut model,
                &patches[slot].pairs,
                tc,
                &key,
                Some(&correction),
                &mut stats,
            )?;
            global_round += 1;
        }
        ring.report.corrections.push(stats);
        ring.advance(k, Event::TrainingComplete)?;

        let metrics = evaluate_split(&model, &datasets[slot], Split::Characteristic, tc)?;
        cycle_metrics.insert(k, metrics);
        let g_ref = reference_gradient(&model, &characteristic[slot])?;

        let pos = directive.sequence.iter().position(|&x| x == k).unwrap();
        let next_directive = if pos + 1 == directive.sequence.len() {
            let scores = cycle_metrics
                .iter()
                .map(|(&id, mv)| Ok((id, cfg.scorer.score(mv, tc.psnr_cap)?)))
                .collect::<Result<BTreeMap<_, _>, RunError>>()?;
            let mut next = odm_decide(&scores, tc, &directive)?;
            ring.report.directives.push(next.clone());
            ring.report.converged = next.converged;
            record_cycle(&mut ring.report, &model, datasets, cycle + 1, tc, Some(&scores))?;
            ring.report.final_scores = scores;
            if next.converged || cycle + 1 >= tc.transmissions {
                next.converged = true;
                next = next.rotated_to(k);
            }
            cycle_metrics.clear();
            Some(next)
        } else {
            None
        };
        let at_boundary = next_directive.is_some();
        let packet = ModelPacket {
            sender: k,
            cycle,
            site_rounds: rounds,
            metrics,
            params: model.params().clone(),
            g_prev: Some(g_ref),
            directive: next_directive,
        };
        ring.holdings.insert(k, model.params().clone());
        ring.advance(k, Event::EvaluationComplete { packet })?;
        if at_boundary {
            cycle += 1;
        }
        ring.deliver_all()?;
    }

    if ring.nodes.values().any(|n| n.state() != NodeState::Terminated) {
        return Err(RunError::Stalled);
    }
    let digests: BTreeMap<u32, String> = ring.holdings.iter().map(|(&k, p)| (k, p.digest())).collect();
    let first_digest = digests.values().next().cloned().unwrap_or_default();
    if digests.len() != ids.len() || digests.values().any(|d| *d != first_digest) {
        return Err(RunError::DigestDisagreement);
    }
    let mut report = ring.report;
    report.final_params = ring.holdings.values().next().cloned();
    report.final_digest = first_digest;
    report.node_digests = digests;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
