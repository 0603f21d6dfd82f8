//! In-process message router: FIFO per (sender, receiver), full message log,
//! and optional fault injection for exercising the leakage audit.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{FedError, Message, MessageKind};
use crate::datamodel::BankId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartyId {
    Srv,
    Fc,
    Client(BankId),
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Srv => f.write_str("srv"),
            PartyId::Fc => f.write_str("fc"),
            PartyId::Client(b) => write!(f, "client:{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Discrepancy,
    FlagCollection,
    Training,
    Inference,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Discrepancy => "discrepancy",
            Phase::FlagCollection => "flag_collection",
            Phase::Training => "training",
            Phase::Inference => "inference",
        }
    }
}

/// Deliberate routing bugs. Each fires at most once per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fault {
    /// Copies the first client flag batch to Srv as well as FC.
    CopyRawFlagToSrv,
    /// Copies the first Srv flag request (account numbers) to FC.
    IdentityToFc,
    /// Delivers a flag request meant for one bank to another bank too.
    NonIntersectionToClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub id: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub phase: Phase,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Router {
    log: Vec<Envelope>,
    // (to, from) -> positions in `log`
    queues: BTreeMap<(PartyId, PartyId), VecDeque<usize>>,
    faults: Vec<Fault>,
    injected: Vec<(Fault, u64)>,
    first_request_to: Option<PartyId>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_faults(faults: &[Fault]) -> Self {
        Self { faults: faults.to_vec(), ..Self::default() }
    }

    pub fn set_faults(&mut self, faults: &[Fault]) {
        self.faults = faults.to_vec();
        self.injected.clear();
        self.first_request_to = None;
    }

    pub fn log(&self) -> &[Envelope] {
        &self.log
    }

    /// Messages produced by fault injection, with the fault that made them.
    pub fn injected(&self) -> &[(Fault, u64)] {
        &self.injected
    }

    fn fired(&self, f: Fault) -> bool {
        self.injected.iter().any(|(g, _)| *g == f)
    }

    fn enqueue(&mut self, from: PartyId, to: PartyId, phase: Phase, kind: MessageKind, payload: Vec<u8>) -> u64 {
        let id = self.log.len() as u64;
        self.queues
            .entry((to.clone(), from.clone()))
            .or_default()
            .push_back(self.log.len());
        self.log.push(Envelope { id, from, to, phase, kind, payload });
        id
    }

    pub fn send(&mut self, from: &PartyId, to: &PartyId, phase: Phase, msg: &Message) -> Result<u64, FedError> {
        let payload = bincode::serialize(msg).map_err(|e| FedError::Codec(e.to_string()))?;
        let kind = msg.kind();
        let id = self.enqueue(from.clone(), to.clone(), phase, kind, payload.clone());

        for fault in self.faults.clone() {
            if self.fired(fault) {
                continue;
            }
            let copy_to = match (fault, kind) {
                (Fault::CopyRawFlagToSrv, MessageKind::FlagTriples) => Some(PartyId::Srv),
                (Fault::IdentityToFc, MessageKind::FlagRequest) => Some(PartyId::Fc),
                (Fault::NonIntersectionToClient, MessageKind::FlagRequest) => match &self.first_request_to {
                    None => {
                        self.first_request_to = Some(to.clone());
                        None
                    }
                    Some(first) if first != to => Some(first.clone()),
                    Some(_) => None,
                },
                _ => None,
            };
            if let Some(target) = copy_to {
                let copy = self.enqueue(from.clone(), target, phase, kind, payload.clone());
                self.injected.push((fault, copy));
            }
        }
        Ok(id)
    }

    /// Next message for `to`, taking senders in a fixed order.
    pub fn recv(&mut self, to: &PartyId) -> Result<Option<(u64, PartyId, Message)>, FedError> {
        let key = self
            .queues
            .iter()
            .find(|((t, _), q)| t == to && !q.is_empty())
            .map(|(k, _)| k.clone());
        match key {
            Some((to, from)) => self.recv_from(&to, &from),
            None => Ok(None),
        }
    }

    pub fn recv_from(&mut self, to: &PartyId, from: &PartyId) -> Result<Option<(u64, PartyId, Message)>, FedError> {
        let Some(pos) = self
            .queues
            .get_mut(&(to.clone(), from.clone()))
            .and_then(VecDeque::pop_front)
        else {
            return Ok(None);
        };
        let env = &self.log[pos];
        let msg = bincode::deserialize(&env.payload).map_err(|e| FedError::Codec(e.to_string()))?;
        Ok(Some((env.id, env.from.clone(), msg)))
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.log.iter().map(|e| e.payload.len() as u64).sum()
    }

    /// `sender,receiver,bytes,phase` rows.
    pub fn write_log_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sender", "receiver", "bytes", "phase"])?;
        for e in &self.log {
            out.write_record([
                e.from.to_string(),
                e.to.to_string(),
                e.payload.len().to_string(),
                e.phase.name().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
