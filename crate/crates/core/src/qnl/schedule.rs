//! Per-link key-relay scheduling: deficit-weighted round robin for
//! continuous flows and a FIFO for on-demand requests.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{FlowKey, LinkId};

pub const DEFAULT_QUANTUM_BITS: u64 = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkTicket {
    pub link: LinkId,
    pub flow: FlowKey,
    pub amount_bits: u64,
    #[serde(default)]
    pub deadline: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("no commodity has work queued")]
    NoActiveCommodities,
}

#[derive(Debug, Clone, PartialEq)]
struct DwrrFlow {
    key: FlowKey,
    weight: f64,
    deficit: f64,
    backlog_bits: u64,
}

/// Deficit-weighted round robin. Each visit to a backlogged flow adds
/// `quantum * weight / max_weight` to its deficit; tickets are whole bytes
/// and never exceed one quantum. A flow without backlog is skipped and keeps
/// its deficit.
#[derive(Debug, Clone, PartialEq)]
pub struct DwrrScheduler {
    link: LinkId,
    quantum_bits: u64,
    flows: Vec<DwrrFlow>,
    cursor: usize,
    /// The flow at `cursor` already received its quantum this round.
    in_visit: bool,
}

impl DwrrScheduler {
    pub fn new(link: LinkId, quantum_bits: u64) -> Self {
        DwrrScheduler {
            link,
            quantum_bits: quantum_bits.max(8),
            flows: Vec::new(),
            cursor: 0,
            in_visit: false,
        }
    }

    pub fn quantum_bits(&self) -> u64 {
        self.quantum_bits
    }

    /// Replaces the weight set. Surviving flows keep deficit and backlog;
    /// new ones join at the end of the round in key order.
    pub fn set_weights(&mut self, weights: &[(FlowKey, f64)]) {
        let current = self.flows.get(self.cursor).map(|f| f.key.clone());
        self.flows
            .retain(|f| weights.iter().any(|(k, _)| *k == f.key));
        for (k, w) in weights {
            match self.flows.iter_mut().find(|f| f.key == *k) {
                Some(f) => f.weight = *w,
                None => self.flows.push(DwrrFlow {
                    key: k.clone(),
                    weight: *w,
                    deficit: 0.0,
                    backlog_bits: 0,
                }),
            }
        }
        match current.and_then(|k| self.flows.iter().position(|f| f.key == k)) {
            Some(i) => self.cursor = i,
            None => {
                self.cursor = 0;
                self.in_visit = false;
            }
        }
    }

    pub fn add_backlog(&mut self, key: &FlowKey, bits: u64) {
        if let Some(f) = self.flows.iter_mut().find(|f| f.key == *key) {
            f.backlog_bits += bits;
        }
    }

    /// Caps a flow's backlog, e.g. to bound bursts after idle periods.
    pub fn clamp_backlog(&mut self, key: &FlowKey, max_bits: u64) {
        if let Some(f) = self.flows.iter_mut().find(|f| f.key == *key) {
            f.backlog_bits = f.backlog_bits.min(max_bits);
        }
    }

    pub fn backlog(&self, key: &FlowKey) -> u64 {
        self.flows
            .iter()
            .find(|f| f.key == *key)
            .map_or(0, |f| f.backlog_bits)
    }

    pub fn deficit(&self, key: &FlowKey) -> f64 {
        self.flows
            .iter()
            .find(|f| f.key == *key)
            .map_or(0.0, |f| f.deficit)
    }

    pub fn flows(&self) -> impl Iterator<Item = (&FlowKey, f64)> {
        self.flows.iter().map(|f| (&f.key, f.weight))
    }

    /// Returns the unserved part of a ticket so it is not lost.
    pub fn requeue(&mut self, ticket: &WorkTicket, unserved_bits: u64) {
        if let Some(f) = self.flows.iter_mut().find(|f| f.key == ticket.flow) {
            f.backlog_bits += unserved_bits;
            f.deficit += unserved_bits as f64;
        }
    }

    fn advance(&mut self) {
        self.in_visit = false;
        self.cursor = (self.cursor + 1) % self.flows.len();
    }

    pub fn next_ticket(&mut self) -> Result<WorkTicket, ScheduleError> {
        let max_w = self.flows.iter().map(|f| f.weight).fold(0.0, f64::max);
        if max_w <= 0.0
            || !self
                .flows
                .iter()
                .any(|f| f.backlog_bits >= 8 && f.weight > 0.0)
        {
            return Err(ScheduleError::NoActiveCommodities);
        }
        loop {
            let q = self.quantum_bits;
            let f = &mut self.flows[self.cursor];
            if !self.in_visit {
                if f.backlog_bits < 8 || f.weight <= 0.0 {
                    self.advance();
                    continue;
                }
                f.deficit += q as f64 * f.weight / max_w;
                self.in_visit = true;
            }
            let whole = ((f.deficit / 8.0).floor() as u64) * 8;
            let amount = whole.min(f.backlog_bits / 8 * 8).min(q);
            if amount == 0 {
                self.advance();
                continue;
            }
            f.deficit -= amount as f64;
            f.backlog_bits -= amount;
            let ticket = WorkTicket {
                link: self.link,
                flow: f.key.clone(),
                amount_bits: amount,
                deadline: None,
            };
            if f.backlog_bits < 8 || f.deficit < 8.0 {
                self.advance();
            }
            return Ok(ticket);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FifoScheduler {
    queue: VecDeque<WorkTicket>,
}

impl FifoScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ticket: WorkTicket) {
        self.queue.push_back(ticket);
    }

    /// Unserved remainder goes back to the head, keeping arrival order.
    pub fn requeue(&mut self, mut ticket: WorkTicket, unserved_bits: u64) {
        ticket.amount_bits = unserved_bits;
        self.queue.push_front(ticket);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn next_ticket(&mut self) -> Result<WorkTicket, ScheduleError> {
        self.queue
            .pop_front()
            .ok_or(ScheduleError::NoActiveCommodities)
    }
}
