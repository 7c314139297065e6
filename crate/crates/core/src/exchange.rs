//! Neighbor-to-neighbor message passing with per-round barrier semantics.
//!
//! The bus is in-process and synchronous: the harness drives rounds, every
//! subsystem posts before anyone collects, and `collect` demands exactly one
//! message of each expected kind per neighbor. Exchange is assumed lossless;
//! transport failures are out of scope.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dmpc::Contract;
use crate::dynamics::SubsystemId;
use crate::linalg::Mat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExchangeError {
    #[error("subsystem {sender} may not send to {receiver}: not a graph neighbor")]
    TopologyViolation {
        sender: SubsystemId,
        receiver: SubsystemId,
    },
    #[error("missing {kind:?} message from {sender} to {receiver} in round {round}")]
    MissingNeighborData {
        sender: SubsystemId,
        receiver: SubsystemId,
        round: u64,
        kind: PayloadKind,
    },
}

/// Sensitivity matrices one subsystem shares with a neighbor: the Jacobians
/// of its dense coupling map with respect to its own attack input and its
/// neighbors' coupling coefficients, with column labels for the latter.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMsg {
    pub s_a: Mat,
    pub s_z: Mat,
    /// (owner, coordinate) label of each `s_z` column.
    pub z_cols: Vec<(SubsystemId, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Predicted nominal coupling coefficients for consecutive stages,
    /// starting at `start_step`.
    NominalCoeffs {
        start_step: usize,
        stages: Vec<Vec<f64>>,
    },
    /// Coupling-coefficient deviation for the current interval.
    Deviation(Vec<f64>),
    /// Numeric derivative information for version-2 identification.
    Sensitivities(SensitivityMsg),
    /// Updated coupling corridor.
    ContractMsg(Contract),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PayloadKind {
    NominalCoeffs,
    Deviation,
    Sensitivities,
    ContractMsg,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::NominalCoeffs { .. } => PayloadKind::NominalCoeffs,
            Payload::Deviation(_) => PayloadKind::Deviation,
            Payload::Sensitivities(_) => PayloadKind::Sensitivities,
            Payload::ContractMsg(_) => PayloadKind::ContractMsg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: SubsystemId,
    pub receiver: SubsystemId,
    pub round: u64,
    pub payload: Payload,
}

/// Synchronous neighbor bus. Messages live under their posting round; rounds
/// never leak into each other.
pub struct Bus {
    neighbor_lists: Vec<Vec<SubsystemId>>,
    queues: BTreeMap<(SubsystemId, u64), Vec<Message>>,
    /// Same (round, sender, receiver, kind) posted twice: last write wins.
    pub duplicate_posts: usize,
}

impl Bus {
    pub fn new(neighbor_lists: Vec<Vec<SubsystemId>>) -> Self {
        Bus {
            neighbor_lists,
            queues: BTreeMap::new(),
            duplicate_posts: 0,
        }
    }

    pub fn post(&mut self, message: Message) -> Result<(), ExchangeError> {
        let ok = self
            .neighbor_lists
            .get(message.sender)
            .map(|l| l.contains(&message.receiver))
            .unwrap_or(false);
        if !ok {
            return Err(ExchangeError::TopologyViolation {
                sender: message.sender,
                receiver: message.receiver,
            });
        }
        let queue = self
            .queues
            .entry((message.receiver, message.round))
            .or_default();
        if let Some(existing) = queue
            .iter_mut()
            .find(|m| m.sender == message.sender && m.payload.kind() == message.payload.kind())
        {
            *existing = message;
            self.duplicate_posts += 1;
        } else {
            queue.push(message);
        }
        Ok(())
    }

    /// Collect exactly one message of each expected kind from every neighbor
    /// of `receiver` for `round`, ordered by sender id then kind.
    pub fn collect(
        &self,
        receiver: SubsystemId,
        round: u64,
        kinds: &[PayloadKind],
    ) -> Result<Vec<Message>, ExchangeError> {
        let queue = self.queues.get(&(receiver, round));
        let mut out = Vec::new();
        let mut neighbors = self.neighbor_lists[receiver].clone();
        neighbors.sort_unstable();
        for &sender in &neighbors {
            for &kind in kinds {
                let found = queue.and_then(|q| {
                    q.iter()
                        .find(|m| m.sender == sender && m.payload.kind() == kind)
                });
                match found {
                    Some(m) => out.push(m.clone()),
                    None => {
                        return Err(ExchangeError::MissingNeighborData {
                            sender,
                            receiver,
                            round,
                            kind,
                        })
                    }
                }
            }
        }
        Ok(out)
    }

    /// Drop all messages posted for rounds strictly before `round`.
    pub fn discard_before(&mut self, round: u64) {
        self.queues.retain(|(_, r), _| *r >= round);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring3() -> Bus {
        Bus::new(vec![vec![1, 2], vec![0, 2], vec![0, 1]])
    }

    fn dev(sender: SubsystemId, receiver: SubsystemId, round: u64, v: f64) -> Message {
        Message {
            sender,
            receiver,
            round,
            payload: Payload::Deviation(vec![v]),
        }
    }

    #[test]
    fn post_and_collect_ring() {
        let mut bus = ring3();
        for s in 0..3_usize {
            for &r in &[(s + 1) % 3, (s + 2) % 3] {
                bus.post(dev(s, r, 0, s as f64)).unwrap();
            }
        }
        let msgs = bus.collect(0, 0, &[PayloadKind::Deviation]).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].sender, 1);
        assert_eq!(msgs[1].sender, 2);
    }

    #[test]
    fn self_send_is_topology_violation() {
        let mut bus = ring3();
        let err = bus.post(dev(0, 0, 0, 1.0)).unwrap_err();
        assert!(matches!(err, ExchangeError::TopologyViolation { .. }));
    }

    #[test]
    fn missing_message_detected() {
        let mut bus = ring3();
        bus.post(dev(1, 0, 0, 1.0)).unwrap();
        let err = bus.collect(0, 0, &[PayloadKind::Deviation]).unwrap_err();
        assert_eq!(
            err,
            ExchangeError::MissingNeighborData {
                sender: 2,
                receiver: 0,
                round: 0,
                kind: PayloadKind::Deviation,
            }
        );
    }

    #[test]
    fn duplicate_post_last_write_wins() {
        let mut bus = ring3();
        bus.post(dev(1, 0, 0, 1.0)).unwrap();
        bus.post(dev(1, 0, 0, 2.0)).unwrap();
        bus.post(dev(2, 0, 0, 3.0)).unwrap();
        assert_eq!(bus.duplicate_posts, 1);
        let msgs = bus.collect(0, 0, &[PayloadKind::Deviation]).unwrap();
        assert_eq!(msgs[0].payload, Payload::Deviation(vec![2.0]));
    }

    #[test]
    fn rounds_are_isolated() {
        let mut bus = ring3();
        bus.post(dev(1, 0, 0, 1.0)).unwrap();
        bus.post(dev(2, 0, 0, 1.5)).unwrap();
        assert!(bus.collect(0, 1, &[PayloadKind::Deviation]).is_err());
        assert!(bus.collect(0, 0, &[PayloadKind::Deviation]).is_ok());
    }

    #[test]
    fn kind_filter_excludes_other_payloads() {
        let mut bus = ring3();
        bus.post(dev(1, 0, 0, 1.0)).unwrap();
        bus.post(dev(2, 0, 0, 2.0)).unwrap();
        bus.post(Message {
            sender: 1,
            receiver: 0,
            round: 0,
            payload: Payload::NominalCoeffs {
                start_step: 0,
                stages: vec![vec![0.0]],
            },
        })
        .unwrap();
        let msgs = bus.collect(0, 0, &[PayloadKind::Deviation]).unwrap();
        assert_eq!(msgs.len(), 2);
        assert!(msgs.iter().all(|m| m.payload.kind() == PayloadKind::Deviation));
    }
}
