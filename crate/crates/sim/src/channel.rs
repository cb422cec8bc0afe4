//! Shared radio channel: link truth and collision arbitration.

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::protocol::{LinkCondition, LinkTruthSample};
use crate::time::SimTime;

/// Static propagation facts about node pairs. Pairs are stored with the
/// smaller index first, so lookups are symmetric.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkTruth {
    pub comm_range_m: f64,
    pub nlos: BTreeSet<(usize, usize)>,
    pub blocked: BTreeSet<(usize, usize)>,
    pub floor_boundaries: Vec<f64>,
    pub cross_floor_nlos: bool,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl LinkTruth {
    pub fn new(comm_range_m: f64) -> Self {
        Self { comm_range_m, ..Self::default() }
    }

    pub fn add_nlos(&mut self, a: usize, b: usize) {
        self.nlos.insert(key(a, b));
    }

    pub fn add_blocked(&mut self, a: usize, b: usize) {
        self.blocked.insert(key(a, b));
    }

    pub fn floor(&self, z: f64) -> usize {
        self.floor_boundaries.iter().take_while(|&&b| z >= b).count()
    }

    /// Whether `b` can hear `a` given the two positions.
    pub fn in_range(&self, a: usize, b: usize, pa: &Vector3<f64>, pb: &Vector3<f64>) -> bool {
        a != b && !self.blocked.contains(&key(a, b)) && (pa - pb).norm() <= self.comm_range_m
    }

    pub fn condition(&self, a: usize, b: usize, pa: &Vector3<f64>, pb: &Vector3<f64>) -> LinkCondition {
        let cross = self.cross_floor_nlos && self.floor(pa.z) != self.floor(pb.z);
        if cross || self.nlos.contains(&key(a, b)) {
            LinkCondition::Nlos
        } else {
            LinkCondition::Los
        }
    }

    pub fn sample(&self, a: usize, b: usize, pa: &Vector3<f64>, pb: &Vector3<f64>) -> LinkTruthSample {
        LinkTruthSample { condition: self.condition(a, b, pa, pb), distance: (pa - pb).norm() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub id: u64,
    /// Index of the sending node.
    pub src: usize,
    pub start: SimTime,
    pub end: SimTime,
}

impl Transmission {
    pub fn overlaps(&self, other: &Transmission) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reception {
    Delivered,
    Collided,
    OutOfRange,
}

impl Reception {
    pub fn as_str(self) -> &'static str {
        match self {
            Reception::Delivered => "delivered",
            Reception::Collided => "collided",
            Reception::OutOfRange => "out_of_range",
        }
    }
}

/// Transmissions still relevant for arbitration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelState {
    pub active: Vec<Transmission>,
}

impl ChannelState {
    pub fn begin(&mut self, tx: Transmission) {
        self.active.push(tx);
    }

    /// Drops transmissions that ended before `horizon`; nothing that starts
    /// after it can overlap them.
    pub fn prune(&mut self, horizon: SimTime) {
        self.active.retain(|t| t.end > horizon);
    }

    pub fn ongoing(&self, now: SimTime) -> impl Iterator<Item = &Transmission> {
        self.active.iter().filter(move |t| t.start <= now && now < t.end)
    }
}

/// Per-receiver outcome of `tx`. `hears(src, rx)` says whether `rx` is in
/// range of `src`. A receiver that is itself transmitting during `tx`, or that
/// hears any other overlapping transmission, gets a collision. No capture.
pub fn arbitrate<F>(channel: &ChannelState, tx: &Transmission, receivers: &[usize], hears: F) -> Vec<(usize, Reception)>
where
    F: Fn(usize, usize) -> bool,
{
    receivers
        .iter()
        .filter(|&&r| r != tx.src)
        .map(|&r| {
            if !hears(tx.src, r) {
                return (r, Reception::OutOfRange);
            }
            let clash = channel
                .active
                .iter()
                .filter(|o| o.id != tx.id && o.overlaps(tx))
                .any(|o| o.src == r || hears(o.src, r));
            (r, if clash { Reception::Collided } else { Reception::Delivered })
        })
        .collect()
}
