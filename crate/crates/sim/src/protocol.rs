//! Simulated node firmware: two-way ranging, chirps and neighbor discovery,
//! channel sensing, channel sounding and the channel-access policies.
//!
//! Everything here is a pure function or a value-type state machine; the
//! kernel owns the instances and feeds them events.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use nln_core::model::StateMatrix;
use nln_core::{Activation, NodeId};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::time::SimTime;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Seconds per clock tick. Device clocks count attoseconds so that ideal
/// clocks introduce no quantization error.
pub const TICK_PERIOD: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    RangingInit,
    RangingResp,
    RangingFinal,
    RangingReport,
    Chirp,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::RangingInit => "ranging_init",
            MessageKind::RangingResp => "ranging_resp",
            MessageKind::RangingFinal => "ranging_final",
            MessageKind::RangingReport => "ranging_report",
            MessageKind::Chirp => "chirp",
        }
    }

    /// Messages whose timestamps enter the range computation.
    pub fn is_timed(self) -> bool {
        matches!(self, MessageKind::RangingInit | MessageKind::RangingResp | MessageKind::RangingFinal)
    }
}

/// State summary carried by chirps and ranging messages.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSummary {
    pub position_mean: Vector3<f64>,
    pub covariance: StateMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub src: NodeId,
    /// `None` for broadcasts.
    pub dst: Option<NodeId>,
    /// Sender's clock at transmission.
    pub tx_ts: i128,
    /// Receiver's clock at arrival; filled on delivery.
    pub rx_ts: Option<i128>,
    pub payload: Option<StateSummary>,
    /// `(t1, t4, t5)` on the final message.
    pub echo: Option<[i128; 3]>,
    /// Range on the report message.
    pub report: Option<f64>,
}

/// Device clock: `local = t (1 + drift) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClockModel {
    pub offset_s: f64,
    pub drift_ppm: f64,
}

impl ClockModel {
    pub const MAX_DRIFT_PPM: f64 = 100.0;

    pub fn new(offset_s: f64, drift_ppm: f64) -> SimResult<Self> {
        if !offset_s.is_finite() || !(drift_ppm.abs() <= Self::MAX_DRIFT_PPM) {
            return Err(SimError::InvalidArgument(format!("clock drift {drift_ppm} ppm outside ±100 ppm")));
        }
        Ok(Self { offset_s, drift_ppm })
    }

    pub fn ideal() -> Self {
        Self::default()
    }

    /// Local tick count at simulation time `t`.
    pub fn ticks(&self, t: SimTime) -> i128 {
        let drift = (t.attos() as f64 * self.drift_ppm * 1e-6).round() as i128;
        t.attos() + drift + SimTime::from_secs(self.offset_s).attos()
    }
}

/// Symmetric double-sided two-way ranging.
///
/// `t1`, `t4`, `t5` are initiator ticks (init sent, resp received, final
/// sent); `t2`, `t3`, `t6` responder ticks (init received, resp sent, final
/// received).
pub fn twr_range(t: &[i128; 6], tick_period: f64) -> SimResult<f64> {
    let [t1, t2, t3, t4, t5, t6] = *t;
    let round1 = t4 - t1;
    let reply1 = t3 - t2;
    let round2 = t6 - t3;
    let reply2 = t5 - t4;
    if round1 < 0 || reply1 < 0 || round2 < 0 || reply2 < 0 {
        return Err(SimError::Ranging("timestamps are not monotone".into()));
    }
    let den = round1 + round2 + reply1 + reply2;
    if den == 0 {
        return Err(SimError::Ranging("empty exchange".into()));
    }
    let num = round1 * round2 - reply1 * reply2;
    if num < 0 {
        return Err(SimError::Ranging("negative time of flight".into()));
    }
    let ticks = (num / den) as f64 + (num % den) as f64 / den as f64;
    Ok(SPEED_OF_LIGHT * ticks * tick_period)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    AwaitingResp,
    AwaitingFinal,
    /// Initiator has sent the final message and waits for the range report.
    AwaitingReport,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    /// Begin an exchange as initiator.
    Start { peer: NodeId },
    Receive { msg: Message, now: SimTime },
    /// A message this node asked for has left the antenna.
    Transmitted { kind: MessageKind, tx_ts: i128, now: SimTime },
    Timeout { now: SimTime },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { kind: MessageKind, dst: NodeId, echo: Option<[i128; 3]>, report: Option<f64> },
    Completed { peer: NodeId, range: f64 },
    Failed { peer: NodeId },
    /// The event was not for this session and left it unchanged.
    Dropped,
}

/// One node's view of a four-message ranging exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct RangingSession {
    pub owner: NodeId,
    pub peer: Option<NodeId>,
    pub role: Role,
    pub phase: Phase,
    /// `t1..t6` as far as this node knows them.
    pub timestamps: [Option<i128>; 6],
    pub deadline: Option<SimTime>,
    pub timeout: SimTime,
    pub tick_period: f64,
}

impl RangingSession {
    pub fn idle(owner: NodeId, timeout: SimTime) -> Self {
        Self {
            owner,
            peer: None,
            role: Role::Responder,
            phase: Phase::Idle,
            timestamps: [None; 6],
            deadline: None,
            timeout,
            tick_period: TICK_PERIOD,
        }
    }

    /// True while the node only accepts messages from its peer.
    pub fn is_locked(&self) -> bool {
        matches!(self.phase, Phase::AwaitingResp | Phase::AwaitingFinal | Phase::AwaitingReport)
    }

    fn reset(&self) -> Self {
        Self::idle(self.owner, self.timeout)
    }

    fn fail(&self) -> (Self, Vec<Action>) {
        let mut next = self.clone();
        next.phase = Phase::Failed;
        next.deadline = None;
        let peer = self.peer.unwrap_or(self.owner);
        (next, vec![Action::Failed { peer }])
    }

    /// Deterministic transition function.
    pub fn step(&self, event: SessionEvent) -> (Self, Vec<Action>) {
        let unchanged = || (self.clone(), vec![Action::Dropped]);
        match event {
            SessionEvent::Start { peer } => {
                if self.is_locked() || peer == self.owner {
                    return unchanged();
                }
                let mut next = self.reset();
                next.role = Role::Initiator;
                next.peer = Some(peer);
                next.phase = Phase::AwaitingResp;
                (next, vec![Action::Send { kind: MessageKind::RangingInit, dst: peer, echo: None, report: None }])
            }
            SessionEvent::Transmitted { kind, tx_ts, now } => {
                let mut next = self.clone();
                let slot = match (self.role, kind) {
                    (Role::Initiator, MessageKind::RangingInit) => 0,
                    (Role::Responder, MessageKind::RangingResp) => 2,
                    (Role::Initiator, MessageKind::RangingFinal) => 4,
                    _ => return unchanged(),
                };
                if !self.is_locked() {
                    return unchanged();
                }
                next.timestamps[slot] = Some(tx_ts);
                next.deadline = Some(now + self.timeout);
                (next, Vec::new())
            }
            SessionEvent::Timeout { now } => match self.deadline {
                Some(d) if self.is_locked() && now >= d => self.fail(),
                _ => unchanged(),
            },
            SessionEvent::Receive { msg, now: _ } => self.receive(msg),
        }
    }

    fn receive(&self, msg: Message) -> (Self, Vec<Action>) {
        let unchanged = || (self.clone(), vec![Action::Dropped]);
        if msg.dst != Some(self.owner) {
            return unchanged();
        }
        let Some(rx) = msg.rx_ts else { return unchanged() };
        if self.is_locked() && self.peer != Some(msg.src) {
            return unchanged();
        }
        let mut next = self.clone();
        match (self.phase, self.role, msg.kind) {
            (Phase::Idle | Phase::Done | Phase::Failed, _, MessageKind::RangingInit) => {
                next = self.reset();
                next.role = Role::Responder;
                next.peer = Some(msg.src);
                next.phase = Phase::AwaitingFinal;
                next.timestamps[1] = Some(rx);
                (next, vec![Action::Send { kind: MessageKind::RangingResp, dst: msg.src, echo: None, report: None }])
            }
            (Phase::AwaitingResp, Role::Initiator, MessageKind::RangingResp) => {
                let Some(t1) = self.timestamps[0] else { return unchanged() };
                next.timestamps[3] = Some(rx);
                next.phase = Phase::AwaitingReport;
                next.deadline = None;
                // t5 is fixed by the delayed transmission and filled in by the
                // radio; it travels in the echo's last slot.
                (next, vec![Action::Send { kind: MessageKind::RangingFinal, dst: msg.src, echo: Some([t1, rx, 0]), report: None }])
            }
            (Phase::AwaitingFinal, Role::Responder, MessageKind::RangingFinal) => {
                let (Some(t2), Some(t3), Some([t1, t4, t5])) = (self.timestamps[1], self.timestamps[2], msg.echo) else {
                    return unchanged();
                };
                next.timestamps = [Some(t1), Some(t2), Some(t3), Some(t4), Some(t5), Some(rx)];
                match twr_range(&[t1, t2, t3, t4, t5, rx], self.tick_period) {
                    Ok(range) => {
                        next.phase = Phase::Done;
                        next.deadline = None;
                        (
                            next,
                            vec![
                                Action::Send { kind: MessageKind::RangingReport, dst: msg.src, echo: None, report: Some(range) },
                                Action::Completed { peer: msg.src, range },
                            ],
                        )
                    }
                    Err(_) => self.fail(),
                }
            }
            (Phase::AwaitingReport, Role::Initiator, MessageKind::RangingReport) => match msg.report {
                Some(range) if range.is_finite() => {
                    next.phase = Phase::Done;
                    next.deadline = None;
                    (next, vec![Action::Completed { peer: msg.src, range }])
                }
                _ => self.fail(),
            },
            _ => unchanged(),
        }
    }
}

/// Exponential inter-chirp time in seconds.
pub fn chirp_interval<R: Rng + ?Sized>(rng: &mut R, mean_s: f64) -> SimResult<f64> {
    if !(mean_s > 0.0) || !mean_s.is_finite() {
        return Err(SimError::InvalidArgument(format!("chirp mean interval must be positive, got {mean_s}")));
    }
    let exp = Exp::new(1.0 / mean_s).map_err(|e| SimError::InvalidArgument(e.to_string()))?;
    Ok(exp.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub last_heard: SimTime,
    pub position_mean: Option<Vector3<f64>>,
    pub covariance: Option<StateMatrix<f64>>,
    /// Latest channel-sounding estimate of the link's ERC.
    pub erc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    entries: BTreeMap<NodeId, NeighborEntry>,
    pub expiry: SimTime,
}

impl NeighborTable {
    pub fn new(expiry: SimTime) -> Self {
        Self { entries: BTreeMap::new(), expiry }
    }

    /// Records that `msg` was heard at `now` and drops stale entries.
    pub fn update(&mut self, msg: &Message, erc: Option<f64>, now: SimTime) {
        let entry = self.entries.entry(msg.src).or_insert(NeighborEntry {
            last_heard: now,
            position_mean: None,
            covariance: None,
            erc: None,
        });
        entry.last_heard = now;
        if let Some(p) = &msg.payload {
            entry.position_mean = Some(p.position_mean);
            entry.covariance = Some(p.covariance);
        }
        if erc.is_some() {
            entry.erc = erc;
        }
        self.purge(now);
    }

    pub fn purge(&mut self, now: SimTime) {
        let expiry = self.expiry;
        self.entries.retain(|_, e| e.last_heard + expiry >= now);
    }

    pub fn get(&self, id: &NodeId) -> Option<&NeighborEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &NeighborEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Functional form of [`NeighborTable::update`].
pub fn neighbor_update(table: &NeighborTable, msg: &Message, erc: Option<f64>, now: SimTime) -> NeighborTable {
    let mut next = table.clone();
    next.update(msg, erc, now);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenseOutcome {
    Busy(SimTime),
    Idle(SimTime),
}

/// Listens over `[start, start + duration]` given the `[begin, end)`
/// intervals of transmissions audible at the node. Busy as soon as one is on
/// the air.
pub fn channel_sense(start: SimTime, duration: SimTime, audible: &[(SimTime, SimTime)]) -> SenseOutcome {
    let end = start + duration;
    if duration <= SimTime::ZERO {
        return SenseOutcome::Idle(start);
    }
    audible
        .iter()
        .filter(|(b, e)| *b < end && *e > start)
        .map(|(b, _)| (*b).max(start))
        .min()
        .map_or(SenseOutcome::Idle(end), SenseOutcome::Busy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkCondition {
    Los,
    Nlos,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkTruthSample {
    pub condition: LinkCondition,
    pub distance: f64,
}

/// Simulated stand-in for the radio's waveform-confidence calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelQualityModel {
    pub xi_min: f64,
    pub xi_max: f64,
    /// Distance scale over which LOS quality decays toward `xi_min`, meters.
    pub decay_m: f64,
    /// Log-standard deviation of the multiplicative estimation noise.
    pub noise_sigma: f64,
}

impl Default for ChannelQualityModel {
    fn default() -> Self {
        Self { xi_min: 16.0, xi_max: 100.0, decay_m: 50.0, noise_sigma: 0.1 }
    }
}

impl ChannelQualityModel {
    /// Noise-free ERC of a link.
    pub fn nominal(&self, link: LinkTruthSample) -> f64 {
        match link.condition {
            LinkCondition::Nlos => self.xi_min,
            LinkCondition::Los => {
                let excess = (link.distance - 1.0).max(0.0);
                self.xi_min + (self.xi_max - self.xi_min) * (-excess / self.decay_m).exp()
            }
        }
    }

    pub fn clamp(&self, xi: f64) -> f64 {
        xi.clamp(self.xi_min, self.xi_max)
    }
}

/// ERC estimate from one received message.
pub fn sound_channel<R: Rng + ?Sized>(link: LinkTruthSample, model: &ChannelQualityModel, rng: &mut R) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    model.clamp(model.nominal(link) * (model.noise_sigma * n).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessPolicy {
    #[serde(rename = "ALOHA")]
    Aloha,
    #[serde(rename = "CSMA")]
    Csma,
    #[serde(rename = "HTNA")]
    Htna,
}

impl AccessPolicy {
    pub fn code(self) -> &'static str {
        match self {
            AccessPolicy::Aloha => "AL",
            AccessPolicy::Csma => "CS",
            AccessPolicy::Htna => "HT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacConfig {
    pub sense_min: SimTime,
    pub sense_max: SimTime,
    /// CSMA backoff after the `a`-th busy sense is uniform in `[0, 2^a slot]`.
    pub backoff_slot: SimTime,
    pub max_attempts: u32,
}

impl MacConfig {
    /// Sense window in `[0.5, 2] T_m`, backoff slot `T_m`, five attempts.
    pub fn from_measurement_airtime(t_m: SimTime) -> Self {
        Self { sense_min: SimTime(t_m.0 / 2), sense_max: SimTime(t_m.0 * 2), backoff_slot: t_m, max_attempts: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacInput {
    EpochStart,
    SenseResult { idle: bool },
    BackoffDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacStep {
    TransmitNow,
    Sense { window: SimTime },
    Backoff { delay: SimTime },
    /// Channel was busy; nothing sent this epoch.
    GiveUp,
    /// Channel idle but activation declined.
    Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacState {
    pub busy_count: u32,
}

fn uniform_time<R: Rng + ?Sized>(rng: &mut R, lo: SimTime, hi: SimTime) -> SimTime {
    if hi <= lo {
        return lo;
    }
    SimTime(rng.random_range(lo.0..=hi.0))
}

/// One decision of a channel-access policy. `decide` is consulted only by
/// HTNA, after an idle sense.
pub fn mac_policy<R, F>(
    policy: AccessPolicy,
    state: &mut MacState,
    input: MacInput,
    config: &MacConfig,
    rng: &mut R,
    decide: F,
) -> MacStep
where
    R: Rng + ?Sized,
    F: FnOnce() -> Activation,
{
    match (policy, input) {
        (AccessPolicy::Aloha, _) => MacStep::TransmitNow,
        (_, MacInput::EpochStart) => {
            state.busy_count = 0;
            MacStep::Sense { window: uniform_time(rng, config.sense_min, config.sense_max) }
        }
        (_, MacInput::BackoffDone) => MacStep::Sense { window: uniform_time(rng, config.sense_min, config.sense_max) },
        (AccessPolicy::Csma, MacInput::SenseResult { idle: true }) => MacStep::TransmitNow,
        (AccessPolicy::Htna, MacInput::SenseResult { idle: true }) => match decide() {
            Activation::Activate => MacStep::TransmitNow,
            Activation::StaySilent => MacStep::Silent,
        },
        // HTNA backs off on a busy channel exactly like CSMA.
        (_, MacInput::SenseResult { idle: false }) => {
            state.busy_count += 1;
            if state.busy_count > config.max_attempts {
                return MacStep::GiveUp;
            }
            let cap = SimTime(config.backoff_slot.0 << state.busy_count.min(20));
            MacStep::Backoff { delay: uniform_time(rng, SimTime::ZERO, cap) }
        }
    }
}
