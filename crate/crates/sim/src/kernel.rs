//! The event loop.
//!
//! One [`Simulation`] owns every node, the channel and the event queue.
//! Events run in `(time, sequence)` order on a single thread; all randomness
//! comes from ChaCha streams derived from the run seed, so a scenario and
//! seed always produce the same output.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use nalgebra::{Matrix3, Vector3};
use nln_core::inference::{ls_estimate, spbp_update, MeasurementEntry};
use nln_core::operation::{cpnp_allocate, htna_decide, LinkInfo};
use nln_core::{
    ActivationInputs, AllocationProblem, GaussianBelief, LsOptions, MeasurementBatch, MotionModel, NodeId, NodeState,
    SolverOptions, StateMatrix, UtParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::channel::{arbitrate, ChannelState, LinkTruth, Reception, Transmission};
use crate::error::{numeric, SimError, SimResult};
use crate::mobility::{mobility_position, Trajectory, Waypoint};
use crate::protocol::{
    chirp_interval, mac_policy, sound_channel, AccessPolicy, Action, ChannelQualityModel, ClockModel, MacConfig,
    MacInput, MacState, MacStep, Message, MessageKind, NeighborTable, RangingSession, Role, SessionEvent,
    StateSummary, SPEED_OF_LIGHT,
};
use crate::records::{MeasurementRow, RunRecord, TraceRow};
use crate::scenario::{InferenceAlgorithm, Prioritization, ScenarioConfig};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Agent inference epoch. Retries of a deferred epoch do not schedule
    /// the next one.
    Epoch { regular: bool },
    SenseEnd { token: u64 },
    BackoffEnd { token: u64 },
    TxStart { msg: Box<Message> },
    TxEnd { tx: u64 },
    /// Ranging deadline check.
    Timer,
    Chirp,
    NextExchange,
}

/// Events are identified by `(time, sequence)`; equality ignores the rest.
#[derive(Debug, Clone)]
pub struct SimEvent {
    pub time: SimTime,
    pub sequence: u64,
    /// Index of the node the event belongs to.
    pub target: usize,
    pub kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.sequence) == (other.time, other.sequence)
    }
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.sequence).cmp(&(other.time, other.sequence))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Receptions per outcome, for the conservation audit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub transmissions: u64,
    /// Nodes other than the sender present when each transmission ended.
    pub potential_receptions: u64,
    pub delivered: u64,
    pub collided: u64,
    pub out_of_range: u64,
    /// Times an agent started measuring while another member of its
    /// subnetwork was already measuring.
    pub concurrent_measurers: u64,
}

impl ChannelStats {
    pub fn conserved(&self) -> bool {
        self.delivered + self.collided + self.out_of_range == self.potential_receptions
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub events: u64,
    /// Events whose time preceded the previous event's; always zero.
    pub time_reversals: u64,
    pub epochs: u64,
    pub skipped_epochs: u64,
    pub deferred_epochs: u64,
    pub activations: u64,
    pub htna_declines: u64,
    pub busy_giveups: u64,
    pub exchanges_started: u64,
    pub exchanges_completed: u64,
    pub exchanges_failed: u64,
    /// Messages a ranging session ignored, including third-party messages
    /// during lockout.
    pub dropped_by_session: u64,
    pub inits_dropped_while_holding: u64,
    pub cpnp_fallbacks: u64,
    pub numeric_failures: u64,
    /// Receptions that moved a locked session to a different peer; the
    /// lockout invariant keeps this at zero.
    pub lockout_violations: u64,
}

/// Everything a run produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub measurements: Vec<MeasurementRow>,
    pub trace: Vec<TraceRow>,
    pub stats: ChannelStats,
    pub diagnostics: Diagnostics,
    pub end_time: f64,
}

#[derive(Debug, Clone)]
struct Candidate {
    node: usize,
    info: LinkInfo<f64>,
}

#[derive(Debug, Clone)]
struct EpochPlan {
    candidates: Vec<Candidate>,
    /// Counts aligned with `candidates` (sorted by node id).
    proposal: Vec<u32>,
    problem: Option<AllocationProblem>,
    members: Vec<StateMatrix>,
}

#[derive(Debug, Clone)]
struct Hold {
    queue: VecDeque<(usize, u32)>,
    current: Option<usize>,
    ranges: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Procedure {
    Idle,
    Sensing { token: u64, plan: Box<EpochPlan> },
    Backoff { token: u64, plan: Box<EpochPlan> },
    Holding(Hold),
}

#[derive(Debug, Clone)]
struct AgentState {
    belief: GaussianBelief,
    belief_time: SimTime,
    ls_position: Vector3<f64>,
    procedure: Procedure,
    mac: MacState,
    next_token: u64,
}

#[derive(Debug, Clone)]
struct Node {
    id: NodeId,
    name: String,
    trajectory: Trajectory,
    active_from: SimTime,
    active_until: SimTime,
    clock: ClockModel,
    rng: ChaCha8Rng,
    table: NeighborTable,
    session: RangingSession,
    agent: Option<AgentState>,
}

impl Node {
    fn is_active(&self, t: SimTime) -> bool {
        t >= self.active_from && t <= self.active_until
    }
}

struct Timing {
    airtime: SimTime,
    reply_gap: SimTime,
    measurement_airtime: SimTime,
    epoch_period: SimTime,
    epoch_jitter: f64,
    chirp_mean_s: f64,
    duration: SimTime,
}

/// A configured simulation. Build with [`Simulation::new`], then [`Simulation::run`].
pub struct Simulation {
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    links: LinkTruth,
    channel: ChannelState,
    in_flight: BTreeMap<u64, (Transmission, Message)>,
    /// Excess range of the exchange currently running on each pair.
    exchange_excess: BTreeMap<(usize, usize), f64>,
    queue: BinaryHeap<Reverse<SimEvent>>,
    sequence: u64,
    next_tx: u64,
    now: SimTime,
    channel_rng: ChaCha8Rng,
    timing: Timing,
    mac_config: MacConfig,
    motion: MotionModel,
    ut: UtParams,
    quality: ChannelQualityModel,
    los_noise: Normal<f64>,
    nlos_bias: Option<Exp<f64>>,
    policy: AccessPolicy,
    inference: InferenceAlgorithm,
    prioritization: Prioritization,
    cooperative: bool,
    per_neighbor_count: u32,
    budget: u32,
    policy_label: String,
    trace_enabled: bool,
    out: RunOutput,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pair(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Trajectory of the `i`-th agent of a validated scenario.
pub fn agent_trajectory(cfg: &ScenarioConfig, i: usize) -> SimResult<Trajectory> {
    let agent = &cfg.agents[i];
    let waypoints = agent
        .waypoints
        .iter()
        .map(|w| {
            let p = cfg
                .waypoint_position(w)
                .ok_or_else(|| SimError::Config(format!("agents[{i}]: unresolved waypoint")))?;
            Ok(Waypoint { position: Vector3::from(p), arrival: w.arrival_s, dwell: w.dwell_s })
        })
        .collect::<SimResult<Vec<_>>>()?;
    Trajectory::new(waypoints).map_err(|e| SimError::Config(format!("agents[{i}].waypoints: {e}")))
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> SimResult<Self> {
        cfg.validate().map_err(|errs| {
            SimError::Config(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        })?;
        let p = &cfg.parameters;
        let pr = &cfg.protocol;
        let motion = MotionModel::new(p.motion_noise[0], p.motion_noise[1], p.motion_noise[2])
            .map_err(numeric("motion model"))?;
        let mut setup = stream_rng(seed, 0);
        let channel_rng = stream_rng(seed, 1);

        let centroid = if cfg.anchors.is_empty() {
            Vector3::zeros()
        } else {
            cfg.anchors.iter().map(|a| Vector3::from(a.position)).sum::<Vector3<f64>>() / cfg.anchors.len() as f64
        };
        let timeout = SimTime::from_secs(pr.ranging_timeout_s);
        let expiry = SimTime::from_secs(pr.neighbor_expiry_s);
        let clock = |rng: &mut ChaCha8Rng| -> SimResult<ClockModel> {
            let drift = if pr.clock_drift_ppm > 0.0 {
                rng.random_range(-pr.clock_drift_ppm..=pr.clock_drift_ppm)
            } else {
                0.0
            };
            let offset = if pr.clock_offset_max_s > 0.0 { rng.random_range(0.0..pr.clock_offset_max_s) } else { 0.0 };
            ClockModel::new(offset, drift)
        };

        let mut nodes = Vec::with_capacity(cfg.anchors.len() + cfg.agents.len());
        for a in &cfg.anchors {
            let id = NodeId::anchor(a.id);
            let pos = Vector3::from(a.position);
            nodes.push(Node {
                id,
                name: a.name.clone(),
                trajectory: Trajectory::stationary(pos),
                active_from: a.active_from_s.map_or(SimTime(i128::MIN), SimTime::from_secs),
                active_until: a.active_until_s.map_or(SimTime(i128::MAX), SimTime::from_secs),
                clock: clock(&mut setup)?,
                rng: stream_rng(seed, 2 + nodes.len() as u64),
                table: NeighborTable::new(expiry),
                session: RangingSession::idle(id, timeout),
                agent: None,
            });
        }
        for (i, a) in cfg.agents.iter().enumerate() {
            let id = NodeId::agent(a.id);
            let mean = a.initial_position.map_or(centroid, Vector3::from);
            let state = NodeState::at_rest(mean).map_err(numeric("initial state"))?;
            let belief = GaussianBelief::isotropic(
                &state,
                a.initial_position_std.unwrap_or(p.initial_position_std),
                a.initial_velocity_std.unwrap_or(p.initial_velocity_std),
            )
            .map_err(numeric("initial belief"))?;
            nodes.push(Node {
                id,
                name: a.name.clone(),
                trajectory: agent_trajectory(cfg, i)?,
                active_from: SimTime(i128::MIN),
                active_until: SimTime(i128::MAX),
                clock: clock(&mut setup)?,
                rng: stream_rng(seed, 2 + nodes.len() as u64),
                table: NeighborTable::new(expiry),
                session: RangingSession::idle(id, timeout),
                agent: Some(AgentState {
                    belief,
                    belief_time: SimTime::ZERO,
                    ls_position: mean,
                    procedure: Procedure::Idle,
                    mac: MacState::default(),
                    next_token: 0,
                }),
            });
        }
        let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let by_name: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();

        let mut links = LinkTruth::new(cfg.links.comm_range_m);
        links.floor_boundaries = cfg.links.floor_boundaries.clone();
        links.cross_floor_nlos = cfg.links.cross_floor_nlos;
        for [a, b] in &cfg.links.nlos {
            links.add_nlos(by_name[a.as_str()], by_name[b.as_str()]);
        }
        for [a, b] in &cfg.links.blocked {
            links.add_blocked(by_name[a.as_str()], by_name[b.as_str()]);
        }

        let airtime = SimTime::from_secs(pr.message_airtime_s);
        let measurement_airtime = SimTime::from_secs(pr.measurement_airtime_s());
        let timing = Timing {
            airtime,
            reply_gap: SimTime::from_secs(pr.reply_gap_s),
            measurement_airtime,
            epoch_period: SimTime::from_secs(p.epoch_period_s),
            epoch_jitter: p.epoch_jitter,
            chirp_mean_s: pr.chirp_mean_s,
            duration: SimTime::from_secs(cfg.duration_s),
        };
        let los_noise = Normal::new(0.0, pr.los_noise_std).map_err(|e| SimError::Config(e.to_string()))?;
        let nlos_bias = if pr.nlos_bias_mean > 0.0 {
            Some(Exp::new(1.0 / pr.nlos_bias_mean).map_err(|e| SimError::Config(e.to_string()))?)
        } else {
            None
        };

        let mut sim = Self {
            nodes,
            index,
            links,
            channel: ChannelState::default(),
            in_flight: BTreeMap::new(),
            exchange_excess: BTreeMap::new(),
            queue: BinaryHeap::new(),
            sequence: 0,
            next_tx: 0,
            now: SimTime::ZERO,
            channel_rng,
            timing,
            mac_config: MacConfig::from_measurement_airtime(measurement_airtime),
            motion,
            ut: UtParams { alpha: p.ut_alpha, beta: p.ut_beta, kappa: p.ut_kappa },
            quality: pr.channel_quality,
            los_noise,
            nlos_bias,
            policy: cfg.algorithms.activation,
            inference: cfg.algorithms.inference,
            prioritization: cfg.algorithms.prioritization,
            cooperative: cfg.algorithms.cooperative,
            per_neighbor_count: p.per_neighbor_count,
            budget: p.budget,
            policy_label: cfg.algorithms.acronym(),
            trace_enabled: pr.trace,
            out: RunOutput::default(),
        };
        for i in 0..sim.nodes.len() {
            // Power-up beacon somewhere in the first mean interval, then a
            // Poisson process.
            let boot = sim.nodes[i].rng.random_range(0.0..sim.timing.chirp_mean_s);
            let at = SimTime::from_secs(boot);
            if at <= sim.timing.duration {
                sim.push(at, i, EventKind::Chirp);
            }
            if sim.nodes[i].agent.is_some() {
                let first = sim.epoch_interval(i);
                if first <= sim.timing.duration {
                    sim.push(first, i, EventKind::Epoch { regular: true });
                }
            }
        }
        Ok(sim)
    }

    /// Processes events until the queue is empty. New epochs and chirps are
    /// only scheduled up to the scenario duration; exchanges in progress at
    /// that point run to completion.
    pub fn run(mut self) -> SimResult<RunOutput> {
        self.advance_to(SimTime(i128::MAX))?;
        self.out.end_time = self.now.as_secs();
        Ok(self.out)
    }

    /// Processes every event at or before `t`.
    pub fn advance_to(&mut self, t: SimTime) -> SimResult<()> {
        while self.queue.peek().is_some_and(|Reverse(ev)| ev.time <= t) {
            let Reverse(ev) = self.queue.pop().expect("peeked");
            if ev.time < self.now {
                self.out.diagnostics.time_reversals += 1;
            }
            self.now = ev.time;
            self.out.diagnostics.events += 1;
            self.dispatch(ev)?;
        }
        Ok(())
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Names of the nodes currently in `name`'s neighbor table.
    pub fn neighbors_of(&self, name: &str) -> Option<Vec<String>> {
        let node = self.nodes.iter().find(|n| n.name == name)?;
        Some(node.table.iter().map(|(id, _)| self.nodes[self.index[id]].name.clone()).collect())
    }

    /// Whether `b` is currently within radio range of `a`.
    pub fn in_range(&self, a: &str, b: &str) -> Option<bool> {
        let ia = self.nodes.iter().position(|n| n.name == a)?;
        let ib = self.nodes.iter().position(|n| n.name == b)?;
        let positions = self.positions(self.now);
        Some(self.hears(&positions, self.now, ia, ib))
    }

    fn push(&mut self, time: SimTime, target: usize, kind: EventKind) {
        let ev = SimEvent { time, sequence: self.sequence, target, kind };
        self.sequence += 1;
        self.queue.push(Reverse(ev));
    }

    fn epoch_interval(&mut self, i: usize) -> SimTime {
        let period = self.timing.epoch_period;
        if self.timing.epoch_jitter == 0.0 {
            return period;
        }
        let j = self.timing.epoch_jitter;
        let f = self.nodes[i].rng.random_range(1.0 - j..=1.0 + j);
        SimTime((period.0 as f64 * f).round() as i128)
    }

    fn schedule_chirp(&mut self, i: usize, from: SimTime) -> SimResult<()> {
        let dt = chirp_interval(&mut self.nodes[i].rng, self.timing.chirp_mean_s)?;
        let at = from + SimTime::from_secs(dt);
        if at <= self.timing.duration {
            self.push(at, i, EventKind::Chirp);
        }
        Ok(())
    }

    fn position(&self, i: usize, t: SimTime) -> Vector3<f64> {
        mobility_position(&self.nodes[i].trajectory, t.as_secs())
    }

    fn positions(&self, t: SimTime) -> Vec<Vector3<f64>> {
        (0..self.nodes.len()).map(|i| self.position(i, t)).collect()
    }

    fn hears(&self, positions: &[Vector3<f64>], t: SimTime, src: usize, rx: usize) -> bool {
        self.nodes[src].is_active(t)
            && self.nodes[rx].is_active(t)
            && self.links.in_range(src, rx, &positions[src], &positions[rx])
    }

    fn dispatch(&mut self, ev: SimEvent) -> SimResult<()> {
        let i = ev.target;
        match ev.kind {
            EventKind::Epoch { regular } => self.on_epoch(i, regular),
            EventKind::SenseEnd { token } => {
                let sensing = matches!(
                    &self.nodes[i].agent.as_ref().map(|a| &a.procedure),
                    Some(Procedure::Sensing { token: t, .. }) if *t == token
                );
                if sensing {
                    self.mac_step(i, MacInput::SenseResult { idle: true })?;
                }
                Ok(())
            }
            EventKind::BackoffEnd { token } => {
                let waiting = matches!(
                    &self.nodes[i].agent.as_ref().map(|a| &a.procedure),
                    Some(Procedure::Backoff { token: t, .. }) if *t == token
                );
                if waiting {
                    self.mac_step(i, MacInput::BackoffDone)?;
                }
                Ok(())
            }
            EventKind::TxStart { msg } => self.on_tx_start(i, *msg),
            EventKind::TxEnd { tx } => self.on_tx_end(tx),
            EventKind::Timer => {
                let role = self.nodes[i].session.role;
                let (next, actions) = self.nodes[i].session.step(SessionEvent::Timeout { now: self.now });
                self.nodes[i].session = next;
                if actions.iter().any(|a| matches!(a, Action::Dropped)) {
                    return Ok(());
                }
                self.handle_actions(i, role, actions)
            }
            EventKind::Chirp => self.on_chirp(i),
            EventKind::NextExchange => self.next_exchange(i),
        }
    }

    fn summary(&self, i: usize) -> StateSummary {
        let node = &self.nodes[i];
        match &node.agent {
            None => {
                let pos = self.position(i, self.now);
                StateSummary { position_mean: pos, covariance: StateMatrix::zeros() }
            }
            Some(a) => StateSummary { position_mean: self.agent_position(a), covariance: a.belief.covariance },
        }
    }

    fn agent_position(&self, a: &AgentState) -> Vector3<f64> {
        match self.inference {
            InferenceAlgorithm::Spbp => a.belief.position_mean(),
            InferenceAlgorithm::Ls => a.ls_position,
        }
    }

    fn on_chirp(&mut self, i: usize) -> SimResult<()> {
        self.schedule_chirp(i, self.now)?;
        let node = &self.nodes[i];
        let idle = node.agent.as_ref().is_none_or(|a| matches!(a.procedure, Procedure::Idle));
        let transmitting = self.channel.ongoing(self.now).any(|t| t.src == i);
        if !node.is_active(self.now) || node.session.is_locked() || !idle || transmitting {
            return Ok(());
        }
        let msg = Message {
            kind: MessageKind::Chirp,
            src: node.id,
            dst: None,
            tx_ts: 0,
            rx_ts: None,
            payload: None,
            echo: None,
            report: None,
        };
        self.on_tx_start(i, msg)
    }

    fn on_epoch(&mut self, i: usize, regular: bool) -> SimResult<()> {
        if regular {
            let next = self.now + self.epoch_interval(i);
            if next <= self.timing.duration {
                self.push(next, i, EventKind::Epoch { regular: true });
            }
        }
        let busy = !matches!(self.nodes[i].agent.as_ref().map(|a| &a.procedure), Some(Procedure::Idle));
        if busy {
            self.out.diagnostics.skipped_epochs += 1;
            return Ok(());
        }
        if self.nodes[i].session.is_locked() {
            // Serving as a responder; start once the exchange is over.
            self.out.diagnostics.deferred_epochs += 1;
            let at = self.now + self.timing.measurement_airtime;
            self.push(at, i, EventKind::Epoch { regular: false });
            return Ok(());
        }
        self.out.diagnostics.epochs += 1;
        self.predict_to_now(i)?;
        let plan = match self.plan_epoch(i)? {
            Some(plan) => plan,
            None => return self.finish_epoch(i, false),
        };
        let agent = self.nodes[i].agent.as_mut().expect("agent");
        agent.procedure = Procedure::Sensing { token: u64::MAX, plan: Box::new(plan) };
        self.mac_step(i, MacInput::EpochStart)
    }

    fn predict_to_now(&mut self, i: usize) -> SimResult<()> {
        let now = self.now;
        let motion = self.motion;
        let agent = self.nodes[i].agent.as_mut().expect("agent");
        let dt = (now - agent.belief_time).as_secs();
        if dt > 0.0 {
            agent.belief = agent.belief.predict(&motion, dt).map_err(numeric("prediction"))?;
        }
        agent.belief_time = now;
        Ok(())
    }

    /// Candidate links, proposal and activation inputs; `None` when there is
    /// nobody to measure with.
    fn plan_epoch(&mut self, i: usize) -> SimResult<Option<EpochPlan>> {
        let now = self.now;
        self.nodes[i].table.purge(now);
        let agent = self.nodes[i].agent.as_ref().expect("agent");
        let own = self.agent_position(agent);
        let own_cov = agent.belief.covariance;
        let mut candidates = Vec::new();
        let mut members = vec![own_cov];
        for (nid, entry) in self.nodes[i].table.iter() {
            let (Some(mu), Some(cov)) = (entry.position_mean, entry.covariance) else { continue };
            if !nid.is_anchor() {
                members.push(cov);
                if !self.cooperative {
                    continue;
                }
            }
            let Some(xi) = entry.erc else { continue };
            let c_pk: Matrix3<f64> = cov.fixed_view::<3, 3>(0, 0).into_owned();
            if let Ok(info) = LinkInfo::from_estimates(*nid, &own, &mu, xi, c_pk) {
                candidates.push(Candidate { node: self.index[nid], info });
            }
        }
        if candidates.is_empty() {
            return Ok(None);
        }
        let c_pj: Matrix3<f64> = own_cov.fixed_view::<3, 3>(0, 0).into_owned();
        let problem =
            AllocationProblem::new(c_pj, candidates.iter().map(|c| c.info.clone()).collect(), self.budget).ok();
        let n = candidates.len();
        let proposal = match (self.prioritization, &problem) {
            (Prioritization::Cpnp, Some(problem)) => match cpnp_allocate(problem, &SolverOptions::default()) {
                Ok(r) => {
                    if r.fallback {
                        self.out.diagnostics.cpnp_fallbacks += 1;
                    }
                    r.m
                }
                Err(_) => {
                    self.out.diagnostics.numeric_failures += 1;
                    nln_core::operation::uniform_allocation(n, self.budget)
                }
            },
            (Prioritization::Cpnp, None) => {
                self.out.diagnostics.numeric_failures += 1;
                nln_core::operation::uniform_allocation(n, self.budget)
            }
            (Prioritization::Uniform, _) => {
                let pick = self.nodes[i].rng.random_range(0..n);
                let mut m = vec![0; n];
                m[pick] = self.per_neighbor_count;
                m
            }
        };
        if proposal.iter().all(|&m| m == 0) {
            return Ok(None);
        }
        Ok(Some(EpochPlan { candidates, proposal, problem, members }))
    }

    fn htna_activation(&mut self, plan: &EpochPlan) -> nln_core::Activation {
        let Some(problem) = &plan.problem else {
            self.out.diagnostics.numeric_failures += 1;
            return nln_core::Activation::StaySilent;
        };
        let decision = ActivationInputs::new(
            plan.proposal.clone(),
            plan.members.clone(),
            self.timing.measurement_airtime.as_secs(),
        )
        .and_then(|inputs| htna_decide(&inputs, problem, &self.motion));
        match decision {
            Ok(d) => d.activation,
            Err(_) => {
                self.out.diagnostics.numeric_failures += 1;
                nln_core::Activation::StaySilent
            }
        }
    }

    fn take_plan(&mut self, i: usize) -> Box<EpochPlan> {
        let agent = self.nodes[i].agent.as_mut().expect("agent");
        match std::mem::replace(&mut agent.procedure, Procedure::Idle) {
            Procedure::Sensing { plan, .. } | Procedure::Backoff { plan, .. } => plan,
            _ => unreachable!("MAC step outside of channel access"),
        }
    }

    /// Drives the access policy until it waits on a timer or reaches a
    /// decision.
    fn mac_step(&mut self, i: usize, mut input: MacInput) -> SimResult<()> {
        let plan = self.take_plan(i);
        loop {
            let activation = if self.policy == AccessPolicy::Htna && input == (MacInput::SenseResult { idle: true }) {
                self.htna_activation(&plan)
            } else {
                nln_core::Activation::Activate
            };
            let node = &mut self.nodes[i];
            let agent = node.agent.as_mut().expect("agent");
            let step = mac_policy(self.policy, &mut agent.mac, input, &self.mac_config, &mut node.rng, || activation);
            match step {
                MacStep::TransmitNow => return self.start_hold(i, &plan),
                MacStep::GiveUp => {
                    self.out.diagnostics.busy_giveups += 1;
                    return self.finish_epoch(i, false);
                }
                MacStep::Silent => {
                    self.out.diagnostics.htna_declines += 1;
                    return self.finish_epoch(i, false);
                }
                MacStep::Sense { window } => {
                    let positions = self.positions(self.now);
                    let busy = self.channel.ongoing(self.now).any(|t| self.hears(&positions, self.now, t.src, i));
                    if busy {
                        input = MacInput::SenseResult { idle: false };
                        continue;
                    }
                    let token = self.fresh_token(i);
                    let at = self.now + window;
                    self.nodes[i].agent.as_mut().expect("agent").procedure = Procedure::Sensing { token, plan };
                    self.push(at, i, EventKind::SenseEnd { token });
                    return Ok(());
                }
                MacStep::Backoff { delay } => {
                    let token = self.fresh_token(i);
                    let at = self.now + delay;
                    self.nodes[i].agent.as_mut().expect("agent").procedure = Procedure::Backoff { token, plan };
                    self.push(at, i, EventKind::BackoffEnd { token });
                    return Ok(());
                }
            }
        }
    }

    fn fresh_token(&mut self, i: usize) -> u64 {
        let agent = self.nodes[i].agent.as_mut().expect("agent");
        agent.next_token += 1;
        agent.next_token
    }

    fn start_hold(&mut self, i: usize, plan: &EpochPlan) -> SimResult<()> {
        self.out.diagnostics.activations += 1;
        // Another member of this agent's subnetwork already holding the
        // channel breaks the one-measurer rule.
        let clash = self.nodes.iter().enumerate().any(|(k, n)| {
            k != i
                && matches!(n.agent.as_ref().map(|a| &a.procedure), Some(Procedure::Holding(_)))
                && (self.nodes[i].table.contains(&n.id) || n.table.contains(&self.nodes[i].id))
        });
        if clash {
            self.out.stats.concurrent_measurers += 1;
        }
        let queue = plan
            .candidates
            .iter()
            .zip(&plan.proposal)
            .filter(|(_, &m)| m > 0)
            .map(|(c, &m)| (c.node, m))
            .collect();
        self.nodes[i].agent.as_mut().expect("agent").procedure =
            Procedure::Holding(Hold { queue, current: None, ranges: BTreeMap::new() });
        self.next_exchange(i)
    }

    fn next_exchange(&mut self, i: usize) -> SimResult<()> {
        let Some(Procedure::Holding(hold)) = self.nodes[i].agent.as_mut().map(|a| &mut a.procedure) else {
            return Ok(());
        };
        while hold.queue.front().is_some_and(|&(_, m)| m == 0) {
            hold.queue.pop_front();
        }
        let Some(&(peer, _)) = hold.queue.front() else {
            return self.finish_epoch(i, true);
        };
        hold.current = Some(peer);
        let peer_id = self.nodes[peer].id;
        let role = self.nodes[i].session.role;
        let (next, actions) = self.nodes[i].session.step(SessionEvent::Start { peer: peer_id });
        if actions.iter().any(|a| matches!(a, Action::Dropped)) {
            let at = self.now + self.timing.airtime;
            self.push(at, i, EventKind::NextExchange);
            return Ok(());
        }
        self.nodes[i].session = next;
        self.out.diagnostics.exchanges_started += 1;
        self.handle_actions(i, role, actions)
    }

    /// Marks the running exchange finished and schedules the next one.
    fn exchange_done(&mut self, i: usize, peer: NodeId, range: Option<f64>) {
        let gap = self.timing.reply_gap;
        let Some(&peer_idx) = self.index.get(&peer) else { return };
        let Some(Procedure::Holding(hold)) = self.nodes[i].agent.as_mut().map(|a| &mut a.procedure) else { return };
        if hold.current != Some(peer_idx) {
            return;
        }
        hold.current = None;
        if let Some(front) = hold.queue.front_mut() {
            front.1 = front.1.saturating_sub(1);
        }
        if let Some(r) = range {
            hold.ranges.entry(peer_idx).or_default().push(r);
        }
        self.exchange_excess.remove(&pair(i, peer_idx));
        let at = self.now + gap;
        self.push(at, i, EventKind::NextExchange);
    }

    fn handle_actions(&mut self, i: usize, role_before: Role, actions: Vec<Action>) -> SimResult<()> {
        for action in actions {
            match action {
                Action::Send { kind, dst, echo, report } => {
                    let delay = if kind == MessageKind::RangingInit { SimTime::ZERO } else { self.timing.reply_gap };
                    let msg = Message {
                        kind,
                        src: self.nodes[i].id,
                        dst: Some(dst),
                        tx_ts: 0,
                        rx_ts: None,
                        payload: None,
                        echo,
                        report,
                    };
                    let at = self.now + delay;
                    self.push(at, i, EventKind::TxStart { msg: Box::new(msg) });
                }
                Action::Completed { peer, range } => {
                    if role_before == Role::Initiator {
                        self.out.diagnostics.exchanges_completed += 1;
                        self.exchange_done(i, peer, Some(range));
                    }
                }
                Action::Failed { peer } => {
                    if role_before == Role::Initiator {
                        self.out.diagnostics.exchanges_failed += 1;
                        self.exchange_done(i, peer, None);
                    } else if let Some(&k) = self.index.get(&peer) {
                        self.exchange_excess.remove(&pair(i, k));
                    }
                }
                Action::Dropped => self.out.diagnostics.dropped_by_session += 1,
            }
        }
        Ok(())
    }

    fn on_tx_start(&mut self, i: usize, mut msg: Message) -> SimResult<()> {
        let now = self.now;
        if !self.nodes[i].is_active(now) {
            return Ok(());
        }
        let tx_ts = self.nodes[i].clock.ticks(now);
        msg.tx_ts = tx_ts;
        if msg.kind == MessageKind::RangingFinal {
            if let Some(echo) = msg.echo.as_mut() {
                echo[2] = tx_ts;
            }
        }
        msg.payload = Some(self.summary(i));
        if msg.kind == MessageKind::RangingInit {
            if let Some(k) = msg.dst.and_then(|d| self.index.get(&d).copied()) {
                let excess = self.draw_excess(i, k, now);
                self.exchange_excess.insert(pair(i, k), excess);
            }
        }
        if msg.kind.is_timed() {
            let (next, actions) =
                self.nodes[i].session.step(SessionEvent::Transmitted { kind: msg.kind, tx_ts, now });
            if actions.is_empty() {
                self.nodes[i].session = next;
                let deadline = now + self.nodes[i].session.timeout;
                self.push(deadline, i, EventKind::Timer);
            }
        }
        let tx = Transmission { id: self.next_tx, src: i, start: now, end: now + self.timing.airtime };
        self.next_tx += 1;
        self.channel.begin(tx);
        self.out.stats.transmissions += 1;
        self.in_flight.insert(tx.id, (tx, msg));
        self.push(tx.end, i, EventKind::TxEnd { tx: tx.id });

        // Agents sensing the channel hear the preamble right away.
        let positions = self.positions(now);
        let sensing: Vec<usize> = (0..self.nodes.len())
            .filter(|&k| matches!(self.nodes[k].agent.as_ref().map(|a| &a.procedure), Some(Procedure::Sensing { .. })))
            .filter(|&k| self.hears(&positions, now, i, k))
            .collect();
        for k in sensing {
            self.mac_step(k, MacInput::SenseResult { idle: false })?;
        }
        Ok(())
    }

    fn draw_excess(&mut self, a: usize, b: usize, t: SimTime) -> f64 {
        let pa = self.position(a, t);
        let pb = self.position(b, t);
        let mut excess = self.los_noise.sample(&mut self.channel_rng);
        if self.links.condition(a, b, &pa, &pb) == crate::protocol::LinkCondition::Nlos {
            if let Some(bias) = &self.nlos_bias {
                excess += bias.sample(&mut self.channel_rng);
            }
        }
        excess
    }

    fn on_tx_end(&mut self, id: u64) -> SimResult<()> {
        let Some((tx, msg)) = self.in_flight.remove(&id) else { return Ok(()) };
        let now = self.now;
        let positions = self.positions(tx.start);
        let receivers: Vec<usize> = (0..self.nodes.len()).collect();
        let outcomes = arbitrate(&self.channel, &tx, &receivers, |a, b| self.hears(&positions, tx.start, a, b));
        for (r, outcome) in outcomes {
            self.out.stats.potential_receptions += 1;
            match outcome {
                Reception::Delivered => self.out.stats.delivered += 1,
                Reception::Collided => self.out.stats.collided += 1,
                Reception::OutOfRange => self.out.stats.out_of_range += 1,
            }
            if self.trace_enabled && outcome != Reception::OutOfRange {
                self.out.trace.push(TraceRow {
                    time_s: tx.start.as_secs(),
                    kind: msg.kind.as_str(),
                    src: self.nodes[tx.src].name.clone(),
                    dst: self.nodes[r].name.clone(),
                    outcome: outcome.as_str(),
                });
            }
            if outcome == Reception::Delivered {
                self.deliver(&tx, &msg, r, &positions)?;
            }
        }
        self.channel.prune(now - self.timing.airtime);
        Ok(())
    }

    fn deliver(&mut self, tx: &Transmission, msg: &Message, r: usize, positions: &[Vector3<f64>]) -> SimResult<()> {
        let now = self.now;
        let src = tx.src;
        let link = self.links.sample(src, r, &positions[src], &positions[r]);
        let excess = if msg.kind.is_timed() {
            self.exchange_excess.get(&pair(src, r)).copied().unwrap_or(0.0)
        } else {
            0.0
        };
        let flight = SimTime::from_secs((link.distance + excess).max(0.0) / SPEED_OF_LIGHT);
        let mut received = msg.clone();
        received.rx_ts = Some(self.nodes[r].clock.ticks(tx.start + flight));
        let erc = sound_channel(link, &self.quality, &mut self.channel_rng);
        self.nodes[r].table.update(&received, Some(erc), now);
        if msg.dst != Some(self.nodes[r].id) {
            return Ok(());
        }
        let holding = matches!(self.nodes[r].agent.as_ref().map(|a| &a.procedure), Some(Procedure::Holding(_)));
        if holding && msg.kind == MessageKind::RangingInit {
            self.out.diagnostics.inits_dropped_while_holding += 1;
            return Ok(());
        }
        let role = self.nodes[r].session.role;
        let prev = &self.nodes[r].session;
        let (next, actions) = prev.step(SessionEvent::Receive { msg: received, now });
        if prev.is_locked() && next.is_locked() && prev.peer != next.peer {
            self.out.diagnostics.lockout_violations += 1;
        }
        self.nodes[r].session = next;
        self.handle_actions(r, role, actions)
    }

    fn finish_epoch(&mut self, i: usize, activated: bool) -> SimResult<()> {
        self.predict_to_now(i)?;
        let now = self.now;
        let agent = self.nodes[i].agent.as_mut().expect("agent");
        let procedure = std::mem::replace(&mut agent.procedure, Procedure::Idle);
        let ranges = match procedure {
            Procedure::Holding(hold) => hold.ranges,
            _ => BTreeMap::new(),
        };
        let mut entries = Vec::new();
        let mut n_meas = 0;
        for (&k, values) in &ranges {
            let peer = self.nodes[k].id;
            let Some(entry) = self.nodes[i].table.get(&peer) else { continue };
            let (Some(mu), Some(cov), Some(xi)) = (entry.position_mean, entry.covariance, entry.erc) else { continue };
            let count = values.len() as u32;
            let range = values.iter().sum::<f64>() / values.len() as f64;
            n_meas += count;
            entries.push(MeasurementEntry {
                neighbor: peer,
                range,
                variance: 1.0 / (count as f64 * xi),
                position_mean: mu,
                position_covariance: cov.fixed_view::<3, 3>(0, 0).into_owned(),
            });
            let truth = (self.position(i, now) - self.position(k, now)).norm();
            self.out.measurements.push(MeasurementRow {
                time_s: now.as_secs(),
                initiator: self.nodes[i].name.clone(),
                responder: self.nodes[k].name.clone(),
                count,
                range,
                true_range: truth,
                xi,
            });
        }
        if !entries.is_empty() {
            let batch = MeasurementBatch::new(entries).map_err(numeric("measurement batch"))?;
            let ut = self.ut;
            let inference = self.inference;
            let agent = self.nodes[i].agent.as_mut().expect("agent");
            match inference {
                InferenceAlgorithm::Spbp => match spbp_update(&agent.belief, &batch, &ut) {
                    Ok((b, _)) => agent.belief = b,
                    Err(_) => self.out.diagnostics.numeric_failures += 1,
                },
                InferenceAlgorithm::Ls => match ls_estimate(&agent.ls_position, &batch, &LsOptions::default()) {
                    Ok(p) => agent.ls_position = p,
                    Err(_) => self.out.diagnostics.numeric_failures += 1,
                },
            }
        }
        let agent = self.nodes[i].agent.as_ref().expect("agent");
        let est = self.agent_position(agent);
        let cov_trace = match self.inference {
            InferenceAlgorithm::Spbp => agent.belief.position_trace(),
            InferenceAlgorithm::Ls => f64::NAN,
        };
        let truth = self.position(i, now);
        self.out.records.push(RunRecord {
            time_s: now.as_secs(),
            node_id: self.nodes[i].id.id,
            true_position: truth.into(),
            est_position: est.into(),
            cov_trace,
            n_meas,
            activated,
            policy: self.policy_label.clone(),
        });
        Ok(())
    }
}

/// Runs a validated scenario with the given seed.
pub fn run(scenario: &ScenarioConfig, seed: u64) -> SimResult<RunOutput> {
    Simulation::new(scenario, seed)?.run()
}
