//! Declarative experiment description.
//!
//! Scenarios are TOML documents. Unknown keys are rejected, enum values come
//! from closed sets, and [`ScenarioConfig::validate`] checks cross references
//! before a simulation is built.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::protocol::{AccessPolicy, ChannelQualityModel};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceAlgorithm {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "SPBP")]
    Spbp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prioritization {
    #[serde(rename = "UNIFORM")]
    Uniform,
    #[serde(rename = "CPNP")]
    Cpnp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Algorithms {
    pub inference: InferenceAlgorithm,
    pub activation: AccessPolicy,
    pub prioritization: Prioritization,
    /// Agents range with each other as well as with anchors.
    #[serde(default = "yes")]
    pub cooperative: bool,
}

fn yes() -> bool {
    true
}

impl Algorithms {
    /// Short label such as `BP-HT-CP`.
    pub fn acronym(&self) -> String {
        let inf = match self.inference {
            InferenceAlgorithm::Ls => "LS",
            InferenceAlgorithm::Spbp => "BP",
        };
        let pri = match self.prioritization {
            Prioritization::Uniform => "UN",
            Prioritization::Cpnp => "CP",
        };
        format!("{inf}-{}-{pri}", self.activation.code())
    }

    /// Parses an acronym such as `BP-AL-UN`.
    pub fn from_acronym(s: &str) -> SimResult<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let bad = || SimError::Config(format!("unknown algorithm combination `{s}`"));
        let [inf, act, pri] = parts[..] else { return Err(bad()) };
        Ok(Self {
            inference: match inf {
                "LS" => InferenceAlgorithm::Ls,
                "BP" => InferenceAlgorithm::Spbp,
                _ => return Err(bad()),
            },
            activation: match act {
                "AL" => AccessPolicy::Aloha,
                "CS" => AccessPolicy::Csma,
                "HT" => AccessPolicy::Htna,
                _ => return Err(bad()),
            },
            prioritization: match pri {
                "UN" => Prioritization::Uniform,
                "CP" => Prioritization::Cpnp,
                _ => return Err(bad()),
            },
            cooperative: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    /// Driving-noise variances `(σx², σy², σz²)`, (m/s²)².
    pub motion_noise: Vec3,
    /// Measurements per selected neighbor under uniform allocation.
    pub per_neighbor_count: u32,
    /// Total measurements per epoch under CPNP.
    pub budget: u32,
    pub epoch_period_s: f64,
    /// Relative half-width of the uniform jitter on each epoch interval.
    pub epoch_jitter: f64,
    pub initial_position_std: f64,
    pub initial_velocity_std: f64,
    pub ut_alpha: f64,
    pub ut_beta: f64,
    pub ut_kappa: Option<f64>,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            motion_noise: [0.06 * 0.06, 0.06 * 0.06, 0.02 * 0.02],
            per_neighbor_count: 4,
            budget: 12,
            epoch_period_s: 0.1,
            epoch_jitter: 0.1,
            initial_position_std: 10.0,
            initial_velocity_std: 1.0,
            ut_alpha: 1.0,
            ut_beta: 2.0,
            ut_kappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    pub message_airtime_s: f64,
    pub reply_gap_s: f64,
    pub ranging_timeout_s: f64,
    pub chirp_mean_s: f64,
    pub neighbor_expiry_s: f64,
    /// Per-exchange ranging noise on LOS links, meters.
    pub los_noise_std: f64,
    /// Mean of the exponential excess range on NLOS links, meters.
    pub nlos_bias_mean: f64,
    /// Per-node drift is uniform in `±clock_drift_ppm`.
    pub clock_drift_ppm: f64,
    /// Per-node offset is uniform in `[0, clock_offset_max_s]`.
    pub clock_offset_max_s: f64,
    pub channel_quality: ChannelQualityModel,
    /// Emit the per-message trace.
    pub trace: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            message_airtime_s: 250e-6,
            reply_gap_s: 250e-6,
            ranging_timeout_s: 0.01,
            chirp_mean_s: 1.0,
            neighbor_expiry_s: 5.0,
            los_noise_std: 0.1,
            nlos_bias_mean: 0.6,
            clock_drift_ppm: 10.0,
            clock_offset_max_s: 1.0,
            channel_quality: ChannelQualityModel::default(),
            trace: false,
        }
    }
}

impl ProtocolParams {
    /// Channel time of one complete four-message exchange.
    pub fn measurement_airtime_s(&self) -> f64 {
        4.0 * (self.message_airtime_s + self.reply_gap_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Links {
    pub comm_range_m: f64,
    /// Node-name pairs in non-line-of-sight.
    pub nlos: Vec<[String; 2]>,
    /// Node-name pairs that never hear each other.
    pub blocked: Vec<[String; 2]>,
    /// Heights separating floors, ascending.
    pub floor_boundaries: Vec<f64>,
    /// Pairs on different floors are NLOS.
    pub cross_floor_nlos: bool,
}

impl Default for Links {
    fn default() -> Self {
        Self { comm_range_m: 100.0, nlos: Vec::new(), blocked: Vec::new(), floor_boundaries: Vec::new(), cross_floor_nlos: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landmark {
    pub name: String,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub id: u32,
    pub name: String,
    pub position: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_from_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_until_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec3>,
    /// Name of a landmark, instead of `position`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<String>,
    pub arrival_s: f64,
    #[serde(default)]
    pub dwell_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: u32,
    pub name: String,
    pub waypoints: Vec<WaypointConfig>,
    /// Initial belief mean; defaults to the anchor centroid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_position: Option<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_position_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_velocity_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Records before this time are excluded from metrics.
    pub warmup_s: f64,
    /// Only score records taken while the agent dwells at a waypoint.
    pub dwell_only: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { warmup_s: 5.0, dwell_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    pub algorithms: Algorithms,
    #[serde(default)]
    pub parameters: Parameters,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub links: Links,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub landmarks: Vec<Landmark>,
    #[serde(default)]
    pub anchors: Vec<AnchorConfig>,
    #[serde(default)]
    pub agents: Vec<AgentConfig>,
}

/// A validation failure located by its field path.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn field(path: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError { path: path.into(), message: message.into() }
}

fn positive(v: f64, path: &str, errs: &mut Vec<FieldError>) {
    if !(v > 0.0) || !v.is_finite() {
        errs.push(field(path, format!("must be positive, got {v}")));
    }
}

fn nonnegative(v: f64, path: &str, errs: &mut Vec<FieldError>) {
    if !(v >= 0.0) || !v.is_finite() {
        errs.push(field(path, format!("must be nonnegative, got {v}")));
    }
}

fn finite3(v: &Vec3, path: &str, errs: &mut Vec<FieldError>) {
    if v.iter().any(|c| !c.is_finite()) {
        errs.push(field(path, "components must be finite"));
    }
}

impl ScenarioConfig {
    /// Parses TOML text. Parse errors carry line and column.
    pub fn from_toml_str(text: &str) -> SimResult<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate().map_err(|errs| {
            SimError::Config(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> SimResult<String> {
        toml::to_string(self).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Names of every node, anchors first.
    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.anchors.iter().map(|a| a.name.as_str()).chain(self.agents.iter().map(|a| a.name.as_str()))
    }

    pub fn landmark(&self, name: &str) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.name == name)
    }

    /// Waypoint position, resolving landmark references.
    pub fn waypoint_position(&self, wp: &WaypointConfig) -> Option<Vec3> {
        match (&wp.position, &wp.landmark) {
            (Some(p), None) => Some(*p),
            (None, Some(l)) => self.landmark(l).map(|l| l.position),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        nonnegative(self.duration_s, "duration_s", &mut errs);

        let p = &self.parameters;
        for (i, v) in p.motion_noise.iter().enumerate() {
            nonnegative(*v, &format!("parameters.motion_noise[{i}]"), &mut errs);
        }
        if p.per_neighbor_count == 0 {
            errs.push(field("parameters.per_neighbor_count", "must be at least 1"));
        }
        positive(p.epoch_period_s, "parameters.epoch_period_s", &mut errs);
        if !(0.0..1.0).contains(&p.epoch_jitter) {
            errs.push(field("parameters.epoch_jitter", "must be in [0, 1)"));
        }
        positive(p.initial_position_std, "parameters.initial_position_std", &mut errs);
        positive(p.initial_velocity_std, "parameters.initial_velocity_std", &mut errs);
        positive(p.ut_alpha, "parameters.ut_alpha", &mut errs);

        let pr = &self.protocol;
        positive(pr.message_airtime_s, "protocol.message_airtime_s", &mut errs);
        nonnegative(pr.reply_gap_s, "protocol.reply_gap_s", &mut errs);
        positive(pr.ranging_timeout_s, "protocol.ranging_timeout_s", &mut errs);
        positive(pr.chirp_mean_s, "protocol.chirp_mean_s", &mut errs);
        positive(pr.neighbor_expiry_s, "protocol.neighbor_expiry_s", &mut errs);
        nonnegative(pr.los_noise_std, "protocol.los_noise_std", &mut errs);
        nonnegative(pr.nlos_bias_mean, "protocol.nlos_bias_mean", &mut errs);
        nonnegative(pr.clock_offset_max_s, "protocol.clock_offset_max_s", &mut errs);
        if !(pr.clock_drift_ppm.abs() <= 100.0) {
            errs.push(field("protocol.clock_drift_ppm", "must be within ±100 ppm"));
        }
        let q = &pr.channel_quality;
        if !(q.xi_min > 0.0 && q.xi_max >= q.xi_min) {
            errs.push(field("protocol.channel_quality", "need 0 < xi_min <= xi_max"));
        }
        positive(q.decay_m, "protocol.channel_quality.decay_m", &mut errs);
        nonnegative(q.noise_sigma, "protocol.channel_quality.noise_sigma", &mut errs);

        positive(self.links.comm_range_m, "links.comm_range_m", &mut errs);
        if self.links.floor_boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            errs.push(field("links.floor_boundaries", "must be strictly ascending"));
        }
        nonnegative(self.metrics.warmup_s, "metrics.warmup_s", &mut errs);

        let mut landmark_names = BTreeSet::new();
        for (i, l) in self.landmarks.iter().enumerate() {
            if !landmark_names.insert(l.name.as_str()) {
                errs.push(field(format!("landmarks[{i}].name"), format!("duplicate landmark `{}`", l.name)));
            }
            finite3(&l.position, &format!("landmarks[{i}].position"), &mut errs);
        }

        let mut names = BTreeMap::new();
        let mut anchor_ids = BTreeSet::new();
        for (i, a) in self.anchors.iter().enumerate() {
            let path = format!("anchors[{i}]");
            if !anchor_ids.insert(a.id) {
                errs.push(field(format!("{path}.id"), format!("duplicate anchor id {}", a.id)));
            }
            if names.insert(a.name.as_str(), path.clone()).is_some() {
                errs.push(field(format!("{path}.name"), format!("duplicate node name `{}`", a.name)));
            }
            finite3(&a.position, &format!("{path}.position"), &mut errs);
            if let (Some(from), Some(until)) = (a.active_from_s, a.active_until_s) {
                if !(until > from) {
                    errs.push(field(format!("{path}.active_until_s"), "must be after active_from_s"));
                }
            }
        }
        let mut agent_ids = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            let path = format!("agents[{i}]");
            if !agent_ids.insert(a.id) {
                errs.push(field(format!("{path}.id"), format!("duplicate agent id {}", a.id)));
            }
            if names.insert(a.name.as_str(), path.clone()).is_some() {
                errs.push(field(format!("{path}.name"), format!("duplicate node name `{}`", a.name)));
            }
            if a.waypoints.is_empty() {
                errs.push(field(format!("{path}.waypoints"), "at least one waypoint is required"));
            }
            let mut free_from = f64::NEG_INFINITY;
            for (w, wp) in a.waypoints.iter().enumerate() {
                let wpath = format!("{path}.waypoints[{w}]");
                match (&wp.position, &wp.landmark) {
                    (Some(pos), None) => finite3(pos, &format!("{wpath}.position"), &mut errs),
                    (None, Some(l)) if !landmark_names.contains(l.as_str()) => {
                        errs.push(field(format!("{wpath}.landmark"), format!("undefined landmark `{l}`")))
                    }
                    (None, Some(_)) => {}
                    _ => errs.push(field(wpath.clone(), "exactly one of `position` or `landmark` is required")),
                }
                nonnegative(wp.dwell_s, &format!("{wpath}.dwell_s"), &mut errs);
                if !(wp.arrival_s > free_from) || !wp.arrival_s.is_finite() {
                    errs.push(field(format!("{wpath}.arrival_s"), "waypoint times must be strictly increasing"));
                }
                free_from = wp.arrival_s + wp.dwell_s;
            }
            if let Some(p) = &a.initial_position {
                finite3(p, &format!("{path}.initial_position"), &mut errs);
            }
            if let Some(s) = a.initial_position_std {
                positive(s, &format!("{path}.initial_position_std"), &mut errs);
            }
            if let Some(s) = a.initial_velocity_std {
                positive(s, &format!("{path}.initial_velocity_std"), &mut errs);
            }
        }
        for (list, key) in [(&self.links.nlos, "nlos"), (&self.links.blocked, "blocked")] {
            for (i, pair) in list.iter().enumerate() {
                for n in pair {
                    if !names.contains_key(n.as_str()) {
                        errs.push(field(format!("links.{key}[{i}]"), format!("undefined node `{n}`")));
                    }
                }
                if pair[0] == pair[1] {
                    errs.push(field(format!("links.{key}[{i}]"), "a node cannot pair with itself"));
                }
            }
        }
        if matches!(self.algorithms.prioritization, Prioritization::Cpnp) && self.parameters.budget == 0 {
            errs.push(field("parameters.budget", "CPNP needs a positive budget"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
