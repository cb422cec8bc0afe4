//! Deterministic discrete-event simulation of a UWB ranging network whose
//! agents run cooperative navigation on top of a simulated MAC.

pub mod channel;
pub mod error;
pub mod kernel;
pub mod mobility;
pub mod protocol;
pub mod records;
pub mod scenario;
pub mod time;

pub use channel::{arbitrate, ChannelState, LinkTruth, Reception, Transmission};
pub use error::{SimError, SimResult};
pub use kernel::{run, ChannelStats, Diagnostics, EventKind, RunOutput, SimEvent, Simulation};
pub use mobility::{mobility_position, Trajectory, Waypoint};
pub use records::{MeasurementRow, RunRecord, TraceRow};
pub use scenario::ScenarioConfig;
pub use time::SimTime;
