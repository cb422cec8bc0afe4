//! Experiment harness: scenario files, replicated runs, metrics and
//! comparison reports.

pub mod error;
pub mod metrics;
pub mod replicate;
pub mod report;
pub mod scenario;

pub use error::{HarnessError, HarnessResult};
pub use metrics::{error_threshold, leo, mae, measurement_rate, percent_change, rmse};
pub use replicate::{replicate, replicate_report, seed_range};
pub use report::{compare, evaluate, Comparison, MetricReport};
pub use scenario::{bundled, load_scenario, parse_scenario, resolve_scenario, BUNDLED};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "NLN_OUT_DIR";

/// Output directory used when none is given on the command line.
pub const DEFAULT_OUT_DIR: &str = "nln-out";
