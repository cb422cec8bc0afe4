//! Loading scenario files and the bundled reproduction scenarios.

use std::path::{Path, PathBuf};

use nln_sim::{ScenarioConfig, SimError};

use crate::error::{io_error, HarnessError, HarnessResult};

/// Bundled scenarios by name, as shipped in `scenarios/`.
pub const BUNDLED: &[(&str, &str)] = &[
    ("single_floor_inference", include_str!("../scenarios/single_floor_inference.toml")),
    ("two_agent_cooperation", include_str!("../scenarios/two_agent_cooperation.toml")),
    ("three_agent_activation", include_str!("../scenarios/three_agent_activation.toml")),
    ("prioritization_multipath", include_str!("../scenarios/prioritization_multipath.toml")),
    ("multi_floor", include_str!("../scenarios/multi_floor.toml")),
];

/// Parses and validates scenario text. `origin` labels errors.
pub fn parse_scenario(text: &str, origin: &str) -> HarnessResult<ScenarioConfig> {
    ScenarioConfig::from_toml_str(text).map_err(|e| match e {
        SimError::Config(message) => HarnessError::Config { path: origin.to_string(), message },
        other => HarnessError::Simulation(other),
    })
}

/// Reads, parses and validates a scenario file. Omitted fields take their
/// defaults.
pub fn load_scenario(path: impl AsRef<Path>) -> HarnessResult<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Config {
        path: path.display().to_string(),
        message: format!("cannot read scenario: {source}"),
    })?;
    parse_scenario(&text, &path.display().to_string())
}

/// A bundled scenario by name.
pub fn bundled(name: &str) -> HarnessResult<ScenarioConfig> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| HarnessError::InvalidArgument(format!("no bundled scenario `{name}`")))?;
    parse_scenario(text, &format!("<bundled {name}>"))
}

/// Loads `arg` as a path if it exists, else as a bundled scenario name.
pub fn resolve_scenario(arg: &str) -> HarnessResult<ScenarioConfig> {
    let path = PathBuf::from(arg);
    if path.exists() {
        load_scenario(path)
    } else if BUNDLED.iter().any(|(n, _)| *n == arg) {
        bundled(arg)
    } else {
        let known: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
        Err(HarnessError::Config {
            path: arg.to_string(),
            message: format!("no such file or bundled scenario (bundled: {})", known.join(", ")),
        })
    }
}

/// Writes `cfg` back out as TOML.
pub fn save_scenario(cfg: &ScenarioConfig, path: impl AsRef<Path>) -> HarnessResult<()> {
    let path = path.as_ref();
    let text = cfg.to_toml_string()?;
    std::fs::write(path, text).map_err(io_error(path))
}
