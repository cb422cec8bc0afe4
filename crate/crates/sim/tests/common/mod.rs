#![allow(dead_code)]

use nln_sim::scenario::{AgentConfig, Algorithms, AnchorConfig, WaypointConfig};
use nln_sim::ScenarioConfig;

pub fn anchor(id: u32, position: [f64; 3]) -> AnchorConfig {
    AnchorConfig { id, name: format!("A{id}"), position, active_from_s: None, active_until_s: None }
}

pub fn static_agent(id: u32, position: [f64; 3]) -> AgentConfig {
    AgentConfig {
        id,
        name: format!("agent{id}"),
        waypoints: vec![WaypointConfig { position: Some(position), landmark: None, arrival_s: 0.0, dwell_s: 0.0 }],
        initial_position: Some([position[0] + 0.5, position[1] - 0.5, position[2] + 0.3]),
        initial_position_std: Some(1.0),
        initial_velocity_std: None,
    }
}

/// Four anchors around a 10 m x 8 m room and the given agents.
pub fn room(acronym: &str, duration_s: f64, agents: Vec<AgentConfig>) -> ScenarioConfig {
    let mut cfg: ScenarioConfig = toml::from_str(&format!(
        "name = \"room\"\nduration_s = {duration_s}\n[algorithms]\ninference = \"SPBP\"\nactivation = \"ALOHA\"\nprioritization = \"UNIFORM\"\n"
    ))
    .unwrap();
    cfg.algorithms = Algorithms::from_acronym(acronym).unwrap();
    cfg.anchors = vec![
        anchor(1, [0.0, 0.0, 2.5]),
        anchor(2, [10.0, 0.0, 0.5]),
        anchor(3, [10.0, 8.0, 2.5]),
        anchor(4, [0.0, 8.0, 0.8]),
    ];
    cfg.agents = agents;
    cfg.validate().unwrap();
    cfg
}
