use nln_harness::scenario::save_scenario;
use nln_harness::{bundled, load_scenario, parse_scenario, resolve_scenario, HarnessError, BUNDLED};
use nln_sim::protocol::AccessPolicy;

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("nln-scenarios-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn bundled_scenarios_round_trip() {
    for (name, _) in BUNDLED {
        let cfg = bundled(name).unwrap();
        assert_eq!(cfg.name, *name);
        let path = scratch(&format!("{name}.toml"));
        save_scenario(&cfg, &path).unwrap();
        let back = load_scenario(&path).unwrap();
        assert_eq!(back, cfg, "{name}");
    }
}

#[test]
fn single_floor_lists_its_anchors() {
    let cfg = bundled("single_floor_inference").unwrap();
    let names: Vec<&str> = cfg.anchors.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["A1", "A2", "A3", "A4"]);
    assert_eq!(cfg.agents.len(), 1);
}

#[test]
fn multi_floor_layout() {
    let cfg = bundled("multi_floor").unwrap();
    assert_eq!(cfg.anchors.len(), 7);
    assert_eq!(cfg.landmarks.len(), 23);
    assert_eq!(cfg.landmarks.iter().filter(|l| l.position[2] < 4.0).count(), 16);
    assert_eq!(cfg.links.floor_boundaries, vec![4.0]);
    assert!(cfg.agents[0].waypoints.iter().all(|w| w.dwell_s == 30.0));
}

#[test]
fn unknown_policy_names_the_field() {
    let text = "name = \"x\"\nduration_s = 5.0\n[algorithms]\ninference = \"SPBP\"\nactivation = \"TDMA\"\nprioritization = \"UNIFORM\"\n";
    let err = parse_scenario(text, "bad.toml").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("activation") && msg.contains("TDMA"), "{msg}");
    assert!(msg.contains("bad.toml"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn invalid_values_name_their_path() {
    let text = "name = \"x\"\nduration_s = 5.0\n[algorithms]\ninference = \"SPBP\"\nactivation = \"CSMA\"\nprioritization = \"UNIFORM\"\n[parameters]\nepoch_period_s = -1.0\n";
    let msg = parse_scenario(text, "neg.toml").unwrap_err().to_string();
    assert!(msg.contains("parameters.epoch_period_s"), "{msg}");
}

#[test]
fn minimal_file_takes_defaults() {
    let text = "name = \"tiny\"\nduration_s = 5.0\n[algorithms]\ninference = \"SPBP\"\nactivation = \"HTNA\"\nprioritization = \"CPNP\"\n";
    let cfg = parse_scenario(text, "tiny.toml").unwrap();
    assert_eq!(cfg.algorithms.activation, AccessPolicy::Htna);
    assert_eq!(cfg.parameters.epoch_period_s, 0.1);
    assert_eq!(cfg.parameters.budget, 12);
    assert_eq!(cfg.protocol.message_airtime_s, 250e-6);
    assert!(cfg.anchors.is_empty() && cfg.agents.is_empty());
    assert_eq!(cfg.algorithms.acronym(), "BP-HT-CP");
}

#[test]
fn resolve_prefers_files_then_bundled_names() {
    let path = scratch("custom.toml");
    let mut cfg = bundled("prioritization_multipath").unwrap();
    cfg.name = "custom".into();
    save_scenario(&cfg, &path).unwrap();
    assert_eq!(resolve_scenario(path.to_str().unwrap()).unwrap().name, "custom");
    assert_eq!(resolve_scenario("multi_floor").unwrap().name, "multi_floor");
    match resolve_scenario("no_such_thing") {
        Err(HarnessError::Config { message, .. }) => assert!(message.contains("single_floor_inference"), "{message}"),
        other => panic!("{other:?}"),
    }
}
