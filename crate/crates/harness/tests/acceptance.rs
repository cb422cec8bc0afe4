//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion does.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use nln_core::inference::{spbp_update, unscented_update, MeasurementBatch, MeasurementEntry, UtParams};
use nln_core::linalg::{min_eigenvalue, to_dyn};
use nln_core::model::{GaussianBelief, NodeId, StateVector};
use nln_core::operation::{
    brute_force_allocate, cpnp_allocate, predicted_covariance_counts, AllocationProblem, LinkInfo, SolverOptions,
};
use nln_harness::metrics::{leo, threshold_grid};
use nln_harness::{bundled, evaluate, parse_scenario, replicate, seed_range, MetricReport};
use nln_sim::protocol::{
    twr_range, Action, ClockModel, Message, MessageKind, RangingSession, SessionEvent, SPEED_OF_LIGHT, TICK_PERIOD,
};
use nln_sim::scenario::Algorithms;
use nln_sim::{run, ScenarioConfig, SimTime};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Line {
    id: usize,
    name: &'static str,
    outcome: Outcome,
    elapsed: Duration,
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed(id: usize, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let mut outcome = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            let detail = match outcome {
                Ok(d) | Err(d) => d,
            };
            outcome = Err(format!("{detail}; took {:.1} s, limit {} s", elapsed.as_secs_f64(), limit.as_secs()));
        }
    }
    let line = Line { id, name, outcome, elapsed };
    let (tag, detail) = match &line.outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(
        std::io::stderr(),
        "[{tag}] {:>2}. {:<28} {:>7.1} s  {detail}",
        line.id,
        line.name,
        line.elapsed.as_secs_f64()
    );
    line
}

// ---------------------------------------------------------------------------
// Random generators

fn uniform_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64, scale: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() * scale + DMatrix::identity(n, n) * floor
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-2 && n <= 1.0 {
            return v / n;
        }
    }
}

fn pd3(rng: &mut ChaCha8Rng, floor: f64, scale: f64) -> Matrix3<f64> {
    nln_core::linalg::from_dyn(&uniform_pd(rng, 3, floor, scale))
}

fn random_problem(rng: &mut ChaCha8Rng, max_links: usize, max_budget: u32) -> AllocationProblem<f64> {
    let n = rng.random_range(1..=max_links);
    let links = (0..n)
        .map(|i| {
            let u = random_unit(rng);
            let xi = rng.random_range(16.0..100.0);
            let c = if rng.random_bool(0.5) {
                Matrix3::zeros()
            } else {
                let scale = rng.random_range(0.01..1.0);
                pd3(rng, 1e-3, scale)
            };
            let id = if c == Matrix3::zeros() { NodeId::anchor(i as u32 + 1) } else { NodeId::agent(i as u32 + 10) };
            LinkInfo::new(id, u, xi, c).unwrap()
        })
        .collect();
    let scale = rng.random_range(0.05..5.0);
    let c_pj = pd3(rng, 1e-3, scale);
    AllocationProblem::new(c_pj, links, rng.random_range(0..=max_budget)).unwrap()
}

// ---------------------------------------------------------------------------
// 1-3: numerical cores

fn linear_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let nz = rng.random_range(1..=n.min(6));
        let mean = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let cov = uniform_pd(&mut rng, n, 0.05, 1.0);
        let h = DMatrix::from_fn(nz, n, |_, _| rng.random_range(-2.0..2.0));
        let r = uniform_pd(&mut rng, nz, 0.1, 0.3);
        let z = DVector::from_fn(nz, |_, _| rng.random_range(-5.0..5.0));
        let (m, c, _) = unscented_update(&mean, &cov, |x| &h * x, &z, &r, &UtParams::default())
            .map_err(|e| format!("update failed: {e}"))?;
        let s = &h * &cov * h.transpose() + &r;
        let k = &cov * h.transpose() * s.try_inverse().ok_or("singular innovation")?;
        let km = &mean + &k * (&z - &h * &mean);
        let kc = &cov - &k * &h * &cov;
        worst = worst.max((&m - &km).norm() / km.norm().max(1e-12)).max((&c - &kc).norm() / kc.norm());
    }
    check(worst <= 1e-8, format!("200 systems, worst relative error {worst:.2e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_gap = 0.0f64;
    let mut bound_violations = 0;
    for _ in 0..100 {
        let p = random_problem(&mut rng, 4, 8);
        let exact = brute_force_allocate(&p).map_err(|e| e.to_string())?;
        let got = cpnp_allocate(&p, &SolverOptions::default()).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(got.objective / exact.objective - 1.0);
        if let Some(relaxed) = got.relaxed_objective {
            if relaxed > exact.objective * (1.0 + 1e-9) {
                bound_violations += 1;
            }
        }
    }
    check(
        worst_gap <= 0.05 && bound_violations == 0,
        format!("100 problems, worst gap {:.3} %, {bound_violations} lower-bound violations", worst_gap * 100.0),
    )
}

fn clocked_exchange(distance: f64, reply1: f64, reply2: f64, a: &ClockModel, b: &ClockModel) -> [i128; 6] {
    let secs = |s: f64| SimTime::from_secs(s).attos();
    let tof = secs(distance / SPEED_OF_LIGHT);
    let t1 = secs(0.5);
    let t2 = t1 + tof;
    let t3 = t2 + secs(reply1);
    let t4 = t3 + tof;
    let t5 = t4 + secs(reply2);
    let t6 = t5 + tof;
    let at = |c: &ClockModel, t: i128| c.ticks(SimTime(t));
    [at(a, t1), at(b, t2), at(b, t3), at(a, t4), at(a, t5), at(b, t6)]
}

fn twr_correctness() -> Outcome {
    let mut ideal_worst = 0.0f64;
    for d in [0.0, 0.5, 3.0, 10.0, 25.0, 80.0] {
        for (r1, r2) in [(100e-6, 300e-6), (300e-6, 100e-6), (200e-6, 200e-6)] {
            let t = clocked_exchange(d, r1, r2, &ClockModel::ideal(), &ClockModel::ideal());
            let r = twr_range(&t, TICK_PERIOD).map_err(|e| e.to_string())?;
            ideal_worst = ideal_worst.max((r - d).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut drift_worst = 0.0f64;
    let corners = [(20.0, -20.0, 1e-6, 300e-6), (-20.0, 20.0, 300e-6, 1e-6), (20.0, 20.0, 300e-6, 300e-6)];
    let random = (0..1000).map(|_| {
        (rng.random_range(-20.0..=20.0), rng.random_range(-20.0..=20.0), rng.random_range(1e-6..=300e-6), rng.random_range(1e-6..=300e-6))
    });
    for (da, db, r1, r2) in corners.into_iter().chain(random.collect::<Vec<_>>()) {
        let a = ClockModel::new(0.3, da).map_err(|e| e.to_string())?;
        let b = ClockModel::new(0.8, db).map_err(|e| e.to_string())?;
        let r = twr_range(&clocked_exchange(10.0, r1, r2, &a, &b), TICK_PERIOD).map_err(|e| e.to_string())?;
        drift_worst = drift_worst.max((r - 10.0).abs());
    }
    check(
        ideal_worst <= 1e-9 && drift_worst <= 0.02,
        format!("ideal clocks {ideal_worst:.1e} m, +/-20 ppm at 10 m {:.2} cm", drift_worst * 100.0),
    )
}

// ---------------------------------------------------------------------------
// 4-8: scenario comparisons

fn with_policy(cfg: &ScenarioConfig, acronym: &str) -> ScenarioConfig {
    let mut c = cfg.clone();
    let cooperative = c.algorithms.cooperative;
    c.algorithms = Algorithms::from_acronym(acronym).unwrap();
    c.algorithms.cooperative = cooperative;
    c
}

fn report(cfg: &ScenarioConfig, seeds: u64) -> Result<MetricReport, String> {
    let runs = replicate(cfg, &seed_range(cfg, seeds)).map_err(|e| e.to_string())?;
    evaluate(cfg, &runs).map_err(|e| e.to_string())
}

fn reduction(base: f64, new: f64) -> f64 {
    (base - new) / base
}

fn inference_comparison() -> Outcome {
    let cfg = bundled("single_floor_inference").map_err(|e| e.to_string())?;
    let bp = report(&with_policy(&cfg, "BP-AL-UN"), 20)?.median_seed_rmse();
    let ls = report(&with_policy(&cfg, "LS-AL-UN"), 20)?.median_seed_rmse();
    let red = reduction(ls, bp);
    check(bp < ls && red >= 0.10, format!("median RMSE BP {bp:.3} m, LS {ls:.3} m, reduction {:.1} %", red * 100.0))
}

fn cooperation_gain() -> Outcome {
    let cfg = bundled("two_agent_cooperation").map_err(|e| e.to_string())?;
    let mut alone = cfg.clone();
    alone.algorithms.cooperative = false;
    let coop = report(&cfg, 15)?;
    let non = report(&alone, 15)?;
    let e = |r: &MetricReport| r.node(2).map(|n| n.e_th_p20).ok_or("agent 2 has no scored records".to_string());
    let (c, n) = (e(&coop)?, e(&non)?);
    let red = reduction(n, c);
    check(red >= 0.40, format!("agent 2 e_th(0.2) coop {c:.3} m, noncoop {n:.3} m, reduction {:.1} %", red * 100.0))
}

fn activation_efficiency() -> Outcome {
    let cfg = bundled("three_agent_activation").map_err(|e| e.to_string())?;
    let cs = report(&with_policy(&cfg, "BP-CS-UN"), 15)?;
    let ht = report(&with_policy(&cfg, "BP-HT-UN"), 15)?;
    let rate_red = reduction(cs.measurement_rate, ht.measurement_rate);
    let rmse_change = ht.rmse / cs.rmse - 1.0;
    check(
        rate_red >= 0.30 && rmse_change <= 0.10,
        format!(
            "rate CS {:.1} Hz, HT {:.1} Hz (-{:.1} %); RMSE CS {:.3} m, HT {:.3} m ({:+.1} %)",
            cs.measurement_rate,
            ht.measurement_rate,
            rate_red * 100.0,
            cs.rmse,
            ht.rmse,
            rmse_change * 100.0
        ),
    )
}

fn prioritization_selectivity() -> Outcome {
    let cfg = bundled("prioritization_multipath").map_err(|e| e.to_string())?;
    let agent = cfg.agents.first().ok_or("no agent")?.name.clone();
    let low: Vec<String> = cfg
        .links
        .nlos
        .iter()
        .filter_map(|[a, b]| if *a == agent { Some(b.clone()) } else if *b == agent { Some(a.clone()) } else { None })
        .collect();
    let high: Vec<String> = cfg.anchors.iter().map(|a| a.name.clone()).filter(|n| !low.contains(n)).collect();
    let cp = report(&with_policy(&cfg, "BP-HT-CP"), 5)?;
    let un = report(&with_policy(&cfg, "BP-HT-UN"), 5)?;
    let share = |names: &[String]| names.iter().map(|n| cp.link_fraction(&agent, n)).sum::<f64>();
    let (hi, lo) = (share(&high), share(&low));
    check(
        hi > lo && hi >= 2.0 * lo && cp.rmse <= un.rmse,
        format!(
            "CP share {} {:.1} % vs {} {:.1} %; RMSE CP {:.3} m, UN {:.3} m",
            high.join("+"),
            hi * 100.0,
            low.join("+"),
            lo * 100.0,
            cp.rmse,
            un.rmse
        ),
    )
}

fn multi_floor_robustness() -> Outcome {
    let cfg = bundled("multi_floor").map_err(|e| e.to_string())?;
    let cp = report(&with_policy(&cfg, "BP-HT-CP"), 10)?.e_th_p20;
    let un = report(&with_policy(&cfg, "BP-HT-UN"), 10)?.e_th_p20;
    let red = reduction(un, cp);
    check(red >= 0.40, format!("e_th(0.2) CP {cp:.3} m, UN {un:.3} m, reduction {:.1} %", red * 100.0))
}

// ---------------------------------------------------------------------------
// 9: determinism through the command line

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nln-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn determinism() -> Outcome {
    let dirs = [scratch("a"), scratch("b")];
    for dir in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_nln"))
            .args(["run", "--scenario", "three_agent_activation", "--seed", "9", "--out"])
            .arg(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("nln run failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let mut compared = Vec::new();
    for name in ["records.csv", "measurements.csv", "report.csv"] {
        let a = std::fs::read(dirs[0].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(dirs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        if a != b {
            return Err(format!("{name} differs between invocations"));
        }
        compared.push(format!("{name} ({} B)", a.len()));
    }
    for dir in &dirs {
        let _ = std::fs::remove_dir_all(dir);
    }
    Ok(format!("identical {}", compared.join(", ")))
}

// ---------------------------------------------------------------------------
// 10: invariant suite

const CASES: u32 = 1000;

fn runner(seed: u8) -> TestRunner {
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[seed; 32]))
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

fn posterior_ordering(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = StateVector::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let cov = nln_core::linalg::from_dyn(&uniform_pd(&mut rng, 6, 1e-3, 1.0));
    let prior = GaussianBelief::new(mean, cov).map_err(|e| fail(e.to_string()))?;
    let p = prior.position_mean();
    let entries = (0..rng.random_range(1..5))
        .map(|i| {
            let pos = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..3.0));
            let anchor = rng.random_bool(0.5);
            MeasurementEntry {
                neighbor: if anchor { NodeId::anchor(i) } else { NodeId::agent(100 + i) },
                range: ((pos - p).norm() + rng.random_range(-0.2..0.2)).max(0.0),
                variance: rng.random_range(0.005..0.1),
                position_mean: pos,
                position_covariance: if anchor { Matrix3::zeros() } else { pd3(&mut rng, 0.01, 0.3) },
            }
        })
        .collect();
    let batch = MeasurementBatch::new(entries).map_err(|e| fail(e.to_string()))?;
    let (post, _) = spbp_update(&prior, &batch, &UtParams::default()).map_err(|e| fail(e.to_string()))?;
    let shrink = to_dyn(&(prior.covariance - post.covariance));
    if min_eigenvalue(&shrink) < -1e-9 * prior.covariance.norm().max(1.0) || min_eigenvalue(&to_dyn(&post.covariance)) < -1e-9 {
        return Err(fail("posterior covariance not below prior"));
    }
    Ok(())
}

fn count_monotonicity(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_problem(&mut rng, 4, 8);
    let m: Vec<u32> = (0..p.len()).map(|_| rng.random_range(0..=6)).collect();
    let base = predicted_covariance_counts(&p, &m).map_err(|e| fail(e.to_string()))?.trace();
    for k in 0..p.len() {
        let mut more = m.clone();
        more[k] += 1;
        let t = predicted_covariance_counts(&p, &more).map_err(|e| fail(e.to_string()))?.trace();
        if t > base * (1.0 + 1e-12) {
            return Err(fail(format!("trace rose from {base} to {t}")));
        }
    }
    Ok(())
}

fn leo_monotonicity(errors: Vec<f64>) -> Result<(), TestCaseError> {
    let curve = leo(&errors, &threshold_grid(12.0, 61));
    if curve.windows(2).any(|w| w[1].1 > w[0].1) || curve.iter().any(|(_, p)| !(0.0..=1.0).contains(p)) {
        return Err(fail("outage curve not monotone in [0, 1]"));
    }
    Ok(())
}

fn lockout(which: u8, src: u32, kind: usize, rx: i128) -> Result<(), TestCaseError> {
    let me = NodeId::agent(1);
    let peer = NodeId::agent(2);
    let now = SimTime::ZERO;
    let msg = |kind, src, rx| Message { kind, src, dst: Some(me), tx_ts: 0, rx_ts: Some(rx), payload: None, echo: Some([0, rx, rx + 1]), report: Some(3.0) };
    let idle = RangingSession::idle(me, SimTime::from_secs(0.01));
    let session = match which {
        0 => idle.step(SessionEvent::Start { peer }).0,
        1 => idle.step(SessionEvent::Receive { msg: msg(MessageKind::RangingInit, peer, 10), now }).0,
        _ => {
            let (s, _) = idle.step(SessionEvent::Start { peer });
            let (s, _) = s.step(SessionEvent::Transmitted { kind: MessageKind::RangingInit, tx_ts: 0, now });
            s.step(SessionEvent::Receive { msg: msg(MessageKind::RangingResp, peer, 50), now }).0
        }
    };
    if !session.is_locked() {
        return Err(fail("session should be locked"));
    }
    let kinds = [MessageKind::RangingInit, MessageKind::RangingResp, MessageKind::RangingFinal, MessageKind::RangingReport];
    let (next, actions) = session.step(SessionEvent::Receive { msg: msg(kinds[kind], NodeId::agent(src), rx), now });
    if next != session || actions != vec![Action::Dropped] {
        return Err(fail("third-party message changed a locked session"));
    }
    Ok(())
}

fn conservation_room() -> ScenarioConfig {
    let text = r#"
name = "audit"
duration_s = 1.5
[algorithms]
inference = "SPBP"
activation = "CSMA"
prioritization = "UNIFORM"
[protocol]
chirp_mean_s = 0.2
[[anchors]]
id = 1
name = "A1"
position = [0.0, 0.0, 2.5]
[[anchors]]
id = 2
name = "A2"
position = [10.0, 0.0, 0.5]
[[anchors]]
id = 3
name = "A3"
position = [10.0, 8.0, 2.5]
[[agents]]
id = 1
name = "agent1"
waypoints = [{ position = [3.0, 4.0, 1.0], arrival_s = 0.0 }]
[[agents]]
id = 2
name = "agent2"
waypoints = [{ position = [6.0, 2.0, 1.2], arrival_s = 0.0 }]
[[agents]]
id = 3
name = "agent3"
waypoints = [{ position = [7.0, 6.0, 0.9], arrival_s = 0.0 }]
"#;
    parse_scenario(text, "audit").unwrap()
}

fn conservation(base: &ScenarioConfig, seed: u64, policy: usize, agents: usize) -> Result<(), TestCaseError> {
    let mut cfg = with_policy(base, ["BP-AL-UN", "BP-CS-UN", "BP-HT-UN", "BP-HT-CP", "LS-AL-UN"][policy]);
    cfg.agents.truncate(agents);
    let out = run(&cfg, seed).map_err(|e| fail(e.to_string()))?;
    let s = &out.stats;
    let receivers = (cfg.anchors.len() + agents - 1) as u64;
    if !s.conserved() || s.potential_receptions != s.transmissions * receivers {
        return Err(fail(format!("reception audit failed: {s:?}")));
    }
    if out.diagnostics.time_reversals != 0 || out.diagnostics.lockout_violations != 0 {
        return Err(fail("kernel reported a time reversal or lockout violation"));
    }
    Ok(())
}

fn invariant_suite() -> Outcome {
    use proptest::prelude::*;
    let mut failures = Vec::new();
    let mut note = |name: &str, r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(format!("{name}: {e}"));
        }
    };
    note("posterior PSD ordering", runner(1).run(&any::<u64>(), posterior_ordering).map_err(|e| e.to_string()));
    note("trace monotone in counts", runner(2).run(&any::<u64>(), count_monotonicity).map_err(|e| e.to_string()));
    note(
        "LEO monotone",
        runner(3)
            .run(&prop::collection::vec(0.0f64..10.0, 0..50), leo_monotonicity)
            .map_err(|e| e.to_string()),
    );
    note(
        "ranging lockout",
        runner(4)
            .run(&(0u8..3, 3u32..60, 0usize..4, 0i128..1_000_000), |(w, s, k, rx)| lockout(w, s, k, rx))
            .map_err(|e| e.to_string()),
    );
    let base = conservation_room();
    note(
        "reception conservation",
        runner(5)
            .run(&(any::<u64>(), 0usize..5, 1usize..=3), |(seed, p, a)| conservation(&base, seed, p, a))
            .map_err(|e| e.to_string()),
    );
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("5 properties x {CASES} cases")
        } else {
            failures.join("; ")
        },
    )
}

#[test]
fn acceptance_criteria() {
    let s = Duration::from_secs;
    let lines = vec![
        timed(1, "linear exactness", Some(s(5)), linear_exactness),
        timed(2, "allocation oracle", Some(s(30)), oracle_equivalence),
        timed(3, "two-way ranging", None, twr_correctness),
        timed(4, "inference comparison", Some(s(120)), inference_comparison),
        timed(5, "cooperation gain", Some(s(120)), cooperation_gain),
        timed(6, "activation efficiency", Some(s(120)), activation_efficiency),
        timed(7, "prioritization selectivity", Some(s(60)), prioritization_selectivity),
        timed(8, "multi-floor robustness", Some(s(180)), multi_floor_robustness),
        timed(9, "determinism", None, determinism),
        timed(10, "invariant suite", None, invariant_suite),
    ];
    let failed: Vec<String> =
        lines.iter().filter(|l| l.outcome.is_err()).map(|l| format!("{}. {}", l.id, l.name)).collect();
    let _ = writeln!(std::io::stderr(), "acceptance: {}/{} criteria passed", lines.len() - failed.len(), lines.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
