//! Metric reports over one or more runs of a scenario, in CSV and text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nln_sim::kernel::agent_trajectory;
use nln_sim::{RunOutput, RunRecord, ScenarioConfig, Trajectory};

use crate::error::{HarnessError, HarnessResult};
use crate::metrics::{error_threshold, leo, mae, measurement_rate, percent_change, rmse, threshold_grid};

/// Points on the reported outage curve.
pub const LEO_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// NaN when nothing was scored.
    pub rmse: f64,
    pub measurement_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeMetrics {
    pub node_id: u32,
    pub samples: usize,
    pub rmse: f64,
    pub measurement_rate: f64,
    pub e_th_p10: f64,
    pub e_th_p20: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkFraction {
    pub initiator: String,
    pub responder: String,
    pub measurements: u64,
    /// Share of the initiator's measurements spent on this responder.
    pub fraction: f64,
}

/// Aggregate metrics of a scenario under one algorithm combination.
/// Errors from all seeds are pooled; rates are averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scenario: String,
    pub policy: String,
    pub duration_s: f64,
    pub samples: usize,
    pub rmse: f64,
    pub mae: f64,
    pub measurement_rate: f64,
    pub e_th_p10: f64,
    pub e_th_p20: f64,
    pub leo: Vec<(f64, f64)>,
    pub seeds: Vec<SeedResult>,
    pub nodes: Vec<NodeMetrics>,
    pub links: Vec<LinkFraction>,
}

/// Records that count towards the metrics: after the warm-up and, with
/// `dwell_only`, while the agent dwells at a waypoint.
pub struct Scorer {
    warmup_s: f64,
    dwell: Option<BTreeMap<u32, Trajectory>>,
}

impl Scorer {
    pub fn new(cfg: &ScenarioConfig) -> HarnessResult<Self> {
        let dwell = if cfg.metrics.dwell_only {
            let mut m = BTreeMap::new();
            for (i, a) in cfg.agents.iter().enumerate() {
                m.insert(a.id, agent_trajectory(cfg, i)?);
            }
            Some(m)
        } else {
            None
        };
        Ok(Self { warmup_s: cfg.metrics.warmup_s, dwell })
    }

    pub fn counts(&self, r: &RunRecord) -> bool {
        if r.time_s < self.warmup_s {
            return false;
        }
        match &self.dwell {
            None => true,
            Some(m) => m.get(&r.node_id).is_some_and(|t| t.dwelling_at(r.time_s).is_some()),
        }
    }

    pub fn errors<'a>(&self, records: impl IntoIterator<Item = &'a RunRecord>) -> Vec<f64> {
        records.into_iter().filter(|r| self.counts(r)).map(RunRecord::error).collect()
    }
}

fn or_nan(r: HarnessResult<f64>) -> f64 {
    r.unwrap_or(f64::NAN)
}

/// Builds the report of `runs`, which must all come from `cfg`.
pub fn evaluate(cfg: &ScenarioConfig, runs: &[(u64, RunOutput)]) -> HarnessResult<MetricReport> {
    if runs.is_empty() {
        return Err(HarnessError::InvalidArgument("no runs to evaluate".into()));
    }
    let scorer = Scorer::new(cfg)?;
    let duration = cfg.duration_s;
    let rate = |recs: &[RunRecord]| if duration > 0.0 { measurement_rate(recs, duration) } else { Ok(0.0) };

    let mut pooled = Vec::new();
    let mut seeds = Vec::with_capacity(runs.len());
    let mut per_node: BTreeMap<u32, (Vec<f64>, f64)> = cfg.agents.iter().map(|a| (a.id, (Vec::new(), 0.0))).collect();
    let mut link_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    for (seed, out) in runs {
        let errs = scorer.errors(&out.records);
        seeds.push(SeedResult { seed: *seed, rmse: or_nan(rmse(&errs)), measurement_rate: rate(&out.records)? });
        pooled.extend_from_slice(&errs);
        for (id, (node_errs, node_rate)) in per_node.iter_mut() {
            let recs: Vec<RunRecord> = out.records.iter().filter(|r| r.node_id == *id).cloned().collect();
            node_errs.extend(scorer.errors(&recs));
            *node_rate += rate(&recs)?;
        }
        for m in &out.measurements {
            *link_counts.entry((m.initiator.clone(), m.responder.clone())).or_default() += u64::from(m.count);
        }
    }
    let n_runs = runs.len() as f64;

    let nodes = per_node
        .into_iter()
        .map(|(node_id, (errs, rate_sum))| NodeMetrics {
            node_id,
            samples: errs.len(),
            rmse: or_nan(rmse(&errs)),
            measurement_rate: rate_sum / n_runs,
            e_th_p10: or_nan(error_threshold(&errs, 0.1)),
            e_th_p20: or_nan(error_threshold(&errs, 0.2)),
        })
        .collect();

    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for ((from, _), c) in &link_counts {
        *totals.entry(from.as_str()).or_default() += c;
    }
    let links = link_counts
        .iter()
        .map(|((from, to), &c)| LinkFraction {
            initiator: from.clone(),
            responder: to.clone(),
            measurements: c,
            fraction: c as f64 / totals[from.as_str()] as f64,
        })
        .collect();

    let max_err = pooled.iter().copied().fold(0.0, f64::max);
    Ok(MetricReport {
        scenario: cfg.name.clone(),
        policy: cfg.algorithms.acronym(),
        duration_s: duration,
        samples: pooled.len(),
        rmse: or_nan(rmse(&pooled)),
        mae: or_nan(mae(&pooled)),
        measurement_rate: seeds.iter().map(|s| s.measurement_rate).sum::<f64>() / n_runs,
        e_th_p10: or_nan(error_threshold(&pooled, 0.1)),
        e_th_p20: or_nan(error_threshold(&pooled, 0.2)),
        leo: leo(&pooled, &threshold_grid(max_err, LEO_POINTS)),
        seeds,
        nodes,
        links,
    })
}

impl MetricReport {
    pub const HEADER: &'static str = "section,node,key,value";

    pub fn node(&self, node_id: u32) -> Option<&NodeMetrics> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    /// Measurement fraction from `initiator` to `responder`, zero if none.
    pub fn link_fraction(&self, initiator: &str, responder: &str) -> f64 {
        self.links
            .iter()
            .find(|l| l.initiator == initiator && l.responder == responder)
            .map_or(0.0, |l| l.fraction)
    }

    pub fn median_seed_rmse(&self) -> f64 {
        let mut v: Vec<f64> = self.seeds.iter().map(|s| s.rmse).filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Long-format CSV: one `section,node,key,value` row per number.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let mut row = |section: &str, node: &str, key: &str, value: &str| {
            let _ = writeln!(s, "{section},{node},{key},{value}");
        };
        row("section", "node", "key", "value");
        row("summary", "", "scenario", &self.scenario);
        row("summary", "", "policy", &self.policy);
        row("summary", "", "duration_s", &self.duration_s.to_string());
        row("summary", "", "samples", &self.samples.to_string());
        row("summary", "", "rmse", &self.rmse.to_string());
        row("summary", "", "mae", &self.mae.to_string());
        row("summary", "", "measurement_rate_hz", &self.measurement_rate.to_string());
        row("summary", "", "e_th_p10", &self.e_th_p10.to_string());
        row("summary", "", "e_th_p20", &self.e_th_p20.to_string());
        for (t, p) in &self.leo {
            row("leo", "", &t.to_string(), &p.to_string());
        }
        for sd in &self.seeds {
            let id = sd.seed.to_string();
            row("seed", &id, "rmse", &sd.rmse.to_string());
            row("seed", &id, "measurement_rate_hz", &sd.measurement_rate.to_string());
        }
        for n in &self.nodes {
            let id = n.node_id.to_string();
            row("node", &id, "samples", &n.samples.to_string());
            row("node", &id, "rmse", &n.rmse.to_string());
            row("node", &id, "measurement_rate_hz", &n.measurement_rate.to_string());
            row("node", &id, "e_th_p10", &n.e_th_p10.to_string());
            row("node", &id, "e_th_p20", &n.e_th_p20.to_string());
        }
        for l in &self.links {
            row("link", &format!("{}>{}", l.initiator, l.responder), "measurements", &l.measurements.to_string());
            row("link", &format!("{}>{}", l.initiator, l.responder), "fraction", &l.fraction.to_string());
        }
        s
    }

    /// Parses the output of [`MetricReport::to_csv`]. `origin` names the
    /// source in error messages.
    pub fn from_csv(text: &str, origin: &str) -> HarnessResult<Self> {
        let bad = |line: usize, message: String| HarnessError::Report {
            path: origin.to_string(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == Self::HEADER => {}
            _ => return Err(bad(1, format!("expected header `{}`", Self::HEADER))),
        }
        let mut r = MetricReport {
            scenario: String::new(),
            policy: String::new(),
            duration_s: f64::NAN,
            samples: 0,
            rmse: f64::NAN,
            mae: f64::NAN,
            measurement_rate: f64::NAN,
            e_th_p10: f64::NAN,
            e_th_p20: f64::NAN,
            leo: Vec::new(),
            seeds: Vec::new(),
            nodes: Vec::new(),
            links: Vec::new(),
        };
        for (i, line) in lines {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(4, ',').collect();
            let [section, node, key, value] = f[..] else {
                return Err(bad(ln, "expected 4 fields".into()));
            };
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(ln, format!("bad number `{s}`")));
            let int = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(ln, format!("bad integer `{s}`")));
            match section {
                "summary" => match key {
                    "scenario" => r.scenario = value.to_string(),
                    "policy" => r.policy = value.to_string(),
                    "duration_s" => r.duration_s = num(value)?,
                    "samples" => r.samples = int(value)? as usize,
                    "rmse" => r.rmse = num(value)?,
                    "mae" => r.mae = num(value)?,
                    "measurement_rate_hz" => r.measurement_rate = num(value)?,
                    "e_th_p10" => r.e_th_p10 = num(value)?,
                    "e_th_p20" => r.e_th_p20 = num(value)?,
                    _ => return Err(bad(ln, format!("unknown summary key `{key}`"))),
                },
                "leo" => r.leo.push((num(key)?, num(value)?)),
                "seed" => {
                    let seed = int(node)?;
                    if r.seeds.last().is_none_or(|s| s.seed != seed) {
                        r.seeds.push(SeedResult { seed, rmse: f64::NAN, measurement_rate: f64::NAN });
                    }
                    let s = r.seeds.last_mut().expect("pushed above");
                    match key {
                        "rmse" => s.rmse = num(value)?,
                        "measurement_rate_hz" => s.measurement_rate = num(value)?,
                        _ => return Err(bad(ln, format!("unknown seed key `{key}`"))),
                    }
                }
                "node" => {
                    let node_id = int(node)? as u32;
                    if r.nodes.last().is_none_or(|n| n.node_id != node_id) {
                        r.nodes.push(NodeMetrics {
                            node_id,
                            samples: 0,
                            rmse: f64::NAN,
                            measurement_rate: f64::NAN,
                            e_th_p10: f64::NAN,
                            e_th_p20: f64::NAN,
                        });
                    }
                    let n = r.nodes.last_mut().expect("pushed above");
                    match key {
                        "samples" => n.samples = int(value)? as usize,
                        "rmse" => n.rmse = num(value)?,
                        "measurement_rate_hz" => n.measurement_rate = num(value)?,
                        "e_th_p10" => n.e_th_p10 = num(value)?,
                        "e_th_p20" => n.e_th_p20 = num(value)?,
                        _ => return Err(bad(ln, format!("unknown node key `{key}`"))),
                    }
                }
                "link" => {
                    let Some((from, to)) = node.split_once('>') else {
                        return Err(bad(ln, format!("link `{node}` is not `initiator>responder`")));
                    };
                    if r.links.last().is_none_or(|l| l.initiator != from || l.responder != to) {
                        r.links.push(LinkFraction {
                            initiator: from.to_string(),
                            responder: to.to_string(),
                            measurements: 0,
                            fraction: f64::NAN,
                        });
                    }
                    let l = r.links.last_mut().expect("pushed above");
                    match key {
                        "measurements" => l.measurements = int(value)?,
                        "fraction" => l.fraction = num(value)?,
                        _ => return Err(bad(ln, format!("unknown link key `{key}`"))),
                    }
                }
                _ => return Err(bad(ln, format!("unknown section `{section}`"))),
            }
        }
        Ok(r)
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}  policy {}  runs {}", self.scenario, self.policy, self.seeds.len());
        let _ = writeln!(s, "  RMSE              {:.4} m  ({} samples)", self.rmse, self.samples);
        let _ = writeln!(s, "  mean abs error    {:.4} m", self.mae);
        let _ = writeln!(s, "  measurement rate  {:.2} Hz", self.measurement_rate);
        let _ = writeln!(s, "  e_th at P_o=0.1   {:.4} m", self.e_th_p10);
        let _ = writeln!(s, "  e_th at P_o=0.2   {:.4} m", self.e_th_p20);
        if self.seeds.len() > 1 {
            let _ = writeln!(s, "  median run RMSE   {:.4} m", self.median_seed_rmse());
        }
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "  node {:>3}: RMSE {:.4} m, rate {:.2} Hz, e_th(0.2) {:.4} m",
                n.node_id, n.rmse, n.measurement_rate, n.e_th_p20
            );
        }
        let mut current = "";
        for l in &self.links {
            if l.initiator != current {
                current = &l.initiator;
                let _ = writeln!(s, "  {} measured:", l.initiator);
            }
            let _ = writeln!(s, "    {:<10} {:6.1} %", l.responder, 100.0 * l.fraction);
        }
        s
    }
}

/// Percentage changes from report `a` to report `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub rmse_pct: f64,
    pub measurement_rate_pct: f64,
    pub e_th_p10_pct: f64,
    pub e_th_p20_pct: f64,
}

pub fn compare(a: &MetricReport, b: &MetricReport) -> Comparison {
    Comparison {
        baseline: a.policy.clone(),
        candidate: b.policy.clone(),
        rmse_pct: percent_change(a.rmse, b.rmse),
        measurement_rate_pct: percent_change(a.measurement_rate, b.measurement_rate),
        e_th_p10_pct: percent_change(a.e_th_p10, b.e_th_p10),
        e_th_p20_pct: percent_change(a.e_th_p20, b.e_th_p20),
    }
}

impl Comparison {
    pub fn summary(&self) -> String {
        format!(
            "{} -> {}\n  RMSE              {:+.1} %\n  measurement rate  {:+.1} %\n  e_th at P_o=0.1   {:+.1} %\n  e_th at P_o=0.2   {:+.1} %\n",
            self.baseline, self.candidate, self.rmse_pct, self.measurement_rate_pct, self.e_th_p10_pct, self.e_th_p20_pct
        )
    }
}
