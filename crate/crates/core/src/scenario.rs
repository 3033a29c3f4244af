//! Scenario files: one protocol run with scripted behaviours and network
//! faults, judged afterwards.
//!
//! A run passes only if no safety property broke and no correct party
//! detected misbehaviour. Every violation line names the device at fault.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::DeviceError;
use crate::kernel::DeviceId;
use crate::net::{FaultSchedule, NetConfig};
use crate::protocols::bft::{Accusation, Behavior, BftCluster, BftConfig, BftError};
use crate::protocols::chain::{ChainBehavior, ChainCluster};
use crate::protocols::peer_review::{AuditOutcome, Deviation, PeerReview, ROOT};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Bft(#[from] BftError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum Scenario {
    Bft(BftSpec),
    Cr(CrSpec),
    Peerreview(PrSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BftSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "three")]
    pub rounds: u64,
    #[serde(default = "two")]
    pub clients: u32,
    /// Per replica, leader first; missing entries are honest.
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
    /// Replica indices crashed before the first request.
    #[serde(default)]
    pub crash: Vec<usize>,
    #[serde(default)]
    pub schedule: FaultSchedule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "three")]
    pub rounds: u64,
    #[serde(default = "three_usize")]
    pub nodes: usize,
    /// Per node, head first; missing entries are honest.
    #[serde(default)]
    pub behaviors: Vec<ChainBehavior>,
    #[serde(default)]
    pub schedule: FaultSchedule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrDeviation {
    pub device: DeviceId,
    pub kind: Deviation,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "three")]
    pub rounds: u64,
    #[serde(default)]
    pub deviation: Option<PrDeviation>,
    /// Rounds (1-based, counted after the round) at which the witness audits.
    /// The final round is always audited.
    #[serde(default)]
    pub audit_after: Vec<u64>,
    #[serde(default)]
    pub schedule: FaultSchedule,
}

fn two() -> u32 {
    2
}

fn three() -> u64 {
    3
}

fn three_usize() -> usize {
    3
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioReport {
    pub summary: Vec<String>,
    pub violations: Vec<String>,
    /// JSONL network trace.
    pub trace: String,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Replaces the run seed, e.g. from a command-line override.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Scenario::Bft(s) => s.seed = seed,
            Scenario::Cr(s) => s.seed = seed,
            Scenario::Peerreview(s) => s.seed = seed,
        }
    }

    pub fn run(&self) -> Result<ScenarioReport, ScenarioError> {
        match self {
            Scenario::Bft(s) => run_bft(s),
            Scenario::Cr(s) => run_cr(s),
            Scenario::Peerreview(s) => run_pr(s),
        }
    }
}

fn role(cluster: &BftCluster, d: DeviceId) -> &'static str {
    if d == cluster.cfg.leader() {
        "leader"
    } else {
        "follower"
    }
}

fn run_bft(s: &BftSpec) -> Result<ScenarioReport, ScenarioError> {
    let cfg = BftConfig::new(1, s.seed);
    let n = cfg.replicas.len();
    if s.behaviors.len() > n || s.crash.iter().any(|&i| i >= n) {
        return Err(ScenarioError::Invalid(format!("cluster has {n} replicas")));
    }
    if s.clients == 0 {
        return Err(ScenarioError::Invalid("at least one client is needed".into()));
    }
    let mut cluster = BftCluster::new(cfg, s.behaviors.clone(), s.clients, NetConfig::default())?;
    cluster.net.set_schedule(s.schedule.clone());
    for &i in &s.crash {
        cluster.crash(i);
    }
    for _ in 0..s.rounds {
        for c in 1..=s.clients {
            cluster.submit(c, 1)?;
        }
        cluster.run()?;
    }

    let mut report = ScenarioReport::default();
    for (i, r) in cluster.replicas.iter().enumerate() {
        let state = if cluster.is_crashed(i) { "crashed" } else { "up" };
        report.summary.push(format!(
            "replica {} ({}, {state}): counter {}, {} applied, {} committed",
            r.device(),
            role(&cluster, r.device()),
            r.counter(),
            r.order().len(),
            r.committed().len()
        ));
    }
    for c in &cluster.clients {
        report.summary.push(format!("client {}: {} accepted", c.id(), c.accepted().len()));
    }
    if let Err(e) = cluster.check_safety() {
        report.violations.push(format!("safety violated: {e}"));
    }
    for i in cluster.correct() {
        let r = &cluster.replicas[i];
        for a in r.accusations() {
            let accused = a.accused();
            let what = match a {
                Accusation::Equivocation { req, first, second, .. } => {
                    format!("equivocation on {req:?} (outputs {first} and {second})")
                }
                Accusation::SenderStateMismatch {
                    req, expected, found, ..
                } => format!("wrong output for {req:?} (expected {expected}, found {found})"),
            };
            report.violations.push(format!(
                "replica {} flags {} {accused}: {what}",
                r.device(),
                role(&cluster, accused)
            ));
        }
    }
    report.trace = cluster.net.trace_jsonl();
    Ok(report)
}

fn run_cr(s: &CrSpec) -> Result<ScenarioReport, ScenarioError> {
    if s.nodes < 2 || s.behaviors.len() > s.nodes {
        return Err(ScenarioError::Invalid(format!("chain of {} nodes", s.nodes)));
    }
    let mut behaviors = s.behaviors.clone();
    behaviors.resize(s.nodes, ChainBehavior::Honest);
    let mut c = ChainCluster::new(s.nodes, &behaviors, s.seed, NetConfig::default())?;
    c.net.set_schedule(s.schedule.clone());
    for _ in 0..s.rounds {
        c.submit()?;
        c.run()?;
    }
    let mut report = ScenarioReport::default();
    let seqs = c.commit_sequences();
    for (i, seq) in seqs.iter().enumerate() {
        report.summary.push(format!("node {i}: commits {seq:?}"));
    }
    report
        .summary
        .push(format!("client: {} accepted", c.client.accepted().len()));
    for f in c.failures() {
        report.violations.push(format!(
            "node {} rejects the output of node {} ({:?})",
            f.detected_at, f.position, f.reason
        ));
    }
    let honest: Vec<usize> = (0..s.nodes).filter(|&i| behaviors[i] == ChainBehavior::Honest).collect();
    if behaviors.iter().all(|b| *b == ChainBehavior::Honest) && honest.windows(2).any(|w| seqs[w[0]] != seqs[w[1]]) {
        report.violations.push("safety violated: honest commit sequences diverge".into());
    }
    report.trace = c.net.trace_jsonl();
    Ok(report)
}

fn run_pr(s: &PrSpec) -> Result<ScenarioReport, ScenarioError> {
    let mut pr = PeerReview::new(s.seed, NetConfig::default())?;
    pr.net.set_schedule(s.schedule.clone());
    if let Some(d) = &s.deviation {
        pr.set_deviation(d.device, d.kind, d.round);
    }
    let mut worst: std::collections::BTreeMap<DeviceId, AuditOutcome> = Default::default();
    for r in 1..=s.rounds {
        pr.round()?;
        if r == s.rounds || s.audit_after.contains(&r) {
            for (d, o) in pr.audit() {
                let slot = worst.entry(d).or_insert(AuditOutcome::Consistent);
                if !slot.is_fault() {
                    *slot = o;
                }
            }
        }
    }
    let mut report = ScenarioReport::default();
    for (d, o) in &worst {
        let who = if *d == ROOT { "root" } else { "child" };
        report.summary.push(format!("node {d} ({who}): {o:?}"));
        if o.is_fault() {
            report.violations.push(format!("witness exposes {who} {d}: {o:?}"));
        }
    }
    report.trace = pr.net.trace_jsonl();
    Ok(report)
}
