//! Pattern scoring: memory-traffic savings through a bandwidth curve, or
//! measured kernel times when available.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emit::shared_footprint;
use crate::error::CostError;
use crate::graph::{FusionPattern, Graph, OpKind, ReduceKind};
use crate::template::TemplateLimits;
use crate::transform::extract_body;

const DEFAULT_TABLE: &str = include_str!("../data/bandwidth_default.csv");

/// Achieved bandwidth (bytes/s) sampled at increasing transfer sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthModel {
    points: Vec<(u64, f64)>,
}

#[derive(Deserialize)]
struct Row {
    bytes: u64,
    bandwidth_bytes_per_sec: f64,
}

impl BandwidthModel {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, CostError> {
        if points.len() < 2 {
            return Err(CostError::Bandwidth("need at least two samples".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CostError::Bandwidth(format!("bytes must strictly increase ({} then {})", w[0].0, w[1].0)));
            }
            if w[1].1 < w[0].1 {
                return Err(CostError::Bandwidth(format!("bandwidth decreases at {} bytes", w[1].0)));
            }
        }
        if let Some(p) = points.iter().find(|p| p.0 == 0 || !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(CostError::Bandwidth(format!("bad sample ({}, {})", p.0, p.1)));
        }
        Ok(BandwidthModel { points })
    }

    pub fn from_reader(r: impl Read) -> Result<Self, CostError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["bytes", "bandwidth_bytes_per_sec"] {
            return Err(CostError::Bandwidth(format!(
                "expected header `bytes,bandwidth_bytes_per_sec`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            points.push((row.bytes, row.bandwidth_bytes_per_sec));
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// The bundled synthetic table.
    pub fn default_table() -> Self {
        Self::from_reader(DEFAULT_TABLE.as_bytes()).expect("bundled table is valid")
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    /// Bandwidth at `v` bytes, linear in log(bytes) and clamped at the ends.
    pub fn bandwidth(&self, v: u64) -> f64 {
        let (first, last) = (self.points[0], self.points[self.points.len() - 1]);
        if v <= first.0 {
            return first.1;
        }
        if v >= last.0 {
            return last.1;
        }
        let i = self.points.partition_point(|p| p.0 <= v);
        let (lo, hi) = (self.points[i - 1], self.points[i]);
        if lo.0 == v {
            return lo.1;
        }
        let t = ((v as f64).ln() - (lo.0 as f64).ln()) / ((hi.0 as f64).ln() - (lo.0 as f64).ln());
        lo.1 + t * (hi.1 - lo.1)
    }
}

/// Latency in microseconds of moving `v` bytes.
pub fn m_of_v(bm: &BandwidthModel, v: u64) -> f64 {
    if v == 0 {
        0.0
    } else {
        v as f64 / bm.bandwidth(v) * 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    ModelBased,
    ExecutionBased,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    /// Per-kernel launch latency, microseconds.
    pub phi: f64,
    pub shared_limit: usize,
    pub mode: ScoreMode,
    /// Accept `phi` outside 6..=10 µs.
    pub allow_any_phi: bool,
    pub limits: TemplateLimits,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            phi: 8.0,
            shared_limit: 49_152,
            mode: ScoreMode::ModelBased,
            allow_any_phi: false,
            limits: TemplateLimits::default(),
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        if !self.phi.is_finite() || self.phi < 0.0 {
            return Err(CostError::Config(format!("phi must be a non-negative number, got {}", self.phi)));
        }
        if !self.allow_any_phi && !(6.0..=10.0).contains(&self.phi) {
            return Err(CostError::Config(format!("phi {} is outside 6..=10 us", self.phi)));
        }
        if self.shared_limit == 0 {
            return Err(CostError::Config("shared limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternScore {
    pub pattern_id: usize,
    pub score: f64,
    pub feasible: bool,
    pub saved_bytes: u64,
    pub requested_shared: usize,
    pub allocated_shared: usize,
}

/// Off-chip bytes a pattern saves: one read per internal consumer of each
/// producer, plus the producer's write when nothing outside reads it.
pub fn saved_bytes(g: &Graph, p: &FusionPattern) -> u64 {
    let consumers = g.consumers();
    let outputs: BTreeSet<&str> = g.outputs.iter().map(String::as_str).collect();
    let mut v = 0u64;
    for u in &p.nodes {
        let bytes = g.nodes.get(u).map_or(0, |n| n.byte_count()) as u64;
        let users: BTreeSet<&str> = consumers.get(u.as_str()).into_iter().flatten().copied().collect();
        let inside = users.iter().filter(|c| p.contains(c)).count() as u64;
        v += inside * bytes;
        if inside > 0 && inside == users.len() as u64 && !outputs.contains(u.as_str()) {
            v += bytes;
        }
    }
    v
}

/// Whether some template for the pattern fits in `cfg.shared_limit`, with
/// the requested bytes of the smallest-footprint template.
pub fn shared_feasible(g: &Graph, p: &FusionPattern, cfg: &CostConfig) -> (bool, usize, usize) {
    let Ok(body) = extract_body(g, p) else { return (false, 0, 0) };
    match shared_footprint(&body.body, &cfg.limits) {
        Ok(Some((alloc, requested))) => (alloc <= cfg.shared_limit, requested, alloc),
        _ => (false, 0, 0),
    }
}

pub fn score_model_based(g: &Graph, p: &FusionPattern, bm: &BandwidthModel, cfg: &CostConfig) -> PatternScore {
    let v = saved_bytes(g, p);
    let (feasible, requested_shared, allocated_shared) = shared_feasible(g, p, cfg);
    let score = if feasible { model_formula(m_of_v(bm, v), p.nodes.len(), cfg.phi) } else { -1.0 };
    PatternScore { pattern_id: p.id, score, feasible, saved_bytes: v, requested_shared, allocated_shared }
}

/// `M(V) + (N - 1) * phi`.
pub fn model_formula(m: f64, n: usize, phi: f64) -> f64 {
    m + n.saturating_sub(1) as f64 * phi
}

/// `sum(K) + (N - 1) * phi - K(P)`, or -1 without a fused time.
pub fn execution_formula(kernel_times: &[f64], fused_time: Option<f64>, phi: f64) -> f64 {
    match fused_time {
        Some(k) => kernel_times.iter().sum::<f64>() + kernel_times.len().saturating_sub(1) as f64 * phi - k,
        None => -1.0,
    }
}

pub fn score_execution_based(
    id: usize,
    kernel_times: &[f64],
    fused_time: Option<f64>,
    cfg: &CostConfig,
) -> PatternScore {
    let score = execution_formula(kernel_times, fused_time, cfg.phi);
    PatternScore {
        pattern_id: id,
        score,
        feasible: score >= 0.0,
        saved_bytes: 0,
        requested_shared: 0,
        allocated_shared: 0,
    }
}

/// Source of measured kernel times in microseconds.
pub trait TimingSource {
    fn op_time(&self, op: &str) -> Option<f64>;
    /// Time of the fused kernel covering exactly `ops`.
    fn fused_time(&self, ops: &BTreeSet<String>) -> Option<f64>;
}

/// Timing source with no measurements.
pub struct NoTimings;

impl TimingSource for NoTimings {
    fn op_time(&self, _: &str) -> Option<f64> {
        None
    }
    fn fused_time(&self, _: &BTreeSet<String>) -> Option<f64> {
        None
    }
}

/// Times from a `name,time_us` CSV. A fused kernel's name is its op ids
/// sorted and joined with `+`.
#[derive(Debug, Clone, Default)]
pub struct CsvTimings {
    times: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
struct TimingRow {
    name: String,
    time_us: f64,
}

impl CsvTimings {
    pub fn from_reader(r: impl Read) -> Result<Self, CostError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut times = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: TimingRow = row?;
            times.insert(row.name, row.time_us);
        }
        Ok(CsvTimings { times })
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn fused_key(ops: &BTreeSet<String>) -> String {
        ops.iter().cloned().collect::<Vec<_>>().join("+")
    }
}

impl TimingSource for CsvTimings {
    fn op_time(&self, op: &str) -> Option<f64> {
        self.times.get(op).copied()
    }
    fn fused_time(&self, ops: &BTreeSet<String>) -> Option<f64> {
        self.times.get(&Self::fused_key(ops)).copied()
    }
}

/// Patterns mixing reduction layouts, or dots with reductions.
pub fn is_complex(g: &Graph, p: &FusionPattern) -> bool {
    let mut row = false;
    let mut other_reduce = false;
    let mut dot = false;
    for id in &p.nodes {
        let Some(n) = g.node(id) else { continue };
        match n.kind {
            OpKind::Reduce { .. } => match n.reduce_kind(g) {
                Some(ReduceKind::Row) => row = true,
                _ => other_reduce = true,
            },
            OpKind::Dot { .. } | OpKind::BatchedDot { .. } => dot = true,
            _ => {}
        }
    }
    (row && other_reduce) || (dot && (row || other_reduce))
}

/// Score one pattern under `cfg.mode`. Execution-based scoring needs every
/// member op's time; without them it falls back to the model.
pub fn score_pattern(
    g: &Graph,
    p: &FusionPattern,
    bm: &BandwidthModel,
    cfg: &CostConfig,
    timings: Option<&dyn TimingSource>,
) -> PatternScore {
    let use_exec = match cfg.mode {
        ScoreMode::ModelBased => false,
        ScoreMode::ExecutionBased => timings.is_some(),
        ScoreMode::Hybrid => timings.is_some() && is_complex(g, p),
    };
    if let (true, Some(t)) = (use_exec, timings) {
        let times: Option<Vec<f64>> = p.nodes.iter().map(|id| t.op_time(id)).collect();
        if let Some(times) = times {
            let (feasible, requested_shared, allocated_shared) = shared_feasible(g, p, cfg);
            let mut s = score_execution_based(p.id, &times, t.fused_time(&p.nodes), cfg);
            if !feasible {
                s.score = -1.0;
                s.feasible = false;
            }
            s.saved_bytes = saved_bytes(g, p);
            s.requested_shared = requested_shared;
            s.allocated_shared = allocated_shared;
            return s;
        }
    }
    score_model_based(g, p, bm, cfg)
}

pub fn score_patterns(
    g: &Graph,
    patterns: &[FusionPattern],
    bm: &BandwidthModel,
    cfg: &CostConfig,
    timings: Option<&dyn TimingSource>,
) -> Vec<PatternScore> {
    patterns.iter().map(|p| score_pattern(g, p, bm, cfg, timings)).collect()
}
