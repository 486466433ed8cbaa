//! Ranking of legal candidates.

use super::{Candidate, KernelSketch};

/// Default shared-memory budget per block.
pub const SHARED_LIMIT: usize = 48 * 1024;

const BANDWIDTH: f64 = 500e9;
const BARRIER_US: f64 = 0.5;
const OCCUPANCY_US: f64 = 2.0;

/// Measured or modelled kernel time in microseconds. Returning `None` falls
/// back to the static proxy for that candidate.
pub trait KernelEvaluator {
    fn evaluate(&self, sketch: &KernelSketch) -> Option<f64>;
}

/// Static cost: global traffic at a fixed bandwidth, a charge per barrier,
/// and a penalty once shared usage passes half the budget.
pub fn proxy_cost(s: &KernelSketch) -> f64 {
    let ratio = s.shared_bytes as f64 / SHARED_LIMIT as f64;
    let mut cost = s.traffic_bytes as f64 / BANDWIDTH * 1e6 + BARRIER_US * s.barriers as f64;
    if ratio > 0.5 {
        cost += OCCUPANCY_US * ratio;
    }
    cost
}

/// Cheapest candidate; ties keep the earlier template.
pub fn select_best(cands: Vec<Candidate>, evaluator: Option<&dyn KernelEvaluator>) -> Option<(Candidate, f64)> {
    let mut best: Option<(Candidate, f64)> = None;
    for c in cands {
        let cost = evaluator.and_then(|e| e.evaluate(&c.sketch)).unwrap_or_else(|| proxy_cost(&c.sketch));
        if best.as_ref().is_none_or(|(_, b)| cost < *b) {
            best = Some((c, cost));
        }
    }
    best
}
