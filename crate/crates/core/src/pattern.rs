//! Candidate fusion pattern generation.
//!
//! Substitution fusion collapses the ops between consecutive partition ops
//! (in topological order) into one pattern each; the multi-step driver grows
//! the partition set in stages. Exploratory fusion grows connected patterns
//! from seed ops through producer/consumer expansion.

use std::collections::{BTreeSet, HashSet};

use crate::graph::{contract_plan, dot_flops, FusionPattern, Graph, OpKind, ReduceKind};

/// Ops that substitution fusion must never fuse with anything else.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionSet {
    pub ops: BTreeSet<String>,
    pub stage: usize,
}

impl PartitionSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(ops: I, stage: usize) -> Self {
        PartitionSet { ops: ops.into_iter().map(Into::into).collect(), stage }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedConfig {
    pub max_operands: usize,
    pub min_tensor_bytes: usize,
    pub exploration_budget: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { max_operands: 10, min_tensor_bytes: 1 << 20, exploration_budget: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    /// A plain dot with at least this many flops is a partition op.
    pub large_gemm_flops: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { large_gemm_flops: 1 << 24 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    Substitution,
    Exploratory,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternSource {
    Substitution,
    Exploratory,
}

impl PatternSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PatternSource::Substitution => "substitution",
            PatternSource::Exploratory => "exploratory",
        }
    }
}

/// Fusible ops that fusion considers: live (when the graph names outputs)
/// and of a fusible kind.
fn fusible_ops(g: &Graph) -> BTreeSet<String> {
    let live = if g.outputs.is_empty() { None } else { Some(g.live_nodes()) };
    g.nodes
        .values()
        .filter(|n| n.kind.is_fusible())
        .filter(|n| live.as_ref().is_none_or(|l| l.contains(&n.id)))
        .map(|n| n.id.clone())
        .collect()
}

/// Maximal runs of fusible non-partition ops in topological order. Parameters
/// and constants are skipped; tuples and partition ops end the current run.
pub fn substitution_fusion(g: &Graph, parts: &PartitionSet) -> Vec<FusionPattern> {
    let Ok(order) = g.topological_sort() else {
        return Vec::new();
    };
    let fusible = fusible_ops(g);
    let mut patterns = Vec::new();
    let mut run: Vec<String> = Vec::new();
    let flush = |run: &mut Vec<String>, patterns: &mut Vec<FusionPattern>| {
        if !run.is_empty() {
            patterns.push(FusionPattern::new(patterns.len(), run.drain(..)));
        }
    };
    for id in order {
        if parts.ops.contains(&id) || matches!(g.nodes[&id].kind, OpKind::Tuple | OpKind::Fused { .. }) {
            flush(&mut run, &mut patterns);
        } else if fusible.contains(&id) {
            run.push(id);
        }
    }
    flush(&mut run, &mut patterns);
    patterns
}

/// The escalating partition sets: large plain dots, then every batched dot,
/// then column reductions, then scalar reductions.
pub fn partition_stages(g: &Graph, th: &Thresholds) -> Vec<PartitionSet> {
    let fusible = fusible_ops(g);
    let select = |pred: &dyn Fn(&crate::graph::OpNode) -> bool| -> BTreeSet<String> {
        fusible.iter().filter(|id| pred(&g.nodes[*id])).cloned().collect()
    };
    let steps: [BTreeSet<String>; 4] = [
        select(&|n| matches!(n.kind, OpKind::Dot { .. }) && dot_flops(g, n).unwrap_or(0) >= th.large_gemm_flops),
        select(&|n| matches!(n.kind, OpKind::BatchedDot { .. })),
        select(&|n| n.reduce_kind(g) == Some(ReduceKind::Column)),
        select(&|n| n.reduce_kind(g) == Some(ReduceKind::Scalar)),
    ];
    let mut stages = Vec::new();
    let mut current = BTreeSet::new();
    for (stage, extra) in steps.into_iter().enumerate() {
        let before = current.len();
        current.extend(extra);
        if stage == 0 || current.len() > before {
            stages.push(PartitionSet { ops: current.clone(), stage });
        }
    }
    stages
}

/// Union of substitution runs over every partition stage, deduplicated by
/// node set in first-seen order.
pub fn multi_step_patterns(g: &Graph, th: &Thresholds) -> Vec<FusionPattern> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for parts in partition_stages(g, th) {
        for p in substitution_fusion(g, &parts) {
            if seen.insert(p.nodes.clone()) {
                out.push(FusionPattern { id: out.len(), nodes: p.nodes });
            }
        }
    }
    out
}

fn explorable(kind: &OpKind) -> bool {
    matches!(kind, OpKind::Elementwise(_) | OpKind::BatchedDot { .. } | OpKind::Reduce { .. })
}

fn creates_cycle(g: &Graph, nodes: &BTreeSet<String>) -> bool {
    let p = FusionPattern { id: 0, nodes: nodes.clone() };
    !matches!(contract_plan(g, &[p]), Ok(c) if c.is_acyclic())
}

/// Grow `seed` one producer or consumer at a time, depth first. Every
/// accepted expansion is emitted once; expansions that would make the
/// contracted graph cyclic are dropped. Stops silently at the budget.
pub fn exploratory_fusion(g: &Graph, seed: &FusionPattern, cfg: &SeedConfig) -> Vec<FusionPattern> {
    let fusible = fusible_ops(g);
    let consumers = g.consumers();
    let candidates = |nodes: &BTreeSet<String>| -> Vec<String> {
        let mut c = BTreeSet::new();
        for id in nodes {
            let Some(n) = g.node(id) else { continue };
            c.extend(n.operands.iter().map(String::as_str));
            c.extend(consumers.get(id.as_str()).into_iter().flatten().copied());
        }
        c.into_iter()
            .filter(|id| !nodes.contains(*id) && fusible.contains(*id) && explorable(&g.nodes[*id].kind))
            .map(str::to_string)
            .collect()
    };

    let mut visited: HashSet<BTreeSet<String>> = HashSet::new();
    visited.insert(seed.nodes.clone());
    let mut out: Vec<FusionPattern> = Vec::new();
    let mut stack: Vec<(BTreeSet<String>, Vec<String>, usize)> = vec![(seed.nodes.clone(), candidates(&seed.nodes), 0)];
    while let Some(frame) = stack.last_mut() {
        if out.len() >= cfg.exploration_budget {
            break;
        }
        let (nodes, cands, pos) = frame;
        if *pos >= cands.len() {
            stack.pop();
            continue;
        }
        let mut next = nodes.clone();
        next.insert(cands[*pos].clone());
        *pos += 1;
        if !visited.insert(next.clone()) || creates_cycle(g, &next) {
            continue;
        }
        out.push(FusionPattern { id: out.len(), nodes: next.clone() });
        let c = candidates(&next);
        stack.push((next, c, 0));
    }
    out
}

/// Singleton seeds: elementwise, batched-dot and reduce ops with few operands
/// and at least one large input or output tensor.
pub fn select_seeds(g: &Graph, cfg: &SeedConfig) -> Vec<FusionPattern> {
    let fusible = fusible_ops(g);
    let mut seeds = Vec::new();
    for id in &fusible {
        let n = &g.nodes[id];
        if !explorable(&n.kind) || n.operands.len() > cfg.max_operands {
            continue;
        }
        let largest_input = n.operands.iter().filter_map(|o| g.node(o)).map(|o| o.byte_count()).max().unwrap_or(0);
        if largest_input.max(n.byte_count()) >= cfg.min_tensor_bytes {
            seeds.push(FusionPattern::new(seeds.len(), [id.clone()]));
        }
    }
    seeds
}

/// All candidates for the planner under a strategy, deduplicated by node set
/// and renumbered in order.
pub fn generate_patterns(
    g: &Graph,
    strategy: Strategy,
    th: &Thresholds,
    cfg: &SeedConfig,
) -> Vec<(FusionPattern, PatternSource)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |p: FusionPattern, src: PatternSource, out: &mut Vec<(FusionPattern, PatternSource)>| {
        if seen.insert(p.nodes.clone()) {
            out.push((FusionPattern { id: out.len(), nodes: p.nodes }, src));
        }
    };
    if strategy != Strategy::Exploratory {
        for p in multi_step_patterns(g, th) {
            push(p, PatternSource::Substitution, &mut out);
        }
    }
    if strategy != Strategy::Substitution {
        for seed in select_seeds(g, cfg) {
            for p in exploratory_fusion(g, &seed, cfg) {
                push(p, PatternSource::Exploratory, &mut out);
            }
        }
    }
    out
}
