#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stitch_core::{ElementwiseOp, FusionPattern, Graph, OpKind, OpNode, Shape};

pub fn fixture_text(name: &str) -> String {
    let path = format!("{}/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn fixture(name: &str) -> Graph {
    stitch_core::parse_graph(&fixture_text(name)).unwrap()
}

pub const FIXTURES: [&str; 5] = ["attention", "packing", "thread", "warp", "block"];

/// Random DAG of elementwise ops over two parameters. Node `n{i}` reads one
/// or two earlier values; sinks become outputs.
pub fn random_dag(rng: &mut ChaCha8Rng, ops: usize) -> Graph {
    let s = || Some(Shape::f32(&[8]));
    let mut g = Graph::new();
    g.add(OpNode::new("p0", OpKind::Parameter, &[], s()));
    g.add(OpNode::new("p1", OpKind::Parameter, &[], s()));
    let mut ids: Vec<String> = vec!["p0".into(), "p1".into()];
    for i in 0..ops {
        let id = format!("n{i:02}");
        // Favour recent values so chains and diamonds are common.
        let pick = |rng: &mut ChaCha8Rng| {
            let lo = ids.len().saturating_sub(6);
            ids[rng.gen_range(lo..ids.len())].clone()
        };
        let node = if rng.gen_bool(0.5) {
            let (a, b) = (pick(rng), pick(rng));
            OpNode::new(&id, OpKind::Elementwise(ElementwiseOp::Add), &[a.as_str(), b.as_str()], s())
        } else {
            let a = pick(rng);
            OpNode::new(&id, OpKind::Elementwise(ElementwiseOp::Exp), &[a.as_str()], s())
        };
        g.add(node);
        ids.push(id);
    }
    let mut used: BTreeSet<String> = BTreeSet::new();
    for n in g.nodes.values() {
        used.extend(n.operands.iter().cloned());
    }
    let outs: Vec<String> = ids[2..].iter().filter(|id| !used.contains(*id)).cloned().collect();
    let outs: Vec<&str> = outs.iter().map(String::as_str).collect();
    g.with_outputs(&outs)
}

pub fn op_ids(g: &Graph) -> Vec<String> {
    g.nodes.values().filter(|n| n.kind != OpKind::Parameter).map(|n| n.id.clone()).collect()
}

/// Overlapping patterns: random op subsets of size 2..=5, including
/// non-convex ones that contract into cycles.
pub fn adversarial_patterns(rng: &mut ChaCha8Rng, g: &Graph, count: usize) -> Vec<FusionPattern> {
    let ops = op_ids(g);
    (0..count)
        .map(|id| {
            let k = rng.gen_range(2..=5.min(ops.len()));
            let nodes: Vec<String> = ops.choose_multiple(rng, k).cloned().collect();
            FusionPattern::new(id, nodes)
        })
        .collect()
}

/// Cycle check on the quotient graph by explicit reachability.
pub fn quotient_is_acyclic(g: &Graph, patterns: &[&FusionPattern]) -> bool {
    let mut group: BTreeMap<&str, String> = g.nodes.keys().map(|k| (k.as_str(), k.clone())).collect();
    for (i, p) in patterns.iter().enumerate() {
        for n in &p.nodes {
            group.insert(n.as_str(), format!("#pattern{i}"));
        }
    }
    let mut succ: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for n in g.nodes.values() {
        for o in &n.operands {
            let (a, b) = (group[o.as_str()].clone(), group[n.id.as_str()].clone());
            if a != b {
                succ.entry(a).or_default().insert(b);
            }
        }
    }
    let nodes: BTreeSet<String> = group.values().cloned().collect();
    for start in &nodes {
        let mut stack: Vec<&String> = succ.get(start).into_iter().flatten().collect();
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        while let Some(x) = stack.pop() {
            if x == start {
                return false;
            }
            if seen.insert(x) {
                stack.extend(succ.get(x).into_iter().flatten());
            }
        }
    }
    true
}
