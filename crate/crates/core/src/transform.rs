//! Rewriting a graph according to a fusion plan.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::PlanError;
use crate::graph::{body_outputs, contract_plan, FusionPattern, Graph, OpKind, OpNode};
use crate::ilp::FusionPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Elemwise,
    Reduction,
    Gemm,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Elemwise => "elemwise",
            Category::Reduction => "reduction",
            Category::Gemm => "gemm",
        }
    }
}

/// Gemm if the body holds any dot, else Reduction if it holds a reduce.
pub fn classify(body: &Graph) -> Category {
    if body.nodes.values().any(|n| n.kind.is_dot()) {
        Category::Gemm
    } else if body.nodes.values().any(|n| n.kind.is_reduce()) {
        Category::Reduction
    } else {
        Category::Elemwise
    }
}

/// Pattern nodes read outside the pattern or named as graph outputs, sorted.
pub fn pattern_outputs(g: &Graph, p: &FusionPattern) -> Vec<String> {
    let consumers = g.consumers();
    p.nodes
        .iter()
        .filter(|id| {
            g.outputs.contains(id) || consumers.get(id.as_str()).is_some_and(|cs| cs.iter().any(|c| !p.contains(c)))
        })
        .cloned()
        .collect()
}

/// A pattern's induced subgraph with formal parameters for its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBody {
    pub body: Graph,
    /// Body parameter ids, parallel to `inputs`.
    pub params: Vec<String>,
    /// External operand ids in first-use order.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn fresh(taken: &BTreeSet<String>, base: &str) -> String {
    let mut id = base.to_string();
    while taken.contains(&id) {
        id.push('_');
    }
    id
}

pub fn extract_body(g: &Graph, p: &FusionPattern) -> Result<PatternBody, PlanError> {
    let order = g.topological_sort()?;
    let mut taken: BTreeSet<String> = p.nodes.clone();
    let mut inputs: Vec<String> = Vec::new();
    let mut params: Vec<String> = Vec::new();
    let mut body = Graph::new();
    for id in order.iter().filter(|id| p.contains(id)) {
        let mut node = g.nodes[id].clone();
        for operand in node.operands.iter_mut() {
            if p.contains(operand) {
                continue;
            }
            let k = match inputs.iter().position(|i| i == operand) {
                Some(k) => k,
                None => {
                    let src = g.node(operand).ok_or_else(|| PlanError::InvalidPlan(format!("missing `{operand}`")))?;
                    let name = fresh(&taken, &format!("arg{}", inputs.len()));
                    taken.insert(name.clone());
                    body.add(OpNode {
                        id: name.clone(),
                        kind: OpKind::Parameter,
                        operands: vec![],
                        shape: src.shape.clone(),
                    });
                    inputs.push(operand.clone());
                    params.push(name);
                    inputs.len() - 1
                }
            };
            *operand = params[k].clone();
        }
        body.add(node);
    }
    let outputs = pattern_outputs(g, p);
    if outputs.len() == 1 {
        body.outputs = outputs.clone();
    } else {
        let tuple = fresh(&taken, "result");
        let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        body.add(OpNode::new(tuple.clone(), OpKind::Tuple, &refs, None));
        body.outputs = vec![tuple];
    }
    Ok(PatternBody { body, params, inputs, outputs })
}

/// Replace every selected pattern with one fused op `fusion_<k>`. A
/// multi-output fused op is followed by `get_element` nodes that keep the
/// original output ids, so downstream references stay intact.
pub fn apply_plan(g: &Graph, plan: &FusionPlan, patterns: &[FusionPattern]) -> Result<Graph, PlanError> {
    let mut chosen = Vec::with_capacity(plan.selected.len());
    for &i in &plan.selected {
        let p = patterns.get(i).ok_or_else(|| PlanError::InvalidPlan(format!("no pattern {i}")))?;
        chosen.push(FusionPattern { id: i, nodes: p.nodes.clone() });
    }
    let contraction = contract_plan(g, &chosen).map_err(|e| PlanError::InvalidPlan(e.to_string()))?;
    if !contraction.is_acyclic() {
        return Err(PlanError::InvalidPlan("fused graph would contain a cycle".into()));
    }

    let mut taken: BTreeSet<String> = g.nodes.keys().cloned().collect();
    let mut out = Graph::new();
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    for (k, p) in chosen.iter().enumerate() {
        let pb = extract_body(g, p)?;
        let id = fresh(&taken, &format!("fusion_{k}"));
        taken.insert(id.clone());
        let shape = match pb.outputs.as_slice() {
            [single] => {
                rename.insert(single.clone(), id.clone());
                g.nodes[single].shape.clone()
            }
            many => {
                for (index, o) in many.iter().enumerate() {
                    let shape = g.nodes[o].shape.clone();
                    out.add(OpNode {
                        id: o.clone(),
                        kind: OpKind::GetElement { index },
                        operands: vec![id.clone()],
                        shape,
                    });
                }
                None
            }
        };
        let kind = OpKind::Fused { body: Box::new(pb.body), params: pb.params };
        out.add(OpNode { id, kind, operands: pb.inputs, shape });
    }
    let fused: BTreeSet<&String> = chosen.iter().flat_map(|p| p.nodes.iter()).collect();
    for node in g.nodes.values().filter(|n| !fused.contains(&n.id)) {
        out.add(node.clone());
    }
    for node in out.nodes.values_mut() {
        for o in node.operands.iter_mut() {
            if let Some(r) = rename.get(o) {
                *o = r.clone();
            }
        }
    }
    out.outputs = g.outputs.iter().map(|o| rename.get(o).unwrap_or(o).clone()).collect();
    Ok(out)
}

/// Inline every fused op back into the graph.
pub fn flatten(g: &Graph) -> Graph {
    let mut out = Graph::new();
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    let mut projections: BTreeSet<String> = BTreeSet::new();
    for node in g.nodes.values() {
        if let OpKind::GetElement { .. } = node.kind {
            if matches!(g.node(&node.operands[0]).map(|n| &n.kind), Some(OpKind::Fused { .. })) {
                projections.insert(node.id.clone());
            }
        }
    }
    for node in g.nodes.values() {
        let OpKind::Fused { body, params } = &node.kind else {
            if !projections.contains(&node.id) {
                out.add(node.clone());
            }
            continue;
        };
        let inner = flatten(body);
        let bind: BTreeMap<&str, &str> =
            params.iter().map(String::as_str).zip(node.operands.iter().map(String::as_str)).collect();
        let outs = body_outputs(&inner);
        if let [single] = outs.as_slice() {
            rename.insert(node.id.clone(), single.clone());
        }
        for b in inner.nodes.values() {
            if bind.contains_key(b.id.as_str()) || (b.kind == OpKind::Tuple && inner.outputs.contains(&b.id)) {
                continue;
            }
            let mut b = b.clone();
            for o in b.operands.iter_mut() {
                if let Some(src) = bind.get(o.as_str()) {
                    *o = src.to_string();
                }
            }
            out.add(b);
        }
    }
    for node in out.nodes.values_mut() {
        for o in node.operands.iter_mut() {
            if let Some(r) = rename.get(o) {
                *o = r.clone();
            }
        }
    }
    out.outputs = g.outputs.iter().map(|o| rename.get(o).unwrap_or(o).clone()).collect();
    out
}

pub fn kernel_count(g: &Graph) -> usize {
    g.nodes.values().filter(|n| n.kind.launches_kernel()).count()
}

pub fn compression_ratio(before: &Graph, after: &Graph) -> Result<f64, PlanError> {
    match kernel_count(after) {
        0 => Err(PlanError::NoKernels),
        n => Ok(kernel_count(before) as f64 / n as f64),
    }
}
