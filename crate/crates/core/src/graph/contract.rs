use std::collections::{BTreeMap, BTreeSet};

use super::{FusionPattern, Graph};
use crate::error::GraphError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuotientNode {
    /// A fused super-node, by pattern id.
    Pattern(usize),
    Op(String),
}

/// The graph obtained by collapsing every pattern of a plan into one node.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotientGraph {
    pub nodes: Vec<QuotientNode>,
    /// Deduplicated edges between node indices; self-loops are dropped.
    pub edges: BTreeSet<(usize, usize)>,
}

impl QuotientGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            succ[u].push(v);
        }
        succ
    }

    /// One directed cycle as a list of node indices, if any.
    pub fn find_cycle(&self) -> Option<Vec<usize>> {
        const WHITE: u8 = 0;
        const GREY: u8 = 1;
        const BLACK: u8 = 2;
        let succ = self.successors();
        let mut color = vec![WHITE; self.nodes.len()];
        for root in 0..self.nodes.len() {
            if color[root] != WHITE {
                continue;
            }
            // (node, next successor position)
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            color[root] = GREY;
            while let Some(&mut (u, ref mut pos)) = stack.last_mut() {
                if *pos < succ[u].len() {
                    let v = succ[u][*pos];
                    *pos += 1;
                    match color[v] {
                        WHITE => {
                            color[v] = GREY;
                            stack.push((v, 0));
                        }
                        GREY => {
                            let start = stack.iter().position(|&(n, _)| n == v).unwrap();
                            return Some(stack[start..].iter().map(|&(n, _)| n).collect());
                        }
                        _ => {}
                    }
                } else {
                    color[u] = BLACK;
                    stack.pop();
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Contraction {
    Acyclic(QuotientGraph),
    /// A witness cycle: the pattern ids on it (sorted) and the unfused op ids
    /// on it (in cycle order).
    Cycle {
        patterns: Vec<usize>,
        nodes: Vec<String>,
    },
}

impl Contraction {
    pub fn is_acyclic(&self) -> bool {
        matches!(self, Contraction::Acyclic(_))
    }
}

/// Collapse each pattern of `plan` into a super-node and check the result for
/// cycles. Patterns must be pairwise disjoint and name existing nodes.
pub fn contract_plan(g: &Graph, plan: &[FusionPattern]) -> Result<Contraction, GraphError> {
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, p) in plan.iter().enumerate() {
        for n in &p.nodes {
            if !g.nodes.contains_key(n) {
                return Err(GraphError::UnknownNode { pattern: p.id, node: n.clone() });
            }
            if let Some(prev) = owner.insert(n.as_str(), idx) {
                return Err(GraphError::Overlap { first: plan[prev].id, second: p.id, node: n.clone() });
            }
        }
    }
    let mut nodes: Vec<QuotientNode> = plan.iter().map(|p| QuotientNode::Pattern(p.id)).collect();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for id in g.nodes.keys() {
        let i = match owner.get(id.as_str()) {
            Some(&p) => p,
            None => {
                nodes.push(QuotientNode::Op(id.clone()));
                nodes.len() - 1
            }
        };
        index.insert(id.as_str(), i);
    }
    let mut edges = BTreeSet::new();
    for node in g.nodes.values() {
        let v = index[node.id.as_str()];
        for op in &node.operands {
            if let Some(&u) = index.get(op.as_str()) {
                if u != v {
                    edges.insert((u, v));
                }
            }
        }
    }
    let q = QuotientGraph { nodes, edges };
    match q.find_cycle() {
        None => Ok(Contraction::Acyclic(q)),
        Some(cycle) => {
            let mut patterns = Vec::new();
            let mut ops = Vec::new();
            for i in cycle {
                match &q.nodes[i] {
                    QuotientNode::Pattern(id) => patterns.push(*id),
                    QuotientNode::Op(id) => ops.push(id.clone()),
                }
            }
            patterns.sort_unstable();
            Ok(Contraction::Cycle { patterns, nodes: ops })
        }
    }
}
