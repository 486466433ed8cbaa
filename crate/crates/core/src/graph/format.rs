//! JSON graph files.
//!
//! ```json
//! {"nodes": [{"id": "p0", "kind": "parameter", "shape": {"dims": [4], "dtype": "f32"}},
//!            {"id": "e", "kind": "elementwise", "name": "exp", "operands": ["p0"],
//!             "shape": {"dims": [4], "dtype": "f32"}}],
//!  "outputs": ["e"]}
//! ```
//!
//! Reductions carry `reduce_dims` (and an optional combiner in `name`, default
//! `sum`), dots carry `contract_dims`. Fused ops use kind `fused` with an
//! embedded `body` graph and the `params` binding list; `get_element` nodes
//! carry `index`.

use serde::{Deserialize, Serialize};

use super::{DType, ElementwiseOp, Graph, OpKind, OpNode, Reducer, Rule, Severity, Shape};
use crate::error::GraphError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub operands: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract_dims: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Box<GraphDoc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeDoc {
    pub dims: Vec<usize>,
    pub dtype: String,
}

/// Parse and validate a graph file. Warnings (dead nodes) are tolerated.
pub fn parse_graph(text: &str) -> Result<Graph, GraphError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let g = graph_from_doc(&doc)?;
    check(&g)?;
    Ok(g)
}

/// Turn the first validation error into a `GraphError`.
pub fn check(g: &Graph) -> Result<(), GraphError> {
    let diags = g.validate();
    let Some(first) = diags.iter().find(|d| d.severity == Severity::Error) else {
        return Ok(());
    };
    Err(match first.rule {
        Rule::UnresolvedOperand => {
            let node = &g.nodes[&first.node];
            let operand = node.operands.iter().find(|o| !g.nodes.contains_key(*o)).cloned().unwrap_or_default();
            GraphError::UnresolvedOperand { node: first.node.clone(), operand }
        }
        Rule::Cycle => GraphError::Cycle {
            nodes: diags.iter().filter(|d| d.rule == Rule::Cycle).map(|d| d.node.clone()).collect(),
        },
        _ => GraphError::Invalid { node: first.node.clone(), message: first.message.clone() },
    })
}

pub fn graph_from_doc(doc: &GraphDoc) -> Result<Graph, GraphError> {
    let mut g = Graph::new();
    for nd in &doc.nodes {
        let node = node_from_doc(nd)?;
        if g.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        g.add(node);
    }
    g.outputs = doc.outputs.clone();
    Ok(g)
}

fn node_from_doc(nd: &NodeDoc) -> Result<OpNode, GraphError> {
    let fail = |message: String| GraphError::Format { node: nd.id.clone(), message };
    let shape = match &nd.shape {
        None => None,
        Some(s) => {
            let dtype = DType::parse(&s.dtype).ok_or_else(|| fail(format!("unknown dtype `{}`", s.dtype)))?;
            if s.dims.contains(&0) {
                return Err(fail("dims must be positive".into()));
            }
            Some(Shape::new(s.dims.clone(), dtype))
        }
    };
    let kind = match nd.kind.to_ascii_lowercase().as_str() {
        "parameter" => OpKind::Parameter,
        "constant" => OpKind::Constant,
        "tuple" => OpKind::Tuple,
        "elementwise" => {
            let name = nd.name.as_deref().ok_or_else(|| fail("elementwise node needs `name`".into()))?;
            OpKind::Elementwise(
                ElementwiseOp::from_name(name).ok_or_else(|| fail(format!("unknown elementwise op `{name}`")))?,
            )
        }
        "reduce" => {
            let dims = nd.reduce_dims.clone().ok_or_else(|| fail("reduce node needs `reduce_dims`".into()))?;
            let reducer = match nd.name.as_deref() {
                None => Reducer::Sum,
                Some(n) => Reducer::from_name(n).ok_or_else(|| fail(format!("unknown reducer `{n}`")))?,
            };
            OpKind::Reduce { dims, reducer }
        }
        "dot" | "batched_dot" => {
            let contract = nd.contract_dims.ok_or_else(|| fail("dot node needs `contract_dims`".into()))?;
            if nd.kind.eq_ignore_ascii_case("dot") {
                OpKind::Dot { contract }
            } else {
                OpKind::BatchedDot { contract }
            }
        }
        "get_element" => {
            OpKind::GetElement { index: nd.index.ok_or_else(|| fail("get_element needs `index`".into()))? }
        }
        "fused" => {
            let body = nd.body.as_ref().ok_or_else(|| fail("fused node needs `body`".into()))?;
            let params = nd.params.clone().ok_or_else(|| fail("fused node needs `params`".into()))?;
            OpKind::Fused { body: Box::new(graph_from_doc(body)?), params }
        }
        other => return Err(fail(format!("unknown kind `{other}`"))),
    };
    Ok(OpNode { id: nd.id.clone(), kind, operands: nd.operands.clone(), shape })
}

pub fn graph_to_doc(g: &Graph) -> GraphDoc {
    let order = g.topological_sort().unwrap_or_else(|_| g.nodes.keys().cloned().collect());
    GraphDoc { nodes: order.iter().map(|id| node_to_doc(&g.nodes[id])).collect(), outputs: g.outputs.clone() }
}

fn node_to_doc(n: &OpNode) -> NodeDoc {
    let mut nd = NodeDoc {
        id: n.id.clone(),
        kind: n.kind.kind_str().to_string(),
        name: None,
        operands: n.operands.clone(),
        shape: n.shape.as_ref().map(|s| ShapeDoc { dims: s.dims.clone(), dtype: s.dtype.as_str().to_string() }),
        reduce_dims: None,
        contract_dims: None,
        index: None,
        params: None,
        body: None,
    };
    match &n.kind {
        OpKind::Elementwise(op) => nd.name = Some(op.name().to_string()),
        OpKind::Reduce { dims, reducer } => {
            nd.reduce_dims = Some(dims.clone());
            nd.name = Some(reducer.name().to_string());
        }
        OpKind::Dot { contract } | OpKind::BatchedDot { contract } => nd.contract_dims = Some(*contract),
        OpKind::GetElement { index } => nd.index = Some(*index),
        OpKind::Fused { body, params } => {
            nd.body = Some(Box::new(graph_to_doc(body)));
            nd.params = Some(params.clone());
        }
        _ => {}
    }
    nd
}

/// Pretty-printed JSON with nodes in topological order.
pub fn print_graph(g: &Graph) -> String {
    let mut s = serde_json::to_string_pretty(&graph_to_doc(g)).expect("graph serializes");
    s.push('\n');
    s
}
