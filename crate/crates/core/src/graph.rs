//! Tensor computation DAG: op kinds, shapes, validation and structural queries.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use crate::error::GraphError;

mod contract;
pub mod format;

pub use contract::{contract_plan, Contraction, QuotientGraph, QuotientNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    I32,
}

impl DType {
    pub fn byte_size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I32 => "i32",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f16" => Some(DType::F16),
            "i32" => Some(DType::I32),
            _ => None,
        }
    }
}

/// Row-major tensor shape; the last dimension is contiguous. An empty `dims`
/// list is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    pub dims: Vec<usize>,
    pub dtype: DType,
}

impl Shape {
    pub fn new(dims: Vec<usize>, dtype: DType) -> Self {
        Shape { dims, dtype }
    }

    pub fn f32(dims: &[usize]) -> Self {
        Shape::new(dims.to_vec(), DType::F32)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn byte_count(&self) -> usize {
        self.element_count() * self.dtype.byte_size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementwiseOp {
    Add,
    Subtract,
    Multiply,
    Divide,
    Log,
    Exp,
    Maximum,
    Minimum,
    Negate,
    Rsqrt,
    Select,
    Compare,
    Broadcast,
}

impl ElementwiseOp {
    pub const ALL: [ElementwiseOp; 13] = [
        ElementwiseOp::Add,
        ElementwiseOp::Subtract,
        ElementwiseOp::Multiply,
        ElementwiseOp::Divide,
        ElementwiseOp::Log,
        ElementwiseOp::Exp,
        ElementwiseOp::Maximum,
        ElementwiseOp::Minimum,
        ElementwiseOp::Negate,
        ElementwiseOp::Rsqrt,
        ElementwiseOp::Select,
        ElementwiseOp::Compare,
        ElementwiseOp::Broadcast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Subtract => "subtract",
            ElementwiseOp::Multiply => "multiply",
            ElementwiseOp::Divide => "divide",
            ElementwiseOp::Log => "log",
            ElementwiseOp::Exp => "exp",
            ElementwiseOp::Maximum => "maximum",
            ElementwiseOp::Minimum => "minimum",
            ElementwiseOp::Negate => "negate",
            ElementwiseOp::Rsqrt => "rsqrt",
            ElementwiseOp::Select => "select",
            ElementwiseOp::Compare => "compare",
            ElementwiseOp::Broadcast => "broadcast",
        }
    }

    pub fn from_name(s: &str) -> Option<ElementwiseOp> {
        ElementwiseOp::ALL.iter().copied().find(|op| op.name() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            ElementwiseOp::Log
            | ElementwiseOp::Exp
            | ElementwiseOp::Negate
            | ElementwiseOp::Rsqrt
            | ElementwiseOp::Broadcast => 1,
            ElementwiseOp::Select => 3,
            _ => 2,
        }
    }
}

/// Combiner applied by a reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reducer {
    Sum,
    Max,
    Min,
    Prod,
}

impl Reducer {
    pub fn name(self) -> &'static str {
        match self {
            Reducer::Sum => "sum",
            Reducer::Max => "max",
            Reducer::Min => "min",
            Reducer::Prod => "prod",
        }
    }

    pub fn from_name(s: &str) -> Option<Reducer> {
        match s {
            "sum" => Some(Reducer::Sum),
            "max" => Some(Reducer::Max),
            "min" => Some(Reducer::Min),
            "prod" => Some(Reducer::Prod),
            _ => None,
        }
    }
}

/// Layout class of a reduction under row-major storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceKind {
    /// Reduced dims are a proper suffix.
    Row,
    /// Reduced dims are a proper prefix.
    Column,
    /// Every dim is reduced.
    Scalar,
}

/// Classify reduced dimensions against an input rank. Returns `None` when the
/// dims are empty, unsorted, out of range, or neither a prefix nor a suffix.
pub fn classify_reduce(dims: &[usize], input_rank: usize) -> Option<ReduceKind> {
    if dims.is_empty() || dims.windows(2).any(|w| w[0] >= w[1]) {
        return None;
    }
    if *dims.last().unwrap() >= input_rank {
        return None;
    }
    if dims.len() == input_rank {
        return Some(ReduceKind::Scalar);
    }
    let is_suffix = dims.iter().enumerate().all(|(i, &d)| d == input_rank - dims.len() + i);
    let is_prefix = dims.iter().enumerate().all(|(i, &d)| d == i);
    if is_suffix {
        Some(ReduceKind::Row)
    } else if is_prefix {
        Some(ReduceKind::Column)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Parameter,
    Constant,
    Elementwise(ElementwiseOp),
    Reduce {
        dims: Vec<usize>,
        reducer: Reducer,
    },
    /// Plain gemm on rank-2 operands; `contract` = [lhs dim, rhs dim].
    Dot {
        contract: [usize; 2],
    },
    /// Batched gemm; leading rank-2 dims are batch dims.
    BatchedDot {
        contract: [usize; 2],
    },
    Tuple,
    /// Projection of one element of a tuple-producing fused op.
    GetElement {
        index: usize,
    },
    /// A fused kernel. `params[k]` is the body node bound to operand `k`.
    Fused {
        body: Box<Graph>,
        params: Vec<String>,
    },
}

impl OpKind {
    pub fn kind_str(&self) -> &'static str {
        match self {
            OpKind::Parameter => "parameter",
            OpKind::Constant => "constant",
            OpKind::Elementwise(_) => "elementwise",
            OpKind::Reduce { .. } => "reduce",
            OpKind::Dot { .. } => "dot",
            OpKind::BatchedDot { .. } => "batched_dot",
            OpKind::Tuple => "tuple",
            OpKind::GetElement { .. } => "get_element",
            OpKind::Fused { .. } => "fused",
        }
    }

    /// Ops that may appear inside a fusion pattern.
    pub fn is_fusible(&self) -> bool {
        matches!(self, OpKind::Elementwise(_) | OpKind::Reduce { .. } | OpKind::Dot { .. } | OpKind::BatchedDot { .. })
    }

    pub fn is_dot(&self) -> bool {
        matches!(self, OpKind::Dot { .. } | OpKind::BatchedDot { .. })
    }

    pub fn is_reduce(&self) -> bool {
        matches!(self, OpKind::Reduce { .. })
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, OpKind::Elementwise(_))
    }

    /// Ops that launch a kernel on their own when left unfused.
    pub fn launches_kernel(&self) -> bool {
        self.is_fusible() || matches!(self, OpKind::Fused { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    pub operands: Vec<String>,
    /// `None` only for tuples and multi-output fused ops.
    pub shape: Option<Shape>,
}

impl OpNode {
    pub fn new(id: impl Into<String>, kind: OpKind, operands: &[&str], shape: Option<Shape>) -> Self {
        OpNode { id: id.into(), kind, operands: operands.iter().map(|s| s.to_string()).collect(), shape }
    }

    pub fn byte_count(&self) -> usize {
        self.shape.as_ref().map_or(0, Shape::byte_count)
    }

    /// Reduce layout class, when this op is a well-formed reduction.
    pub fn reduce_kind(&self, g: &Graph) -> Option<ReduceKind> {
        match &self.kind {
            OpKind::Reduce { dims, .. } => {
                let rank = g.node(&self.operands[0])?.shape.as_ref()?.rank();
                classify_reduce(dims, rank)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub nodes: BTreeMap<String, OpNode>,
    pub outputs: Vec<String>,
}

/// A candidate group of ops to emit as one kernel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FusionPattern {
    pub id: usize,
    pub nodes: BTreeSet<String>,
}

impl FusionPattern {
    pub fn new<I, S>(id: usize, nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        FusionPattern { id, nodes: nodes.into_iter().map(Into::into).collect() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains(id)
    }

    pub fn overlaps(&self, other: &FusionPattern) -> bool {
        // Iterate the smaller set.
        let (a, b) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        a.nodes.iter().any(|n| b.nodes.contains(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    UnresolvedOperand,
    UnknownOutput,
    Arity,
    ShapeRule,
    ReduceLayout,
    Cycle,
    DeadNode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: String,
    pub rule: Rule,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {} ({:?}): {}", self.node, self.rule, self.message)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Insert a node, replacing any node with the same id.
    pub fn add(&mut self, node: OpNode) -> &mut Self {
        self.nodes.insert(node.id.clone(), node);
        self
    }

    pub fn with_outputs(mut self, outputs: &[&str]) -> Self {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Consumer lists keyed by producer id; each list is sorted and
    /// deduplicated.
    pub fn consumers(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = self.nodes.keys().map(|k| (k.as_str(), Vec::new())).collect();
        for node in self.nodes.values() {
            for op in &node.operands {
                if let Some(list) = map.get_mut(op.as_str()) {
                    if !list.contains(&node.id.as_str()) {
                        list.push(node.id.as_str());
                    }
                }
            }
        }
        for list in map.values_mut() {
            list.sort_unstable();
        }
        map
    }

    /// Kahn's algorithm with a min-heap on ids, so ties break
    /// lexicographically.
    pub fn topological_sort(&self) -> Result<Vec<String>, GraphError> {
        let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
        for node in self.nodes.values() {
            let mut seen = BTreeSet::new();
            let count =
                node.operands.iter().filter(|o| self.nodes.contains_key(o.as_str()) && seen.insert(o.as_str())).count();
            indegree.insert(node.id.as_str(), count);
        }
        let consumers = self.consumers();
        let mut heap: BinaryHeap<Reverse<&str>> =
            indegree.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| Reverse(k)).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = heap.pop() {
            order.push(id.to_string());
            for &c in &consumers[id] {
                let d = indegree.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck: Vec<String> = indegree.iter().filter(|(_, &d)| d > 0).map(|(k, _)| k.to_string()).collect();
            return Err(GraphError::Cycle { nodes: stuck });
        }
        Ok(order)
    }

    /// Ids reachable backwards from the graph outputs.
    pub fn live_nodes(&self) -> BTreeSet<String> {
        let mut live = BTreeSet::new();
        let mut stack: Vec<&str> = self.outputs.iter().map(String::as_str).collect();
        while let Some(id) = stack.pop() {
            if !self.nodes.contains_key(id) || !live.insert(id.to_string()) {
                continue;
            }
            stack.extend(self.nodes[id].operands.iter().map(String::as_str));
        }
        live
    }

    /// Check every structural invariant. Errors and warnings are both
    /// returned; a graph is valid when no entry has `Severity::Error`.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut err = |node: &str, rule: Rule, message: String| {
            diags.push(Diagnostic { node: node.to_string(), rule, severity: Severity::Error, message })
        };
        for (key, node) in &self.nodes {
            if key != &node.id {
                err(key, Rule::DuplicateId, format!("map key does not match node id `{}`", node.id));
            }
        }
        for out in &self.outputs {
            if !self.nodes.contains_key(out) {
                err(out, Rule::UnknownOutput, "graph output does not name a node".into());
            }
        }
        let mut resolved = true;
        for node in self.nodes.values() {
            for op in &node.operands {
                if !self.nodes.contains_key(op) {
                    resolved = false;
                    err(&node.id, Rule::UnresolvedOperand, format!("operand `{op}` does not exist"));
                }
            }
        }
        for node in self.nodes.values() {
            if let Err((rule, msg)) = self.check_node(node, resolved) {
                err(&node.id, rule, msg);
            }
        }
        if let Err(GraphError::Cycle { nodes }) = self.topological_sort() {
            for n in nodes {
                err(&n, Rule::Cycle, "node lies on or behind a dependency cycle".into());
            }
        }
        if !self.outputs.is_empty() {
            let live = self.live_nodes();
            for id in self.nodes.keys().filter(|k| !live.contains(*k)) {
                diags.push(Diagnostic {
                    node: id.clone(),
                    rule: Rule::DeadNode,
                    severity: Severity::Warning,
                    message: "not reachable from any graph output".into(),
                });
            }
        }
        diags
    }

    pub fn is_valid(&self) -> bool {
        self.validate().iter().all(|d| d.severity != Severity::Error)
    }

    fn operand_shape(&self, node: &OpNode, i: usize) -> Option<&Shape> {
        self.nodes.get(&node.operands[i]).and_then(|n| n.shape.as_ref())
    }

    fn check_node(&self, node: &OpNode, resolved: bool) -> Result<(), (Rule, String)> {
        let arity = |want: usize| -> Result<(), (Rule, String)> {
            if node.operands.len() == want {
                Ok(())
            } else {
                Err((
                    Rule::Arity,
                    format!("{} expects {want} operand(s), got {}", kind_label(&node.kind), node.operands.len()),
                ))
            }
        };
        let needs_shape = |s: &Option<Shape>| -> Result<Shape, (Rule, String)> {
            s.clone().ok_or((Rule::ShapeRule, "missing output shape".to_string()))
        };
        let shape_err = |msg: String| Err((Rule::ShapeRule, msg));
        match &node.kind {
            OpKind::Parameter | OpKind::Constant => {
                arity(0)?;
                needs_shape(&node.shape)?;
                Ok(())
            }
            OpKind::Tuple => {
                if node.operands.is_empty() {
                    return Err((Rule::Arity, "tuple expects at least one operand".into()));
                }
                Ok(())
            }
            OpKind::Elementwise(op) => {
                arity(op.arity())?;
                let out = needs_shape(&node.shape)?;
                if !resolved {
                    return Ok(());
                }
                let ins: Vec<Option<&Shape>> = (0..node.operands.len()).map(|i| self.operand_shape(node, i)).collect();
                if ins.iter().any(Option::is_none) {
                    return shape_err("operand has no shape".into());
                }
                let ins: Vec<&Shape> = ins.into_iter().flatten().collect();
                match op {
                    ElementwiseOp::Broadcast => {
                        let src = &ins[0].dims;
                        let dst = &out.dims;
                        let ok = src.is_empty()
                            || src == dst
                            || (src.len() < dst.len() && (dst.starts_with(src) || dst.ends_with(src)));
                        if !ok {
                            return shape_err(format!("cannot broadcast {:?} to {:?}", src, dst));
                        }
                        if ins[0].dtype != out.dtype {
                            return shape_err("broadcast changes dtype".into());
                        }
                    }
                    ElementwiseOp::Select => {
                        if ins.iter().any(|s| s.dims != out.dims) {
                            return shape_err("select operands must match output dims".into());
                        }
                        if ins[1].dtype != out.dtype || ins[2].dtype != out.dtype {
                            return shape_err("select branches must match output dtype".into());
                        }
                    }
                    ElementwiseOp::Compare => {
                        if ins.iter().any(|s| s.dims != out.dims) || ins[0].dtype != ins[1].dtype {
                            return shape_err("compare operands must match output dims and each other".into());
                        }
                    }
                    _ => {
                        if ins.iter().any(|s| s.dims != out.dims || s.dtype != out.dtype) {
                            return shape_err(format!(
                                "operands must have shape {:?} {}",
                                out.dims,
                                out.dtype.as_str()
                            ));
                        }
                    }
                }
                Ok(())
            }
            OpKind::Reduce { dims, .. } => {
                arity(1)?;
                let out = needs_shape(&node.shape)?;
                if !resolved {
                    return Ok(());
                }
                let input = self.operand_shape(node, 0).ok_or((Rule::ShapeRule, "operand has no shape".to_string()))?;
                if classify_reduce(dims, input.rank()).is_none() {
                    return Err((
                        Rule::ReduceLayout,
                        format!(
                            "reduce dims {:?} must be a sorted, nonempty prefix or suffix of rank {}",
                            dims,
                            input.rank()
                        ),
                    ));
                }
                let kept: Vec<usize> =
                    input.dims.iter().enumerate().filter(|(i, _)| !dims.contains(i)).map(|(_, &d)| d).collect();
                if kept != out.dims || input.dtype != out.dtype {
                    return shape_err(format!("reduce output must be {:?}", kept));
                }
                Ok(())
            }
            OpKind::Dot { contract } | OpKind::BatchedDot { contract } => {
                arity(2)?;
                let out = needs_shape(&node.shape)?;
                if !resolved {
                    return Ok(());
                }
                let (lhs, rhs) = match (self.operand_shape(node, 0), self.operand_shape(node, 1)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return shape_err("operand has no shape".into()),
                };
                let expect =
                    dot_output_dims(&node.kind, &lhs.dims, &rhs.dims, *contract).map_err(|m| (Rule::ShapeRule, m))?;
                if expect != out.dims || lhs.dtype != out.dtype || rhs.dtype != out.dtype {
                    return shape_err(format!("dot output must be {:?}", expect));
                }
                Ok(())
            }
            OpKind::GetElement { index } => {
                arity(1)?;
                needs_shape(&node.shape)?;
                if !resolved {
                    return Ok(());
                }
                let src = &self.nodes[&node.operands[0]];
                let OpKind::Fused { body, .. } = &src.kind else {
                    return shape_err("get_element operand must be a fused op".into());
                };
                let elems = body_outputs(body);
                match elems.get(*index).and_then(|id| body.node(id)).and_then(|n| n.shape.as_ref()) {
                    Some(s) if Some(s) == node.shape.as_ref() => Ok(()),
                    Some(_) => shape_err("get_element shape differs from the selected element".into()),
                    None => shape_err(format!("tuple index {index} out of range")),
                }
            }
            OpKind::Fused { body, params } => {
                arity(params.len())?;
                for p in params {
                    match body.node(p) {
                        Some(n) if n.kind == OpKind::Parameter => {}
                        _ => return shape_err(format!("fused param `{p}` is not a body parameter")),
                    }
                }
                if let Some(d) = body.validate().into_iter().find(|d| d.severity == Severity::Error) {
                    return Err((d.rule, format!("in fused body: {d}")));
                }
                if resolved {
                    for (i, p) in params.iter().enumerate() {
                        if self.operand_shape(node, i) != body.node(p).and_then(|n| n.shape.as_ref()) {
                            return shape_err(format!("operand {i} shape does not match body param `{p}`"));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

fn kind_label(kind: &OpKind) -> String {
    match kind {
        OpKind::Elementwise(op) => op.name().to_string(),
        other => other.kind_str().to_string(),
    }
}

/// Output element ids of a fused body: the terminal tuple's operands, or the
/// single output.
pub fn body_outputs(body: &Graph) -> Vec<String> {
    match body.outputs.as_slice() {
        [single] => match body.node(single) {
            Some(n) if n.kind == OpKind::Tuple => n.operands.clone(),
            _ => vec![single.clone()],
        },
        many => many.to_vec(),
    }
}

/// Output dims of a (batched) dot. Plain dots take rank-2 operands; batched
/// dots share leading batch dims and contract one of the last two dims.
pub fn dot_output_dims(
    kind: &OpKind,
    lhs: &[usize],
    rhs: &[usize],
    contract: [usize; 2],
) -> Result<Vec<usize>, String> {
    let batched = matches!(kind, OpKind::BatchedDot { .. });
    let rank = lhs.len();
    if batched {
        if rank < 3 || rhs.len() != rank {
            return Err("batched_dot operands must share a rank of at least 3".into());
        }
        if lhs[..rank - 2] != rhs[..rank - 2] {
            return Err("batched_dot batch dims differ".into());
        }
    } else if rank != 2 || rhs.len() != 2 {
        return Err("dot operands must be rank 2".into());
    }
    let [cl, cr] = contract;
    if cl < rank - 2 || cl >= rank || cr < rank - 2 || cr >= rank {
        return Err(format!("contract dims {:?} must index one of the last two dims", contract));
    }
    if lhs[cl] != rhs[cr] {
        return Err(format!("contracted extents differ: {} vs {}", lhs[cl], rhs[cr]));
    }
    let mut out = lhs[..rank - 2].to_vec();
    out.push(lhs[if cl == rank - 1 { rank - 2 } else { rank - 1 }]);
    out.push(rhs[if cr == rank - 1 { rank - 2 } else { rank - 1 }]);
    Ok(out)
}

/// Multiply-add count of a dot: 2 * output elements * contracted extent.
pub fn dot_flops(g: &Graph, node: &OpNode) -> Option<u64> {
    let (OpKind::Dot { contract } | OpKind::BatchedDot { contract }) = &node.kind else {
        return None;
    };
    let lhs = g.node(&node.operands[0])?.shape.as_ref()?;
    let k = *lhs.dims.get(contract[0])? as u64;
    Some(2 * node.shape.as_ref()?.element_count() as u64 * k)
}
