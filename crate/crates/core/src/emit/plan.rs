//! How a template composes a pattern: which ops own a loop nest, which are
//! inlined, and how values cross between loop nests.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::shared::{Dag, RequestReason, ReuseGuard, SharedRequest};
use crate::error::CodegenError;
use crate::graph::{body_outputs, ElementwiseOp, Graph, OpKind, OpNode, ReduceKind, Shape};
use crate::template::{validate_template, AttrType, Schedule, Template};

/// A pattern body seen as a DAG of fusible ops.
#[derive(Debug, Clone)]
pub struct PatternView<'a> {
    pub body: &'a Graph,
    pub outputs: Vec<String>,
    /// Fusible ops in topological order.
    pub order: Vec<String>,
    /// In-pattern consumers of each op.
    pub consumers: BTreeMap<String, BTreeSet<String>>,
}

impl<'a> PatternView<'a> {
    pub fn new(body: &'a Graph) -> Result<Self, CodegenError> {
        let topo = body.topological_sort().map_err(|e| CodegenError::Pattern(e.to_string()))?;
        let mut order = Vec::new();
        for id in topo {
            let n = &body.nodes[&id];
            match n.kind {
                OpKind::Parameter | OpKind::Constant => {}
                OpKind::Tuple if body.outputs.contains(&id) => {}
                _ if n.kind.is_fusible() => {
                    if n.shape.is_none() {
                        return Err(CodegenError::Pattern(format!("`{id}` has no shape")));
                    }
                    order.push(id);
                }
                _ => return Err(CodegenError::Pattern(format!("`{id}` ({}) cannot be fused", n.kind.kind_str()))),
            }
        }
        let ops: BTreeSet<&String> = order.iter().collect();
        let mut consumers: BTreeMap<String, BTreeSet<String>> =
            order.iter().map(|id| (id.clone(), BTreeSet::new())).collect();
        for id in &order {
            for o in &body.nodes[id].operands {
                if ops.contains(o) {
                    consumers.get_mut(o).unwrap().insert(id.clone());
                }
            }
        }
        let outputs = body_outputs(body);
        if let Some(o) = outputs.iter().find(|o| !ops.contains(o)) {
            return Err(CodegenError::Pattern(format!("output `{o}` is not a fusible op")));
        }
        Ok(PatternView { body, outputs, order, consumers })
    }

    pub fn node(&self, id: &str) -> &OpNode {
        &self.body.nodes[id]
    }

    pub fn shape(&self, id: &str) -> &Shape {
        self.node(id).shape.as_ref().expect("pattern ops have shapes")
    }

    pub fn is_op(&self, id: &str) -> bool {
        self.consumers.contains_key(id)
    }

    pub fn is_output(&self, id: &str) -> bool {
        self.outputs.iter().any(|o| o == id)
    }

    pub fn dag(&self) -> Dag {
        Dag {
            order: self.order.clone(),
            operands: self
                .order
                .iter()
                .map(|id| (id.clone(), self.node(id).operands.iter().filter(|o| self.is_op(o)).cloned().collect()))
                .collect(),
            outputs: self.outputs.iter().cloned().collect(),
        }
    }

    /// Output elements and reduced extent of a reduction.
    pub fn reduce_extents(&self, id: &str) -> (usize, usize) {
        let n = self.node(id);
        let input = self.shape(&n.operands[0]).element_count();
        let out = self.shape(id).element_count();
        (out, input / out.max(1))
    }

    pub fn reduce_kind(&self, id: &str) -> Option<ReduceKind> {
        self.node(id).reduce_kind(self.body)
    }

    /// Weakly connected components among the ops.
    pub fn component_count(&self) -> usize {
        let idx: BTreeMap<&str, usize> = self.order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut parent: Vec<usize> = (0..self.order.len()).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for (i, id) in self.order.iter().enumerate() {
            for c in &self.consumers[id] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, idx[c.as_str()]));
                parent[a] = b;
            }
        }
        (0..self.order.len()).filter(|&i| find(&mut parent, i) == i).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceStyle {
    /// One warp per output row, shuffle combine.
    Warp,
    /// All threads of the block accumulate into shared slots.
    Block,
    /// One thread per output row.
    ThreadSeq,
    /// A single thread computes everything.
    Trivial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Style {
    Elementwise,
    Reduce(ReduceStyle),
    ThreadDot,
    BlockDot,
}

pub fn style_of(node: &OpNode, s: &Schedule) -> Style {
    match node.kind {
        OpKind::Reduce { .. } => {
            let style = if s.attrs.iter().any(|a| a.uses(AttrType::Warp)) {
                ReduceStyle::Warp
            } else if s.attrs.iter().all(|a| a.is(AttrType::Thread)) {
                ReduceStyle::Trivial
            } else if s.attrs.last().is_some_and(|a| a.uses(AttrType::Thread)) {
                ReduceStyle::ThreadSeq
            } else {
                ReduceStyle::Block
            };
            Style::Reduce(style)
        }
        OpKind::Dot { .. } | OpKind::BatchedDot { .. } => {
            if s.attrs.iter().any(|a| a.uses(AttrType::Warp)) {
                Style::BlockDot
            } else {
                Style::ThreadDot
            }
        }
        _ => Style::Elementwise,
    }
}

/// How a schedule spreads its work over thread blocks: `rows` rows of
/// `row_len` elements, split evenly over `blocks` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub blocks: usize,
    pub rows: usize,
    pub row_len: usize,
}

impl Geometry {
    pub fn signature(&self) -> (usize, usize) {
        (self.blocks, self.rows)
    }

    pub fn rows_per_block(&self) -> usize {
        self.rows.div_ceil(self.blocks.max(1)).max(1)
    }
}

pub fn geometry(view: &PatternView, s: &Schedule) -> Geometry {
    let node = view.node(&s.op_id);
    let (dims, reduced): (Vec<usize>, Vec<usize>) = match &node.kind {
        OpKind::Reduce { dims, .. } => (view.shape(&node.operands[0]).dims.clone(), dims.clone()),
        _ => (view.shape(&s.op_id).dims.clone(), Vec::new()),
    };
    let mut blocks = 1usize;
    for (d, a) in s.attrs.iter().enumerate() {
        let lvl = &a.levels[0];
        if lvl.attr == AttrType::Grid {
            blocks = blocks.saturating_mul(match lvl.tile {
                Some(t) => t,
                None if reduced.contains(&d) => 1,
                None => dims.get(d).copied().unwrap_or(1),
            });
        }
    }
    let blocks = blocks.max(1);
    if node.kind.is_reduce() {
        let (rows, row_len) = view.reduce_extents(&s.op_id);
        return Geometry { blocks, rows, row_len };
    }
    let total: usize = dims.iter().product();
    if dims.len() >= 2 {
        let row_len = *dims.last().unwrap();
        Geometry { blocks, rows: total / row_len, row_len }
    } else {
        Geometry { blocks, rows: blocks, row_len: total.div_ceil(blocks) }
    }
}

/// Index relation between a consumer element and the producer element it
/// reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexMap {
    Identity,
    Div(usize),
    Mod(usize),
    Zero,
    Complex,
}

impl IndexMap {
    /// `self` applied after `outer`.
    fn after(self, outer: IndexMap) -> IndexMap {
        use IndexMap::*;
        match (self, outer) {
            (Zero, _) => Zero,
            (Identity, m) => m,
            (m, Identity) => m,
            (_, Complex) | (Complex, _) => Complex,
            (_, Zero) => Zero,
            (Div(a), Div(b)) => Div(a * b),
            (Mod(a), Mod(b)) if b % a == 0 => Mod(a),
            _ => Complex,
        }
    }

    fn keeps_rows(self, row_len: Option<usize>) -> bool {
        match (self, row_len) {
            (IndexMap::Identity, _) => true,
            (IndexMap::Div(t), Some(l)) => l % t == 0,
            _ => false,
        }
    }
}

/// Index map of a broadcast from `src` dims to `dst` dims.
pub fn broadcast_map(src: &[usize], dst: &[usize]) -> IndexMap {
    if src.is_empty() {
        IndexMap::Zero
    } else if src == dst {
        IndexMap::Identity
    } else if dst.starts_with(src) {
        IndexMap::Div(dst[src.len()..].iter().product())
    } else {
        IndexMap::Mod(src.iter().product())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Transfer {
    Register,
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootPlan {
    pub op: String,
    pub style: Style,
    pub shared: bool,
    pub geom: Geometry,
    /// Non-root ops evaluated inside this loop nest.
    pub inlined: BTreeSet<String>,
    /// Register-transferred reductions recomputed per row, topological order.
    pub preludes: Vec<String>,
    /// Register-transferred elementwise roots recomputed here.
    pub recomputed: BTreeSet<String>,
    /// Producer roots by transfer kind.
    pub reads: BTreeMap<String, BTreeSet<Transfer>>,
    /// Body parameters read.
    pub globals: BTreeSet<String>,
    /// Every shared read of the producer is at the element being written.
    pub in_place: BTreeMap<String, bool>,
    pub writes_output: bool,
    pub has_request: bool,
}

impl RootPlan {
    /// Nothing leaves this loop nest, so it is not emitted.
    pub fn elided(&self) -> bool {
        !self.writes_output && !self.has_request
    }

    pub fn touches_shared(&self) -> bool {
        self.has_request || self.reads.values().any(|t| t.contains(&Transfer::Shared))
    }

    /// Warp-per-row (true) or thread-per-row (false) row loops.
    pub fn warp_rows(&self, plans: &BTreeMap<String, Style>) -> bool {
        match self.style {
            Style::Reduce(ReduceStyle::Warp) => true,
            Style::Reduce(_) => false,
            _ => self.preludes.iter().any(|p| plans.get(p) == Some(&Style::Reduce(ReduceStyle::Warp))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub template: Template,
    pub roots: Vec<RootPlan>,
    pub requests: Vec<SharedRequest>,
    pub reg_map: BTreeMap<String, BTreeSet<String>>,
}

impl Composition {
    pub fn root(&self, op: &str) -> Option<&RootPlan> {
        self.roots.iter().find(|r| r.op == op)
    }

    pub fn position(&self, op: &str) -> Option<usize> {
        self.roots.iter().position(|r| r.op == op)
    }

    pub fn styles(&self) -> BTreeMap<String, Style> {
        self.roots.iter().map(|r| (r.op.clone(), r.style)).collect()
    }
}

struct Walker<'v, 'a> {
    view: &'v PatternView<'a>,
    sched: &'v BTreeMap<String, (Style, bool, Geometry, usize)>,
    root: String,
    plan: RootPlan,
    seen: HashSet<(String, IndexMap, bool, bool, Option<usize>)>,
    prelude_set: BTreeSet<String>,
    mandatory: BTreeSet<String>,
}

impl Walker<'_, '_> {
    fn layout(&self, producer: &str) -> CodegenError {
        CodegenError::Layout { producer: producer.to_string(), consumer: self.root.clone() }
    }

    /// Operand maps of an evaluated op, and whether its operands are read
    /// through a dot.
    fn operand_maps(&self, id: &str) -> Vec<(String, IndexMap, bool)> {
        let n = self.view.node(id);
        match &n.kind {
            OpKind::Elementwise(ElementwiseOp::Broadcast) => {
                let src = &self.view.body.nodes[&n.operands[0]];
                let m = broadcast_map(&src.shape.as_ref().unwrap().dims, &n.shape.as_ref().unwrap().dims);
                vec![(n.operands[0].clone(), m, false)]
            }
            OpKind::Dot { .. } | OpKind::BatchedDot { .. } => {
                n.operands.iter().map(|o| (o.clone(), IndexMap::Complex, true)).collect()
            }
            _ => n.operands.iter().map(|o| (o.clone(), IndexMap::Identity, false)).collect(),
        }
    }

    fn visit_operands(
        &mut self,
        id: &str,
        map: IndexMap,
        dot: bool,
        prelude: bool,
        row_len: Option<usize>,
    ) -> Result<(), CodegenError> {
        for (o, m, via_dot) in self.operand_maps(id) {
            self.visit(&o, m.after(map), dot || via_dot, prelude, row_len)?;
        }
        Ok(())
    }

    fn visit(
        &mut self,
        id: &str,
        map: IndexMap,
        dot: bool,
        prelude: bool,
        row_len: Option<usize>,
    ) -> Result<(), CodegenError> {
        if !self.seen.insert((id.to_string(), map, dot, prelude, row_len)) {
            return Ok(());
        }
        if !self.view.is_op(id) {
            self.plan.globals.insert(id.to_string());
            return Ok(());
        }
        let Some(&(pstyle, pshared, pgeom, ppos)) = self.sched.get(id) else {
            self.plan.inlined.insert(id.to_string());
            return self.visit_operands(id, map, dot, prelude, row_len);
        };
        let (_, _, cgeom, cpos) = self.sched[&self.root];
        if ppos >= cpos {
            return Err(CodegenError::Ordering { op: self.root.clone(), operand: id.to_string() });
        }
        let shared =
            dot || pshared || matches!(pstyle, Style::ThreadDot | Style::BlockDot | Style::Reduce(ReduceStyle::Block));
        if shared {
            if !pshared {
                self.mandatory.insert(id.to_string());
            }
            let both_single = pgeom.blocks == 1 && cgeom.blocks == 1;
            let aligned = pgeom.signature() == cgeom.signature() && map.keeps_rows(row_len);
            if !both_single && !aligned {
                return Err(self.layout(id));
            }
            self.plan.reads.entry(id.to_string()).or_default().insert(Transfer::Shared);
            let in_place = map == IndexMap::Identity
                && !dot
                && self.plan.style == Style::Elementwise
                && row_len == Some(cgeom.row_len)
                && self.view.shape(id).dtype == self.view.shape(&self.root).dtype;
            let e = self.plan.in_place.entry(id.to_string()).or_insert(true);
            *e &= in_place;
            return Ok(());
        }
        if pgeom.signature() != cgeom.signature() {
            return Err(self.layout(id));
        }
        self.plan.reads.entry(id.to_string()).or_default().insert(Transfer::Register);
        if let Style::Reduce(_) = pstyle {
            let l = row_len.ok_or_else(|| self.layout(id))?;
            let rows_ok = map == IndexMap::Div(l) || (l == 1 && map == IndexMap::Identity);
            if !rows_ok || self.view.reduce_kind(id) != Some(ReduceKind::Row) {
                return Err(self.layout(id));
            }
            if self.prelude_set.insert(id.to_string()) {
                let (_, kr) = self.view.reduce_extents(id);
                let input = self.view.node(id).operands[0].clone();
                self.visit(&input, IndexMap::Identity, false, true, Some(kr))?;
            }
            Ok(())
        } else {
            self.plan.recomputed.insert(id.to_string());
            self.visit_operands(id, map, dot, prelude, row_len)
        }
    }
}

/// Analyse `t` against the pattern. Fails on templates that violate the
/// layout constraint or schedule ops out of order.
pub fn analyze(view: &PatternView, t: &Template) -> Result<Composition, CodegenError> {
    validate_template(t, view.body, &view.outputs)?;
    let mut sched: BTreeMap<String, (Style, bool, Geometry, usize)> = BTreeMap::new();
    for (i, s) in t.schedules.iter().enumerate() {
        sched.insert(s.op_id.clone(), (style_of(view.node(&s.op_id), s), s.shared, geometry(view, s), i));
    }
    if let Some(r) = view.order.iter().find(|id| view.node(id).kind.is_reduce() && !sched.contains_key(*id)) {
        return Err(CodegenError::Unscheduled(r.clone()));
    }
    let last_grid: BTreeSet<String> = t
        .schedules
        .iter()
        .filter(|s| s.attrs.last().is_some_and(|a| a.head() == AttrType::Grid) && s.attrs.len() > 1)
        .map(|s| s.op_id.clone())
        .collect();

    let mut roots = Vec::new();
    let mut mandatory = BTreeSet::new();
    for s in &t.schedules {
        let (style, shared, geom, _) = sched[&s.op_id];
        let plan = RootPlan {
            op: s.op_id.clone(),
            style,
            shared,
            geom,
            inlined: BTreeSet::new(),
            preludes: Vec::new(),
            recomputed: BTreeSet::new(),
            reads: BTreeMap::new(),
            globals: BTreeSet::new(),
            in_place: BTreeMap::new(),
            writes_output: view.is_output(&s.op_id),
            has_request: false,
        };
        let mut w = Walker {
            view,
            sched: &sched,
            root: s.op_id.clone(),
            plan,
            seen: HashSet::new(),
            prelude_set: BTreeSet::new(),
            mandatory: BTreeSet::new(),
        };
        let row_len = match style {
            Style::Elementwise => Some(geom.row_len),
            Style::Reduce(ReduceStyle::Block) => None,
            Style::Reduce(_) if view.reduce_kind(&s.op_id) == Some(ReduceKind::Row) => Some(geom.row_len),
            _ => None,
        };
        let node = view.node(&s.op_id);
        if node.kind.is_reduce() {
            w.visit(&node.operands[0], IndexMap::Identity, false, false, row_len)?;
        } else {
            w.visit_operands(&s.op_id, IndexMap::Identity, false, false, row_len)?;
        }
        // Shared reads of a producer whose last dim is split across blocks
        // are only legal between single-block schedules.
        for (p, kinds) in &w.plan.reads {
            if kinds.contains(&Transfer::Shared) && last_grid.contains(p) {
                let pg = sched[p].2;
                if !(pg.blocks == 1 && geom.blocks == 1) {
                    return Err(CodegenError::Layout { producer: p.clone(), consumer: s.op_id.clone() });
                }
            }
        }
        let order_pos: BTreeMap<&str, usize> = view.order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut pre: Vec<String> = w.prelude_set.iter().cloned().collect();
        pre.sort_by_key(|p| order_pos[p.as_str()]);
        w.plan.preludes = pre;
        mandatory.extend(w.mandatory);
        roots.push(w.plan);
    }

    let mut requests = Vec::new();
    for id in &view.order {
        let Some(&(style, shared, _, _)) = sched.get(id) else { continue };
        if shared || mandatory.contains(id) || style == Style::Reduce(ReduceStyle::Block) {
            let reason = match view.node(id).kind {
                OpKind::Reduce { .. } => RequestReason::ReduceTransfer,
                OpKind::Dot { .. } | OpKind::BatchedDot { .. } => RequestReason::DotTransfer,
                _ => RequestReason::ElemwiseStage,
            };
            requests.push(SharedRequest { op_id: id.clone(), bytes: view.shape(id).byte_count(), reason });
        }
    }
    for r in roots.iter_mut() {
        r.has_request = requests.iter().any(|q| q.op_id == r.op);
    }
    let reg_map = register_map(view, &roots);
    Ok(Composition { template: t.clone(), roots, requests, reg_map })
}

/// Elementwise ops evaluated in a loop nest with two or more consumers in the
/// same nest; their value is kept in a register and reused.
fn register_map(view: &PatternView, roots: &[RootPlan]) -> BTreeMap<String, BTreeSet<String>> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in roots.iter().filter(|r| !r.elided()) {
        let mut evaluated: BTreeSet<&String> = r.inlined.iter().chain(r.recomputed.iter()).collect();
        evaluated.insert(&r.op);
        for x in r.inlined.iter().chain(r.recomputed.iter()) {
            if !view.node(x).kind.is_elementwise() {
                continue;
            }
            let users: BTreeSet<String> = view.consumers[x].iter().filter(|c| evaluated.contains(c)).cloned().collect();
            if users.len() >= 2 {
                map.entry(x.clone()).or_default().extend(users);
            }
        }
    }
    map
}

/// Reuse limits derived from which loop nests read each shared value.
pub struct CompositionGuard<'c> {
    comp: &'c Composition,
}

impl<'c> CompositionGuard<'c> {
    pub fn new(comp: &'c Composition) -> Self {
        CompositionGuard { comp }
    }

    fn readers(&self, prev: &str) -> impl Iterator<Item = (usize, &RootPlan)> + '_ {
        let prev = prev.to_string();
        self.comp
            .roots
            .iter()
            .enumerate()
            .filter(move |(_, r)| !r.elided() && r.reads.get(&prev).is_some_and(|k| k.contains(&Transfer::Shared)))
    }
}

impl ReuseGuard for CompositionGuard<'_> {
    fn can_share(&self, inst: &str, prev: &str) -> bool {
        let Some(at) = self.comp.position(inst) else { return false };
        self.readers(prev).all(|(i, r)| i < at || (i == at && r.in_place.get(prev).copied().unwrap_or(false)))
    }

    fn can_reclaim(&self, inst: &str, prev: &str) -> bool {
        let Some(at) = self.comp.position(inst) else { return false };
        self.readers(prev).all(|(i, _)| i <= at)
    }
}
