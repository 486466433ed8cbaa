//! CUDA-C text for one composed pattern.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use super::plan::{broadcast_map, Composition, IndexMap, PatternView, ReduceStyle, RootPlan, Style};
use super::shared::AllocMap;
use crate::graph::{DType, ElementwiseOp, OpKind, ReduceKind, Reducer};

pub fn ident(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

fn ctype(d: DType) -> &'static str {
    match d {
        DType::F32 => "float",
        DType::F16 => "__half",
        DType::I32 => "int",
    }
}

pub fn ctype_of(d: Option<DType>) -> &'static str {
    ctype(d.unwrap_or(DType::F32))
}

fn vtype(d: DType) -> &'static str {
    match d {
        DType::I32 => "int",
        _ => "float",
    }
}

fn load(d: DType, e: String) -> String {
    match d {
        DType::F16 => format!("__half2float({e})"),
        _ => e,
    }
}

fn store(d: DType, e: &str) -> String {
    match d {
        DType::F16 => format!("__float2half({e})"),
        _ => e.to_string(),
    }
}

fn init(r: Reducer, d: DType) -> &'static str {
    match (r, d) {
        (Reducer::Sum, DType::I32) => "0",
        (Reducer::Sum, _) => "0.0f",
        (Reducer::Prod, DType::I32) => "1",
        (Reducer::Prod, _) => "1.0f",
        (Reducer::Max, DType::I32) => "INT_MIN",
        (Reducer::Max, _) => "-INFINITY",
        (Reducer::Min, DType::I32) => "INT_MAX",
        (Reducer::Min, _) => "INFINITY",
    }
}

fn combine(r: Reducer, d: DType, a: &str, b: &str) -> String {
    match (r, d) {
        (Reducer::Sum, _) => format!("{a} + {b}"),
        (Reducer::Prod, _) => format!("{a} * {b}"),
        (Reducer::Max, DType::I32) => format!("max({a}, {b})"),
        (Reducer::Max, _) => format!("fmaxf({a}, {b})"),
        (Reducer::Min, DType::I32) => format!("min({a}, {b})"),
        (Reducer::Min, _) => format!("fminf({a}, {b})"),
    }
}

fn elementwise(op: ElementwiseOp, d: DType, a: &[String]) -> String {
    use ElementwiseOp::*;
    let int = d == DType::I32;
    match op {
        Add => format!("{} + {}", a[0], a[1]),
        Subtract => format!("{} - {}", a[0], a[1]),
        Multiply => format!("{} * {}", a[0], a[1]),
        Divide => format!("{} / {}", a[0], a[1]),
        Maximum if int => format!("max({}, {})", a[0], a[1]),
        Maximum => format!("fmaxf({}, {})", a[0], a[1]),
        Minimum if int => format!("min({}, {})", a[0], a[1]),
        Minimum => format!("fminf({}, {})", a[0], a[1]),
        Log => format!("logf({})", a[0]),
        Exp => format!("expf({})", a[0]),
        Negate => format!("-{}", a[0]),
        Rsqrt => format!("rsqrtf({})", a[0]),
        Broadcast => a[0].clone(),
        Compare if int => format!("({} < {}) ? 1 : 0", a[0], a[1]),
        Compare => format!("({} < {}) ? 1.0f : 0.0f", a[0], a[1]),
        Select => format!("({} != 0) ? {} : {}", a[0], a[1], a[2]),
    }
}

fn map_index(m: IndexMap, idx: &str) -> String {
    match m {
        IndexMap::Identity => idx.to_string(),
        IndexMap::Zero => "0".to_string(),
        IndexMap::Div(t) => format!("({idx}) / {t}"),
        IndexMap::Mod(s) => format!("({idx}) % {s}"),
        IndexMap::Complex => unreachable!("complex maps are never materialised"),
    }
}

#[derive(Default)]
pub struct Helpers {
    pub shuffles: BTreeSet<(Reducer, &'static str)>,
    pub atomics: BTreeSet<(Reducer, &'static str)>,
}

/// Statement writer for one loop nest, with per-scope value reuse.
struct Writer<'a, 'v> {
    view: &'a PatternView<'v>,
    comp: &'a Composition,
    inputs: &'a BTreeMap<String, String>,
    root: &'a RootPlan,
    lines: Vec<String>,
    depth: usize,
    scopes: Vec<HashMap<(String, String), String>>,
    counter: usize,
    in_dot: usize,
    helpers: &'a mut Helpers,
}

impl Writer<'_, '_> {
    fn line(&mut self, s: impl AsRef<str>) {
        self.lines.push(format!("{}{}", "  ".repeat(self.depth), s.as_ref()));
    }

    fn open(&mut self, s: impl AsRef<str>) {
        self.line(format!("{} {{", s.as_ref()));
        self.depth += 1;
        self.scopes.push(HashMap::new());
    }

    fn close(&mut self) {
        self.depth -= 1;
        self.scopes.pop();
        self.line("}");
    }

    fn lookup(&self, key: &(String, String)) -> Option<String> {
        self.scopes.iter().rev().find_map(|s| s.get(key).cloned())
    }

    fn fresh(&mut self, id: &str) -> String {
        self.counter += 1;
        format!("v_{}_{}", ident(id), self.counter)
    }

    fn dtype(&self, id: &str) -> DType {
        self.view.body.nodes[id].shape.as_ref().map_or(DType::F32, |s| s.dtype)
    }

    fn shared_read(&self, id: &str) -> bool {
        if self.in_dot > 0 {
            return true;
        }
        match self.comp.root(id) {
            Some(p) => {
                p.shared || matches!(p.style, Style::ThreadDot | Style::BlockDot | Style::Reduce(ReduceStyle::Block))
            }
            None => false,
        }
    }

    /// Expression for `id` at element `idx`.
    fn value(&mut self, id: &str, idx: &str) -> String {
        let key = (id.to_string(), idx.to_string());
        if let Some(v) = self.lookup(&key) {
            return v;
        }
        let d = self.dtype(id);
        let expr = if !self.view.is_op(id) {
            load(d, format!("in_{}[{idx}]", ident(&self.inputs[id])))
        } else if id != self.root.op && self.comp.root(id).is_some() {
            if self.shared_read(id) {
                load(d, format!("s_{}[{idx}]", ident(id)))
            } else if self.view.node(id).kind.is_reduce() {
                return format!("red_{}", ident(id));
            } else {
                self.compute(id, idx)
            }
        } else {
            self.compute(id, idx)
        };
        if expr.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.scopes.last_mut().unwrap().insert(key, expr.clone());
            return expr;
        }
        let var = self.fresh(id);
        self.line(format!("const {} {var} = {expr};", vtype(d)));
        self.scopes.last_mut().unwrap().insert(key, var.clone());
        var
    }

    fn compute(&mut self, id: &str, idx: &str) -> String {
        let node = self.view.node(id).clone();
        let d = self.dtype(id);
        match &node.kind {
            OpKind::Elementwise(op) => {
                let args: Vec<String> = node
                    .operands
                    .iter()
                    .map(|o| {
                        let i = if *op == ElementwiseOp::Broadcast {
                            let src = &self.view.body.nodes[o].shape.as_ref().unwrap().dims;
                            map_index(broadcast_map(src, &node.shape.as_ref().unwrap().dims), idx)
                        } else {
                            idx.to_string()
                        };
                        self.value(o, &i)
                    })
                    .collect();
                elementwise(*op, d, &args)
            }
            OpKind::Dot { contract } | OpKind::BatchedDot { contract } => {
                let acc = self.fresh(id);
                self.line(format!("{} {acc} = {};", vtype(d), if d == DType::I32 { "0" } else { "0.0f" }));
                self.dot_operands(id, *contract, idx, "k", acc.clone(), false);
                acc
            }
            OpKind::Reduce { .. } => format!("red_{}", ident(id)),
            _ => unreachable!("non-fusible op inside a pattern"),
        }
    }

    /// Emit the contraction loop of a dot at output element `idx`,
    /// accumulating into `acc`. With `lanes`, the loop is split over warp
    /// lanes.
    fn dot_operands(&mut self, id: &str, contract: [usize; 2], idx: &str, k: &str, acc: String, lanes: bool) {
        let node = self.view.node(id).clone();
        let out = node.shape.as_ref().unwrap().dims.clone();
        let r = out.len();
        let (m_ext, n_ext) = (out[r - 2], out[r - 1]);
        let lhs = &self.view.body.nodes[&node.operands[0]].shape.as_ref().unwrap().dims;
        let kk = lhs[contract[0]];
        let tag = self.counter + 1;
        self.counter += 1;
        let (b, m, n) = (format!("b{tag}"), format!("m{tag}"), format!("n{tag}"));
        self.line(format!("const int {b} = ({idx}) / {};", m_ext * n_ext));
        self.line(format!("const int {m} = (({idx}) / {n_ext}) % {m_ext};"));
        self.line(format!("const int {n} = ({idx}) % {n_ext};"));
        let kv = format!("{k}{tag}");
        let lhs_idx = if contract[0] == r - 1 {
            format!("{b} * {} + {m} * {kk} + {kv}", m_ext * kk)
        } else {
            format!("{b} * {} + {kv} * {m_ext} + {m}", m_ext * kk)
        };
        let rhs_idx = if contract[1] == r - 2 {
            format!("{b} * {} + {kv} * {n_ext} + {n}", kk * n_ext)
        } else {
            format!("{b} * {} + {n} * {kk} + {kv}", kk * n_ext)
        };
        if lanes {
            self.open(format!("for (int {kv} = lane; {kv} < {kk}; {kv} += 32)"));
        } else {
            self.open(format!("for (int {kv} = 0; {kv} < {kk}; ++{kv})"));
        }
        self.in_dot += 1;
        let a = self.value(&node.operands[0], &lhs_idx);
        let bv = self.value(&node.operands[1], &rhs_idx);
        self.in_dot -= 1;
        self.line(format!("{acc} += {a} * {bv};"));
        self.close();
    }

    /// Row-local values of register-transferred reductions.
    fn preludes(&mut self, warp_rows: bool, row: &str) {
        for p in self.root.preludes.clone() {
            let Some((reducer, d, kr)) = self.reduce_info(&p) else { continue };
            let red = format!("red_{}", ident(&p));
            self.line(format!("{} {red} = {};", vtype(d), init(reducer, d)));
            let k = format!("k_{}", ident(&p));
            if warp_rows {
                self.open(format!("for (int {k} = lane; {k} < {kr}; {k} += 32)"));
            } else {
                self.open(format!("for (int {k} = 0; {k} < {kr}; ++{k})"));
            }
            let input = self.view.node(&p).operands[0].clone();
            let v = self.value(&input, &format!("{row} * {kr} + {k}"));
            self.line(format!("{red} = {};", combine(reducer, d, &red, &v)));
            self.close();
            if warp_rows {
                self.helpers.shuffles.insert((reducer, vtype(d)));
                self.line(format!("{red} = warp_allreduce_{}_{}({red});", reducer.name(), vtype(d)));
            }
        }
    }

    fn reduce_info(&self, id: &str) -> Option<(Reducer, DType, usize)> {
        match &self.view.node(id).kind {
            OpKind::Reduce { reducer, .. } => Some((*reducer, self.dtype(id), self.view.reduce_extents(id).1)),
            _ => None,
        }
    }

    fn writes(&mut self, index: &str, value: &str) {
        let id = self.root.op.clone();
        let d = self.dtype(&id);
        if self.root.writes_output {
            self.line(format!("out_{}[{index}] = {};", ident(&id), store(d, value)));
        }
        if self.root.has_request && self.root.style != Style::Reduce(ReduceStyle::Block) {
            self.line(format!("s_{}[{index}] = {};", ident(&id), store(d, value)));
        }
    }
}

pub struct Emitted {
    pub body: Vec<String>,
    pub barriers: usize,
}

/// Loop nest for one schedule, or `None` when the schedule is folded into
/// its consumers.
pub fn emit_schedule(
    view: &PatternView,
    comp: &Composition,
    root: &RootPlan,
    inputs: &BTreeMap<String, String>,
    helpers: &mut Helpers,
) -> Emitted {
    let styles = comp.styles();
    let schedule = comp.template.schedule(&root.op).expect("root has a schedule").to_string();
    let mut w = Writer {
        view,
        comp,
        inputs,
        root,
        lines: Vec::new(),
        depth: 1,
        scopes: vec![HashMap::new()],
        counter: 0,
        in_dot: 0,
        helpers,
    };
    w.line(format!("// {schedule}"));
    if root.elided() {
        w.line("// value recomputed inside consumer loops");
        return Emitted { body: w.lines, barriers: 0 };
    }
    let g = root.geom;
    let rpb = g.rows_per_block();
    let id = root.op.clone();
    let d = w.dtype(&id);
    w.open(format!("for (int blk = blockIdx.x; blk < {}; blk += gridDim.x)", g.blocks));
    w.line(format!("const int row_lo = blk * {rpb};"));
    w.line(format!("const int row_hi = min(row_lo + {rpb}, {});", g.rows));
    let mut barriers = 0;
    match root.style {
        Style::Elementwise | Style::ThreadDot if root.preludes.is_empty() => {
            let total = g.rows * g.row_len;
            let elems = view.shape(&id).element_count();
            let hi = if total == elems {
                format!("row_hi * {}", g.row_len)
            } else {
                format!("min(row_hi * {}, {elems})", g.row_len)
            };
            w.open(format!("for (int idx = row_lo * {} + threadIdx.x; idx < {hi}; idx += blockDim.x)", g.row_len));
            let v = w.value(&id, "idx");
            w.writes("idx", &v);
            w.close();
        }
        Style::Elementwise | Style::ThreadDot => {
            let warp_rows = root.warp_rows(&styles);
            if warp_rows {
                w.open("for (int row = row_lo + warp; row < row_hi; row += nwarps)");
            } else {
                w.open("for (int row = row_lo + threadIdx.x; row < row_hi; row += blockDim.x)");
            }
            w.preludes(warp_rows, "row");
            if warp_rows {
                w.open(format!("for (int col = lane; col < {}; col += 32)", g.row_len));
            } else {
                w.open(format!("for (int col = 0; col < {}; ++col)", g.row_len));
            }
            w.line(format!("const int idx = row * {} + col;", g.row_len));
            let elems = view.shape(&id).element_count();
            if g.rows * g.row_len != elems {
                w.line(format!("if (idx >= {elems}) continue;"));
            }
            let v = w.value(&id, "idx");
            w.writes("idx", &v);
            w.close();
            w.close();
        }
        Style::BlockDot => {
            let (OpKind::Dot { contract } | OpKind::BatchedDot { contract }) = view.node(&id).kind else {
                unreachable!()
            };
            w.open(format!(
                "for (int idx = row_lo * {} + warp; idx < row_hi * {}; idx += nwarps)",
                g.row_len, g.row_len
            ));
            let acc = w.fresh(&id);
            w.line(format!("{} {acc} = {};", vtype(d), if d == DType::I32 { "0" } else { "0.0f" }));
            w.dot_operands(&id, contract, "idx", "k", acc.clone(), true);
            w.helpers.shuffles.insert((Reducer::Sum, vtype(d)));
            w.line(format!("{acc} = warp_allreduce_sum_{}({acc});", vtype(d)));
            w.open("if (lane == 0)");
            w.writes("idx", &acc);
            w.close();
            w.close();
        }
        Style::Reduce(style) => {
            let (reducer, _, kr) = w.reduce_info(&id).unwrap();
            let (o, _) = view.reduce_extents(&id);
            let in_index = |row: &str, k: &str| match view.reduce_kind(&id) {
                Some(ReduceKind::Column) => format!("{k} * {o} + {row}"),
                Some(ReduceKind::Scalar) => k.to_string(),
                _ => format!("{row} * {kr} + {k}"),
            };
            let input = view.node(&id).operands[0].clone();
            match style {
                ReduceStyle::Block => {
                    let s = format!("s_{}", ident(&id));
                    w.open("for (int row = row_lo + threadIdx.x; row < row_hi; row += blockDim.x)");
                    w.line(format!("{s}[row] = {};", store(d, init(reducer, d))));
                    w.close();
                    w.line("__syncthreads();");
                    w.open(format!("for (int t = threadIdx.x; t < (row_hi - row_lo) * {kr}; t += blockDim.x)"));
                    w.line(format!("const int row = row_lo + t / {kr};"));
                    w.line(format!("const int k = t % {kr};"));
                    let v = w.value(&input, &in_index("row", "k"));
                    w.helpers.atomics.insert((reducer, ctype(d)));
                    w.line(format!("atomic_{}_{}(&{s}[row], {v});", reducer.name(), ctype(d)));
                    w.close();
                    w.line("__syncthreads();");
                    barriers += 2;
                    if root.writes_output {
                        w.open("for (int row = row_lo + threadIdx.x; row < row_hi; row += blockDim.x)");
                        w.line(format!("out_{}[row] = {s}[row];", ident(&id)));
                        w.close();
                    }
                }
                _ => {
                    let warp_rows = style == ReduceStyle::Warp;
                    match style {
                        ReduceStyle::Warp => w.open("for (int row = row_lo + warp; row < row_hi; row += nwarps)"),
                        ReduceStyle::ThreadSeq => {
                            w.open("for (int row = row_lo + threadIdx.x; row < row_hi; row += blockDim.x)")
                        }
                        _ => {
                            w.open("if (threadIdx.x == 0)");
                            w.open("for (int row = row_lo; row < row_hi; ++row)");
                        }
                    }
                    w.preludes(warp_rows, "row");
                    let acc = w.fresh(&id);
                    w.line(format!("{} {acc} = {};", vtype(d), init(reducer, d)));
                    if warp_rows {
                        w.open(format!("for (int k = lane; k < {kr}; k += 32)"));
                    } else {
                        w.open(format!("for (int k = 0; k < {kr}; ++k)"));
                    }
                    let v = w.value(&input, &in_index("row", "k"));
                    w.line(format!("{acc} = {};", combine(reducer, d, &acc, &v)));
                    w.close();
                    if warp_rows {
                        w.helpers.shuffles.insert((reducer, vtype(d)));
                        w.line(format!("{acc} = warp_allreduce_{}_{}({acc});", reducer.name(), vtype(d)));
                        w.open("if (lane == 0)");
                        w.writes("row", &acc);
                        w.close();
                    } else {
                        w.writes("row", &acc);
                    }
                    if style == ReduceStyle::Trivial {
                        w.close();
                    }
                    w.close();
                }
            }
        }
    }
    w.close();
    if root.touches_shared() {
        w.line("__syncthreads();");
        barriers += 1;
    }
    Emitted { body: w.lines, barriers }
}

pub fn helper_source(h: &Helpers) -> String {
    let mut s = String::new();
    for (r, t) in &h.shuffles {
        let body =
            combine(*r, if *t == "int" { DType::I32 } else { DType::F32 }, "v", "__shfl_xor_sync(0xffffffffu, v, o)");
        let _ = writeln!(
            s,
            "__device__ __forceinline__ {t} warp_allreduce_{}_{t}({t} v) {{\n  for (int o = 16; o > 0; o >>= 1) v = {body};\n  return v;\n}}\n",
            r.name()
        );
    }
    for (r, t) in &h.atomics {
        let name = format!("atomic_{}_{t}", r.name());
        let text = match (*r, *t) {
            (Reducer::Sum, _) => {
                format!("__device__ __forceinline__ void {name}({t}* p, float v) {{ atomicAdd(p, ({t})v); }}\n")
            }
            (_, "int") => {
                let f = combine(*r, DType::I32, "old", "(int)v");
                format!(
                    "__device__ __forceinline__ void {name}(int* p, int v) {{\n  int old = *p, seen;\n  do {{ seen = old; old = atomicCAS(p, seen, {}); }} while (seen != old);\n}}\n",
                    f.replace("old", "seen")
                )
            }
            (_, "__half") => {
                let f = combine(*r, DType::F32, "__half2float(__ushort_as_half(seen))", "v");
                format!(
                    "__device__ __forceinline__ void {name}(__half* p, float v) {{\n  unsigned short* a = reinterpret_cast<unsigned short*>(p);\n  unsigned short old = *a, seen;\n  do {{ seen = old; old = atomicCAS(a, seen, __half_as_ushort(__float2half({f}))); }} while (seen != old);\n}}\n"
                )
            }
            _ => {
                let f = combine(*r, DType::F32, "__int_as_float(seen)", "v");
                format!(
                    "__device__ __forceinline__ void {name}(float* p, float v) {{\n  int* a = reinterpret_cast<int*>(p);\n  int old = *a, seen;\n  do {{ seen = old; old = atomicCAS(a, seen, __float_as_int({f})); }} while (seen != old);\n}}\n"
                )
            }
        };
        s.push_str(&text);
        s.push('\n');
    }
    s
}

/// Typed views of the shared regions, one per requesting op.
pub fn shared_decls(view: &PatternView, alloc: &AllocMap) -> Vec<String> {
    let mut out = Vec::new();
    for (offset, size) in &alloc.regions {
        out.push(format!("  __shared__ __align__(16) unsigned char smem_{offset}[{size}];"));
    }
    for (op, e) in &alloc.entries {
        let t = ctype(view.shape(op).dtype);
        out.push(format!("  {t}* s_{} = reinterpret_cast<{t}*>(smem_{});", ident(op), e.offset));
    }
    out
}
