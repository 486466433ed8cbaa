//! Kernel composition: template analysis, shared-memory planning, CUDA text
//! and candidate selection.

mod cuda;
pub mod plan;
mod select;
pub mod shared;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

pub use cuda::ident;
pub use plan::{analyze, CompositionGuard, PatternView};
pub use select::{proxy_cost, select_best, KernelEvaluator, SHARED_LIMIT};
pub use shared::{shared_planning, AllocEntry, AllocMap, RequestReason, SharedRequest};

use crate::error::CodegenError;
use crate::graph::Graph;
use crate::template::{generate_templates, Template, TemplateLimits};
use plan::Composition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionKind {
    Packing,
    Thread,
    Warp,
    Block,
}

impl CompositionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CompositionKind::Packing => "packing",
            CompositionKind::Thread => "thread",
            CompositionKind::Warp => "warp",
            CompositionKind::Block => "block",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSketch {
    pub name: String,
    pub source: String,
    pub template: Template,
    pub cta_num: usize,
    pub cta_size: usize,
    /// Declared shared bytes.
    pub shared_bytes: usize,
    /// Sum of shared requests before reuse.
    pub requested_bytes: usize,
    pub barriers: usize,
    /// Global bytes read and written by emitted loop nests.
    pub traffic_bytes: usize,
    pub composition: BTreeSet<CompositionKind>,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub template_index: usize,
    pub composition: Composition,
    pub alloc: AllocMap,
    pub sketch: KernelSketch,
}

/// Result of generating code for one pattern.
#[derive(Debug, Clone)]
pub struct Codegen {
    pub best: Candidate,
    pub cost: f64,
    pub templates: usize,
    pub legal: usize,
}

/// Map from body parameter to the kernel argument suffix; defaults to the
/// parameter's own id.
pub type ParamNames = BTreeMap<String, String>;

fn param_names(view: &PatternView, names: &ParamNames) -> ParamNames {
    view.body
        .nodes
        .values()
        .filter(|n| n.kind == crate::graph::OpKind::Parameter)
        .map(|n| (n.id.clone(), names.get(&n.id).cloned().unwrap_or_else(|| n.id.clone())))
        .collect()
}

pub fn emit_kernel(
    view: &PatternView,
    comp: &Composition,
    alloc: &AllocMap,
    name: &str,
    names: &ParamNames,
) -> KernelSketch {
    let names = param_names(view, names);
    let mut helpers = cuda::Helpers::default();
    let mut body = Vec::new();
    let mut barriers = 0;
    let mut traffic = 0;
    for root in &comp.roots {
        let e = cuda::emit_schedule(view, comp, root, &names, &mut helpers);
        body.extend(e.body);
        barriers += e.barriers;
        if !root.elided() {
            traffic += root.globals.iter().map(|g| view.body.nodes[g].byte_count()).sum::<usize>();
            if root.writes_output {
                traffic += view.shape(&root.op).byte_count();
            }
        }
    }

    let t = &comp.template;
    let mut src = String::new();
    let _ =
        writeln!(src, "// kernel {name}: {} blocks x {} threads, {} shared bytes", t.cta_num, t.cta_size, alloc.total);
    for line in t.to_string().lines() {
        let _ = writeln!(src, "//   {line}");
    }
    src.push_str("#include <cuda_fp16.h>\n#include <climits>\n\n");
    src.push_str(&cuda::helper_source(&helpers));

    let mut params = Vec::new();
    let mut inputs: Vec<(&String, &String)> = names.iter().collect();
    inputs.sort_by(|a, b| a.1.cmp(b.1));
    for (p, ext) in inputs {
        let ty = cuda::ctype_of(view.body.nodes[p].shape.as_ref().map(|s| s.dtype));
        params.push(format!("const {ty}* __restrict__ in_{}", ident(ext)));
    }
    for o in &view.outputs {
        params.push(format!("{}* __restrict__ out_{}", cuda::ctype_of(Some(view.shape(o).dtype)), ident(o)));
    }
    let _ = writeln!(src, "extern \"C\" __global__ void __launch_bounds__({}) {}(", t.cta_size, ident(name));
    let _ = writeln!(src, "    {}) {{", params.join(",\n    "));
    for d in cuda::shared_decls(view, alloc) {
        let _ = writeln!(src, "{d}");
    }
    src.push_str("  const int lane = threadIdx.x & 31;\n  const int warp = threadIdx.x >> 5;\n  const int nwarps = blockDim.x >> 5;\n");
    for l in body {
        let _ = writeln!(src, "{l}");
    }
    src.push_str("}\n");

    let mut composition = BTreeSet::from([CompositionKind::Thread]);
    if view.component_count() >= 2 {
        composition.insert(CompositionKind::Packing);
    }
    if !helpers.shuffles.is_empty() {
        composition.insert(CompositionKind::Warp);
    }
    if alloc.total > 0 {
        composition.insert(CompositionKind::Block);
    }
    KernelSketch {
        name: name.to_string(),
        source: src,
        template: t.clone(),
        cta_num: t.cta_num,
        cta_size: t.cta_size,
        shared_bytes: alloc.total,
        requested_bytes: alloc.requested(),
        barriers,
        traffic_bytes: traffic,
        composition,
    }
}

/// Analyse, plan and emit one template.
pub fn build_candidate(
    view: &PatternView,
    t: &Template,
    index: usize,
    name: &str,
    names: &ParamNames,
) -> Result<Candidate, CodegenError> {
    let composition = analyze(view, t)?;
    let alloc = shared_planning(&view.dag(), &composition.requests, &CompositionGuard::new(&composition));
    let sketch = emit_kernel(view, &composition, &alloc, name, names);
    Ok(Candidate { template_index: index, composition, alloc, sketch })
}

/// Generate templates for `body`, keep those that compose legally within
/// `shared_limit` bytes, and pick the cheapest.
pub fn codegen_pattern(
    name: &str,
    body: &Graph,
    names: &ParamNames,
    limits: &TemplateLimits,
    shared_limit: usize,
    evaluator: Option<&dyn KernelEvaluator>,
) -> Result<Codegen, CodegenError> {
    let view = PatternView::new(body)?;
    let templates = generate_templates(body, limits)?;
    let mut legal = Vec::new();
    for (i, t) in templates.iter().enumerate() {
        if let Ok(c) = build_candidate(&view, t, i, name, names) {
            if c.alloc.total <= shared_limit {
                legal.push(c);
            }
        }
    }
    let count = legal.len();
    let (best, cost) = select_best(legal, evaluator).ok_or(CodegenError::NoFeasibleTemplate)?;
    Ok(Codegen { best, cost, templates: templates.len(), legal: count })
}

/// Smallest declared shared footprint over the legal templates of `body`,
/// with that template's requested bytes. `None` when no template composes.
pub fn shared_footprint(body: &Graph, limits: &TemplateLimits) -> Result<Option<(usize, usize)>, CodegenError> {
    let view = PatternView::new(body)?;
    let mut best: Option<(usize, usize)> = None;
    for t in generate_templates(body, limits)? {
        let Ok(comp) = analyze(&view, &t) else { continue };
        let alloc = shared_planning(&view.dag(), &comp.requests, &CompositionGuard::new(&comp));
        if best.is_none_or(|(b, _)| alloc.total < b) {
            best = Some((alloc.total, alloc.requested()));
        }
    }
    Ok(best)
}
