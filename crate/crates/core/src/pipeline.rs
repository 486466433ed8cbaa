//! End-to-end driver: patterns, scores, ILP selection, graph rewrite and
//! kernel generation.

use serde::Serialize;

use crate::cost::{score_patterns, BandwidthModel, CostConfig, TimingSource};
use crate::emit::{build_candidate, codegen_pattern, KernelEvaluator, KernelSketch, ParamNames, PatternView};
use crate::error::{CodegenError, PlanError};
use crate::graph::{FusionPattern, Graph, OpKind};
use crate::ilp::{solve_with_cycle_elimination, FusionPlan};
use crate::pattern::{generate_patterns, SeedConfig, Strategy, Thresholds};
use crate::report::{build_report, RunReport};
use crate::template::{Template, TemplateLimits};
use crate::transform::{apply_plan, classify, extract_body};

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub thresholds: Thresholds,
    pub seeds: SeedConfig,
    pub cost: CostConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternRecord {
    pub id: usize,
    pub nodes: Vec<String>,
    pub source: &'static str,
    pub category: &'static str,
    pub score: f64,
    pub feasible: bool,
    pub saved_bytes: u64,
    pub requested_shared: usize,
    pub allocated_shared: usize,
    /// Offered to the solver (non-negative score, two or more ops).
    pub candidate: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanDoc {
    pub phi_us: f64,
    pub shared_limit_bytes: usize,
    pub patterns: Vec<PatternRecord>,
    /// Selected pattern ids.
    pub selected: Vec<usize>,
    pub total_score: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct PlanRun {
    pub doc: PlanDoc,
    pub fused: Graph,
    pub kernels: Vec<KernelSketch>,
    pub report: RunReport,
}

/// Patterns worth handing to the solver: scored non-negative and spanning
/// at least two ops.
pub fn solver_candidates(patterns: &[FusionPattern], scores: &[f64]) -> Vec<usize> {
    (0..patterns.len()).filter(|&i| scores[i] >= 0.0 && patterns[i].nodes.len() >= 2).collect()
}

pub fn plan_graph(
    g: &Graph,
    cfg: &PipelineConfig,
    bm: &BandwidthModel,
    timings: Option<&dyn TimingSource>,
) -> Result<PlanRun, PlanError> {
    let generated = generate_patterns(g, cfg.strategy, &cfg.thresholds, &cfg.seeds);
    let patterns: Vec<FusionPattern> = generated.iter().map(|(p, _)| p.clone()).collect();
    let scores = score_patterns(g, &patterns, bm, &cfg.cost, timings);

    let offered = solver_candidates(&patterns, &scores.iter().map(|s| s.score).collect::<Vec<_>>());
    let sub: Vec<FusionPattern> =
        offered.iter().enumerate().map(|(k, &i)| FusionPattern { id: k, nodes: patterns[i].nodes.clone() }).collect();
    let sub_scores: Vec<f64> = offered.iter().map(|&i| scores[i].score).collect();
    let sub_plan = solve_with_cycle_elimination(g, &sub, &sub_scores)?;
    let selected: Vec<usize> = sub_plan.selected.iter().map(|&k| offered[k]).collect();

    let plan =
        FusionPlan { selected: selected.clone(), total_score: sub_plan.total_score, iterations: sub_plan.iterations };
    let fused = apply_plan(g, &plan, &patterns)?;

    let mut records = Vec::with_capacity(patterns.len());
    for ((p, src), s) in generated.iter().zip(&scores) {
        let category = extract_body(g, p).map(|b| classify(&b.body).as_str()).unwrap_or("elemwise");
        records.push(PatternRecord {
            id: p.id,
            nodes: p.nodes.iter().cloned().collect(),
            source: src.as_str(),
            category,
            score: s.score,
            feasible: s.feasible,
            saved_bytes: s.saved_bytes,
            requested_shared: s.requested_shared,
            allocated_shared: s.allocated_shared,
            candidate: offered.contains(&p.id),
            selected: selected.contains(&p.id),
        });
    }

    let kernels = codegen_graph(&fused, &cfg.cost.limits, cfg.cost.shared_limit, None, None)
        .map_err(|e| PlanError::InvalidPlan(format!("kernel generation failed: {e}")))?;
    let report = build_report(g, &fused, &kernels, plan.total_score, bm, cfg.cost.phi)?;
    let doc = PlanDoc {
        phi_us: cfg.cost.phi,
        shared_limit_bytes: cfg.cost.shared_limit,
        patterns: records,
        selected,
        total_score: plan.total_score,
        iterations: plan.iterations,
    };
    Ok(PlanRun { doc, fused, kernels, report })
}

/// One kernel per fused op, in id order. A user template applies to every
/// fused op whose body contains all of its scheduled ops.
pub fn codegen_graph(
    fused: &Graph,
    limits: &TemplateLimits,
    shared_limit: usize,
    template: Option<&Template>,
    evaluator: Option<&dyn KernelEvaluator>,
) -> Result<Vec<KernelSketch>, CodegenError> {
    let mut out = Vec::new();
    let mut template_used = false;
    for n in fused.nodes.values() {
        let OpKind::Fused { body, params } = &n.kind else { continue };
        let names: ParamNames = params.iter().cloned().zip(n.operands.iter().cloned()).collect();
        let fits = template.filter(|t| t.schedules.iter().all(|s| body.nodes.contains_key(&s.op_id)));
        let sketch = match fits {
            Some(t) => {
                template_used = true;
                let view = PatternView::new(body)?;
                let c = build_candidate(&view, t, 0, &n.id, &names)?;
                if c.alloc.total > shared_limit {
                    return Err(CodegenError::NoFeasibleTemplate);
                }
                c.sketch
            }
            None => codegen_pattern(&n.id, body, &names, limits, shared_limit, evaluator)?.best.sketch,
        };
        out.push(sketch);
    }
    if template.is_some() && !template_used {
        let op = template.and_then(|t| t.schedules.first()).map_or(String::new(), |s| s.op_id.clone());
        return Err(CodegenError::Unscheduled(op));
    }
    Ok(out)
}

/// Manifest row for one emitted kernel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub cta_num: usize,
    pub cta_size: usize,
    pub shared_bytes: usize,
    pub requested_bytes: usize,
    pub composition: Vec<&'static str>,
}

pub fn manifest(kernels: &[KernelSketch]) -> Vec<ManifestEntry> {
    kernels
        .iter()
        .map(|k| ManifestEntry {
            name: k.name.clone(),
            file: format!("{}.cu", k.name),
            cta_num: k.cta_num,
            cta_size: k.cta_size,
            shared_bytes: k.shared_bytes,
            requested_bytes: k.requested_bytes,
            composition: k.composition.iter().map(|c| c.as_str()).collect(),
        })
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}
