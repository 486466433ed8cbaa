//! Fusion planning and kernel sketch generation for tensor computation graphs.

pub mod cost;
pub mod emit;
pub mod error;
pub mod graph;
pub mod ilp;
pub mod pattern;
pub mod pipeline;
pub mod report;
pub mod template;
pub mod transform;

pub use cost::{
    m_of_v, saved_bytes, score_execution_based, score_model_based, score_pattern, score_patterns, shared_feasible,
    BandwidthModel, CostConfig, CsvTimings, NoTimings, PatternScore, ScoreMode, TimingSource,
};
pub use emit::{
    codegen_pattern, shared_footprint, AllocMap, Candidate, Codegen, CompositionKind, KernelEvaluator, KernelSketch,
    ParamNames, SHARED_LIMIT,
};
pub use error::{CodegenError, CostError, GraphError, PlanError, TemplateError};
pub use graph::format::{parse_graph, print_graph};
pub use graph::{
    contract_plan, Contraction, DType, ElementwiseOp, FusionPattern, Graph, OpKind, OpNode, ReduceKind, Reducer, Shape,
};
pub use ilp::{
    build_conflicts, solve, solve_with_cycle_elimination, CycleConstraint, FusionPlan, IlpInstance, PairConstraint,
};
pub use pattern::{
    exploratory_fusion, generate_patterns, multi_step_patterns, select_seeds, substitution_fusion, PartitionSet,
    PatternSource, SeedConfig, Strategy, Thresholds,
};
pub use pipeline::{
    codegen_graph, manifest, plan_graph, to_json, ManifestEntry, PatternRecord, PipelineConfig, PlanDoc, PlanRun,
};
pub use report::{build_report, render_text, CategoryStats, RunReport, SharedStats};
pub use template::{generate_templates, parse_schedule, parse_template, Schedule, Template, TemplateLimits};
pub use transform::{
    apply_plan, classify, compression_ratio, extract_body, flatten, pattern_outputs, Category, PatternBody,
};
