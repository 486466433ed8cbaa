//! End-to-end acceptance checks. Runs without the libtest harness so every
//! check prints exactly one PASS or FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{adversarial_patterns, fixture, quotient_is_acyclic, random_dag, FIXTURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitch_core::cost::{execution_formula, model_formula};
use stitch_core::emit::shared::{shared_planning, Dag, RequestReason, ReuseGuard, SharedRequest, Unrestricted};
use stitch_core::emit::{build_candidate, PatternView};
use stitch_core::pipeline::solver_candidates;
use stitch_core::{
    codegen_graph, codegen_pattern, contract_plan, generate_templates, m_of_v, parse_graph, parse_schedule,
    parse_template, plan_graph, print_graph, score_model_based, solve, solve_with_cycle_elimination,
    substitution_fusion, to_json, BandwidthModel, CompositionKind, CostConfig, FusionPattern, Graph, IlpInstance,
    OpKind, OpNode, PairConstraint, ParamNames, PartitionSet, PipelineConfig, Shape, TemplateLimits, SHARED_LIMIT,
};

// 1
fn ilp_matches_exhaustive_search() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for case in 0..200 {
        let k = rng.gen_range(1..=12);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=100.0)).collect();
        let density = rng.gen_range(0.0..0.6);
        let mut pairs = Vec::new();
        for u in 0..k {
            for v in u + 1..k {
                if rng.gen_bool(density) {
                    pairs.push(PairConstraint { u, v });
                }
            }
        }
        let inst = IlpInstance::new(scores.clone(), pairs.clone());
        let mut best = 0.0f64;
        for mask in 0u32..(1 << k) {
            if pairs.iter().any(|p| mask >> p.u & 1 == 1 && mask >> p.v & 1 == 1) {
                continue;
            }
            // Ascending-index summation.
            let total = (0..k).filter(|i| mask >> i & 1 == 1).fold(0.0, |acc, i| acc + scores[i]);
            best = best.max(total);
        }
        let plan = solve(&inst);
        assert_eq!(plan.total_score, best, "instance {case}");
        assert!(inst.is_feasible(&plan.selected), "instance {case} infeasible");
    }
    let took = start.elapsed();
    assert!(took < Duration::from_secs(10), "took {took:?}");
    format!("200 instances, k <= 12, {:.2}s", took.as_secs_f64())
}

// 2
fn cycle_elimination_yields_acyclic_plans() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0;
    for case in 0..100 {
        let n = rng.gen_range(4..=18);
        let g = random_dag(&mut rng, n);
        let count = rng.gen_range(4..=16);
        let patterns = adversarial_patterns(&mut rng, &g, count);
        let scores: Vec<f64> = (0..count).map(|_| rng.gen_range(1.0..100.0)).collect();
        let plan = solve_with_cycle_elimination(&g, &patterns, &scores).unwrap();
        let chosen: Vec<&FusionPattern> = plan.selected.iter().map(|&i| &patterns[i]).collect();
        for (i, a) in chosen.iter().enumerate() {
            for b in &chosen[i + 1..] {
                assert!(a.nodes.is_disjoint(&b.nodes), "case {case}: overlapping selection");
            }
        }
        assert!(quotient_is_acyclic(&g, &chosen), "case {case}: cyclic contraction");
        assert!(plan.iterations <= 50, "case {case}: {} iterations", plan.iterations);
        worst = worst.max(plan.iterations);
    }
    format!("100 DAGs, at most {worst} solver rounds")
}

// 3
fn substitution_partitions_ops() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.gen_range(3..=20);
        let g = random_dag(&mut rng, n);
        let ops = common::op_ids(&g);
        let parts: Vec<String> = ops.iter().filter(|_| rng.gen_bool(0.25)).cloned().collect();
        let patterns = substitution_fusion(&g, &PartitionSet::new(parts.iter().cloned(), 0));
        let mut count: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &patterns {
            for x in &p.nodes {
                *count.entry(x.as_str()).or_default() += 1;
            }
        }
        for op in &ops {
            let want = usize::from(!parts.contains(op));
            assert_eq!(count.get(op.as_str()).copied().unwrap_or(0), want, "case {case}: op {op}");
        }
        assert!(contract_plan(&g, &patterns).unwrap().is_acyclic(), "case {case}");
        let refs: Vec<&FusionPattern> = patterns.iter().collect();
        assert!(quotient_is_acyclic(&g, &refs), "case {case}");
    }
    "100 DAGs, every non-partition op in exactly one pattern".into()
}

// 4
fn attention_fuses_into_one_kernel() -> String {
    let g = fixture("attention");
    let run = plan_graph(&g, &PipelineConfig::default(), &BandwidthModel::default_table(), None).unwrap();
    let fused: Vec<&OpNode> = run.fused.nodes.values().filter(|n| matches!(n.kind, OpKind::Fused { .. })).collect();
    assert_eq!(fused.len(), 1);
    assert_eq!(run.report.kernels_before, 13);
    assert_eq!(run.report.kernel_compression, 13.0);
    let OpKind::Fused { body, params } = &fused[0].kind else { unreachable!() };
    let names: ParamNames = params.iter().cloned().zip(fused[0].operands.iter().cloned()).collect();
    let c = codegen_pattern(&fused[0].id, body, &names, &TemplateLimits::default(), SHARED_LIMIT, None).unwrap();
    let alloc = &c.best.alloc;
    assert_eq!(alloc.total, 35_344);
    assert_eq!(alloc.total, 94 * 94 * 4);
    assert_eq!(alloc.entries["dot_1"].size, 35_344);
    assert_eq!(alloc.entries["add"].reused_from.as_deref(), Some("dot_1"));
    assert_eq!(alloc.entries["add"].offset, alloc.entries["dot_1"].offset);
    assert_eq!(run.report.shared_stats.alloc_over_req, Some(0.5));
    format!("13 -> 1 kernels, {} shared bytes, alloc/req 0.5", alloc.total)
}

/// Guard that refuses a fixed random subset of reuse pairs.
struct Deny(BTreeSet<(String, String)>);

impl ReuseGuard for Deny {
    fn can_share(&self, inst: &str, prev: &str) -> bool {
        !self.0.contains(&(inst.to_string(), prev.to_string()))
    }
    fn can_reclaim(&self, inst: &str, prev: &str) -> bool {
        !self.0.contains(&(prev.to_string(), inst.to_string()))
    }
}

// 5
fn shared_planner_is_live_safe() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.gen_range(2..=16);
        let order: Vec<String> = (0..n).map(|i| format!("o{i:02}")).collect();
        let mut operands: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for i in 0..n {
            let k = if i == 0 { 0 } else { rng.gen_range(0..=2.min(i)) };
            let ops: BTreeSet<String> = (0..k).map(|_| order[rng.gen_range(0..i)].clone()).collect();
            operands.insert(order[i].clone(), ops.into_iter().collect());
        }
        let outputs: BTreeSet<String> = order.iter().filter(|_| rng.gen_bool(0.2)).cloned().collect();
        let dag = Dag { order: order.clone(), operands: operands.clone(), outputs };
        let mut requests = Vec::new();
        for id in &order {
            if rng.gen_bool(0.5) {
                let bytes = rng.gen_range(1..=64) * 16;
                requests.push(SharedRequest { op_id: id.clone(), bytes, reason: RequestReason::ElemwiseStage });
            }
        }
        let mut denied = BTreeSet::new();
        for a in &order {
            for b in &order {
                if rng.gen_bool(0.1) {
                    denied.insert((a.clone(), b.clone()));
                }
            }
        }
        for guard in [&Unrestricted as &dyn ReuseGuard, &Deny(denied)] {
            let map = shared_planning(&dag, &requests, guard);
            // Independent liveness: a request is read wherever its value is
            // consumed, directly or through ops without requests.
            let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let req: BTreeSet<&str> = requests.iter().map(|r| r.op_id.as_str()).collect();
            let mut carried: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            let mut end: BTreeMap<&str, usize> = req.iter().map(|r| (*r, pos[r])).collect();
            for id in &order {
                let mut reads = BTreeSet::new();
                for o in &operands[id] {
                    if req.contains(o.as_str()) {
                        reads.insert(o.as_str());
                    } else {
                        reads.extend(carried[o.as_str()].iter().copied());
                    }
                }
                for r in &reads {
                    let e = end.get_mut(r).unwrap();
                    *e = (*e).max(pos[id.as_str()]);
                }
                carried.insert(id.as_str(), if req.contains(id.as_str()) { BTreeSet::new() } else { reads });
            }
            let entries: Vec<(&String, &stitch_core::emit::AllocEntry)> = map.entries.iter().collect();
            for (i, (a, ea)) in entries.iter().enumerate() {
                for (b, eb) in &entries[i + 1..] {
                    let overlap_mem = ea.offset < eb.offset + eb.size && eb.offset < ea.offset + ea.size;
                    let (sa, sb) = (pos[a.as_str()], pos[b.as_str()]);
                    let (ea_end, eb_end) = (end[a.as_str()], end[b.as_str()]);
                    // The later definition may land on the earlier value's last read.
                    let overlap_live = if sa < sb { sb < ea_end } else { sa < eb_end };
                    assert!(!(overlap_mem && overlap_live), "case {case}: {a} and {b} overlap");
                }
            }
            if map.requested() > 0 {
                let ratio = map.total as f64 / map.requested() as f64;
                assert!(ratio <= 1.0, "case {case}: ratio {ratio}");
                worst = worst.max(ratio);
            }
        }
    }
    format!("100 patterns, no live overlap, max alloc/req {worst:.3}")
}

// 6
fn templates_round_trip() -> String {
    let mut n = 0;
    for name in FIXTURES {
        for t in generate_templates(&fixture(name), &TemplateLimits::default()).unwrap() {
            let text = t.to_string();
            assert_eq!(parse_template(&text).unwrap(), t, "{name}: {text}");
            assert_eq!(parse_template(&text).unwrap().to_string(), text);
            for s in &t.schedules {
                assert_eq!(parse_schedule(&s.to_string()).unwrap(), *s);
            }
            n += 1;
        }
    }
    for lit in ["reduce_1 [GRID,WARP,WARP,CTA] S;", "x [GRID_128-WARP_2,WARP,WARP,CTA] S;", "y [GRID,CTA,CTA,THREAD];"]
    {
        assert_eq!(parse_schedule(lit).unwrap().to_string(), lit);
    }
    format!("{n} generated templates and 3 literal schedules")
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn declared_shared(src: &str) -> usize {
    src.match_indices("unsigned char smem_")
        .map(|(i, _)| {
            let rest = &src[i..];
            let open = rest.find('[').unwrap();
            let close = rest.find(']').unwrap();
            rest[open + 1..close].parse::<usize>().unwrap()
        })
        .sum()
}

// 7
fn emitted_kernels_are_well_formed() -> String {
    let expect: [(&str, &[CompositionKind]); 4] = [
        ("packing", &[CompositionKind::Packing, CompositionKind::Thread]),
        ("thread", &[CompositionKind::Thread]),
        ("warp", &[CompositionKind::Thread, CompositionKind::Warp]),
        ("block", &[CompositionKind::Thread, CompositionKind::Warp, CompositionKind::Block]),
    ];
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, kinds) in expect {
        let c = codegen_pattern(
            &format!("{name}_kernel"),
            &fixture(name),
            &ParamNames::new(),
            &TemplateLimits::default(),
            SHARED_LIMIT,
            None,
        )
        .unwrap();
        let got: BTreeSet<CompositionKind> = kinds.iter().copied().collect();
        assert_eq!(c.best.sketch.composition, got, "{name}");
        let path = golden_dir().join(format!("{name}.cu"));
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &c.best.sketch.source).unwrap();
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(c.best.sketch.source, want, "{name} differs from golden");
    }
    let mut checked = 0;
    for name in FIXTURES {
        let g = fixture(name);
        let view = PatternView::new(&g).unwrap();
        for (i, t) in generate_templates(&g, &TemplateLimits::default()).unwrap().iter().enumerate() {
            let Ok(c) = build_candidate(&view, t, i, name, &ParamNames::new()) else { continue };
            let src = &c.sketch.source;
            assert_eq!(src.matches("__global__").count(), 1, "{name} #{i}");
            assert_eq!(src.contains("__syncthreads()"), c.sketch.shared_bytes > 0, "{name} #{i}");
            assert_eq!(declared_shared(src), c.alloc.total, "{name} #{i}");
            assert_eq!(c.sketch.shared_bytes, c.alloc.total);
            checked += 1;
        }
    }
    format!("4 golden kernels, {checked} candidate kernels checked")
}

// 8
fn cost_model_matches_arithmetic() -> String {
    let bm = BandwidthModel::default_table();
    let text =
        std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/bandwidth_default.csv")).unwrap();
    let table: Vec<(u64, f64)> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.trim().parse().unwrap(), b.trim().parse().unwrap())
        })
        .collect();
    for &(v, bw) in &table {
        let want = v as f64 / bw * 1e6;
        let got = m_of_v(&bm, v);
        assert!(((got - want) / want).abs() <= 1e-9, "{v}: {got} vs {want}");
    }
    // Midpoint in log space between two samples.
    let (lo, hi) = (table[3], table[4]);
    let mid = ((lo.0 as f64).ln() * 0.5 + (hi.0 as f64).ln() * 0.5).exp().round() as u64;
    let t = ((mid as f64).ln() - (lo.0 as f64).ln()) / ((hi.0 as f64).ln() - (lo.0 as f64).ln());
    let want = mid as f64 / (lo.1 + t * (hi.1 - lo.1)) * 1e6;
    assert!((m_of_v(&bm, mid) - want).abs() <= 1e-9 * want);

    let mut prev = 0.0;
    let (a, b) = (0.0f64, (4u64 << 30) as f64);
    for i in 0..10_000 {
        let v = (a + (b.ln() * i as f64 / 9_999.0).exp()).round() as u64;
        let m = m_of_v(&bm, v);
        assert!(m >= prev, "not monotone at {v}");
        prev = m;
    }
    assert_eq!(m_of_v(&bm, 0), 0.0);
    let one_mib = m_of_v(&bm, 1 << 20);
    assert!((one_mib - 10.486).abs() < 5e-4, "{one_mib}");
    assert_eq!(model_formula(10.0, 3, 8.0), 26.0);
    assert_eq!(model_formula(0.0, 1, 8.0), 0.0);
    assert_eq!(execution_formula(&[5.0, 5.0, 5.0], Some(10.0), 8.0), 21.0);
    assert_eq!(execution_formula(&[5.0, 5.0, 5.0], Some(31.0), 8.0), 0.0);
    assert_eq!(execution_formula(&[5.0, 5.0, 5.0], None, 8.0), -1.0);
    format!("{} table points exact, 10000-point sweep monotone, 1 MiB -> {one_mib:.3} us", table.len())
}

// 9
fn pipeline_is_deterministic() -> String {
    let bm = BandwidthModel::default_table();
    let run = |g: &Graph| {
        let r = plan_graph(g, &PipelineConfig::default(), &bm, None).unwrap();
        let fused_text = print_graph(&r.fused);
        let reparsed = parse_graph(&fused_text).unwrap();
        let kernels = codegen_graph(&reparsed, &TemplateLimits::default(), SHARED_LIMIT, None, None).unwrap();
        (to_json(&r.doc), fused_text, kernels.into_iter().map(|k| k.source).collect::<Vec<_>>())
    };
    for name in FIXTURES {
        let g = fixture(name);
        assert_eq!(run(&g), run(&g), "{name}");
    }
    format!("{} fixtures, byte-identical plan and kernels", FIXTURES.len())
}

// 10
fn oversized_pattern_is_excluded() -> String {
    let s = |d: &[usize]| Some(Shape::f32(d));
    let mut g = Graph::new();
    for p in ["a", "b", "c", "d"] {
        g.add(OpNode::new(p, OpKind::Parameter, &[], s(&[96, 96])));
    }
    let dot = OpKind::Dot { contract: [1, 0] };
    g.add(OpNode::new("d1", dot.clone(), &["a", "b"], s(&[96, 96])))
        .add(OpNode::new("d2", dot, &["c", "d"], s(&[96, 96])))
        .add(OpNode::new("sum", OpKind::Elementwise(stitch_core::ElementwiseOp::Add), &["d1", "d2"], s(&[96, 96])))
        .add(OpNode::new(
            "diff",
            OpKind::Elementwise(stitch_core::ElementwiseOp::Subtract),
            &["d1", "d2"],
            s(&[96, 96]),
        ));
    let g = g.with_outputs(&["sum", "diff"]);
    let p = FusionPattern::new(0, ["d1", "d2", "sum", "diff"]);
    let score = score_model_based(&g, &p, &BandwidthModel::default_table(), &CostConfig::default());
    assert!(!score.feasible);
    assert_eq!(score.score, -1.0);
    assert_eq!(score.allocated_shared, 2 * 96 * 96 * 4);
    assert!(score.allocated_shared > 48 * 1024);
    let patterns = vec![p.clone(), FusionPattern::new(1, ["d1", "sum"])];
    let other = score_model_based(&g, &patterns[1], &BandwidthModel::default_table(), &CostConfig::default());
    let offered = solver_candidates(&patterns, &[score.score, other.score]);
    assert!(!offered.contains(&0));
    let run = plan_graph(&g, &PipelineConfig::default(), &BandwidthModel::default_table(), None).unwrap();
    for &i in &run.doc.selected {
        assert_ne!(run.doc.patterns[i].nodes.len(), 4, "oversized pattern selected");
    }
    format!("{} bytes after reuse > 49152, score -1, not offered to the solver", score.allocated_shared)
}

type Check = (&'static str, fn() -> String);

fn main() {
    let checks: [Check; 10] = [
        ("ILP optimum equals exhaustive search", ilp_matches_exhaustive_search),
        ("cycle elimination returns acyclic plans", cycle_elimination_yields_acyclic_plans),
        ("substitution fusion partitions fusible ops", substitution_partitions_ops),
        ("attention graph fuses into one kernel with shared reuse", attention_fuses_into_one_kernel),
        ("shared planner never overlaps live allocations", shared_planner_is_live_safe),
        ("template print/parse round trip", templates_round_trip),
        ("emitted kernels are well formed", emitted_kernels_are_well_formed),
        ("cost model matches hand arithmetic", cost_model_matches_arithmetic),
        ("pipeline output is deterministic", pipeline_is_deterministic),
        ("oversized shared pattern is excluded", oversized_pattern_is_excluded),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {:>2} {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
