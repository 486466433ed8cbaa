mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stitch_core::cost::{execution_formula, model_formula};
use stitch_core::template::{print_template, AttrType, DimAttr, Level};
use stitch_core::{
    build_conflicts, m_of_v, parse_template, plan_graph, saved_bytes, solve, solve_with_cycle_elimination,
    substitution_fusion, BandwidthModel, FusionPattern, Graph, IlpInstance, OpKind, PairConstraint, PartitionSet,
    PipelineConfig, Schedule, Template,
};

use common::{adversarial_patterns, op_ids, quotient_is_acyclic, random_dag};

fn dag(seed: u64, ops: usize) -> Graph {
    random_dag(&mut ChaCha8Rng::seed_from_u64(seed), ops)
}

/// Best total over every subset that passes `ok`.
fn brute_force(n: usize, scores: &[f64], ok: impl Fn(&[usize]) -> bool) -> f64 {
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let pick: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if ok(&pick) {
            best = best.max(pick.iter().map(|&i| scores[i]).sum());
        }
    }
    best
}

fn level() -> impl Strategy<Value = Level> {
    let attr = prop_oneof![Just(AttrType::Grid), Just(AttrType::Warp), Just(AttrType::Cta), Just(AttrType::Thread)];
    (attr, proptest::option::of(1usize..512)).prop_map(|(attr, tile)| Level { attr, tile })
}

fn dim_attr() -> impl Strategy<Value = DimAttr> {
    prop_oneof![
        level().prop_map(|mut l| {
            l.tile = None;
            DimAttr { levels: vec![l] }
        }),
        prop::collection::vec(level(), 2..4).prop_map(|levels| DimAttr { levels }),
    ]
}

fn template() -> impl Strategy<Value = Template> {
    let schedule = (prop::collection::vec(dim_attr(), 0..5), any::<bool>());
    (1usize..4096, 1usize..=32, prop::collection::vec(schedule, 1..6)).prop_map(|(cta_num, warps, ss)| Template {
        cta_num,
        cta_size: warps * 32,
        schedules: ss
            .into_iter()
            .enumerate()
            .map(|(i, (attrs, shared))| Schedule::new(format!("op_{i}"), attrs, shared))
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topological_order_respects_operands(seed in any::<u64>(), ops in 1usize..30) {
        let g = dag(seed, ops);
        let order = g.topological_sort().unwrap();
        prop_assert_eq!(order.len(), g.len());
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        prop_assert_eq!(pos.len(), g.len());
        for n in g.nodes.values() {
            for o in &n.operands {
                prop_assert!(pos[o.as_str()] < pos[n.id.as_str()], "{} before {}", o, n.id);
            }
        }
    }

    #[test]
    fn solver_matches_brute_force(
        scores in prop::collection::vec(0u32..1000, 1..13),
        edges in prop::collection::vec((0usize..12, 0usize..12), 0..20),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 10.0).collect();
        let n = scores.len();
        let pairs: Vec<PairConstraint> = edges
            .into_iter()
            .filter(|&(u, v)| u < v && v < n)
            .map(|(u, v)| PairConstraint { u, v })
            .collect();
        let inst = IlpInstance::new(scores.clone(), pairs.clone());
        let plan = solve(&inst);
        prop_assert!(inst.is_feasible(&plan.selected));
        let best = brute_force(n, &scores, |pick| {
            pairs.iter().all(|p| !(pick.contains(&p.u) && pick.contains(&p.v)))
        });
        prop_assert!((plan.total_score - best).abs() < 1e-9, "{} vs {}", plan.total_score, best);
    }

    #[test]
    fn cycle_elimination_is_exact_and_acyclic(seed in any::<u64>(), ops in 4usize..14, count in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(&mut rng, ops);
        let patterns = adversarial_patterns(&mut rng, &g, count);
        let scores: Vec<f64> = (0..count).map(|i| ((seed >> (i % 48)) % 97) as f64 + 1.0).collect();
        let plan = solve_with_cycle_elimination(&g, &patterns, &scores).unwrap();

        let chosen: Vec<&FusionPattern> = plan.selected.iter().map(|&i| &patterns[i]).collect();
        prop_assert!(quotient_is_acyclic(&g, &chosen));
        for (i, a) in chosen.iter().enumerate() {
            for b in &chosen[i + 1..] {
                prop_assert!(a.nodes.is_disjoint(&b.nodes));
            }
        }
        let conflicts: BTreeSet<(usize, usize)> = build_conflicts(&patterns).iter().map(|p| (p.u, p.v)).collect();
        let best = brute_force(count, &scores, |pick| {
            let disjoint = pick.iter().all(|&u| pick.iter().all(|&v| !conflicts.contains(&(u, v))));
            disjoint && quotient_is_acyclic(&g, &pick.iter().map(|&i| &patterns[i]).collect::<Vec<_>>())
        });
        prop_assert!((plan.total_score - best).abs() < 1e-9, "{} vs {}", plan.total_score, best);
    }

    #[test]
    fn template_text_round_trips(t in template()) {
        let text = print_template(&t);
        prop_assert_eq!(parse_template(&text).unwrap(), t);
    }

    #[test]
    fn memory_time_grows_with_bytes(a in 0u64..(1 << 34), b in 0u64..(1 << 34)) {
        let bm = BandwidthModel::default_table();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(m_of_v(&bm, lo) <= m_of_v(&bm, hi) + 1e-9);
        prop_assert!(model_formula(m_of_v(&bm, lo), 3, 8.0) <= model_formula(m_of_v(&bm, hi), 3, 8.0) + 1e-9);
    }

    #[test]
    fn bandwidth_is_clamped_outside_the_table(v in 0u64..(1 << 40)) {
        let bm = BandwidthModel::default_table();
        let pts = bm.points();
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        let bw = bm.bandwidth(v);
        prop_assert!(bw >= first.1 && bw <= last.1);
        if v <= first.0 {
            prop_assert_eq!(bw, first.1);
        }
        if v >= last.0 {
            prop_assert_eq!(bw, last.1);
        }
    }

    #[test]
    fn saved_bytes_matches_edge_count(seed in any::<u64>(), ops in 2usize..9, mask in any::<u16>()) {
        let g = dag(seed, ops);
        let all = op_ids(&g);
        let nodes: Vec<String> = all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, id)| id.clone()).collect();
        let p = FusionPattern::new(0, nodes);

        let edges: BTreeSet<(&str, &str)> = g
            .nodes
            .values()
            .flat_map(|n| n.operands.iter().map(move |o| (o.as_str(), n.id.as_str())))
            .collect();
        let bytes = |id: &str| g.nodes[id].byte_count() as u64;
        let mut expect = 0u64;
        for u in &p.nodes {
            let out: Vec<&str> = edges.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
            let inside = out.iter().filter(|c| p.contains(c)).count();
            expect += inside as u64 * bytes(u);
            if inside > 0 && inside == out.len() && !g.outputs.contains(u) {
                expect += bytes(u);
            }
        }
        prop_assert_eq!(saved_bytes(&g, &p), expect);
    }

    #[test]
    fn execution_score_breaks_even_at_unfused_time(
        times in prop::collection::vec(0.0f64..500.0, 1..8),
        phi in 6.0f64..10.0,
        extra in 0.0f64..100.0,
    ) {
        let even = times.iter().sum::<f64>() + (times.len() - 1) as f64 * phi;
        prop_assert!(execution_formula(&times, Some(even), phi).abs() < 1e-9);
        let slower = execution_formula(&times, Some(even + extra), phi);
        prop_assert!((slower + extra).abs() < 1e-9);
        prop_assert_eq!(execution_formula(&times, None, phi), -1.0);
    }

    #[test]
    fn substitution_runs_partition_the_fusible_ops(seed in any::<u64>(), ops in 1usize..25, mask in any::<u32>()) {
        let g = dag(seed, ops);
        let all = op_ids(&g);
        let parts = PartitionSet::new(all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, id)| id.clone()), 0);
        let patterns = substitution_fusion(&g, &parts);
        let live = g.live_nodes();
        let mut covered: Vec<&String> = patterns.iter().flat_map(|p| &p.nodes).collect();
        covered.sort();
        let expect: Vec<&String> = all.iter().filter(|id| !parts.ops.contains(*id) && live.contains(*id)).collect();
        prop_assert_eq!(covered.len(), expect.len(), "a node appears in two runs");
        prop_assert_eq!(covered, expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planning_keeps_the_graph_acyclic_and_compresses(seed in any::<u64>(), ops in 2usize..14) {
        let g = dag(seed, ops);
        let run = plan_graph(&g, &PipelineConfig::default(), &BandwidthModel::default_table(), None).unwrap();
        prop_assert!(run.fused.topological_sort().is_ok());
        prop_assert!(run.report.kernel_compression >= 1.0);
        prop_assert!(run.report.kernels_after <= run.report.kernels_before);
        let fused = run.fused.nodes.values().filter(|n| matches!(n.kind, OpKind::Fused { .. })).count();
        prop_assert_eq!(run.kernels.len(), fused);
        for k in &run.kernels {
            prop_assert!(k.shared_bytes <= k.requested_bytes || k.requested_bytes == 0);
        }
    }
}
