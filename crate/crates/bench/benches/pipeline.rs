use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitch_bench::fixture;
use stitch_core::{
    codegen_pattern, plan_graph, solve, BandwidthModel, IlpInstance, PairConstraint, ParamNames, PipelineConfig,
    TemplateLimits, SHARED_LIMIT,
};

fn ilp_instance(rng: &mut ChaCha8Rng, k: usize) -> IlpInstance {
    let scores = (0..k).map(|_| rng.gen_range(0.0..100.0)).collect();
    let mut pairs = Vec::new();
    for u in 0..k {
        for v in u + 1..k {
            if rng.gen_bool(0.2) {
                pairs.push(PairConstraint { u, v });
            }
        }
    }
    IlpInstance::new(scores, pairs)
}

fn bench_ilp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let instances: Vec<IlpInstance> = (0..16).map(|_| ilp_instance(&mut rng, 24)).collect();
    c.bench_function("ilp_solve_k24", |b| {
        b.iter(|| {
            for inst in &instances {
                black_box(solve(inst));
            }
        })
    });
}

fn bench_plan(c: &mut Criterion) {
    let g = fixture("attention");
    let bm = BandwidthModel::default_table();
    let cfg = PipelineConfig::default();
    c.bench_function("plan_attention", |b| b.iter(|| black_box(plan_graph(&g, &cfg, &bm, None).unwrap())));
}

fn bench_codegen(c: &mut Criterion) {
    let g = fixture("attention");
    let limits = TemplateLimits::default();
    c.bench_function("codegen_attention_64_templates", |b| {
        b.iter(|| black_box(codegen_pattern("k", &g, &ParamNames::new(), &limits, SHARED_LIMIT, None).unwrap()))
    });
}

criterion_group!(benches, bench_ilp, bench_plan, bench_codegen);
criterion_main!(benches);
