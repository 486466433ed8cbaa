//! Run metrics: kernel compression, pattern mix and shared-memory usage.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{m_of_v, BandwidthModel};
use crate::emit::KernelSketch;
use crate::error::PlanError;
use crate::graph::{body_outputs, Graph, OpKind};
use crate::transform::{classify, compression_ratio, kernel_count, Category};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    /// Share of estimated fused-kernel time.
    pub time_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedStats {
    /// Fraction of fused kernels that use shared memory.
    pub pt_ratio: f64,
    /// Mean declared bytes over kernels that use shared memory.
    pub avg_shd: f64,
    pub max_shd: usize,
    /// Declared over requested bytes; absent without requests.
    pub alloc_over_req: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kernels_before: usize,
    pub kernels_after: usize,
    pub kernel_compression: f64,
    pub pattern_breakdown: BTreeMap<String, CategoryStats>,
    pub shared_stats: SharedStats,
    pub plan_score_total: f64,
}

/// Off-chip bytes a fused op reads and writes.
fn io_bytes(body: &Graph) -> u64 {
    let inputs: usize = body.nodes.values().filter(|n| n.kind == OpKind::Parameter).map(|n| n.byte_count()).sum();
    let outputs: usize = body_outputs(body).iter().filter_map(|o| body.node(o)).map(|n| n.byte_count()).sum();
    (inputs + outputs) as u64
}

pub fn build_report(
    before: &Graph,
    fused: &Graph,
    sketches: &[KernelSketch],
    plan_score_total: f64,
    bm: &BandwidthModel,
    phi: f64,
) -> Result<RunReport, PlanError> {
    let mut counts: BTreeMap<Category, (usize, f64)> =
        [Category::Elemwise, Category::Reduction, Category::Gemm].into_iter().map(|c| (c, (0, 0.0))).collect();
    for n in fused.nodes.values() {
        if let OpKind::Fused { body, .. } = &n.kind {
            let e = counts.get_mut(&classify(body)).unwrap();
            e.0 += 1;
            e.1 += m_of_v(bm, io_bytes(body)) + phi;
        }
    }
    let total_time: f64 = counts.values().map(|c| c.1).sum();
    let pattern_breakdown = counts
        .into_iter()
        .map(|(c, (count, t))| {
            let time_share = if total_time > 0.0 { t / total_time } else { 0.0 };
            (c.as_str().to_string(), CategoryStats { count, time_share })
        })
        .collect();

    let using: Vec<&KernelSketch> = sketches.iter().filter(|s| s.shared_bytes > 0).collect();
    let requested: usize = sketches.iter().map(|s| s.requested_bytes).sum();
    let allocated: usize = sketches.iter().map(|s| s.shared_bytes).sum();
    let shared_stats = SharedStats {
        pt_ratio: if sketches.is_empty() { 0.0 } else { using.len() as f64 / sketches.len() as f64 },
        avg_shd: if using.is_empty() {
            0.0
        } else {
            using.iter().map(|s| s.shared_bytes as f64).sum::<f64>() / using.len() as f64
        },
        max_shd: sketches.iter().map(|s| s.shared_bytes).max().unwrap_or(0),
        alloc_over_req: (requested > 0).then(|| allocated as f64 / requested as f64),
    };
    Ok(RunReport {
        kernels_before: kernel_count(before),
        kernels_after: kernel_count(fused),
        kernel_compression: compression_ratio(before, fused)?,
        pattern_breakdown,
        shared_stats,
        plan_score_total,
    })
}

pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kernels            {} -> {}", r.kernels_before, r.kernels_after);
    let _ = writeln!(s, "compression        {:.3}", r.kernel_compression);
    let _ = writeln!(s, "plan score         {:.3} us", r.plan_score_total);
    let _ = writeln!(s, "\ncategory     count  time share");
    for (c, st) in &r.pattern_breakdown {
        let _ = writeln!(s, "{c:<12} {:>5}  {:>10.4}", st.count, st.time_share);
    }
    let sh = &r.shared_stats;
    let _ = writeln!(s, "\nshared pt-ratio    {:.4}", sh.pt_ratio);
    let _ = writeln!(s, "shared avg bytes   {:.1}", sh.avg_shd);
    let _ = writeln!(s, "shared max bytes   {}", sh.max_shd);
    let ratio = sh.alloc_over_req.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let _ = writeln!(s, "alloc/req          {ratio}");
    s
}
