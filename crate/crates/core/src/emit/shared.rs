//! Shared-memory planning over a pattern's dataflow DAG.
//!
//! Ops are visited in topological order. An op without a request forwards the
//! allocations reaching its operands; an op with a request may take over the
//! region of an upstream allocation it post-dominates, reclaims the other
//! post-dominated ones, and otherwise allocates first-fit or at the end.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RequestReason {
    ReduceTransfer,
    DotTransfer,
    ElemwiseStage,
}

impl RequestReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestReason::ReduceTransfer => "reduce_transfer",
            RequestReason::DotTransfer => "dot_transfer",
            RequestReason::ElemwiseStage => "elemwise_stage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedRequest {
    pub op_id: String,
    pub bytes: usize,
    pub reason: RequestReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocEntry {
    pub offset: usize,
    pub size: usize,
    pub reused_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AllocMap {
    pub entries: BTreeMap<String, AllocEntry>,
    /// Bytes of shared memory the kernel declares.
    pub total: usize,
    /// Region capacity by offset.
    pub regions: BTreeMap<usize, usize>,
}

impl AllocMap {
    pub fn requested(&self) -> usize {
        self.entries.values().map(|e| e.size).sum()
    }
}

/// The in-pattern dataflow DAG: ops in topological order with their
/// in-pattern operands.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dag {
    pub order: Vec<String>,
    pub operands: BTreeMap<String, Vec<String>>,
    pub outputs: BTreeSet<String>,
}

impl Dag {
    pub fn consumers(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> =
            self.order.iter().map(|id| (id.as_str(), BTreeSet::new())).collect();
        for (id, ops) in &self.operands {
            for o in ops {
                if let Some(set) = out.get_mut(o.as_str()) {
                    set.insert(id.as_str());
                }
            }
        }
        out
    }
}

/// Post-dominator sets toward a virtual sink fed by every output and every
/// op without consumers.
#[derive(Debug, Clone)]
pub struct PostDominators {
    index: BTreeMap<String, usize>,
    sets: Vec<BTreeSet<usize>>,
}

impl PostDominators {
    pub fn new(dag: &Dag) -> Self {
        let index: BTreeMap<String, usize> = dag.order.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let consumers = dag.consumers();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); dag.order.len()];
        for (i, id) in dag.order.iter().enumerate().rev() {
            let succ: Vec<usize> = consumers[id.as_str()].iter().map(|c| index[*c]).collect();
            let to_sink = succ.is_empty() || dag.outputs.contains(id);
            let mut set = if to_sink {
                BTreeSet::new()
            } else {
                let mut it = succ.iter();
                let first = sets[*it.next().unwrap()].clone();
                it.fold(first, |acc, s| acc.intersection(&sets[*s]).copied().collect())
            };
            set.insert(i);
            sets[i] = set;
        }
        PostDominators { index, sets }
    }

    /// True when every path from `prev` to the sink passes through `inst`.
    pub fn dominates(&self, inst: &str, prev: &str) -> bool {
        match (self.index.get(inst), self.index.get(prev)) {
            (Some(&i), Some(&p)) => self.sets[p].contains(&i),
            _ => false,
        }
    }
}

/// Extra conditions on reuse beyond post-dominance.
pub trait ReuseGuard {
    /// `inst` may write into the region `prev` still occupies.
    fn can_share(&self, _inst: &str, _prev: &str) -> bool {
        true
    }
    /// `prev`'s region may be handed to later requests once `inst` runs.
    fn can_reclaim(&self, _inst: &str, _prev: &str) -> bool {
        true
    }
}

/// Reuse governed by post-dominance alone.
pub struct Unrestricted;

impl ReuseGuard for Unrestricted {}

struct Region {
    offset: usize,
    capacity: usize,
    owner: Option<String>,
    last: String,
}

pub fn shared_planning(dag: &Dag, requests: &[SharedRequest], guard: &dyn ReuseGuard) -> AllocMap {
    let req: BTreeMap<&str, usize> = requests.iter().map(|r| (r.op_id.as_str(), r.bytes)).collect();
    let pos: BTreeMap<&str, usize> = dag.order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let dom = PostDominators::new(dag);
    let mut regions: Vec<Region> = Vec::new();
    let mut owned: BTreeMap<String, usize> = BTreeMap::new();
    let mut info: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut map = AllocMap::default();
    let mut end = 0;

    for id in &dag.order {
        let mut prevs: BTreeSet<&str> = BTreeSet::new();
        for o in dag.operands.get(id).into_iter().flatten() {
            if let Some(s) = info.get(o.as_str()) {
                prevs.extend(s.iter().copied());
            }
        }
        let Some(&size) = req.get(id.as_str()) else {
            info.insert(id.as_str(), prevs);
            continue;
        };
        let mut prevs: Vec<&str> = prevs.into_iter().collect();
        prevs.sort_by_key(|p| pos[p]);

        let mut chosen: Option<(usize, &str)> = None;
        for &p in &prevs {
            let Some(&r) = owned.get(p) else { continue };
            if dom.dominates(id, p) && regions[r].capacity >= size && guard.can_share(id, p) {
                chosen = Some((r, p));
                break;
            }
        }
        // Regions reclaimed here become free only after this op is placed.
        let mut reclaimed = Vec::new();
        for &p in &prevs {
            if chosen.is_some_and(|(_, c)| c == p) {
                continue;
            }
            if let Some(&r) = owned.get(p) {
                if dom.dominates(id, p) && guard.can_reclaim(id, p) {
                    reclaimed.push(r);
                    owned.remove(p);
                }
            }
        }
        let (r, reused_from) = match chosen {
            Some((r, p)) => {
                owned.remove(p);
                (r, Some(p.to_string()))
            }
            None => match regions.iter().position(|g| g.owner.is_none() && g.capacity >= size) {
                Some(r) => (r, Some(regions[r].last.clone())),
                None => {
                    regions.push(Region { offset: end, capacity: size, owner: None, last: String::new() });
                    end += size;
                    (regions.len() - 1, None)
                }
            },
        };
        regions[r].owner = Some(id.clone());
        regions[r].last = id.clone();
        owned.insert(id.clone(), r);
        for g in reclaimed {
            regions[g].owner = None;
        }
        map.entries.insert(id.clone(), AllocEntry { offset: regions[r].offset, size, reused_from });
        info.insert(id.as_str(), BTreeSet::from([id.as_str()]));
    }
    map.total = end;
    map.regions = regions.iter().map(|r| (r.offset, r.capacity)).collect();
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dag(edges: &[(&str, &[&str])], outputs: &[&str]) -> Dag {
        Dag {
            order: edges.iter().map(|(id, _)| id.to_string()).collect(),
            operands: edges
                .iter()
                .map(|(id, ops)| (id.to_string(), ops.iter().map(|s| s.to_string()).collect()))
                .collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn req(op: &str, bytes: usize) -> SharedRequest {
        SharedRequest { op_id: op.into(), bytes, reason: RequestReason::ReduceTransfer }
    }

    #[test]
    fn chain_reuses_dominated_region() {
        let d = dag(&[("r1", &[]), ("e", &["r1"]), ("r2", &["e"])], &["r2"]);
        let m = shared_planning(&d, &[req("r1", 64), req("r2", 64)], &Unrestricted);
        assert_eq!(m.total, 64);
        assert_eq!(m.entries["r2"].reused_from.as_deref(), Some("r1"));
        assert_eq!(m.total as f64 / m.requested() as f64, 0.5);
    }

    #[test]
    fn independent_requests_do_not_share() {
        let d = dag(&[("a", &[]), ("b", &[]), ("c", &["a"]), ("e", &["b"])], &["c", "e"]);
        let m = shared_planning(&d, &[req("a", 32), req("b", 48)], &Unrestricted);
        assert_eq!(m.total, 80);
        assert_eq!(m.entries["b"].offset, 32);
    }

    #[test]
    fn branch_outside_blocks_reuse() {
        // a feeds both b and an output, so b does not post-dominate a.
        let d = dag(&[("a", &[]), ("b", &["a"]), ("x", &["a"])], &["b", "x"]);
        let m = shared_planning(&d, &[req("a", 16), req("b", 16)], &Unrestricted);
        assert_eq!(m.total, 32);
    }

    #[test]
    fn post_dominance_of_diamond() {
        let d = dag(&[("a", &[]), ("b", &["a"]), ("c", &["a"]), ("j", &["b", "c"])], &["j"]);
        let pd = PostDominators::new(&d);
        assert!(pd.dominates("j", "a"));
        assert!(!pd.dominates("b", "a"));
        assert!(pd.dominates("a", "a"));
    }

    #[test]
    fn too_small_region_is_not_shared() {
        let d = dag(&[("r1", &[]), ("r2", &["r1"])], &["r2"]);
        let m = shared_planning(&d, &[req("r1", 16), req("r2", 64)], &Unrestricted);
        // r1 is reclaimed but cannot hold r2.
        assert_eq!(m.total, 80);
    }
}
