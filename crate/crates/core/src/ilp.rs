//! Exact 0/1 pattern selection with cycle elimination.

use std::collections::BTreeSet;

use crate::error::PlanError;
use crate::graph::{contract_plan, Contraction, FusionPattern, Graph};

pub const MAX_ROUNDS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairConstraint {
    pub u: usize,
    pub v: usize,
}

/// At most `|indices| - 1` of the listed variables may be set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CycleConstraint {
    pub indices: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IlpInstance {
    pub scores: Vec<f64>,
    pub pairs: Vec<PairConstraint>,
    pub cycles: Vec<CycleConstraint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionPlan {
    /// Selected pattern indices, ascending.
    pub selected: Vec<usize>,
    pub total_score: f64,
    /// Solver rounds used (1 when the first optimum is already acyclic).
    pub iterations: usize,
}

/// Pairs of patterns sharing at least one node.
pub fn build_conflicts(patterns: &[FusionPattern]) -> Vec<PairConstraint> {
    let mut out = Vec::new();
    for u in 0..patterns.len() {
        for v in u + 1..patterns.len() {
            if patterns[u].overlaps(&patterns[v]) {
                out.push(PairConstraint { u, v });
            }
        }
    }
    out
}

/// Sum of the selected scores in ascending index order.
pub fn canonical_total(scores: &[f64], selected: &[usize]) -> f64 {
    let mut idx = selected.to_vec();
    idx.sort_unstable();
    idx.iter().map(|&i| scores[i]).sum()
}

impl IlpInstance {
    pub fn new(scores: Vec<f64>, pairs: Vec<PairConstraint>) -> Self {
        IlpInstance { scores, pairs, cycles: Vec::new() }
    }

    /// True when `selected` satisfies every constraint.
    pub fn is_feasible(&self, selected: &[usize]) -> bool {
        let set: BTreeSet<usize> = selected.iter().copied().collect();
        self.pairs.iter().all(|p| !(set.contains(&p.u) && set.contains(&p.v)))
            && self.cycles.iter().all(|c| c.indices.iter().filter(|i| set.contains(i)).count() < c.indices.len())
    }
}

struct Search<'a> {
    inst: &'a IlpInstance,
    order: Vec<usize>,
    /// suffix[k] = sum of scores of order[k..]
    suffix: Vec<f64>,
    conflicts: Vec<Vec<usize>>,
    /// For each variable, the cycle constraints it takes part in.
    cycles_of: Vec<Vec<usize>>,
    cycle_count: Vec<usize>,
    chosen: Vec<bool>,
    current: f64,
    best: Option<(f64, Vec<usize>)>,
}

impl Search<'_> {
    fn can_take(&self, i: usize) -> bool {
        self.conflicts[i].iter().all(|&j| !self.chosen[j])
            && self.cycles_of[i].iter().all(|&c| self.cycle_count[c] + 1 < self.inst.cycles[c].indices.len())
    }

    fn set(&mut self, i: usize, on: bool) {
        self.chosen[i] = on;
        for &c in &self.cycles_of[i] {
            if on {
                self.cycle_count[c] += 1;
            } else {
                self.cycle_count[c] -= 1;
            }
        }
        let s = self.inst.scores[i];
        self.current += if on { s } else { -s };
    }

    fn leaf(&mut self) {
        let sel: Vec<usize> = (0..self.chosen.len()).filter(|&i| self.chosen[i]).collect();
        let total = canonical_total(&self.inst.scores, &sel);
        let better = match &self.best {
            None => true,
            Some((b, bs)) => total > *b || (total == *b && sel < *bs),
        };
        if better {
            self.best = Some((total, sel));
        }
    }

    fn run(&mut self, k: usize) {
        if let Some((best, _)) = &self.best {
            let eps = 1e-9 * best.abs().max(1.0);
            if self.current + self.suffix[k] + eps < *best {
                return;
            }
        }
        if k == self.order.len() {
            self.leaf();
            return;
        }
        let i = self.order[k];
        if self.can_take(i) {
            self.set(i, true);
            self.run(k + 1);
            self.set(i, false);
        }
        self.run(k + 1);
    }
}

/// Exact optimum by branch-and-bound. Among optimal selections the
/// lexicographically smallest index list wins.
pub fn solve(inst: &IlpInstance) -> FusionPlan {
    let n = inst.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| inst.scores[b].total_cmp(&inst.scores[a]).then(a.cmp(&b)));
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + inst.scores[order[k]].max(0.0);
    }
    let mut conflicts = vec![Vec::new(); n];
    for p in &inst.pairs {
        conflicts[p.u].push(p.v);
        conflicts[p.v].push(p.u);
    }
    let mut cycles_of = vec![Vec::new(); n];
    for (c, cc) in inst.cycles.iter().enumerate() {
        for &i in &cc.indices {
            cycles_of[i].push(c);
        }
    }
    let mut search = Search {
        inst,
        order,
        suffix,
        conflicts,
        cycles_of,
        cycle_count: vec![0; inst.cycles.len()],
        chosen: vec![false; n],
        current: 0.0,
        best: None,
    };
    search.run(0);
    let (total_score, selected) = search.best.unwrap_or_default();
    FusionPlan { selected, total_score, iterations: 1 }
}

/// Re-solve with a cycle constraint over each witness cycle's patterns until
/// the selected patterns contract to an acyclic graph.
pub fn solve_with_cycle_elimination(
    g: &Graph,
    patterns: &[FusionPattern],
    scores: &[f64],
) -> Result<FusionPlan, PlanError> {
    if scores.len() != patterns.len() {
        return Err(PlanError::InvalidPlan(format!("{} scores for {} patterns", scores.len(), patterns.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
        return Err(PlanError::InvalidPlan(format!("pattern {i} has score {}", scores[i])));
    }
    let mut inst = IlpInstance::new(scores.to_vec(), build_conflicts(patterns));
    let mut pinned = vec![false; patterns.len()];
    for round in 1..=MAX_ROUNDS {
        let mut plan = solve(&inst);
        plan.iterations = round;
        let chosen: Vec<FusionPattern> =
            plan.selected.iter().map(|&i| FusionPattern { id: i, nodes: patterns[i].nodes.clone() }).collect();
        match contract_plan(g, &chosen)? {
            Contraction::Acyclic(_) => return Ok(plan),
            Contraction::Cycle { patterns: on_cycle, .. } => {
                // A pattern that is cyclic on its own can never be selected.
                for &i in &plan.selected {
                    if !pinned[i] && !contract_plan(g, &[chosen_one(patterns, i)])?.is_acyclic() {
                        pinned[i] = true;
                        inst.cycles.push(CycleConstraint { indices: BTreeSet::from([i]) });
                    }
                }
                let c = CycleConstraint { indices: on_cycle.into_iter().collect() };
                if !inst.cycles.contains(&c) {
                    inst.cycles.push(c);
                }
            }
        }
    }
    Err(PlanError::IterationLimit(MAX_ROUNDS))
}

fn chosen_one(patterns: &[FusionPattern], i: usize) -> FusionPattern {
    FusionPattern { id: i, nodes: patterns[i].nodes.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ElementwiseOp, OpKind, OpNode, Shape};

    fn brute_force(inst: &IlpInstance) -> f64 {
        let n = inst.scores.len();
        let mut best = 0.0f64;
        for mask in 0u32..(1 << n) {
            let sel: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            if inst.is_feasible(&sel) {
                best = best.max(canonical_total(&inst.scores, &sel));
            }
        }
        best
    }

    #[test]
    fn conflicts_examples() {
        assert!(build_conflicts(&[FusionPattern::new(0, ["A"]), FusionPattern::new(1, ["B"])]).is_empty());
        assert_eq!(
            build_conflicts(&[FusionPattern::new(0, ["A", "B"]), FusionPattern::new(1, ["B", "C"])]),
            vec![PairConstraint { u: 0, v: 1 }]
        );
        let same: Vec<FusionPattern> = (0..5).map(|i| FusionPattern::new(i, ["A"])).collect();
        assert_eq!(build_conflicts(&same).len(), 10);
    }

    #[test]
    fn trivial_instances() {
        let plan = solve(&IlpInstance::new(vec![5.0], vec![]));
        assert_eq!((plan.selected, plan.total_score), (vec![0], 5.0));
        let plan = solve(&IlpInstance::new(vec![3.0, 5.0], vec![PairConstraint { u: 0, v: 1 }]));
        assert_eq!((plan.selected, plan.total_score), (vec![1], 5.0));
        assert_eq!(solve(&IlpInstance::default()).selected, Vec::<usize>::new());
    }

    #[test]
    fn ties_prefer_smallest_index_set() {
        let plan = solve(&IlpInstance::new(vec![4.0, 4.0], vec![PairConstraint { u: 0, v: 1 }]));
        assert_eq!(plan.selected, vec![0]);
    }

    #[test]
    fn cycle_constraint_pins_single_variable() {
        let mut inst = IlpInstance::new(vec![9.0, 1.0], vec![]);
        inst.cycles.push(CycleConstraint { indices: BTreeSet::from([0]) });
        assert_eq!(solve(&inst).selected, vec![1]);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..50 {
            let n = (next() % 10) as usize + 1;
            let scores: Vec<f64> = (0..n).map(|_| (next() % 1000) as f64 / 10.0).collect();
            let mut pairs = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if next() % 3 == 0 {
                        pairs.push(PairConstraint { u, v });
                    }
                }
            }
            let inst = IlpInstance::new(scores, pairs);
            let plan = solve(&inst);
            assert!(inst.is_feasible(&plan.selected));
            assert_eq!(plan.total_score, brute_force(&inst));
        }
    }

    fn triangle() -> Graph {
        let s = || Some(Shape::f32(&[4]));
        let mut g = Graph::new();
        g.add(OpNode::new("P", OpKind::Parameter, &[], s()))
            .add(OpNode::new("A", OpKind::Elementwise(ElementwiseOp::Exp), &["P"], s()))
            .add(OpNode::new("B", OpKind::Elementwise(ElementwiseOp::Log), &["A"], s()))
            .add(OpNode::new("C", OpKind::Elementwise(ElementwiseOp::Add), &["A", "B"], s()));
        g.with_outputs(&["C"])
    }

    #[test]
    fn cyclic_selection_is_eliminated() {
        let g = triangle();
        let patterns = [FusionPattern::new(0, ["A", "C"]), FusionPattern::new(1, ["B"])];
        let plan = solve_with_cycle_elimination(&g, &patterns, &[9.0, 1.0]).unwrap();
        assert_eq!(plan.selected, vec![1]);
        assert!(plan.iterations > 1);
    }

    #[test]
    fn acyclic_instance_takes_one_round() {
        let g = triangle();
        let patterns = [FusionPattern::new(0, ["A", "B"]), FusionPattern::new(1, ["C"])];
        let plan = solve_with_cycle_elimination(&g, &patterns, &[2.0, 1.0]).unwrap();
        assert_eq!((plan.selected, plan.iterations), (vec![0, 1], 1));
    }

    #[test]
    fn negative_scores_are_rejected() {
        let g = triangle();
        assert!(solve_with_cycle_elimination(&g, &[FusionPattern::new(0, ["A"])], &[-1.0]).is_err());
    }
}
