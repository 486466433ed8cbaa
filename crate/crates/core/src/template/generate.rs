use std::collections::BTreeSet;

use super::{AttrType, DimAttr, Level, Schedule, Template};
use crate::emit::plan::{geometry, PatternView, ReduceStyle};
use crate::error::CodegenError;
use crate::graph::{Graph, OpKind};

pub const CTA_SIZES: [usize; 2] = [128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateLimits {
    pub max_templates: usize,
}

impl Default for TemplateLimits {
    fn default() -> Self {
        TemplateLimits { max_templates: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Choice {
    Inline,
    Elementwise { shared: bool },
    Reduce { style: ReduceStyle, shared: bool },
    Dot { block: bool, shared: bool },
}

fn plain(attrs: &[AttrType]) -> Vec<DimAttr> {
    attrs.iter().map(|a| DimAttr::plain(*a)).collect()
}

fn repeat(first: AttrType, mid: AttrType, last: AttrType, rank: usize) -> Vec<DimAttr> {
    let mut v = vec![first];
    v.extend(std::iter::repeat_n(mid, rank.saturating_sub(2)));
    v.push(last);
    plain(&v)
}

pub fn elementwise_attrs(dims: &[usize], cta: usize) -> Vec<DimAttr> {
    match dims.len() {
        0 => Vec::new(),
        1 => {
            let n = dims[0].div_ceil(cta).next_power_of_two().min(1024);
            vec![DimAttr {
                levels: vec![Level { attr: AttrType::Grid, tile: Some(n) }, Level { attr: AttrType::Cta, tile: None }],
            }]
        }
        r => repeat(AttrType::Grid, AttrType::Cta, AttrType::Cta, r),
    }
}

pub fn reduce_attrs(style: ReduceStyle, rank: usize) -> Vec<DimAttr> {
    use AttrType::*;
    match (style, rank) {
        (_, 0) => Vec::new(),
        (ReduceStyle::Trivial, r) => plain(&vec![Thread; r]),
        (ReduceStyle::Warp, 1) => plain(&[Warp]),
        (ReduceStyle::Warp, 2) => plain(&[Grid, Warp]),
        (ReduceStyle::Warp, r) => repeat(Grid, Warp, Cta, r),
        (ReduceStyle::Block, 1) => plain(&[Cta]),
        (ReduceStyle::Block, r) => repeat(Grid, Thread, Cta, r),
        (ReduceStyle::ThreadSeq, 1) => plain(&[Thread]),
        (ReduceStyle::ThreadSeq, r) => repeat(Grid, Cta, Thread, r),
    }
}

pub fn dot_attrs(block: bool, rank: usize) -> Vec<DimAttr> {
    let inner = if block { AttrType::Warp } else { AttrType::Cta };
    let mut v = vec![AttrType::Grid];
    v.extend(std::iter::repeat_n(inner, rank.saturating_sub(1)));
    plain(&v)
}

/// Scheduling choices per op, in topological order.
fn choices(view: &PatternView) -> Vec<(String, Vec<Choice>)> {
    let feeds_dot = |id: &str| view.consumers[id].iter().any(|c| view.node(c).kind.is_dot());
    let has_users = |id: &str| !view.consumers[id].is_empty();
    let mut roots: BTreeSet<String> = BTreeSet::new();
    for id in &view.order {
        let k = &view.node(id).kind;
        if view.is_output(id) || k.is_reduce() || (k.is_elementwise() && feeds_dot(id)) {
            roots.insert(id.clone());
        }
    }
    // Dots become roots when their value leaves a single elementwise closure.
    let mut optional: BTreeSet<String> = BTreeSet::new();
    let mut closures: std::collections::BTreeMap<String, BTreeSet<String>> = Default::default();
    for id in view.order.iter().rev() {
        let node = view.node(id);
        if node.kind.is_dot() && !roots.contains(id) {
            let users = &view.consumers[id];
            let span: BTreeSet<String> = users.iter().flat_map(|c| closures[c].iter().cloned()).collect();
            if users.iter().any(|c| !view.node(c).kind.is_elementwise()) || span.len() != 1 {
                roots.insert(id.clone());
            } else {
                optional.insert(id.clone());
            }
        }
        let set = if roots.contains(id) {
            BTreeSet::from([id.clone()])
        } else {
            view.consumers[id].iter().flat_map(|c| closures[c].iter().cloned()).collect()
        };
        closures.insert(id.clone(), set);
    }

    let mut out = Vec::new();
    for id in &view.order {
        let node = view.node(id);
        let opts = match &node.kind {
            OpKind::Reduce { .. } => {
                let rank = view.shape(&node.operands[0]).rank();
                let list: Vec<(ReduceStyle, bool)> = if has_users(id) {
                    vec![
                        (ReduceStyle::Warp, false),
                        (ReduceStyle::Warp, true),
                        (ReduceStyle::Block, true),
                        (ReduceStyle::ThreadSeq, false),
                    ]
                } else {
                    vec![
                        (ReduceStyle::Warp, false),
                        (ReduceStyle::Block, false),
                        (ReduceStyle::ThreadSeq, false),
                        (ReduceStyle::Trivial, false),
                    ]
                };
                let mut seen = Vec::new();
                let mut opts = Vec::new();
                for (style, shared) in list {
                    let key = (reduce_attrs(style, rank), shared);
                    if !seen.contains(&key) {
                        seen.push(key);
                        opts.push(Choice::Reduce { style, shared });
                    }
                }
                opts
            }
            k if k.is_dot() => {
                if optional.contains(id) {
                    vec![Choice::Inline, Choice::Dot { block: true, shared: true }]
                } else {
                    let shared = has_users(id);
                    vec![Choice::Dot { block: false, shared }, Choice::Dot { block: true, shared }]
                }
            }
            _ if roots.contains(id) => vec![Choice::Elementwise { shared: feeds_dot(id) }],
            _ => vec![Choice::Inline],
        };
        out.push((id.clone(), opts));
    }
    out
}

fn schedule_for(view: &PatternView, id: &str, choice: &Choice, cta: usize) -> Option<Schedule> {
    let node = view.node(id);
    let (attrs, shared) = match *choice {
        Choice::Inline => return None,
        Choice::Elementwise { shared } => (elementwise_attrs(&view.shape(id).dims, cta), shared),
        Choice::Reduce { style, shared } => (reduce_attrs(style, view.shape(&node.operands[0]).rank()), shared),
        Choice::Dot { block, shared } => (dot_attrs(block, view.shape(id).rank()), shared),
    };
    Some(Schedule::new(id, attrs, shared))
}

/// Candidate templates for a pattern body: the cross product of per-op
/// choices (first op varies slowest) and CTA sizes (fastest), truncated to
/// `limits.max_templates`.
pub fn generate_templates(body: &Graph, limits: &TemplateLimits) -> Result<Vec<Template>, CodegenError> {
    let view = PatternView::new(body)?;
    let ops = choices(&view);
    let radices: Vec<usize> = ops.iter().map(|(_, o)| o.len()).chain([CTA_SIZES.len()]).collect();
    let total = radices.iter().try_fold(1usize, |acc, r| acc.checked_mul(*r)).unwrap_or(usize::MAX);
    let count = total.min(limits.max_templates);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut digits = vec![0; radices.len()];
        let mut rest = index;
        for (d, r) in digits.iter_mut().zip(&radices).rev() {
            *d = rest % r;
            rest /= r;
        }
        let cta = CTA_SIZES[*digits.last().unwrap()];
        let schedules: Vec<Schedule> =
            ops.iter().zip(&digits).filter_map(|((id, opts), &d)| schedule_for(&view, id, &opts[d], cta)).collect();
        let blocks = schedules.iter().map(|s| geometry(&view, s).blocks).max().unwrap_or(1);
        out.push(Template { schedules, cta_num: blocks.clamp(1, 65_535), cta_size: cta });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ElementwiseOp, OpNode, Reducer, Shape};

    fn softmax_like() -> Graph {
        let s = |d: &[usize]| Some(Shape::f32(d));
        let mut g = Graph::new();
        g.add(OpNode::new("x", OpKind::Parameter, &[], s(&[8, 64])))
            .add(OpNode::new("r", OpKind::Reduce { dims: vec![1], reducer: Reducer::Sum }, &["x"], s(&[8])))
            .add(OpNode::new("b", OpKind::Elementwise(ElementwiseOp::Broadcast), &["r"], s(&[8, 64])))
            .add(OpNode::new("m", OpKind::Elementwise(ElementwiseOp::Multiply), &["x", "b"], s(&[8, 64])));
        g.with_outputs(&["m"])
    }

    #[test]
    fn elementwise_only_gives_cta_variants() {
        let s = |d: &[usize]| Some(Shape::f32(d));
        let mut g = Graph::new();
        g.add(OpNode::new("x", OpKind::Parameter, &[], s(&[1000]))).add(OpNode::new(
            "e",
            OpKind::Elementwise(ElementwiseOp::Exp),
            &["x"],
            s(&[1000]),
        ));
        let g = g.with_outputs(&["e"]);
        let ts = generate_templates(&g, &TemplateLimits::default()).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].to_string(), "launch 8 128;\ne [GRID_8-CTA];\n");
        assert_eq!(ts[1].to_string(), "launch 4 256;\ne [GRID_4-CTA];\n");
    }

    #[test]
    fn one_reduce_gives_at_most_eight() {
        let ts = generate_templates(&softmax_like(), &TemplateLimits::default()).unwrap();
        assert_eq!(ts.len(), 8);
        assert_eq!(ts[0].schedules[0].to_string(), "r [GRID,WARP];");
        assert_eq!(ts[2].schedules[0].to_string(), "r [GRID,WARP] S;");
    }

    #[test]
    fn limit_truncates() {
        let ts = generate_templates(&softmax_like(), &TemplateLimits { max_templates: 3 }).unwrap();
        assert_eq!(ts.len(), 3);
    }

    #[test]
    fn attr_shapes() {
        assert_eq!(
            reduce_attrs(ReduceStyle::Warp, 4).iter().map(|a| a.to_string()).collect::<Vec<_>>(),
            ["GRID", "WARP", "WARP", "CTA"]
        );
        assert_eq!(
            reduce_attrs(ReduceStyle::Block, 3).iter().map(|a| a.to_string()).collect::<Vec<_>>(),
            ["GRID", "THREAD", "CTA"]
        );
        assert_eq!(
            reduce_attrs(ReduceStyle::ThreadSeq, 3).iter().map(|a| a.to_string()).collect::<Vec<_>>(),
            ["GRID", "CTA", "THREAD"]
        );
        assert_eq!(dot_attrs(true, 2).iter().map(|a| a.to_string()).collect::<Vec<_>>(), ["GRID", "WARP"]);
    }
}
