//! Implementation templates: per-op schedules plus launch parameters.
//!
//! Text form, one statement per `;`:
//!
//! ```text
//! launch 94 128;
//! reduce_1 [GRID,WARP,WARP,CTA] S;
//! x [GRID_128-WARP_2,WARP,WARP,CTA];
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::error::TemplateError;
use crate::graph::{Graph, OpKind};

mod generate;

pub use generate::{generate_templates, TemplateLimits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttrType {
    Grid,
    Warp,
    Cta,
    Thread,
}

impl AttrType {
    pub fn as_str(self) -> &'static str {
        match self {
            AttrType::Grid => "GRID",
            AttrType::Warp => "WARP",
            AttrType::Cta => "CTA",
            AttrType::Thread => "THREAD",
        }
    }

    pub fn parse(s: &str) -> Option<AttrType> {
        match s {
            "GRID" => Some(AttrType::Grid),
            "WARP" => Some(AttrType::Warp),
            "CTA" => Some(AttrType::Cta),
            "THREAD" => Some(AttrType::Thread),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Level {
    pub attr: AttrType,
    pub tile: Option<usize>,
}

/// Mapping of one iteration dimension onto the hardware hierarchy. Several
/// levels tile the same dimension, outermost first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DimAttr {
    pub levels: Vec<Level>,
}

impl DimAttr {
    pub fn plain(attr: AttrType) -> Self {
        DimAttr { levels: vec![Level { attr, tile: None }] }
    }

    pub fn tiled(attr: AttrType, tile: usize) -> Self {
        DimAttr { levels: vec![Level { attr, tile: Some(tile) }] }
    }

    /// The outermost level's type.
    pub fn head(&self) -> AttrType {
        self.levels[0].attr
    }

    pub fn is(&self, attr: AttrType) -> bool {
        self.levels.len() == 1 && self.levels[0].attr == attr
    }

    pub fn uses(&self, attr: AttrType) -> bool {
        self.levels.iter().any(|l| l.attr == attr)
    }
}

impl fmt::Display for DimAttr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            f.write_str(l.attr.as_str())?;
            if let Some(t) = l.tile {
                write!(f, "_{t}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Schedule {
    pub op_id: String,
    pub attrs: Vec<DimAttr>,
    pub shared: bool,
}

impl Schedule {
    pub fn new(op_id: impl Into<String>, attrs: Vec<DimAttr>, shared: bool) -> Self {
        Schedule { op_id: op_id.into(), attrs, shared }
    }

    pub fn from_attrs(op_id: impl Into<String>, attrs: &[AttrType], shared: bool) -> Self {
        Schedule::new(op_id, attrs.iter().map(|a| DimAttr::plain(*a)).collect(), shared)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [", self.op_id)?;
        for (i, a) in self.attrs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str("]")?;
        if self.shared {
            f.write_str(" S")?;
        }
        f.write_str(";")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Template {
    pub schedules: Vec<Schedule>,
    pub cta_num: usize,
    pub cta_size: usize,
}

impl Template {
    pub fn schedule(&self, op: &str) -> Option<&Schedule> {
        self.schedules.iter().find(|s| s.op_id == op)
    }

    pub fn check_launch(&self) -> Result<(), TemplateError> {
        if self.cta_num == 0 {
            return Err(TemplateError::Launch("cta_num must be positive".into()));
        }
        if self.cta_size == 0 || !self.cta_size.is_multiple_of(32) || self.cta_size > 1024 {
            return Err(TemplateError::Launch(format!(
                "cta_size {} must be a positive multiple of 32 no larger than 1024",
                self.cta_size
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "launch {} {};", self.cta_num, self.cta_size)?;
        for s in &self.schedules {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

pub fn print_template(t: &Template) -> String {
    t.to_string()
}

pub fn print_schedule(s: &Schedule) -> String {
    s.to_string()
}

/// Rank of the space a schedule iterates: the input rank for reductions,
/// the output rank otherwise.
pub fn iteration_rank(g: &Graph, op: &str) -> Option<usize> {
    let n = g.node(op)?;
    match n.kind {
        OpKind::Reduce { .. } => Some(g.node(&n.operands[0])?.shape.as_ref()?.rank()),
        _ => Some(n.shape.as_ref()?.rank()),
    }
}

/// Check a template against a pattern body: known ops, matching ranks and a
/// schedule for every output.
pub fn validate_template(t: &Template, body: &Graph, outputs: &[String]) -> Result<(), TemplateError> {
    t.check_launch()?;
    for s in &t.schedules {
        let want = iteration_rank(body, &s.op_id)
            .filter(|_| body.nodes[&s.op_id].kind.is_fusible())
            .ok_or_else(|| TemplateError::UnknownOp(s.op_id.clone()))?;
        if s.attrs.len() != want {
            return Err(TemplateError::RankMismatch { op: s.op_id.clone(), got: s.attrs.len(), want });
        }
    }
    for o in outputs {
        if t.schedule(o).is_none() {
            return Err(TemplateError::MissingOutput(o.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(usize),
    Punct(char),
}

struct Lexer {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    end: (usize, usize),
}

fn lex(text: &str) -> Result<Lexer, TemplateError> {
    let mut toks = Vec::new();
    let (mut line, mut col) = (1, 1);
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let (l, cl) = (line, col);
        if c == '\n' {
            chars.next();
            line += 1;
            col = 1;
        } else if c.is_whitespace() {
            chars.next();
            col += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                    s.push(c);
                    chars.next();
                    col += 1;
                } else {
                    break;
                }
            }
            toks.push((Tok::Ident(s), l, cl));
        } else if c.is_ascii_digit() {
            let mut s = String::new();
            while let Some(&c) = chars.peek().filter(|c| c.is_ascii_digit()) {
                s.push(c);
                chars.next();
                col += 1;
            }
            let n = s.parse().map_err(|_| TemplateError::Syntax {
                line: l,
                column: cl,
                message: "integer too large".into(),
            })?;
            toks.push((Tok::Int(n), l, cl));
        } else if "[],-;".contains(c) {
            chars.next();
            col += 1;
            toks.push((Tok::Punct(c), l, cl));
        } else {
            return Err(TemplateError::Syntax { line: l, column: cl, message: format!("unexpected character `{c}`") });
        }
    }
    Ok(Lexer { toks, pos: 0, end: (line, col) })
}

impl Lexer {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn at(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.end, |t| (t.1, t.2))
    }

    fn error(&self, message: impl Into<String>) -> TemplateError {
        let (line, column) = self.at();
        TemplateError::Syntax { line, column, message: message.into() }
    }

    fn punct(&mut self, c: char) -> Result<(), TemplateError> {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected `{c}`")))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        let hit = self.peek() == Some(&Tok::Punct(c));
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn ident(&mut self) -> Result<String, TemplateError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.error("expected identifier")),
        }
    }

    fn int(&mut self) -> Result<usize, TemplateError> {
        match self.peek() {
            Some(Tok::Int(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => Err(self.error("expected integer")),
        }
    }

    /// `GRID`, `GRID_128`; the lexer keeps `_128` inside the identifier.
    fn level(&mut self) -> Result<Level, TemplateError> {
        let (line, column) = self.at();
        let word = self.ident()?;
        let (name, tile) = match word.split_once('_') {
            Some((name, digits)) => {
                let tile = digits.parse::<usize>().ok().filter(|t| *t > 0).ok_or(TemplateError::Syntax {
                    line,
                    column,
                    message: format!("bad tile in `{word}`"),
                })?;
                (name.to_string(), Some(tile))
            }
            None => (word, None),
        };
        let attr = AttrType::parse(&name).ok_or(TemplateError::UnknownAttr { name, line, column })?;
        Ok(Level { attr, tile })
    }

    fn schedule(&mut self) -> Result<Schedule, TemplateError> {
        let op_id = self.ident()?;
        self.punct('[')?;
        let mut attrs = Vec::new();
        while !matches!(self.peek(), Some(Tok::Punct(']'))) {
            let mut levels = vec![self.level()?];
            while self.eat_punct('-') {
                levels.push(self.level()?);
            }
            attrs.push(DimAttr { levels });
            if !self.eat_punct(',') {
                break;
            }
        }
        self.punct(']')?;
        let shared = match self.peek() {
            Some(Tok::Ident(s)) if s == "S" => {
                self.pos += 1;
                true
            }
            _ => false,
        };
        self.punct(';')?;
        Ok(Schedule { op_id, attrs, shared })
    }
}

/// Parse one schedule statement such as `reduce_1 [GRID,WARP,WARP,CTA] S;`.
pub fn parse_schedule(text: &str) -> Result<Schedule, TemplateError> {
    let mut lx = lex(text)?;
    let s = lx.schedule()?;
    if lx.peek().is_some() {
        return Err(lx.error("trailing input after schedule"));
    }
    Ok(s)
}

/// Parse a full template: a `launch` header then one or more schedules.
pub fn parse_template(text: &str) -> Result<Template, TemplateError> {
    let mut lx = lex(text)?;
    match lx.peek() {
        Some(Tok::Ident(s)) if s == "launch" => lx.pos += 1,
        _ => return Err(lx.error("expected `launch <cta_num> <cta_size>;` header")),
    }
    let cta_num = lx.int()?;
    let cta_size = lx.int()?;
    lx.punct(';')?;
    let mut schedules: Vec<Schedule> = Vec::new();
    let mut seen = BTreeSet::new();
    while lx.peek().is_some() {
        let s = lx.schedule()?;
        if !seen.insert(s.op_id.clone()) {
            return Err(TemplateError::DuplicateSchedule(s.op_id));
        }
        schedules.push(s);
    }
    if schedules.is_empty() {
        return Err(lx.error("template has no schedules"));
    }
    let t = Template { schedules, cta_num, cta_size };
    t.check_launch()?;
    Ok(t)
}
