use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("node `{node}`: {message}")]
    Format { node: String, message: String },
    #[error("node `{node}` references missing operand `{operand}`")]
    UnresolvedOperand { node: String, operand: String },
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}`: {message}")]
    Invalid { node: String, message: String },
    #[error("dependency cycle through {nodes:?}")]
    Cycle { nodes: Vec<String> },
    #[error("patterns {first} and {second} overlap on `{node}`")]
    Overlap { first: usize, second: usize, node: String },
    #[error("pattern {pattern} names unknown node `{node}`")]
    UnknownNode { pattern: usize, node: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown attribute type `{name}` at line {line}, column {column}")]
    UnknownAttr { name: String, line: usize, column: usize },
    #[error("schedule `{op}` has {got} attributes but the op iterates over {want} dims")]
    RankMismatch { op: String, got: usize, want: usize },
    #[error("schedule `{0}` names an op outside the pattern")]
    UnknownOp(String),
    #[error("duplicate schedule for `{0}`")]
    DuplicateSchedule(String),
    #[error("pattern output `{0}` has no schedule")]
    MissingOutput(String),
    #[error("invalid launch parameters: {0}")]
    Launch(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodegenError {
    #[error("layout constraint violated: `{producer}` is read by `{consumer}` outside its thread-block context")]
    Layout { producer: String, consumer: String },
    #[error("schedule for `{op}` reads `{operand}` before it is available")]
    Ordering { op: String, operand: String },
    #[error("`{0}` must have its own schedule")]
    Unscheduled(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no feasible template for the pattern")]
    NoFeasibleTemplate,
    #[error("malformed pattern: {0}")]
    Pattern(String),
}

#[derive(Debug, Error)]
pub enum CostError {
    #[error("bandwidth model: {0}")]
    Bandwidth(String),
    #[error("bandwidth csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cost config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cycle elimination did not converge after {0} rounds")]
    IterationLimit(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("no kernels after fusion")]
    NoKernels,
}
