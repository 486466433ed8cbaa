use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stitch_core::{
    codegen_graph, manifest, parse_graph, parse_template, plan_graph, print_graph, render_text, to_json,
    BandwidthModel, CostConfig, CsvTimings, PipelineConfig, PlanError, RunReport, ScoreMode, SeedConfig, Strategy,
    TemplateLimits, Thresholds, TimingSource,
};

#[derive(Parser)]
#[command(name = "stitch", version, about = "Plan kernel fusion for tensor graphs and sketch CUDA kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select fusion patterns and write plan.json, fused_graph.json and report.json.
    Plan(PlanArgs),
    /// Emit one .cu file per fused op plus manifest.json.
    Codegen(CodegenArgs),
    /// Print the metrics of a plan directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Substitution,
    Exploratory,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Model,
    Execution,
    Hybrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct PlanArgs {
    graph: PathBuf,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    phi_us: f64,
    /// Accept a launch latency outside 6-10 us.
    #[arg(long)]
    allow_any_phi: bool,
    #[arg(long, default_value_t = 49_152)]
    shared_limit_bytes: usize,
    #[arg(long, env = "STITCH_BANDWIDTH_MODEL")]
    bandwidth_model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "model")]
    mode: ModeArg,
    /// CSV of measured times (`name,time_us`) for execution-based scoring.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    max_operands: usize,
    #[arg(long, default_value_t = 1 << 20)]
    seed_min_bytes: usize,
    #[arg(long, default_value_t = 64)]
    max_templates: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct CodegenArgs {
    fused_graph: PathBuf,
    #[arg(long, short, default_value = "kernels")]
    out: PathBuf,
    /// Use this template instead of enumerating candidates.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 49_152)]
    shared_limit_bytes: usize,
    #[arg(long, default_value_t = 64)]
    max_templates: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Plan directory, or a file inside it.
    plan: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

/// Failure with its exit status: 1 for bad input, 2 for internal errors.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

fn internal(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(input)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display())).map_err(input)
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let g = parse_graph(&read(&a.graph)?).with_context(|| format!("loading {}", a.graph.display())).map_err(input)?;
    let bm = match &a.bandwidth_model {
        Some(p) => BandwidthModel::load(p).with_context(|| format!("loading {}", p.display())).map_err(input)?,
        None => BandwidthModel::default_table(),
    };
    let timings = match &a.timings {
        Some(p) => Some(CsvTimings::load(p).with_context(|| format!("loading {}", p.display())).map_err(input)?),
        None => None,
    };
    let cost = CostConfig {
        phi: a.phi_us,
        shared_limit: a.shared_limit_bytes,
        mode: match a.mode {
            ModeArg::Model => ScoreMode::ModelBased,
            ModeArg::Execution => ScoreMode::ExecutionBased,
            ModeArg::Hybrid => ScoreMode::Hybrid,
        },
        allow_any_phi: a.allow_any_phi,
        limits: TemplateLimits { max_templates: a.max_templates },
    };
    cost.validate().map_err(input)?;
    let cfg = PipelineConfig {
        strategy: match a.strategy {
            StrategyArg::Substitution => Strategy::Substitution,
            StrategyArg::Exploratory => Strategy::Exploratory,
            StrategyArg::Both => Strategy::Both,
        },
        thresholds: Thresholds::default(),
        seeds: SeedConfig { max_operands: a.max_operands, min_tensor_bytes: a.seed_min_bytes, ..SeedConfig::default() },
        cost,
    };
    let run = plan_graph(&g, &cfg, &bm, timings.as_ref().map(|t| t as &dyn TimingSource)).map_err(|e| match e {
        PlanError::Graph(_) => input(e),
        other => internal(other),
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).map_err(input)?;
    write(&a.out, "plan.json", &to_json(&run.doc))?;
    write(&a.out, "fused_graph.json", &print_graph(&run.fused))?;
    write(&a.out, "report.json", &to_json(&run.report))?;
    show(&run.report, a.format);
    Ok(())
}

fn codegen(a: CodegenArgs) -> Result<(), Failure> {
    let g = parse_graph(&read(&a.fused_graph)?)
        .with_context(|| format!("loading {}", a.fused_graph.display()))
        .map_err(input)?;
    let template = match &a.template {
        Some(p) => Some(parse_template(&read(p)?).with_context(|| format!("parsing {}", p.display())).map_err(input)?),
        None => None,
    };
    let limits = TemplateLimits { max_templates: a.max_templates };
    let kernels = codegen_graph(&g, &limits, a.shared_limit_bytes, template.as_ref(), None).map_err(|e| {
        let f = if template.is_some() { input } else { internal };
        f(anyhow::Error::new(e).context("kernel generation failed"))
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).map_err(input)?;
    for k in &kernels {
        write(&a.out, &format!("{}.cu", k.name), &k.source)?;
    }
    write(&a.out, "manifest.json", &to_json(&manifest(&kernels)))?;
    for k in &kernels {
        println!("{}.cu  launch {}x{}  shared {} bytes", k.name, k.cta_num, k.cta_size, k.shared_bytes);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let dir = if a.plan.is_dir() { a.plan.clone() } else { a.plan.parent().map(Path::to_path_buf).unwrap_or_default() };
    let path = dir.join("report.json");
    let r: RunReport =
        serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display())).map_err(input)?;
    show(&r, a.format);
    Ok(())
}

fn show(r: &RunReport, f: Format) {
    match f {
        Format::Text => print!("{}", render_text(r)),
        Format::Json => print!("{}", to_json(r)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Plan(a) => plan(a),
        Command::Codegen(a) => codegen(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
