//! `lipcert` command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::assembly::MultiplierClass;
use crate::baselines::{
    fgl_bound, mp_bound, norm_eq_bound, pair_ratio_lower_bound, sample_lower_bound, BoundMethod, BoundReport, Norm,
    DEFAULT_SAMPLES,
};
use crate::certify::{certification_segments, certify, certify_deq, certify_deq_wellposed, certify_rr, CertifyOptions, Segment};
use crate::error::{LipError, Result};
use crate::model::{load_model, ActivationKind, ActivationSpec, Architecture, Model};
use crate::qc::{verify_qc_random, verify_qc_sample, MultiplierParams, QcKind};
use crate::solver::{export_sdpa, Backend, SolverConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CERTIFIED: i32 = 2;
/// QC values below this count as violations.
pub const QC_TOL: f64 = 1e-9;
const FIXED_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

#[derive(Parser, Debug)]
#[command(name = "lipcert", version, about = "Lipschitz certificates for sorting and Householder networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify an upper bound on the Lipschitz constant by semidefinite programming
    Certify(CertifyArgs),
    /// Compute a single reference bound
    Bound(BoundArgs),
    /// Compute several bounds side by side
    Compare(CompareArgs),
    /// Sample the quadratic constraint of an activation
    QcCheck(QcArgs),
    /// Certify well-posedness or the Lipschitz constant of an equilibrium model
    Deq(DeqArgs),
    /// Certify the Lipschitz constant of a neural ODE flow map
    Node(NodeArgs),
}

#[derive(Args, Debug, Clone)]
struct OutputArgs {
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format (defaults to the --out extension, else json)
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Zero timestamps and runtimes so reports are byte-identical across runs
    #[arg(long)]
    reproducible: bool,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "internal")]
    solver: SolverChoice,
    /// Gap and feasibility tolerance
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Target file for --solver sdpa-export
    #[arg(long)]
    sdpa_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "l2")]
    norm: NormArg,
    /// Output row for --norm linf
    #[arg(long, default_value_t = 0)]
    label: usize,
    #[arg(long, value_enum, default_value = "neuron2")]
    mclass: MclassArg,
    /// Single end-to-end constraint instead of per-layer blocks
    #[arg(long)]
    dense: bool,
    /// Certify this many consecutive pieces and multiply the bounds
    #[arg(long, default_value_t = 1)]
    split: usize,
    /// Residual models: drop the S multiplier (takes effect together with --zero-p)
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    zero_s: bool,
    /// Residual models: drop the P multiplier (takes effect together with --zero-s)
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    zero_p: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    method: BoundMethodArg,
    #[arg(long, value_enum, default_value = "l2")]
    norm: NormArg,
    #[arg(long, default_value_t = 0)]
    label: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample difference quotients of input pairs (needed for implicit models)
    #[arg(long)]
    pairs: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated: mp, sample, sample-linf, fgl, fgl-linf, nsr-l2, nsr-linf, norm-eq, rr
    #[arg(long, value_delimiter = ',', default_value = "mp,sample,fgl,nsr-l2")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    label: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "neuron2")]
    mclass: MclassArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct QcArgs {
    #[arg(long, value_enum)]
    activation: ActivationArg,
    /// Group size (defaults to 2; ignored for maxmin)
    #[arg(long)]
    group_size: Option<usize>,
    /// Number of groups in the sampled layer
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Householder reflection vector, comma-separated (must have unit norm)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    v: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct DeqArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "lipschitz")]
    check: DeqCheck,
    /// Skip the well-posedness certificate before the Lipschitz one
    #[arg(long)]
    waive_wellposedness: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct NodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SolverChoice {
    Internal,
    SdpaExport,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum NormArg {
    L2,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::LinfL1,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MclassArg {
    Neuron2,
    Neuron1,
    Layer2,
    Layer1,
}

impl From<MclassArg> for MultiplierClass {
    fn from(m: MclassArg) -> Self {
        match m {
            MclassArg::Neuron2 => MultiplierClass::Neuron2,
            MclassArg::Neuron1 => MultiplierClass::Neuron1,
            MclassArg::Layer2 => MultiplierClass::Layer2,
            MclassArg::Layer1 => MultiplierClass::Layer1,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum BoundMethodArg {
    Mp,
    Sample,
    Fgl,
    NormEq,
    Rr,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ActivationArg {
    Maxmin,
    Groupsort,
    Fullsort,
    Householder,
    Relu,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DeqCheck {
    Wellposed,
    Lipschitz,
}

/// Machine-readable record of one invocation.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub model_path: Option<String>,
    pub command: String,
    pub options: BTreeMap<String, Value>,
    pub results: Vec<Value>,
    pub timestamp: String,
    pub version: String,
    /// `(model, method, norm, value, runtime_seconds)` rows for CSV output.
    pub rows: Vec<[String; 5]>,
}

impl RunReport {
    fn new(command: &str, model_path: Option<&Path>, reproducible: bool) -> Self {
        Self {
            model_path: model_path.map(|p| p.display().to_string()),
            command: command.to_string(),
            options: BTreeMap::new(),
            results: Vec::new(),
            timestamp: if reproducible {
                FIXED_TIMESTAMP.to_string()
            } else {
                chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
            },
            version: env!("CARGO_PKG_VERSION").to_string(),
            rows: Vec::new(),
        }
    }

    fn option(&mut self, key: &str, value: Value) {
        self.options.insert(key.to_string(), value);
    }

    fn push_bound(&mut self, model_name: &str, report: &BoundReport, reproducible: bool) {
        let runtime = if reproducible { 0.0 } else { report.runtime_seconds };
        self.rows.push([
            model_name.to_string(),
            report.method.name().to_string(),
            report.norm.name().to_string(),
            if report.value.is_finite() { format!("{}", report.value) } else { String::new() },
            format!("{runtime}"),
        ]);
        self.results.push(report.to_json(reproducible));
    }

    /// Serialized with sorted keys.
    pub fn to_json(&self) -> Value {
        json!({
            "model_path": self.model_path,
            "command": self.command,
            "options": self.options,
            "results": self.results,
            "timestamp": self.timestamp,
            "version": self.version,
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("json values serialize");
        s.push('\n');
        s
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| LipError::Value(format!("csv: {e}"));
        w.write_record(["model", "method", "norm", "value", "runtime_seconds"]).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| LipError::Value(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| LipError::Value(format!("csv: {e}")))
    }
}

/// Exit code and captured output of one invocation.
#[derive(Debug, Clone)]
pub struct CliOutcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI, printing to the real stdout/stderr; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let out = run_captured(argv);
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    out.code
}

/// Runs the CLI and captures what it would print.
pub fn run_captured<I, T>(argv: I) -> CliOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    configure_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    CliOutcome { code: EXIT_OK, stdout: text, stderr: String::new() }
                }
                _ => CliOutcome { code: EXIT_ERROR, stdout: String::new(), stderr: text },
            };
        }
    };
    match execute(cli) {
        Ok((report, certified, output)) => match emit(&report, &output) {
            Ok(stdout) => CliOutcome {
                code: if certified { EXIT_OK } else { EXIT_NOT_CERTIFIED },
                stdout,
                stderr: String::new(),
            },
            Err(e) => CliOutcome { code: EXIT_ERROR, stdout: String::new(), stderr: format!("error: {e}\n") },
        },
        Err(e) => CliOutcome { code: EXIT_ERROR, stdout: String::new(), stderr: format!("error: {e}\n") },
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("LIPCERT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails harmlessly when the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn emit(report: &RunReport, output: &OutputArgs) -> Result<String> {
    let format = output.format.unwrap_or_else(|| match output.out.as_ref().and_then(|p| p.extension()) {
        Some(ext) if ext == "csv" => Format::Csv,
        _ => Format::Json,
    });
    let text = match format {
        Format::Json => report.to_json_string(),
        Format::Csv => {
            if report.rows.is_empty() {
                return Err(LipError::Value(format!("the {} command has no CSV form", report.command)));
            }
            report.to_csv_string()?
        }
    };
    match &output.out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn solver_config(args: &SolverArgs) -> SolverConfig {
    SolverConfig {
        tol_gap: args.tol,
        tol_feas: args.tol,
        max_iters: args.max_iters,
        backend: match args.solver {
            SolverChoice::Internal => Backend::Internal,
            SolverChoice::SdpaExport => Backend::SdpaExport,
        },
    }
}

fn solver_options(report: &mut RunReport, args: &SolverArgs) {
    report.option("solver", json!(match args.solver {
        SolverChoice::Internal => "internal",
        SolverChoice::SdpaExport => "sdpa-export",
    }));
    report.option("tol", json!(args.tol));
    report.option("max_iters", json!(args.max_iters));
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

type Executed = (RunReport, bool, OutputArgs);

fn execute(cli: Cli) -> Result<Executed> {
    match cli.command {
        Command::Certify(a) => cmd_certify(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Compare(a) => cmd_compare(a),
        Command::QcCheck(a) => cmd_qc(a),
        Command::Deq(a) => cmd_deq(a),
        Command::Node(a) => cmd_node(a),
    }
}

fn sdpa_paths(base: &Path, count: usize) -> Vec<PathBuf> {
    if count == 1 {
        return vec![base.to_path_buf()];
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = base.extension().map(|e| e.to_string_lossy().into_owned());
    (1..=count)
        .map(|k| {
            let name = match &ext {
                Some(e) => format!("{stem}.{k}.{e}"),
                None => format!("{stem}.{k}"),
            };
            base.with_file_name(name)
        })
        .collect()
}

/// Writes every SDP segment to SDPA files instead of solving.
fn export_segments(report: &mut RunReport, segments: Vec<Segment>, solver: &SolverArgs) -> Result<()> {
    let base = solver
        .sdpa_out
        .as_ref()
        .ok_or_else(|| LipError::Value("--solver sdpa-export needs --sdpa-out".into()))?;
    let problems: Vec<_> = segments
        .into_iter()
        .filter_map(|s| match s {
            Segment::Sdp(p) => Some(p),
            Segment::Exact(_) => None,
        })
        .collect();
    let paths = sdpa_paths(base, problems.len());
    for (p, path) in problems.iter().zip(&paths) {
        export_sdpa(p, path)?;
    }
    report.results.push(json!({
        "status": "exported",
        "files": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn cmd_certify(a: CertifyArgs) -> Result<Executed> {
    let model = load_model(&a.model)?;
    let mut report = RunReport::new("certify", Some(&a.model), a.output.reproducible);
    let norm: Norm = a.norm.into();
    let opts = CertifyOptions {
        norm,
        label: a.label,
        mclass: a.mclass.into(),
        dense: a.dense,
        split: a.split,
        zero_s: a.zero_s,
        zero_p: a.zero_p,
        solver: solver_config(&a.solver),
    };
    report.option("norm", json!(norm.name()));
    report.option("label", json!(a.label));
    report.option("mclass", json!(opts.mclass.name()));
    report.option("dense", json!(a.dense));
    report.option("split", json!(a.split));
    report.option("zero_s", json!(a.zero_s));
    report.option("zero_p", json!(a.zero_p));
    solver_options(&mut report, &a.solver);
    if opts.solver.backend == Backend::SdpaExport {
        let (_, segments) = certification_segments(&model, &opts)?;
        export_segments(&mut report, segments, &a.solver)?;
        return Ok((report, true, a.output));
    }
    let cert = certify(&model, &opts)?;
    let bound = cert.to_report();
    report.push_bound(&model_name(&a.model), &bound, a.output.reproducible);
    Ok((report, cert.is_certified(), a.output))
}

/// Model restricted to output `label` when the linf semantics need a scalar output.
fn scalar_model(model: &Model, norm: Norm, label: usize) -> Result<Model> {
    if norm == Norm::LinfL1 && model.output_dim() != 1 {
        model.select_output(label)
    } else {
        Ok(model.clone())
    }
}

struct MethodContext {
    label: usize,
    samples: usize,
    seed: u64,
    pairs: bool,
    mclass: MultiplierClass,
    solver: SolverConfig,
}

/// One bound; the flag is false when a certificate was attempted and failed.
fn compute_method(model: &Model, token: &str, ctx: &MethodContext) -> Result<(BoundReport, bool)> {
    let (name, norm) = match token.strip_suffix("-linf") {
        Some(base) if base == "sample" || base == "fgl" => (base, Norm::LinfL1),
        _ => (token, Norm::L2),
    };
    let certified = |opts: CertifyOptions| -> Result<(BoundReport, bool)> {
        let c = certify(model, &opts)?;
        Ok((c.to_report(), c.is_certified()))
    };
    let base_opts = CertifyOptions { label: ctx.label, mclass: ctx.mclass, solver: ctx.solver.clone(), ..Default::default() };
    match BoundMethod::parse(name)? {
        BoundMethod::Mp => Ok((mp_bound(model)?, true)),
        BoundMethod::Sample => {
            let m = scalar_model(model, norm, ctx.label)?;
            let r = if ctx.pairs || !m.arch.is_explicit() {
                pair_ratio_lower_bound(&m, norm, ctx.samples, ctx.seed)?
            } else {
                sample_lower_bound(&m, norm, ctx.samples, ctx.seed)?
            };
            Ok((r, true))
        }
        BoundMethod::Fgl => Ok((fgl_bound(&scalar_model(model, norm, ctx.label)?, norm)?, true)),
        BoundMethod::NsrL2 => certified(base_opts),
        BoundMethod::NsrLinf => certified(CertifyOptions { norm: Norm::LinfL1, ..base_opts }),
        BoundMethod::NormEq => {
            let m = scalar_model(model, Norm::LinfL1, ctx.label)?;
            let c = certify(&m, &base_opts)?;
            if !c.is_certified() {
                let mut r = c.to_report();
                r.method = BoundMethod::NormEq;
                r.norm = Norm::LinfL1;
                return Ok((r, false));
            }
            let mut r = norm_eq_bound(c.bound, m.input_dim())?;
            r.runtime_seconds += c.runtime_seconds;
            Ok((r, true))
        }
        BoundMethod::Rr => {
            let c = certify_rr(model, &ctx.solver)?;
            Ok((c.to_report(), c.is_certified()))
        }
    }
}

fn cmd_bound(a: BoundArgs) -> Result<Executed> {
    let model = load_model(&a.model)?;
    let mut report = RunReport::new("bound", Some(&a.model), a.output.reproducible);
    let norm: Norm = a.norm.into();
    let token = match (a.method, norm) {
        (BoundMethodArg::Mp, _) => "mp",
        (BoundMethodArg::Sample, Norm::L2) => "sample",
        (BoundMethodArg::Sample, Norm::LinfL1) => "sample-linf",
        (BoundMethodArg::Fgl, Norm::L2) => "fgl",
        (BoundMethodArg::Fgl, Norm::LinfL1) => "fgl-linf",
        (BoundMethodArg::NormEq, _) => "norm-eq",
        (BoundMethodArg::Rr, _) => "rr",
    };
    if norm == Norm::LinfL1 && matches!(a.method, BoundMethodArg::Mp | BoundMethodArg::Rr) {
        return Err(LipError::Value(format!("{token} bounds are ℓ2 bounds")));
    }
    if !model.arch.is_explicit() && a.method == BoundMethodArg::Sample && !a.pairs {
        return Err(LipError::Unsupported("implicit models need --pairs for sampling".into()));
    }
    report.option("method", json!(token));
    report.option("norm", json!(norm.name()));
    report.option("label", json!(a.label));
    report.option("samples", json!(a.samples));
    report.option("seed", json!(a.seed));
    report.option("pairs", json!(a.pairs));
    solver_options(&mut report, &a.solver);
    let ctx = MethodContext {
        label: a.label,
        samples: a.samples,
        seed: a.seed,
        pairs: a.pairs,
        mclass: MultiplierClass::Neuron2,
        solver: solver_config(&a.solver),
    };
    if ctx.solver.backend == Backend::SdpaExport {
        return Err(LipError::Unsupported("bound supports the internal solver only".into()));
    }
    let (r, ok) = compute_method(&model, token, &ctx)?;
    report.push_bound(&model_name(&a.model), &r, a.output.reproducible);
    Ok((report, ok, a.output))
}

fn cmd_compare(a: CompareArgs) -> Result<Executed> {
    let model = load_model(&a.model)?;
    let mut report = RunReport::new("compare", Some(&a.model), a.output.reproducible);
    let methods: Vec<String> = a.methods.iter().map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect();
    for m in &methods {
        let base = m.strip_suffix("-linf").filter(|b| *b == "sample" || *b == "fgl").unwrap_or(m);
        BoundMethod::parse(base)?;
    }
    report.option("methods", json!(methods));
    report.option("label", json!(a.label));
    report.option("samples", json!(a.samples));
    report.option("seed", json!(a.seed));
    report.option("mclass", json!(MultiplierClass::from(a.mclass).name()));
    solver_options(&mut report, &a.solver);
    let ctx = MethodContext {
        label: a.label,
        samples: a.samples,
        seed: a.seed,
        pairs: false,
        mclass: a.mclass.into(),
        solver: solver_config(&a.solver),
    };
    if ctx.solver.backend == Backend::SdpaExport {
        return Err(LipError::Unsupported("compare supports the internal solver only".into()));
    }
    let outcomes: Vec<_> = {
        use rayon::prelude::*;
        methods.par_iter().map(|m| compute_method(&model, m, &ctx)).collect()
    };
    let name = model_name(&a.model);
    let mut all_ok = true;
    for (m, outcome) in methods.iter().zip(outcomes) {
        match outcome {
            Ok((r, ok)) => {
                all_ok &= ok;
                report.push_bound(&name, &r, a.output.reproducible);
            }
            // Methods that do not apply to this model are reported without a value.
            Err(e @ (LipError::TooLarge(_) | LipError::Unsupported(_))) => {
                let (base, norm) = match m.strip_suffix("-linf") {
                    Some(b) => (b, Norm::LinfL1),
                    None if m == "nsr-linf" || m == "norm-eq" => (m.as_str(), Norm::LinfL1),
                    None => (m.as_str(), Norm::L2),
                };
                let mut r = BoundReport::new(BoundMethod::parse(base)?, norm, f64::NAN, std::time::Instant::now())
                    .with("error", json!(e.to_string()));
                r.runtime_seconds = 0.0;
                report.push_bound(&name, &r, a.output.reproducible);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((report, all_ok, a.output))
}

fn cmd_qc(a: QcArgs) -> Result<Executed> {
    let mut report = RunReport::new("qc-check", None, a.output.reproducible);
    let ng = a.group_size.unwrap_or(2);
    if a.groups == 0 {
        return Err(LipError::Value("--groups must be positive".into()));
    }
    let spec = match a.activation {
        ActivationArg::Maxmin => ActivationSpec::maxmin(),
        ActivationArg::Groupsort => ActivationSpec::groupsort(ng),
        ActivationArg::Fullsort => ActivationSpec::fullsort(ng * a.groups),
        ActivationArg::Relu => ActivationSpec::relu(),
        ActivationArg::Householder => {
            let v = a.v.clone().ok_or_else(|| LipError::Value("householder needs --v".into()))?;
            ActivationSpec::householder(DVector::from_vec(v))?
        }
    };
    let (group_size, groups) = match spec.kind {
        ActivationKind::FullSort => (spec.group_size, 1),
        ActivationKind::Relu => (ng, a.groups),
        _ => (spec.group_size, a.groups),
    };
    report.option("activation", json!(format!("{:?}", spec.kind).to_lowercase()));
    report.option("group_size", json!(group_size));
    report.option("groups", json!(groups));
    report.option("trials", json!(a.trials));
    report.option("seed", json!(a.seed));
    let sample = if spec.kind == ActivationKind::Relu {
        // Negative control: the sum-preservation constraint of sorting groups.
        let mut params = MultiplierParams::zeros(QcKind::GroupSort, groups, group_size);
        params.gamma.fill(1.0);
        verify_qc_sample(&spec, &params, a.trials, a.seed)?
    } else {
        let kind = QcKind::for_activation(&spec)?;
        verify_qc_random(&spec, &kind, groups, a.trials, a.seed)?
    };
    let passed = sample.min_value >= -QC_TOL;
    report.results.push(json!({
        "min_value": sample.min_value,
        "passed": passed,
        "tolerance": QC_TOL,
        "trials": sample.trials,
        "witness": {
            "x": sample.witness.0.iter().copied().collect::<Vec<f64>>(),
            "y": sample.witness.1.iter().copied().collect::<Vec<f64>>(),
        },
    }));
    Ok((report, passed, a.output))
}

fn cmd_deq(a: DeqArgs) -> Result<Executed> {
    let model = load_model(&a.model)?;
    if model.arch != Architecture::Deq {
        return Err(LipError::Unsupported(format!("expected a deq model, got {:?}", model.arch)));
    }
    let mut report = RunReport::new("deq", Some(&a.model), a.output.reproducible);
    report.option("check", json!(match a.check {
        DeqCheck::Wellposed => "wellposed",
        DeqCheck::Lipschitz => "lipschitz",
    }));
    report.option("waive_wellposedness", json!(a.waive_wellposedness));
    solver_options(&mut report, &a.solver);
    let config = solver_config(&a.solver);
    if config.backend == Backend::SdpaExport {
        let p = match a.check {
            DeqCheck::Wellposed => crate::assembly::assemble_deq_wellposed(&model)?,
            DeqCheck::Lipschitz => crate::assembly::assemble_deq_lipschitz(&model, crate::assembly::WellPosedness::Waived)?,
        };
        export_segments(&mut report, vec![Segment::Sdp(p)], &a.solver)?;
        return Ok((report, true, a.output));
    }
    let name = model_name(&a.model);
    let wellposed_json = |c: &crate::certify::Certificate, repro: bool| {
        let mut v = c.to_report().to_json(repro);
        v["method"] = json!("deq-wellposed");
        v
    };
    match a.check {
        DeqCheck::Wellposed => {
            let c = certify_deq_wellposed(&model, &config)?;
            report.results.push(wellposed_json(&c, a.output.reproducible));
            Ok((report, c.is_certified(), a.output))
        }
        DeqCheck::Lipschitz => match certify_deq(&model, a.waive_wellposedness, &config) {
            Ok((pre, c)) => {
                if let Some(pre) = &pre {
                    report.results.push(wellposed_json(pre, a.output.reproducible));
                }
                report.push_bound(&name, &c.to_report(), a.output.reproducible);
                Ok((report, c.is_certified(), a.output))
            }
            Err(LipError::Precondition(msg)) => {
                let c = certify_deq_wellposed(&model, &config)?;
                let mut v = wellposed_json(&c, a.output.reproducible);
                v["error"] = json!(msg);
                report.results.push(v);
                Ok((report, false, a.output))
            }
            Err(e) => Err(e),
        },
    }
}

fn cmd_node(a: NodeArgs) -> Result<Executed> {
    let model = load_model(&a.model)?;
    if model.arch != Architecture::NeuralOde {
        return Err(LipError::Unsupported(format!("expected a neural ODE model, got {:?}", model.arch)));
    }
    let mut report = RunReport::new("node", Some(&a.model), a.output.reproducible);
    solver_options(&mut report, &a.solver);
    let opts = CertifyOptions { solver: solver_config(&a.solver), ..Default::default() };
    if opts.solver.backend == Backend::SdpaExport {
        let (_, segments) = certification_segments(&model, &opts)?;
        export_segments(&mut report, segments, &a.solver)?;
        return Ok((report, true, a.output));
    }
    let c = certify(&model, &opts)?;
    report.push_bound(&model_name(&a.model), &c.to_report(), a.output.reproducible);
    Ok((report, c.is_certified(), a.output))
}
