//! The `tensorize` command line: `compile`, `run`, `verify` and `dump-ecg`.
//!
//! Every failure writes `error: <code>: <detail>` as the first line on
//! stderr. Exit codes: 0 success, 1 verification failure, 2 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::convert::convert_model;
use crate::ecg::{build_ecg, validate_ecg, Ecg, HardwareProfile, InputSpec};
use crate::model::{parse_model, ModelBody, Scaler, TrainedModel, TreeNode};
use crate::oracle::{compare, oracle_predict, Divergence, REL_TOLERANCE};
use crate::passes::{dtype_rewriting, redundant_elimination, sparse_operator_replacing, PassReport, PassSet};
use crate::runtime::{execute, translate, KernelPlan};
use crate::tensor::io::{read_csv, write_csv};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("model: {0}")]
    Model(String),
    #[error("profile: {0}")]
    Profile(String),
    #[error("csv: {path}: {msg}")]
    Csv { path: String, msg: String },
    #[error("graph: {0}")]
    Graph(String),
    #[error("translate: {0}")]
    Translate(String),
    #[error("exec: {0}")]
    Exec(String),
    #[error(
        "diverged: {mismatches} of {compared} outputs outside tolerance (max_abs {max_abs:e}, max_rel {max_rel:e})"
    )]
    Diverged { mismatches: usize, compared: usize, max_abs: f64, max_rel: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tensorize", version, about = "Compile classical ML models into tensor graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Model JSON file.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Builtin profile name (cpu-avx2, plain) or a profile JSON file.
    #[arg(long, value_name = "NAME|PATH", default_value = "cpu-avx2")]
    profile: String,
    /// Comma-separated passes from re,dr,sor, or `none`.
    #[arg(long, value_name = "LIST", default_value = "re,dr,sor")]
    passes: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compile a model and print the kernel plan.
    Compile {
        #[command(flatten)]
        common: Common,
        /// Write the plan here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Print each pass report and the graph after each pass.
        #[arg(long)]
        dump_passes: bool,
    },
    /// Compile and predict on a CSV matrix.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Write predictions here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Compare compiled predictions with the scalar reference.
    Verify {
        #[command(flatten)]
        common: Common,
        /// CSV inputs; without it, random rows are generated.
        #[arg(long, value_name = "PATH", conflicts_with = "random")]
        input: Option<PathBuf>,
        /// Number of random rows, drawn uniformly from [-10, 10].
        #[arg(long, value_name = "N")]
        random: Option<usize>,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
    /// Print the graph before and after optimization.
    DumpEcg {
        #[command(flatten)]
        common: Common,
    },
}

/// A compiled model plus the intermediate artifacts.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub unoptimized: Ecg,
    pub optimized: Ecg,
    /// Graph after each enabled pass, paired with its report.
    pub stages: Vec<(PassReport, Ecg)>,
    pub plan: KernelPlan,
}

impl Compiled {
    pub fn reports(&self) -> Vec<&PassReport> {
        self.stages.iter().map(|(r, _)| r).collect()
    }
}

/// Lowers `m` into an ECG with float32 input.
pub fn build_model_graph(m: &TrainedModel) -> Result<Ecg, CliError> {
    let reps = convert_model(m);
    let g = build_ecg(&reps, InputSpec { n_features: m.n_features, dtype: DType::Float32 })
        .map_err(|e| CliError::Graph(e.to_string()))?;
    check(&g)?;
    Ok(g)
}

fn check(g: &Ecg) -> Result<(), CliError> {
    validate_ecg(g).map_err(|v| {
        let first = &v[0];
        CliError::Graph(format!("{} violation(s); first: {first}", v.len()))
    })
}

/// Convert, build, optimize, validate and translate.
pub fn compile_model(m: &TrainedModel, h: &HardwareProfile, passes: PassSet) -> Result<Compiled, CliError> {
    let unoptimized = build_model_graph(m)?;
    let mut g = unoptimized.clone();
    let mut stages = Vec::new();
    if passes.re {
        let (next, r) = redundant_elimination(&g);
        stages.push((r, next.clone()));
        g = next;
    }
    if passes.dr {
        let (next, r) = dtype_rewriting(&g, h);
        stages.push((r, next.clone()));
        g = next;
    }
    if passes.sor {
        let (next, r) = sparse_operator_replacing(&g, h);
        stages.push((r, next.clone()));
        g = next;
    }
    check(&g)?;
    let plan = translate(&g).map_err(|e| CliError::Translate(e.to_string()))?;
    Ok(Compiled { unoptimized, optimized: g, stages, plan })
}

/// Rows that put one feature exactly on a split threshold, starting from a
/// random row. Trees contribute every (feature, threshold) pair, binarizers
/// their threshold on every feature. At most `cap` rows.
pub fn boundary_rows(m: &TrainedModel, rng: &mut impl Rng, cap: usize) -> Vec<f32> {
    let mut pairs: Vec<(usize, f32)> = Vec::new();
    let trees = match &m.body {
        ModelBody::DecisionTree(t) => vec![&t.tree],
        ModelBody::Forest(f) => f.trees.iter().collect(),
        _ => vec![],
    };
    for t in trees {
        for n in &t.nodes {
            if let TreeNode::Internal { feature, threshold, .. } = n {
                pairs.push((*feature, *threshold));
            }
        }
    }
    if let ModelBody::Scaler(Scaler::Binarizer { threshold }) = &m.body {
        pairs.extend((0..m.n_features).map(|f| (f, *threshold)));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.dedup_by(|a, b| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
    pairs.truncate(cap);
    let mut out = Vec::with_capacity(pairs.len() * m.n_features);
    for (f, thr) in pairs {
        let start = out.len();
        out.extend((0..m.n_features).map(|_| rng.gen_range(-10.0f32..=10.0)));
        out[start + f] = thr;
    }
    out
}

/// `n` uniform rows in [-10, 10] followed by the boundary rows.
pub fn verification_inputs(m: &TrainedModel, n: usize, seed: u64) -> (Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..n * m.n_features).map(|_| rng.gen_range(-10.0f32..=10.0)).collect();
    let boundary = boundary_rows(m, &mut rng, 4096);
    let extra = boundary.len().checked_div(m.n_features).unwrap_or(0);
    v.extend(boundary);
    (Tensor::from_f32(&[n + extra, m.n_features], v).expect("row-major buffer"), extra)
}

/// Runs the compiled plan and the oracle on `x`.
pub fn verify_model(m: &TrainedModel, c: &Compiled, x: &Tensor) -> Result<Divergence, CliError> {
    let got = execute(&c.plan, x).map_err(|e| CliError::Exec(e.to_string()))?;
    let want = oracle_predict(m, x).map_err(|e| CliError::Exec(e.to_string()))?;
    Ok(compare(&want, &got))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.display().to_string(), msg: e.to_string() })
}

fn load(common: &Common) -> Result<(TrainedModel, HardwareProfile, PassSet), CliError> {
    let passes = PassSet::parse(&common.passes).map_err(CliError::Usage)?;
    let profile = HardwareProfile::resolve(&common.profile).map_err(|e| CliError::Profile(e.to_string()))?;
    let model = parse_model(&read_text(&common.model)?).map_err(|e| CliError::Model(e.to_string()))?;
    Ok((model, profile, passes))
}

fn write_to(path: &Option<PathBuf>, out: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::Io { path: p.display().to_string(), msg: e.to_string() }),
        None => out.write_all(bytes).map_err(|e| CliError::Io { path: "<stdout>".into(), msg: e.to_string() }),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Compile { common, output, dump_passes } => {
            let (m, h, passes) = load(&common)?;
            let c = compile_model(&m, &h, passes)?;
            let mut text = String::new();
            if dump_passes {
                for (r, g) in &c.stages {
                    text.push_str(&format!("{r}\n{}\n", g.dump()));
                }
            } else {
                for r in c.reports() {
                    text.push_str(&format!("{r}\n"));
                }
            }
            text.push_str(&c.plan.dump());
            write_to(&output, out, text.as_bytes())
        }
        Command::Run { common, input, output } => {
            let (m, h, passes) = load(&common)?;
            let c = compile_model(&m, &h, passes)?;
            let file = fs::File::open(&input)
                .map_err(|e| CliError::Io { path: input.display().to_string(), msg: e.to_string() })?;
            let x = read_csv(file, Some(m.n_features))
                .map_err(|e| CliError::Csv { path: input.display().to_string(), msg: e.to_string() })?;
            let y = execute(&c.plan, &x).map_err(|e| CliError::Exec(e.to_string()))?;
            let mut buf = Vec::new();
            write_csv(&mut buf, &y).map_err(|e| CliError::Exec(e.to_string()))?;
            write_to(&output, out, &buf)
        }
        Command::Verify { common, input, random, seed } => {
            let (m, h, passes) = load(&common)?;
            let c = compile_model(&m, &h, passes)?;
            let (x, source) = match input {
                Some(p) => {
                    let file = fs::File::open(&p)
                        .map_err(|e| CliError::Io { path: p.display().to_string(), msg: e.to_string() })?;
                    let x = read_csv(file, Some(m.n_features))
                        .map_err(|e| CliError::Csv { path: p.display().to_string(), msg: e.to_string() })?;
                    let rows = x.shape()[0];
                    (x, format!("{rows} from {}", p.display()))
                }
                None => {
                    let n = random.unwrap_or(1000);
                    let (x, extra) = verification_inputs(&m, n, seed);
                    (x, format!("{n} random (seed {seed}) + {extra} boundary"))
                }
            };
            let d = verify_model(&m, &c, &x)?;
            let report = format!(
                "model: {} ({} features)\npasses: {passes}\nprofile: {}\nrows: {source}\nmax_abs: {:e}\nmax_rel: {:e}\ntolerance: {REL_TOLERANCE:e} relative (class ids exact)\nmismatches: {}/{}\nresult: {}\n",
                m.kind.name(),
                m.n_features,
                h.name,
                d.max_abs,
                d.max_rel,
                d.mismatches,
                d.compared,
                if d.passed() { "PASS" } else { "FAIL" },
            );
            write_to(&None, out, report.as_bytes())?;
            if d.passed() {
                Ok(())
            } else {
                Err(CliError::Diverged {
                    mismatches: d.mismatches,
                    compared: d.compared,
                    max_abs: d.max_abs,
                    max_rel: d.max_rel,
                })
            }
        }
        Command::DumpEcg { common } => {
            let (m, h, passes) = load(&common)?;
            let c = compile_model(&m, &h, passes)?;
            let text = format!(
                "# before ({} nodes)\n{}\n# after {passes} ({} nodes)\n{}",
                c.unoptimized.len(),
                c.unoptimized.dump(),
                c.optimized.len(),
                c.optimized.dump()
            );
            write_to(&None, out, text.as_bytes())
        }
    }
}

/// Entry point; `argv[0]` is the program name.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error: usage: {first}");
            for line in rendered.lines().skip(1) {
                let _ = writeln!(err, "{line}");
            }
            return 2;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
