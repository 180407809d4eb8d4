//! `lamp` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a verification suite finds a
//! counterexample, 2 on invalid input (the error name is printed on stderr).

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lamp_core::allocation::{self, PruneReport};
use lamp_core::distortion::{self, DenseNet, DistortionError};
use lamp_core::model_io::{self, write_atomic, BundleError, MaskBundle, ModelBundle};
use lamp_core::scoring::{self, ScoreDump, ScoreError, ScoreKind};
use lamp_core::verify::{self, Suite};
use lamp_core::{AllocError, Scheme, SparsityBudget};

#[derive(Debug, Parser)]
#[command(name = "lamp", version, about = "Layer-adaptive magnitude pruning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump per-layer LAMP or squared-magnitude scores.
    Score(ScoreArgs),
    /// Allocate a global budget over layers and write the mask and report.
    Prune(PruneArgs),
    /// Prune a fraction of the survivors per round, chaining masks.
    Iterate(IterateArgs),
    /// Run a randomized property suite.
    Verify(VerifyArgs),
    /// Zero masked-out weights and write the pruned bundle.
    Apply(ApplyArgs),
    /// Layerwise survival of a bundle under a mask.
    Report(ReportArgs),
    /// Target survival per round of an iterative schedule.
    Schedule(ScheduleArgs),
    /// Measure output distortion of pruning one layer against the peeling bound.
    Peel(PeelArgs),
    /// Greedy one-at-a-time removal trace with full rescoring.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Lamp,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Lamp,
    Global,
    Uniform,
    UniformPlus,
    Erk,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Lamp => Scheme::Lamp,
            SchemeArg::Global => Scheme::Global,
            SchemeArg::Uniform => Scheme::Uniform,
            SchemeArg::UniformPlus => Scheme::UniformPlus,
            SchemeArg::Erk => Scheme::Erk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Monotonicity,
    GreedyEquivalence,
    FrobeniusOracle,
    PeelingBound,
    ErkReduction,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Monotonicity => Suite::Monotonicity,
            SuiteArg::GreedyEquivalence => Suite::GreedyEquivalence,
            SuiteArg::FrobeniusOracle => Suite::FrobeniusOracle,
            SuiteArg::PeelingBound => Suite::PeelingBound,
            SuiteArg::ErkReduction => Suite::ErkReduction,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Tsv,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Bundle directory or its manifest.json.
    pub bundle: PathBuf,
    /// Score only the survivors of this mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Lamp)]
    pub kind: KindArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["survival", "kappa"])))]
pub struct PruneArgs {
    pub bundle: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Fraction of prunable weights to keep, in (0, 1].
    #[arg(long)]
    pub survival: Option<f64>,
    /// Number of prunable weights to keep.
    #[arg(long)]
    pub kappa: Option<usize>,
    /// Only weights surviving this mask are candidates.
    #[arg(long)]
    pub mask_in: Option<PathBuf>,
    #[arg(long)]
    pub mask_out: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    pub bundle: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    #[arg(long)]
    pub rounds: usize,
    /// Fraction of surviving weights removed per round.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Summary file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    pub bundle: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Directory for the pruned bundle.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub bundle: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct PeelArgs {
    /// Fully-connected bundle; layers must compose into a net.
    pub bundle: PathBuf,
    /// Index of the pruned layer.
    #[arg(long)]
    pub layer: usize,
    /// Mask whose bits for `layer` are applied; other layers stay dense.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = verify::PEELING_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    pub bundle: PathBuf,
    /// Connections to remove.
    #[arg(long)]
    pub remove: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    /// Bad input or infeasible request; exit code 2.
    Input { name: &'static str, message: String },
    /// A property suite found a counterexample; exit code 1.
    Property(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input { .. } => 2,
            Failure::Property(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // Error messages already lead with their name.
            Failure::Input { name, message } if message.starts_with(name) => f.write_str(message),
            Failure::Input { name, message } => write!(f, "{name}: {message}"),
            Failure::Property(m) => write!(f, "property failure: {m}"),
        }
    }
}

macro_rules! input_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Input { name: e.name(), message: e.to_string() }
            }
        }
    )*};
}

input_failure!(BundleError, AllocError, ScoreError, DistortionError);

fn invalid(name: &'static str, message: impl Into<String>) -> Failure {
    Failure::Input {
        name,
        message: message.into(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => Ok(write_atomic(path, bytes)?),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(|e| invalid("IoError", e.to_string()))
        }
    }
}

fn render_report(report: &PruneReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => to_json(report),
        Format::Tsv => report.to_tsv().into_bytes(),
    }
}

fn load_optional_mask(
    path: Option<&Path>,
    bundle: &ModelBundle,
) -> Result<Option<MaskBundle>, Failure> {
    path.map(|p| model_io::load_mask_for(p, bundle))
        .transpose()
        .map_err(Failure::from)
}

fn cmd_score(args: &ScoreArgs) -> Result<(), Failure> {
    let bundle = model_io::load_bundle(&args.bundle)?;
    let mask = load_optional_mask(args.mask.as_deref(), &bundle)?;
    let kind = match args.kind {
        KindArg::Lamp => ScoreKind::Lamp,
        KindArg::Magnitude => ScoreKind::MagnitudeSq,
    };
    let scores = scoring::score_bundle(&bundle, mask.as_ref(), kind)?;
    emit(args.out.as_deref(), &to_json(&ScoreDump(&scores)))
}

fn cmd_prune(args: &PruneArgs) -> Result<(), Failure> {
    let bundle = model_io::load_bundle(&args.bundle)?;
    let mask_in = load_optional_mask(args.mask_in.as_deref(), &bundle)?;
    let total = bundle.prunable_total();
    let budget = match (args.survival, args.kappa) {
        (Some(p), None) => SparsityBudget::from_survival(p, total)?,
        (None, Some(k)) => SparsityBudget::from_kappa(k, total)?,
        _ => return Err(invalid("BadArguments", "give exactly one of --survival, --kappa")),
    };
    let (alloc, mask) = allocation::allocate(args.scheme.into(), &bundle, mask_in.as_ref(), budget)?;
    model_io::save_mask(&mask, &args.mask_out)?;
    let report = PruneReport::new(&alloc, allocation::survival_report(&bundle, &mask)?);
    emit(args.report.as_deref(), &render_report(&report, args.format))
}

#[derive(Debug, Serialize)]
struct RoundSummary {
    round: usize,
    target_survival: f64,
    kappa: usize,
    global_survival: f64,
    mask: String,
}

#[derive(Debug, Serialize)]
struct IterateSummary {
    scheme: Scheme,
    fraction: f64,
    total: usize,
    rounds: Vec<RoundSummary>,
}

fn cmd_iterate(args: &IterateArgs) -> Result<(), Failure> {
    let schedule = allocation::make_schedule(args.rounds, args.fraction)?;
    let bundle = model_io::load_bundle(&args.bundle)?;
    if schedule.rounds.is_empty() {
        return Ok(());
    }
    let scheme: Scheme = args.scheme.into();
    let total = bundle.prunable_total();
    let mut mask = MaskBundle::all_ones(&bundle);
    let mut summary = IterateSummary {
        scheme,
        fraction: args.fraction,
        total,
        rounds: Vec::with_capacity(schedule.rounds.len()),
    };
    for (t, &target) in schedule.rounds.iter().enumerate() {
        let round = t + 1;
        let budget = SparsityBudget::from_survival(target, total)?;
        let (alloc, next) = allocation::allocate(scheme, &bundle, Some(&mask), budget)?;
        let dir_name = format!("round_{round:02}");
        let dir = args.out_dir.join(&dir_name);
        model_io::save_mask(&next, &dir)?;
        let report = PruneReport::new(&alloc, allocation::survival_report(&bundle, &next)?);
        let file = match args.format {
            Format::Json => "report.json",
            Format::Tsv => "report.tsv",
        };
        write_atomic(&dir.join(file), &render_report(&report, args.format))?;
        summary.rounds.push(RoundSummary {
            round,
            target_survival: target,
            kappa: budget.kappa,
            global_survival: report.global_survival,
            mask: dir_name,
        });
        mask = next;
    }
    write_atomic(&args.out_dir.join("summary.json"), &to_json(&summary))?;
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let outcome = verify::run_suite(args.suite.into(), args.seed, args.trials);
    emit(args.out.as_deref(), &to_json(&outcome))?;
    match outcome.counterexample {
        None => Ok(()),
        Some(c) => Err(Failure::Property(format!("{}: {c}", outcome.suite.as_str()))),
    }
}

fn cmd_apply(args: &ApplyArgs) -> Result<(), Failure> {
    let bundle = model_io::load_bundle(&args.bundle)?;
    let mask = model_io::load_mask_for(&args.mask, &bundle)?;
    let pruned = model_io::apply_mask(&bundle, &mask)?;
    Ok(model_io::save_bundle(&pruned, &args.out)?)
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let bundle = model_io::load_bundle(&args.bundle)?;
    let mask = model_io::load_mask_for(&args.mask, &bundle)?;
    let report = allocation::survival_report(&bundle, &mask)?;
    let bytes = match args.format {
        Format::Json => to_json(&report),
        Format::Tsv => {
            let mut out = String::from("name\tcount\tkept\tnonzero\trate\n");
            for l in &report.layers {
                out += &format!("{}\t{}\t{}\t{}\t{}\n", l.name, l.count, l.kept, l.nonzero, l.rate);
            }
            out.into_bytes()
        }
    };
    emit(args.out.as_deref(), &bytes)
}

fn cmd_schedule(args: &ScheduleArgs) -> Result<(), Failure> {
    let schedule = allocation::make_schedule(args.rounds, args.fraction)?;
    emit(None, &to_json(&schedule))
}

fn cmd_peel(args: &PeelArgs) -> Result<(), Failure> {
    let bundle = model_io::load_bundle(&args.bundle)?;
    let mask = model_io::load_mask_for(&args.mask, &bundle)?;
    let net = DenseNet::from_bundle(&bundle)?;
    if args.layer >= bundle.len() {
        return Err(invalid("DimMismatch", format!("no layer {}", args.layer)));
    }
    let report = distortion::peeling_bound_check(
        &net,
        args.layer,
        &mask.layer(args.layer).bits,
        args.samples,
        args.seed,
    )?;
    emit(args.out.as_deref(), &to_json(&report))?;
    if report.holds {
        Ok(())
    } else {
        Err(Failure::Property(format!("peeling bound violated: {report:?}")))
    }
}

fn cmd_trace(args: &TraceArgs) -> Result<(), Failure> {
    let bundle = model_io::load_bundle(&args.bundle)?;
    let trace = distortion::greedy_removal_oracle(&bundle, args.remove)?;
    emit(args.out.as_deref(), &to_json(&trace))
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Iterate(a) => cmd_iterate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Report(a) => cmd_report(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Peel(a) => cmd_peel(a),
        Command::Trace(a) => cmd_trace(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {failure}");
            failure.exit_code()
        }
    }
}
