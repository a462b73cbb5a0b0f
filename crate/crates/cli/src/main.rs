//! `ctrlsim`: run scenario configs and catalogued examples, emitting
//! plot-ready CSV, JSON or text.

mod ops;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctrlsim::canon::{self, CanonId};
use ctrlsim::config::{parse_config, parse_tau_grid, Operation, RunSpec};
use ctrlsim::Error;

/// Environment variable supplying the seed when neither the flag nor the
/// config sets one.
pub const SEED_ENV: &str = "CTRLSIM_SEED";

#[derive(Parser)]
#[command(name = "ctrlsim", version, about = "Error assessment by simulated control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an operation on a scenario file or catalogued example.
    Run(RunArgs),
    /// Print the resolved scenario and its validation results.
    Describe(SourceArgs),
    /// The catalogue of worked examples.
    Canon {
        #[command(subcommand)]
        command: CanonCommand,
    },
}

#[derive(Subcommand)]
enum CanonCommand {
    /// List catalogued examples.
    List,
    /// Run a catalogued example with its documented defaults.
    Run {
        id: String,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Scenario config file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Catalogued example id (see `canon list`).
    #[arg(long)]
    canon: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    opts: RunOpts,
}

#[derive(Args, Clone)]
struct RunOpts {
    /// Operation; defaults to the config's `op`.
    #[arg(long)]
    op: Option<Operation>,
    /// Number of controls (or replications, for tradeoff and eb).
    #[arg(long)]
    count: Option<u64>,
    /// Root seed; overrides the config and the CTRLSIM_SEED variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance grid for `band`: `lo:hi:step` or a comma list.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    tau_grid: Option<TauGrid>,
    /// Output file, written atomically; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; inferred from the `--out` extension, else text.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

/// A parsed `--tau-grid` value.
#[derive(Clone, Debug)]
struct TauGrid(Vec<f64>);

fn parse_grid(s: &str) -> Result<TauGrid, String> {
    parse_tau_grid(s).map(TauGrid)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Text,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config { .. } | Error::MissingKey(_) => (2, "config"),
            Error::InvalidScenario(_) | Error::Domain(_) | Error::Precondition(_) | Error::InsufficientResolution { .. } => {
                (3, "validation")
            }
            Error::EmptyRelevantSet { .. } => (4, "empty-relevant-set"),
            Error::Io(_) => (5, "io"),
        };
        Failure { code, kind, msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.msg.replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {}", f.kind, msg);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(args) => {
            let spec = load_source(&args.source)?;
            run(spec, &args.opts)
        }
        Command::Describe(source) => {
            let spec = load_source(&source)?;
            let text = spec.describe();
            print!("{text}");
            if spec.violations().is_empty() {
                Ok(())
            } else {
                Err(Error::InvalidScenario(spec.violations()).into())
            }
        }
        Command::Canon { command: CanonCommand::List } => {
            for id in canon::list() {
                println!("{:<20}{}", id.name(), id.summary());
            }
            Ok(())
        }
        Command::Canon { command: CanonCommand::Run { id, opts } } => {
            let spec = canon::load(id.parse::<CanonId>()?)?;
            run(spec, &opts)
        }
    }
}

fn load_source(source: &SourceArgs) -> Result<RunSpec, Failure> {
    match (&source.scenario, &source.canon) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
            Ok(parse_config(&text, path.parent())?)
        }
        (None, Some(id)) => Ok(canon::load(id.parse::<CanonId>()?)?),
        (None, None) => unreachable!("clap requires a source"),
    }
}

fn run(mut spec: RunSpec, opts: &RunOpts) -> Result<(), Failure> {
    let op = opts.op.or(spec.op).ok_or_else(|| Error::MissingKey("op".into()))?;
    if opts.count == Some(0) {
        return Err(Error::Domain("count must be at least 1".into()).into());
    }
    if let Some(c) = opts.count {
        spec.count = Some(c);
        if matches!(op, Operation::Tradeoff | Operation::EmpiricalBayes) {
            spec.replications = Some(c);
        }
    }
    if let Some(TauGrid(grid)) = &opts.tau_grid {
        spec.tau_grid = Some(grid.clone());
    }
    spec.seed = match (opts.seed, spec.seed) {
        (Some(s), _) => Some(s),
        (None, Some(s)) => Some(s),
        (None, None) => match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config {
                line: 0,
                msg: format!("{SEED_ENV} must be a non-negative integer, got `{v}`"),
            })?),
            Err(_) => None,
        },
    };
    let format = opts.format.unwrap_or_else(|| infer_format(opts.out.as_deref()));
    if let Some(v) = spec.violations().into_iter().next() {
        return Err(Error::InvalidScenario(vec![v]).into());
    }
    let artifact = match opts.threads {
        Some(0) => return Err(Error::Domain("threads must be at least 1".into()).into()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Io(format!("cannot start worker threads: {e}")))?;
            pool.install(|| ops::execute(&spec, op, format))?
        }
        None => ops::execute(&spec, op, format)?,
    };
    match &opts.out {
        Some(path) => write_atomically(path, artifact.as_bytes())?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(artifact.as_bytes()).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn infer_format(out: Option<&Path>) -> Format {
    match out.and_then(Path::extension).and_then(|e| e.to_str()) {
        Some("csv") => Format::Csv,
        Some("json") => Format::Json,
        _ => Format::Text,
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failure never leaves a partial artifact.
fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let io = |e: std::io::Error| Error::Io(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
