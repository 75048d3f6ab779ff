//! `bias-audit` command line: dataset preparation, experiment runs, review
//! sessions and report rendering.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bias_audit::dataset::{export_dataset, generate_synthetic_dataset, import_dataset, DatasetManifest};
use bias_audit::experiment::{
    render_tables, resume_experiment, run_experiment, session_dirs, DatasetSource, ExperimentConfig,
    ResultsStore, RunSummary, Stage,
};
use bias_audit::seed::derive_seed;
use bias_audit::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "bias-audit", version, about = "Audit image classifiers for attribute bias")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Run every stage for every ratio into a new results store.
    Run(RunArgs),
    /// Continue an interrupted or waiting run.
    Resume(ResumeArgs),
    /// Human review of explanations.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Re-render the report tables of a results store and print them.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write the synthetic dataset a run with the same seed and config uses.
    Gen(GenArgs),
    /// Validate a manifest-described dataset and print its subgroup counts.
    Import(ImportArgs),
}

#[derive(Subcommand)]
enum AnnotateCommand {
    /// Serve review sessions over HTTP, optionally with a static UI.
    Serve(ServeArgs),
}

/// Command-line overrides of config keys.
#[derive(Args, Default)]
struct Overrides {
    /// Set any config key, e.g. `--set gradcam.tau=0.6`; values are TOML
    /// literals, bare words are read as strings. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// experiment.ratios
    #[arg(long, value_delimiter = ',', value_name = "A:B,...")]
    ratios: Vec<String>,
    /// experiment.judging
    #[arg(long, value_name = "auto|human")]
    judging: Option<String>,
    /// experiment.parallel
    #[arg(long)]
    parallel: Option<bool>,
    /// dataset.audited
    #[arg(long, value_delimiter = ',', value_name = "ATTR,...")]
    audited: Vec<String>,
    /// tcav.enabled
    #[arg(long)]
    tcav: Option<bool>,
    /// annotation.enabled
    #[arg(long)]
    annotation: Option<bool>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// experiment.seed
    #[arg(long)]
    seed: u64,
    /// experiment.out
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ResumeArgs {
    /// Results store to continue.
    #[arg(long)]
    out: PathBuf,
    /// Config to check against the stored one; any difference is refused.
    #[arg(long)]
    config: Option<PathBuf>,
    /// experiment.seed of the checked config.
    #[arg(long, requires = "config")]
    seed: Option<u64>,
    /// Stop after this stage (split, train, evaluate, explain, judge, tcav, report).
    #[arg(long)]
    until: Option<Stage>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GenArgs {
    /// Directory receiving manifest.json, images/ and masks/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// experiment.seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ImportArgs {
    /// Directory image and mask paths resolve against.
    #[arg(long)]
    root: PathBuf,
    /// Manifest file, relative to `--root` unless absolute.
    #[arg(long, default_value = "manifest.json")]
    manifest: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Serve every session of this results store.
    #[arg(long, required_unless_present = "session")]
    store: Option<PathBuf>,
    /// Serve this session directory (repeatable).
    #[arg(long)]
    session: Vec<PathBuf>,
    /// Address to listen on; defaults to annotation.bind of the store.
    #[arg(long)]
    bind: Option<String>,
    /// Static review UI to serve next to the API.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Configuration problems exit with 2; everything else is a stage failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::ConfigChanged(_) | Error::Validation(_) | Error::Store(_))
        ) || matches!(
            cause.downcast_ref::<bias_audit_server::ServerError>(),
            Some(bias_audit_server::ServerError::DuplicateSession(_))
        )
    });
    if config {
        EXIT_CONFIG
    } else {
        EXIT_STAGE
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Dataset(DatasetCommand::Gen(args)) => dataset_gen(args),
        Command::Dataset(DatasetCommand::Import(args)) => dataset_import(args),
        Command::Run(args) => {
            let config = load_config(Some(&args.config), Some(args.seed), Some(&args.out), &args.overrides)?;
            let (store, summary) = run_experiment(&config)?;
            Ok(conclude(&store, &summary))
        }
        Command::Resume(args) => {
            let config = match &args.config {
                Some(path) => Some(load_config(Some(path), args.seed, Some(&args.out), &args.overrides)?),
                None => None,
            };
            let (store, summary) = resume_experiment(&args.out, config.as_ref(), args.until)?;
            Ok(conclude(&store, &summary))
        }
        Command::Annotate(AnnotateCommand::Serve(args)) => annotate_serve(args),
        Command::Report(args) => {
            let store = ResultsStore::open(&args.out)?;
            for path in render_tables(&store)? {
                if path.extension().is_some_and(|e| e == "md") {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    println!("{text}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Prints the run outcome; failed stages exit with 3, ratios waiting for
/// human verdicts do not.
fn conclude(store: &ResultsStore, summary: &RunSummary) -> ExitCode {
    let root = store.root().display();
    if !summary.completed.is_empty() {
        println!("completed: {}", summary.completed.join(", "));
    }
    if !summary.pending.is_empty() {
        println!("pending: {}", summary.pending.join(", "));
        if !session_dirs(store).is_empty() {
            println!("judge them with `bias-audit annotate serve --store {root}`, then `bias-audit resume --out {root}`");
        }
    }
    for f in &summary.failures {
        eprintln!("failed: ratio {} at stage {}: {}", f.ratio, f.stage, f.error);
    }
    println!("reports: {}", store.root().join(bias_audit::experiment::REPORTS_DIR).display());
    if summary.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_STAGE)
    }
}

fn dataset_gen(args: GenArgs) -> Result<ExitCode> {
    let config = load_config(args.config.as_deref(), Some(args.seed), None, &args.overrides)?;
    if config.dataset.source != DatasetSource::Synthetic {
        return Err(Error::Config("dataset gen needs dataset.source = \"synthetic\"".into()).into());
    }
    if args.out.join("manifest.json").exists() {
        return Err(Error::Store(format!("{} already holds a dataset", args.out.display())).into());
    }
    let mut synthetic = config.dataset.synthetic.clone();
    synthetic.seed = derive_seed(config.experiment.seed, "global", "dataset");
    let manifest = generate_synthetic_dataset(&synthetic)?;
    let path = export_dataset(&manifest, &args.out)?;
    println!("manifest: {}", path.display());
    print_counts(&manifest);
    Ok(ExitCode::SUCCESS)
}

fn dataset_import(args: ImportArgs) -> Result<ExitCode> {
    let manifest = import_dataset(&args.root, &args.root.join(&args.manifest))?;
    print_counts(&manifest);
    Ok(ExitCode::SUCCESS)
}

fn print_counts(manifest: &DatasetManifest) {
    println!("samples: {}", manifest.samples.len());
    for (subgroup, n) in manifest.subgroup_counts() {
        println!("  {}: {n}", manifest.subgroup_label(&subgroup));
    }
}

fn annotate_serve(args: ServeArgs) -> Result<ExitCode> {
    let mut dirs = Vec::new();
    let mut bind = args.bind;
    if let Some(root) = &args.store {
        let store = ResultsStore::open(root)?;
        dirs.extend(session_dirs(&store));
        bind = bind.or_else(|| Some(store.config().annotation.bind.clone()));
    }
    dirs.extend(args.session);
    if dirs.is_empty() {
        return Err(Error::Config("no review sessions to serve; run with experiment.judging = \"human\" first".into()).into());
    }
    let bind = bind.unwrap_or_else(|| bias_audit::experiment::AnnotationSection::default().bind);
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| Error::Config(format!("invalid bind address {bind:?}: {e}")))?;
    let state = bias_audit_server::AppState::open(&dirs)?;
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(bias_audit_server::serve(addr, state, args.ui.as_deref()))?;
    Ok(ExitCode::SUCCESS)
}

/// Reads the config file (or the defaults), applies the command-line
/// overrides key by key, then validates the result.
fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    overrides: &Overrides,
) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
    for (key, value) in override_pairs(seed, out, overrides)? {
        set_key(&mut table, &key, value)?;
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

fn override_pairs(seed: Option<u64>, out: Option<&Path>, o: &Overrides) -> Result<Vec<(String, toml::Value)>> {
    use toml::Value;
    let strings = |v: &[String]| Value::Array(v.iter().cloned().map(Value::String).collect());
    let mut pairs = Vec::new();
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} exceeds the TOML integer range")))?;
        pairs.push(("experiment.seed".to_string(), Value::Integer(seed)));
    }
    if let Some(out) = out {
        pairs.push(("experiment.out".to_string(), Value::String(out.display().to_string())));
    }
    if !o.ratios.is_empty() {
        pairs.push(("experiment.ratios".to_string(), strings(&o.ratios)));
    }
    if let Some(j) = &o.judging {
        pairs.push(("experiment.judging".to_string(), Value::String(j.clone())));
    }
    if let Some(p) = o.parallel {
        pairs.push(("experiment.parallel".to_string(), Value::Boolean(p)));
    }
    if !o.audited.is_empty() {
        pairs.push(("dataset.audited".to_string(), strings(&o.audited)));
    }
    if let Some(t) = o.tcav {
        pairs.push(("tcav.enabled".to_string(), Value::Boolean(t)));
    }
    if let Some(a) = o.annotation {
        pairs.push(("annotation.enabled".to_string(), Value::Boolean(a)));
    }
    for raw in &o.set {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {raw:?}")))?;
        pairs.push((key.trim().to_string(), parse_value(value.trim())));
    }
    Ok(pairs)
}

/// A TOML literal when the text is one, otherwise the text as a string.
fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Error> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty config key {key:?}")))?;
    let mut current = table;
    for part in parts {
        current = current
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key {key:?}: {part} is not a table")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys_and_keep_types() {
        let overrides = Overrides {
            set: vec!["gradcam.tau=0.6".into(), "dataset.synthetic.per_subgroup=30".into()],
            ratios: vec!["1:0".into(), "0:1".into()],
            judging: Some("human".into()),
            annotation: Some(true),
            ..Overrides::default()
        };
        let c = load_config(None, Some(5), Some(Path::new("x")), &overrides).unwrap();
        assert_eq!(c.gradcam.tau, 0.6);
        assert_eq!(c.dataset.synthetic.per_subgroup, 30);
        assert_eq!(c.experiment.seed, 5);
        assert_eq!(c.experiment.out, PathBuf::from("x"));
        let labels: Vec<&str> = c.experiment.ratios.iter().map(|r| r.label()).collect();
        assert_eq!(labels, ["1:0", "0:1"]);
    }

    #[test]
    fn bare_words_are_strings_and_literals_are_typed() {
        assert_eq!(parse_value("auto"), toml::Value::String("auto".into()));
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("[1, 2]").as_array().unwrap().len(), 2);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let unknown = Overrides {
            set: vec!["gradcam.nope=1".into()],
            ..Overrides::default()
        };
        let e = load_config(None, None, None, &unknown).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let malformed = Overrides {
            set: vec!["gradcam".into()],
            ..Overrides::default()
        };
        assert_eq!(exit_code(&load_config(None, None, None, &malformed).unwrap_err()), EXIT_CONFIG);
        let scalar_parent = Overrides {
            set: vec!["experiment.seed.x=1".into()],
            ..Overrides::default()
        };
        assert_eq!(exit_code(&load_config(None, None, None, &scalar_parent).unwrap_err()), EXIT_CONFIG);
    }
}
