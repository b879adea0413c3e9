//! Command-line front end: JSON config file plus flag overrides, one
//! subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a
//! configuration error (unreadable config, unknown role, bad knobs).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::backend::{Backend, BackendRef, RetryPolicy};
use crate::difficulty::DifficultyConfig;
use crate::distill;
use crate::domain::{Question, Roles, RunConfig};
use crate::pipeline::{subsample, Pipeline};
use crate::promptkit::TemplateSet;
use crate::store::{self, Method, RecordStore, RunRecord};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration: exit code 2.
    Config(String),
    /// Runtime failure: exit code 1.
    Run(anyhow::Error),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for CliError {
    fn from(err: E) -> Self {
        CliError::Run(err.into())
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "qmtot", about = "Tree-of-thoughts medical QA benchmark harness")]
pub struct Cli {
    /// Path to the JSON config file.
    #[arg(long, global = true, default_value = "qmtot.json")]
    pub config: PathBuf,
    /// Dataset to read (raw ingest format); defaults to the ingested
    /// dataset in the store.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Run identifier; defaults to the method name.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Questions processed concurrently.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Weight on the reasoning term of the fused score.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub max_depth: Option<usize>,
    #[arg(long, global = true)]
    pub branching: Option<usize>,
    #[arg(long, global = true)]
    pub max_chains: Option<usize>,
    #[arg(long, global = true)]
    pub cot_samples: Option<usize>,
    /// Run on a seeded random subset of this many questions.
    #[arg(long, global = true)]
    pub subset: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub subset_seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and normalize a dataset into the store.
    Ingest,
    /// Single-sample chain-of-thought baseline.
    RunCot,
    /// Self-consistency (majority vote) baseline.
    RunCotsc,
    /// Tree-of-thoughts with majority vote over collected chains.
    RunTot,
    /// Full pipeline: tree, dual scoring, agreement-or-judge selection.
    RunQmtot,
    /// Band every question easy/medium/hard by measured CoT accuracy.
    Classify,
    /// Reflect graded chains and export DPO preference pairs.
    Distill,
    /// Aggregate run records into accuracy/difficulty/cost tables.
    Report,
    /// Re-execute a recorded run and verify byte-identical output.
    Replay,
}

fn default_max_inflight() -> usize {
    4
}

/// Role name -> backend name indirection, resolved against `backends`.
#[derive(Debug, Deserialize)]
pub struct RoleNames {
    pub generator: String,
    pub validator: String,
    pub scorer: String,
    pub judge: String,
    pub reflector: String,
}

/// Scalar run knobs; absent fields keep the built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunKnobs {
    pub alpha: Option<f64>,
    pub max_depth: Option<usize>,
    pub branching: Option<usize>,
    pub max_chains: Option<usize>,
    pub node_budget: Option<usize>,
    pub cot_samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub store_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub backends: BTreeMap<String, BackendRef>,
    pub roles: RoleNames,
    #[serde(default)]
    pub run: RunKnobs,
    #[serde(default)]
    pub difficulty: DifficultyConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
}

/// Everything a subcommand needs, built from config file + flags.
pub struct App {
    pub store_dir: PathBuf,
    pub backend: Backend,
    pub templates: TemplateSet,
    pub run_cfg: RunConfig,
    pub difficulty_cfg: DifficultyConfig,
    pub workers: usize,
}

impl App {
    pub fn from_cli(cli: &Cli) -> Result<Self, CliError> {
        let raw = fs::read_to_string(&cli.config)
            .map_err(|e| config_err(format!("config {}: {e}", cli.config.display())))?;
        let file: ConfigFile = serde_json::from_str(&raw)
            .map_err(|e| config_err(format!("config {}: {e}", cli.config.display())))?;

        let resolve = |name: &str| -> Result<BackendRef, CliError> {
            let backend = file
                .backends
                .get(name)
                .ok_or_else(|| config_err(format!("role points at unknown backend {name:?}")))?;
            backend
                .validate()
                .map_err(|e| config_err(format!("backend {name:?}: {e}")))?;
            Ok(backend.clone())
        };
        let roles = Roles {
            generator: resolve(&file.roles.generator)?,
            validator: resolve(&file.roles.validator)?,
            scorer: resolve(&file.roles.scorer)?,
            judge: resolve(&file.roles.judge)?,
            reflector: resolve(&file.roles.reflector)?,
        };

        let mut run_cfg = RunConfig {
            roles,
            ..RunConfig::default()
        };
        let knobs = &file.run;
        run_cfg.alpha = cli.alpha.or(knobs.alpha).unwrap_or(run_cfg.alpha);
        run_cfg.max_depth = cli.max_depth.or(knobs.max_depth).unwrap_or(run_cfg.max_depth);
        run_cfg.branching = cli.branching.or(knobs.branching).unwrap_or(run_cfg.branching);
        run_cfg.max_chains = cli
            .max_chains
            .or(knobs.max_chains)
            .unwrap_or(run_cfg.max_chains);
        run_cfg.node_budget = knobs.node_budget.unwrap_or(run_cfg.node_budget);
        run_cfg.cot_samples = cli
            .cot_samples
            .or(knobs.cot_samples)
            .unwrap_or(run_cfg.cot_samples);
        run_cfg.seed = cli.seed.or(knobs.seed).unwrap_or(run_cfg.seed);
        let violations = run_cfg.validate();
        if !violations.is_empty() {
            return Err(config_err(format!("run config: {}", violations.join("; "))));
        }

        let templates = match &file.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir)
                .map_err(|e| config_err(format!("templates: {e}")))?,
            None => TemplateSet::builtin(),
        };

        fs::create_dir_all(&file.store_dir)?;
        let backend = Backend::new(file.retry.clone(), file.cache_dir.clone(), file.max_inflight);

        Ok(App {
            store_dir: file.store_dir,
            backend,
            templates,
            run_cfg,
            difficulty_cfg: file.difficulty,
            workers: cli.workers.unwrap_or(1),
        })
    }

    pub fn record_store(&self) -> Result<RecordStore, CliError> {
        Ok(RecordStore::new(self.store_dir.join("runs"))?)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.store_dir.join("dataset.jsonl")
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(
            &self.backend,
            &self.templates,
            &self.run_cfg,
            self.difficulty_cfg,
        )
    }

    /// Questions for this invocation: the --dataset file (raw format) when
    /// given, else the previously ingested store copy; then the optional
    /// seeded subset.
    fn load_dataset(&self, cli: &Cli) -> Result<Vec<Question>, CliError> {
        let questions = match &cli.dataset {
            Some(path) => store::ingest_dataset(path)?,
            None => {
                let path = self.dataset_path();
                if !path.exists() {
                    return Err(config_err(format!(
                        "no dataset: pass --dataset or run `qmtot ingest` first ({} missing)",
                        path.display()
                    )));
                }
                store::load_questions(&path)?
            }
        };
        Ok(match cli.subset {
            Some(n) => subsample(&questions, n, cli.subset_seed),
            None => questions,
        })
    }
}

fn run_method(app: &App, cli: &Cli, method: Method) -> Result<(), CliError> {
    let questions = app.load_dataset(cli)?;
    let run_id = cli
        .run_id
        .clone()
        .unwrap_or_else(|| method.as_str().to_string());
    let store = app.record_store()?;
    let executed = app
        .pipeline()
        .run_dataset(&store, &questions, method, &run_id, app.workers)?;
    println!(
        "run {run_id}: {executed} question(s) executed, {} total on disk",
        store.load_records(&run_id)?.len()
    );
    Ok(())
}

fn cmd_ingest(app: &App, cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("ingest requires --dataset"))?;
    let questions = store::ingest_dataset(path)?;
    store::write_questions(&questions, &app.dataset_path())?;
    println!(
        "ingested {} question(s) into {}",
        questions.len(),
        app.dataset_path().display()
    );
    Ok(())
}

fn cmd_classify(app: &App, cli: &Cli) -> Result<(), CliError> {
    let questions = app.load_dataset(cli)?;
    let rows = app
        .pipeline()
        .classify_dataset(&questions, app.run_cfg.cot_samples)?;
    let path = app.store_dir.join("difficulty.jsonl");
    store::write_manifest(&rows, &path)?;
    let count = |level| rows.iter().filter(|r| r.level == level).count();
    println!(
        "classified {} question(s) -> {} ({} easy, {} medium, {} hard)",
        rows.len(),
        path.display(),
        count(crate::difficulty::Level::Easy),
        count(crate::difficulty::Level::Medium),
        count(crate::difficulty::Level::Hard),
    );
    Ok(())
}

fn cmd_distill(app: &App, cli: &Cli) -> Result<(), CliError> {
    let run_id = cli
        .run_id
        .as_ref()
        .ok_or_else(|| config_err("distill requires --run-id"))?;
    let questions = app.load_dataset(cli)?;
    let records = app.record_store()?.load_records(run_id)?;
    if records.is_empty() {
        return Err(config_err(format!("run {run_id:?} has no records")));
    }
    let pairs = app
        .pipeline()
        .distill_records(&questions, &records, app.run_cfg.seed)?;
    let path = app.store_dir.join("dpo.jsonl");
    let written = distill::export_dpo(&pairs, &path)?;
    println!("wrote {written} preference pair(s) to {}", path.display());
    Ok(())
}

fn cmd_report(app: &App, cli: &Cli) -> Result<(), CliError> {
    let store = app.record_store()?;
    let run_ids = match &cli.run_id {
        Some(id) => vec![id.clone()],
        None => store.run_ids()?,
    };
    let mut records: Vec<RunRecord> = Vec::new();
    for id in &run_ids {
        records.extend(store.load_records(id)?);
    }
    let manifest_path = app.store_dir.join("difficulty.jsonl");
    let manifest = if manifest_path.exists() {
        store::load_manifest(&manifest_path)?
    } else {
        Vec::new()
    };
    let report = store::build_report(&records, &manifest)?;
    fs::write(
        app.store_dir.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )
    ?;
    let text = store::render_report_text(&report);
    fs::write(app.store_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Re-runs a recorded run under its recorded config into a sibling file
/// and compares the two byte-for-byte.
fn cmd_replay(app: &App, cli: &Cli) -> Result<(), CliError> {
    let run_id = cli
        .run_id
        .as_ref()
        .ok_or_else(|| config_err("replay requires --run-id"))?;
    let store = app.record_store()?;
    let originals = store.load_records(run_id)?;
    let first = originals
        .first()
        .ok_or_else(|| config_err(format!("run {run_id:?} has no records")))?;
    let method = first.method;
    let run_cfg = first.config.clone();

    let questions = app.load_dataset(cli)?;
    let by_id: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let ordered: Vec<Question> = originals
        .iter()
        .map(|record| {
            by_id
                .get(record.question_id.as_str())
                .map(|q| (*q).clone())
                .ok_or_else(|| config_err(format!("question {} not in dataset", record.question_id)))
        })
        .collect::<Result<_, _>>()?;

    let replay_store = RecordStore::new(app.store_dir.join("replays"))?;
    let replay_path = replay_store.record_path(run_id);
    if replay_path.exists() {
        fs::remove_file(&replay_path)?;
    }
    let pipeline = Pipeline::new(
        &app.backend,
        &app.templates,
        &run_cfg,
        app.difficulty_cfg,
    );
    pipeline.run_dataset(&replay_store, &ordered, method, run_id, 1)?;

    let original_bytes = fs::read(store.record_path(run_id))?;
    let replay_bytes = fs::read(&replay_path)?;
    if original_bytes == replay_bytes {
        println!("replay of {run_id}: identical ({} bytes)", replay_bytes.len());
        Ok(())
    } else {
        Err(CliError::Run(anyhow::anyhow!(
            "replay of {run_id} diverged: {} vs {} bytes (see {})",
            original_bytes.len(),
            replay_bytes.len(),
            replay_path.display()
        )))
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let app = App::from_cli(cli)?;
    match cli.command {
        Command::Ingest => cmd_ingest(&app, cli),
        Command::RunCot => run_method(&app, cli, Method::Cot),
        Command::RunCotsc => run_method(&app, cli, Method::Cotsc),
        Command::RunTot => run_method(&app, cli, Method::Tot),
        Command::RunQmtot => run_method(&app, cli, Method::Qmtot),
        Command::Classify => cmd_classify(&app, cli),
        Command::Distill => cmd_distill(&app, cli),
        Command::Report => cmd_report(&app, cli),
        Command::Replay => cmd_replay(&app, cli),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// Writes a ready-to-edit config skeleton; used by docs and tests.
pub fn example_config(store_dir: &Path, fixture: &Path) -> String {
    serde_json::json!({
        "store_dir": store_dir,
        "cache_dir": null,
        "backends": {
            "main": { "kind": "scripted", "base_url": fixture, "model": "scripted" }
        },
        "roles": {
            "generator": "main",
            "validator": "main",
            "scorer": "main",
            "judge": "main",
            "reflector": "main"
        },
        "run": { "cot_samples": 3 },
        "max_inflight": 2
    })
    .to_string()
}
