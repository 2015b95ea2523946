//! Workflows behind the `veloop` command: run, resume, report, diagnose and
//! simulate. Every command returns a [`CliError`] that maps onto the
//! process exit code.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use veloop::agents::{AgentRegistry, AgentSpec, Backend, PromptMode, PromptTemplates};
use veloop::diagnostics::{
    contingency_table, decouple_sweep, reflection_markdown, reflection_sweep, supervision_markdown, supervision_sweep,
    DiagnosticsError, Probe, SupervisionMode,
};
use veloop::digest::{canonical_json, sha256_hex};
use veloop::harness::{
    load_dataset, render, simulate_ensemble, stage_metrics, write_simulation, AnswerJudge, DatasetError, GradeError,
    MetricsError, ReportFormat, SimConfig, StageMetrics,
};
use veloop::pipeline::{Engine, EngineOptions, PipelineError, PipelineState, RunStore, StoreError};
use veloop::summary::EvidenceMatcher;
use veloop::{PipelineConfig, Problem};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Dataset(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(s) => s.into(),
            PipelineError::Config(c) => Self::Config(c.to_string()),
            PipelineError::NoProblems | PipelineError::DuplicateProblem(_) | PipelineError::ProblemMismatch(_) => {
                Self::Dataset(e.to_string())
            }
            other => Self::Io(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Grade(GradeError::JudgeRequired(_)) => Self::Config(e.to_string()),
            MetricsError::Grade(GradeError::MissingGroundTruth(_)) => Self::Dataset(e.to_string()),
            other => Self::Io(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        Self::Dataset(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradingConfig {
    #[serde(default)]
    pub matcher: EvidenceMatcher,
    /// Agent comparing free-form answers, both in the refine gate and when
    /// grading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_judge: Option<String>,
}

fn default_limit() -> usize {
    96
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Agent under test; defaults to the pipeline anchor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    /// Failed samples used by the supervision probe.
    #[serde(default = "default_limit")]
    pub supervision_limit: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { agent: None, supervision_limit: default_limit() }
    }
}

/// The declarative run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub agents: Vec<AgentSpec>,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub grading: GradingConfig,
    /// Directory of `<mode>.txt` prompt overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    /// `dotted.key=value` pairs; values parse as JSON, else as strings.
    pub set: Vec<String>,
}

impl Overrides {
    fn apply(&self, doc: &mut Value, seed_key: &str, parallelism_key: &str) -> Result<(), CliError> {
        if let Some(seed) = self.seed {
            set_path(doc, seed_key, serde_json::json!(seed))?;
        }
        if let Some(p) = self.parallelism {
            set_path(doc, parallelism_key, serde_json::json!(p))?;
        }
        for assignment in &self.set {
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(doc, key.trim(), value)?;
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| CliError::Config(format!("`{key}`: `{part}` is not an index")))?;
                let slot = items.get_mut(idx).ok_or_else(|| CliError::Config(format!("`{key}`: index {idx} out of range")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("`{key}`: `{part}` is not inside an object"))),
        };
    }
    Err(CliError::Config("empty --set key".into()))
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Loads, overrides and validates a config file. Relative paths inside
    /// it become absolute, resolved against the file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let mut doc = read_json(path)?;
        overrides.apply(&mut doc, "pipeline.seed", "pipeline.parallelism")?;
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::fs::canonicalize(&base).unwrap_or(base);
        for a in &mut cfg.agents {
            if let Some(f) = &a.fixture {
                a.fixture = Some(resolve(&base, f));
            }
        }
        if let Some(d) = &cfg.prompts_dir {
            cfg.prompts_dir = Some(resolve(&base, d));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for a in &self.agents {
            a.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        let known = |id: &str| self.agents.iter().any(|a| a.id == id);
        let mut required: Vec<(&str, &str)> = vec![("pipeline.anchor", &self.pipeline.anchor)];
        required.extend(self.pipeline.assistants.iter().map(|a| ("pipeline.assistants", a.as_str())));
        if let Some(j) = &self.grading.answer_judge {
            required.push(("grading.answer_judge", j));
        }
        if let EvidenceMatcher::Judge { agent } = &self.grading.matcher {
            required.push(("grading.matcher.agent", agent));
        }
        if let Some(a) = &self.diagnostics.agent {
            required.push(("diagnostics.agent", a));
        }
        for (field, id) in required {
            if !known(id) {
                return Err(CliError::Config(format!("`{field}` names undefined agent `{id}`")));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<AgentRegistry, CliError> {
        AgentRegistry::from_specs(&self.agents, Path::new(".")).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn templates(&self) -> Result<PromptTemplates, CliError> {
        match &self.prompts_dir {
            Some(dir) => PromptTemplates::with_overrides(dir).map_err(|e| CliError::Config(format!("prompts_dir: {e}"))),
            None => Ok(PromptTemplates::default()),
        }
    }

    fn engine_options(&self) -> Result<EngineOptions, CliError> {
        Ok(EngineOptions {
            matcher: self.grading.matcher.clone(),
            answer_judge: self.grading.answer_judge.clone(),
            templates: self.templates()?,
        })
    }

    fn uses_network(&self) -> bool {
        self.agents.iter().any(|a| a.backend == Backend::Remote)
    }
}

/// Provenance record written before the first agent call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub registry_sha256: String,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub version: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn dataset_text(problems: &[Problem]) -> String {
    problems.iter().map(|p| serde_json::to_string(p).expect("problem serializes") + "\n").collect()
}

impl RunManifest {
    pub fn new(run_id: &str, config: &RunConfig, problems: &[Problem]) -> Self {
        Self {
            run_id: run_id.to_string(),
            config_sha256: sha256_hex(canonical_json(config).expect("config serializes").as_bytes()),
            dataset_sha256: sha256_hex(dataset_text(problems).as_bytes()),
            registry_sha256: sha256_hex(canonical_json(&config.agents).expect("agents serialize").as_bytes()),
            started_at: now(),
            finished_at: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Default run id: a digest of the configuration and dataset.
    pub fn default_run_id(config: &RunConfig, problems: &[Problem]) -> String {
        let m = Self::new("", config, problems);
        format!("run-{}", &sha256_hex(format!("{}{}", m.config_sha256, m.dataset_sha256).as_bytes())[..12])
    }
}

fn load_problems(path: &Path) -> Result<Vec<Problem>, CliError> {
    Ok(load_dataset(path)?)
}

fn judge<'a>(config: &'a RunConfig, registry: &'a AgentRegistry) -> Option<AnswerJudge<'a>> {
    config
        .grading
        .answer_judge
        .as_deref()
        .map(|agent| AnswerJudge { registry, agent, seed: config.pipeline.seed })
}

/// Writes metrics and the three report formats for a finished state.
fn write_reports(
    store: &RunStore,
    config: &RunConfig,
    problems: &[Problem],
    state: &PipelineState,
    registry: &AgentRegistry,
) -> Result<StageMetrics, CliError> {
    let metrics = stage_metrics(problems, &state.books, judge(config, registry).as_ref())?;
    store.write_json("metrics.json", &metrics)?;
    for (format, name) in [(ReportFormat::Markdown, "report.md"), (ReportFormat::Csv, "report.csv")] {
        let text = render(&metrics, format, &config.pipeline.anchor).map_err(|e| CliError::Io(e.to_string()))?;
        store.write_text(name, &text)?;
    }
    Ok(metrics)
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub state: PipelineState,
    pub metrics: StageMetrics,
}

/// `run`: the full pipeline over a dataset, persisted under
/// `<out>/<run_id>/`.
pub fn cmd_run(
    config_path: &Path,
    dataset_path: &Path,
    out_dir: &Path,
    run_id: Option<&str>,
    overrides: &Overrides,
) -> Result<RunOutcome, CliError> {
    let config = RunConfig::load(config_path, overrides)?;
    let problems = load_problems(dataset_path)?;
    let registry = config.registry()?;
    let engine = Engine::new(config.pipeline.clone(), &registry, config.engine_options()?)?;
    let run_id = run_id.map(str::to_string).unwrap_or_else(|| RunManifest::default_run_id(&config, &problems));
    let mut store = RunStore::create(out_dir.join(&run_id))?;
    let mut manifest = RunManifest::new(&run_id, &config, &problems);
    store.write_json("manifest.json", &manifest)?;
    store.write_json("config.json", &config)?;
    store.write_problems(&problems)?;
    if config.uses_network() {
        log::info!("run {run_id} uses remote agents");
    }
    let state = engine.run(&problems, &mut store)?;
    let metrics = write_reports(&store, &config, &problems, &state, &registry)?;
    manifest.finished_at = Some(now());
    store.write_json("manifest.json", &manifest)?;
    Ok(RunOutcome { run_dir: store.dir().to_path_buf(), state, metrics })
}

fn stored_config(store: &RunStore) -> Result<RunConfig, CliError> {
    let text = store.read_text("config.json")?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("corrupt config.json: {e}")))
}

/// `resume`: finishes a partially completed run directory.
pub fn cmd_resume(run_dir: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let mut store = RunStore::open(run_dir)?;
    let mut config = stored_config(&store)?;
    if let Some(p) = overrides.parallelism {
        config.pipeline.parallelism = p;
    }
    let problems = store.load_problems()?;
    let state = store.load_state()?;
    let registry = config.registry()?;
    let mut pipeline = state.config.clone();
    pipeline.parallelism = config.pipeline.parallelism;
    let engine = Engine::new(pipeline, &registry, config.engine_options()?)?;
    let state = engine.resume(state, &problems, &mut store)?;
    let metrics = write_reports(&store, &config, &problems, &state, &registry)?;
    Ok(RunOutcome { run_dir: store.dir().to_path_buf(), state, metrics })
}

/// `report`: re-renders a run's metrics without calling any agent. Books
/// are verified against their checksums first.
pub fn cmd_report(run_dir: &Path, format: ReportFormat) -> Result<String, CliError> {
    let store = RunStore::open(run_dir)?;
    let problems = store.load_problems()?;
    let state = store.load_state()?;
    if !state.finished {
        return Err(CliError::Io(format!("run in {} has not finished; resume it first", run_dir.display())));
    }
    let metrics = match stage_metrics(&problems, &state.books, None) {
        Ok(m) => m,
        Err(MetricsError::Grade(GradeError::JudgeRequired(_))) => {
            let text = store.read_text("metrics.json")?;
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("corrupt metrics.json: {e}")))?
        }
        Err(e) => return Err(e.into()),
    };
    render(&metrics, format, &state.config.anchor).map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnoseMode {
    Decouple,
    Supervise(SupervisionMode),
    Reflect(PromptMode),
}

impl std::str::FromStr for DiagnoseMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || CliError::Config(format!("unknown diagnose mode `{s}`"));
        match s.split_once(':') {
            None if s == "decouple" => Ok(Self::Decouple),
            Some(("supervise", m)) => SupervisionMode::parse(m).map(Self::Supervise).ok_or_else(unknown),
            Some(("reflect", "answer")) => Ok(Self::Reflect(PromptMode::ReflectOnAnswer)),
            Some(("reflect", "ve")) => Ok(Self::Reflect(PromptMode::ReflectOnVe)),
            _ => Err(unknown()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::MissingField { .. } | DiagnosticsError::UngradableVE(_) => Self::Dataset(e.to_string()),
            DiagnosticsError::Grade(GradeError::MissingGroundTruth(_)) => Self::Dataset(e.to_string()),
            DiagnosticsError::Grade(GradeError::JudgeRequired(_)) => Self::Config(e.to_string()),
            other => Self::Io(other.to_string()),
        }
    }
}

/// `diagnose`: one probe over a dataset, written as
/// `diagnostics_report.md` and `diagnostics.csv` under `out_dir`.
pub fn cmd_diagnose(
    config_path: &Path,
    dataset_path: &Path,
    mode: &str,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<PathBuf, CliError> {
    let mode: DiagnoseMode = mode.parse()?;
    let config = RunConfig::load(config_path, overrides)?;
    let problems = load_problems(dataset_path)?;
    let registry = config.registry()?;
    let templates = config.templates()?;
    let agent = config.diagnostics.agent.clone().unwrap_or_else(|| config.pipeline.anchor.clone());
    let probe = Probe { registry: &registry, templates: &templates, seed: config.pipeline.seed };
    let judge = judge(&config, &registry);
    let parallelism = config.pipeline.parallelism;
    let store = RunStore::create(out_dir)?;

    let mut csv = String::new();
    let report = match mode {
        DiagnoseMode::Decouple => {
            let records = decouple_sweep(&probe, &problems, &agent, judge.as_ref(), parallelism)?;
            let table = contingency_table(&records)?;
            csv.push_str("group,cell,count,percent\n");
            for row in table.csv_rows() {
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            store.write_json("diagnostics.json", &table)?;
            format!("# Decoupled trajectory and visual evidence\n\n{}", table.to_markdown(&agent))
        }
        DiagnoseMode::Supervise(m) => {
            let rows = supervision_sweep(&probe, &problems, &agent, &[m], config.diagnostics.supervision_limit, judge.as_ref(), parallelism)?;
            csv.push_str("mode,ve_fixed,ve_pool,answer_fixed,answer_pool\n");
            let part = |s: Option<veloop::diagnostics::Share>| s.map(|s| format!("{},{}", s.count, s.of)).unwrap_or_else(|| ",".into());
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.mode.name(), part(r.ve_fixed), part(r.answer_fixed)));
            }
            store.write_json("diagnostics.json", &rows)?;
            format!("# Self-correction under idealized supervision\n\n{}", supervision_markdown(&rows, &agent))
        }
        DiagnoseMode::Reflect(m) => {
            let rows = reflection_sweep(&probe, &problems, &agent, &[m], judge.as_ref(), parallelism)?;
            csv.push_str("mode,ve_correct,answer_correct,ve_delta,answer_delta,answers_changed\n");
            for r in &rows {
                let d = |x: Option<i64>| x.map(|v| v.to_string()).unwrap_or_default();
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.label,
                    r.ve_correct,
                    r.answer_correct,
                    d(r.ve_delta),
                    d(r.answer_delta),
                    r.answers_changed
                ));
            }
            store.write_json("diagnostics.json", &rows)?;
            format!("# Single-model reflection\n\n{}", reflection_markdown(&rows, &agent))
        }
    };
    store.write_text("diagnostics_report.md", &report)?;
    store.write_text("diagnostics.csv", &csv)?;
    Ok(store.dir().to_path_buf())
}

/// `simulate`: the stochastic ensemble over every configured seed. Without
/// a config file the default simulation is used.
pub fn cmd_simulate(config_path: Option<&Path>, out_dir: &Path, overrides: &Overrides) -> Result<PathBuf, CliError> {
    let mut doc = match config_path {
        Some(p) => read_json(p)?,
        None => serde_json::to_value(SimConfig::default()).expect("default sim config serializes"),
    };
    if let Some(seed) = overrides.seed {
        set_path(&mut doc, "seeds", serde_json::json!([seed]))?;
    }
    let rest = Overrides { seed: None, ..overrides.clone() };
    rest.apply(&mut doc, "seeds", "parallelism")?;
    let sim: SimConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = simulate_ensemble(&sim).map_err(|e| CliError::Io(e.to_string()))?;
    write_simulation(out_dir, &sim, &outcome).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(out_dir.to_path_buf())
}
