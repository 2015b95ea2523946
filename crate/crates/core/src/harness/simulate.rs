use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{stage_metrics, MetricsError, StageCell, StageMetrics};
use super::report::{render_markdown, render_csv};
use crate::agents::{AgentRegistry, StochasticAgent, StochasticProfile};
use crate::config::{ConfigError, PipelineConfig};
use crate::digest::{canonical_json, sha256_hex};
use crate::domain::Problem;
use crate::pipeline::{Engine, EngineOptions, NoSink, PipelineError, PipelineState, RunStore, StoreError};
use crate::sim::generate_problems;

pub const ANCHOR_ID: &str = "anchor";
/// Large enough that differently-wrong agents rarely share an answer by chance.
const DISTRACTORS: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("seed {seed}: {source}")]
    Pipeline { seed: u64, source: PipelineError },
    #[error("seed {seed}: {source}")]
    Metrics { seed: u64, source: MetricsError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Pipeline settings a simulation may override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOverrides {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_threshold")]
    pub conflict_threshold: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_true")]
    pub always_reflect_rejected: bool,
}

fn default_tau() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.2
}
fn default_max_rounds() -> u32 {
    3
}
fn default_true() -> bool {
    true
}

impl Default for PipelineOverrides {
    fn default() -> Self {
        Self { tau: 1.0, conflict_threshold: 0.2, max_rounds: 3, always_reflect_rejected: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub num_problems: usize,
    pub evidence_per_problem: usize,
    /// Size of each problem's pool of wrong answers.
    pub distractor_count: usize,
    pub anchor: StochasticProfile,
    pub assistants: Vec<StochasticProfile>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub pipeline: PipelineOverrides,
    /// Seeds simulated concurrently.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    1
}

impl Default for SimConfig {
    /// 500 problems with four facts each, an anchor-grade anchor and three
    /// assistants of decreasing perception quality, 20 seeds.
    fn default() -> Self {
        Self {
            num_problems: 500,
            evidence_per_problem: 4,
            distractor_count: DISTRACTORS,
            anchor: StochasticProfile::anchor_grade(),
            assistants: [0.85, 0.75, 0.65].map(|p| StochasticProfile::weak_grade().with_p_ve(p)).to_vec(),
            seeds: (0..20).collect(),
            pipeline: PipelineOverrides::default(),
            parallelism: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_problems == 0 {
            return Err(ConfigError::new("num_problems", "must be at least 1"));
        }
        if self.evidence_per_problem == 0 {
            return Err(ConfigError::new("evidence_per_problem", "must be at least 1"));
        }
        if self.distractor_count == 0 {
            return Err(ConfigError::new("distractor_count", "must be at least 1"));
        }
        if self.assistants.is_empty() {
            return Err(ConfigError::new("assistants", "at least one assistant profile is required"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::new("parallelism", "must be at least 1"));
        }
        self.anchor.validate().map_err(|r| ConfigError::new("anchor", r))?;
        for (i, p) in self.assistants.iter().enumerate() {
            p.validate().map_err(|r| ConfigError::new(format!("assistants[{i}]"), r))?;
        }
        self.pipeline_config(0).validate()
    }

    pub fn assistant_ids(&self) -> Vec<String> {
        (1..=self.assistants.len()).map(|i| format!("assistant-{i}")).collect()
    }

    pub fn pipeline_config(&self, seed: u64) -> PipelineConfig {
        let mut c = PipelineConfig::new(ANCHOR_ID, self.assistant_ids());
        c.seed = seed;
        c.tau = self.pipeline.tau;
        c.conflict_threshold = self.pipeline.conflict_threshold;
        c.max_rounds = self.pipeline.max_rounds;
        c.always_reflect_rejected = self.pipeline.always_reflect_rejected;
        c
    }

    pub fn registry(&self) -> AgentRegistry {
        let mut r = AgentRegistry::new();
        r.insert(ANCHOR_ID, Arc::new(StochasticAgent::new(ANCHOR_ID, self.anchor)));
        for (id, profile) in self.assistant_ids().iter().zip(&self.assistants) {
            r.insert(id, Arc::new(StochasticAgent::new(id, *profile)));
        }
        r
    }

    pub fn problems(&self, seed: u64) -> Vec<Problem> {
        generate_problems(seed, self.num_problems, self.evidence_per_problem, self.distractor_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: StageMetrics,
    /// Problems still rejected when the loop stopped.
    pub non_converged: u64,
    pub invocations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub mean_count: f64,
    pub mean_accuracy_pct: f64,
    pub min_accuracy_pct: f64,
    pub max_accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub seeds: usize,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub per_seed: Vec<SeedOutcome>,
    pub summary: SimSummary,
}

/// Runs the full pipeline on one seed's synthetic dataset.
pub fn simulate_seed(sim: &SimConfig, seed: u64) -> Result<(SeedOutcome, PipelineState), SimError> {
    let problems = sim.problems(seed);
    let registry = sim.registry();
    let engine = Engine::new(sim.pipeline_config(seed), &registry, EngineOptions::default())
        .map_err(|source| SimError::Pipeline { seed, source })?;
    let state = engine.run(&problems, &mut NoSink).map_err(|source| SimError::Pipeline { seed, source })?;
    let metrics = stage_metrics(&problems, &state.books, None).map_err(|source| SimError::Metrics { seed, source })?;
    let non_converged = state.unresolved.len() as u64;
    let outcome = SeedOutcome { seed, metrics, non_converged, invocations: registry.invocation_count() as u64 };
    Ok((outcome, state))
}

/// Simulates every seed (concurrently, in seed order) and summarizes.
pub fn simulate_ensemble(sim: &SimConfig) -> Result<SimOutcome, SimError> {
    sim.validate()?;
    let run = |seed: &u64| simulate_seed(sim, *seed).map(|(o, _)| o);
    let results: Vec<Result<SeedOutcome, SimError>> = if sim.parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(sim.parallelism)
            .build()
            .map_err(|e| ConfigError::new("parallelism", e.to_string()))?;
        pool.install(|| sim.seeds.par_iter().map(run).collect())
    } else {
        sim.seeds.iter().map(run).collect()
    };
    let per_seed = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&per_seed);
    Ok(SimOutcome { per_seed, summary })
}

fn named_cells(m: &StageMetrics) -> Vec<(String, StageCell)> {
    let mut v = vec![("cot_infer".to_string(), m.cot_infer)];
    for r in &m.rounds {
        v.push((format!("regenerate_{}", r.round), r.regenerate));
        v.push((format!("select_{}", r.round), r.select));
        v.push((format!("reject_{}", r.round), r.reject));
        if let Some(c) = r.reflect {
            v.push((format!("reflect_{}", r.round), c));
        }
    }
    v.push(("all".to_string(), m.all));
    v
}

fn summarize(per_seed: &[SeedOutcome]) -> SimSummary {
    let mut order: Vec<String> = Vec::new();
    let mut cells: std::collections::HashMap<String, Vec<StageCell>> = std::collections::HashMap::new();
    for s in per_seed {
        for (name, cell) in named_cells(&s.metrics) {
            if !cells.contains_key(&name) {
                order.push(name.clone());
            }
            cells.entry(name).or_default().push(cell);
        }
    }
    let stages = order
        .into_iter()
        .map(|stage| {
            let cs = &cells[&stage];
            let n = cs.len() as f64;
            StageSummary {
                mean_count: cs.iter().map(|c| c.count as f64).sum::<f64>() / n,
                mean_accuracy_pct: cs.iter().map(|c| c.accuracy_pct).sum::<f64>() / n,
                min_accuracy_pct: cs.iter().map(|c| c.accuracy_pct).fold(f64::INFINITY, f64::min),
                max_accuracy_pct: cs.iter().map(|c| c.accuracy_pct).fold(f64::NEG_INFINITY, f64::max),
                stage,
            }
        })
        .collect();
    SimSummary { seeds: per_seed.len(), stages }
}

#[derive(Serialize)]
struct SimManifest<'a> {
    version: &'a str,
    config_sha256: String,
    config: &'a SimConfig,
}

/// Writes `sim_manifest.json`, per-seed metrics and the summary under `out`.
pub fn write_simulation(out: &Path, sim: &SimConfig, outcome: &SimOutcome) -> Result<(), SimError> {
    let store = RunStore::create(out)?;
    let config_json = canonical_json(sim).expect("sim config serializes");
    store.write_json(
        "sim_manifest.json",
        &SimManifest { version: env!("CARGO_PKG_VERSION"), config_sha256: sha256_hex(config_json.as_bytes()), config: sim },
    )?;
    store.write_json("per_seed.json", &outcome.per_seed)?;
    store.write_json("summary.json", &outcome.summary)?;
    let mut md = String::from("# Simulation summary\n\n");
    md.push_str("| Seed | CoT | 1st Regenerate | 1st Select | 1st Reject | 1st Reflect | All |\n");
    md.push_str("| --- | --- | --- | --- | --- | --- | --- |\n");
    for s in &outcome.per_seed {
        let m = &s.metrics;
        let f = |c: Option<StageCell>| c.map(|c| format!("{:.1} (n={})", c.rounded(), c.count)).unwrap_or_else(|| "-".into());
        let r = m.first_round();
        md.push_str(&format!(
            "| {} | {:.1} | {} | {} | {} | {} | {:.1} |\n",
            s.seed,
            m.cot_infer.rounded(),
            f(r.map(|r| r.regenerate)),
            f(r.map(|r| r.select)),
            f(r.map(|r| r.reject)),
            f(r.and_then(|r| r.reflect)),
            m.all.rounded()
        ));
    }
    md.push_str("\n| Stage | Mean count | Mean accuracy | Min | Max |\n| --- | --- | --- | --- | --- |\n");
    for s in &outcome.summary.stages {
        md.push_str(&format!(
            "| {} | {:.1} | {:.2} | {:.1} | {:.1} |\n",
            s.stage, s.mean_count, s.mean_accuracy_pct, s.min_accuracy_pct, s.max_accuracy_pct
        ));
    }
    store.write_text("summary.md", &md)?;
    for s in &outcome.per_seed {
        store.write_text(&format!("seed-{}.md", s.seed), &render_markdown(&s.metrics, &format!("seed {}", s.seed)))?;
        store.write_text(&format!("seed-{}.csv", s.seed), &render_csv(&s.metrics))?;
    }
    Ok(())
}
