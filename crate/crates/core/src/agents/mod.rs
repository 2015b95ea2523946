//! Agent abstraction: prompt construction, structured-response parsing and
//! the three interchangeable backends (remote endpoint, scripted fixture,
//! stochastic simulator).

mod parse;
mod prompt;
mod remote;
mod scripted;
mod stochastic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_structured_response, ParseFailure, ParseFailureReason};
pub use prompt::{build_solve_prompt, PromptPayload, PromptTemplates, PROMPT_VERSION};
pub use remote::RemoteAgent;
pub use scripted::{FixtureEntry, ScriptedAgent};
pub use stochastic::StochasticAgent;

use crate::digest::derive_seed;
use crate::domain::{AgentResponse, Problem};
use crate::sim::SimWorld;

/// Parse failures are re-prompted this many times before the agent
/// abstains for the round.
pub const REPROMPT_LIMIT: u32 = 2;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("prompt mode {0:?} requires a payload")]
    MissingExtras(PromptMode),
    #[error("parse failure: {0}")]
    Parse(#[from] ParseFailure),
    #[error("transport failure (status {status}): {body}")]
    Transport { status: u16, body: String },
    #[error("fixture exhausted for problem `{problem_id}`, agent `{agent_id}`, round {round}, entry {slot}")]
    FixtureExhausted { problem_id: String, agent_id: String, round: u32, slot: u32 },
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("environment variable `{0}` is not set")]
    MissingCredentials(String),
    #[error("cannot attach image `{path}`: {reason}")]
    Image { path: String, reason: String },
    #[error("agent `{id}` is misconfigured: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("agent `{agent}` cannot serve this request: {reason}")]
    Unsupported { agent: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    CotPlain,
    StructuredVe,
    DecoupledThreeStep,
    RegenerateWithSummary,
    ReflectOnAnswer,
    ReflectOnVe,
    SupervisedRetry,
}

impl PromptMode {
    pub const ALL: [PromptMode; 7] = [
        Self::CotPlain,
        Self::StructuredVe,
        Self::DecoupledThreeStep,
        Self::RegenerateWithSummary,
        Self::ReflectOnAnswer,
        Self::ReflectOnVe,
        Self::SupervisedRetry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CotPlain => "cot_plain",
            Self::StructuredVe => "structured_ve",
            Self::DecoupledThreeStep => "decoupled_three_step",
            Self::RegenerateWithSummary => "regenerate_with_summary",
            Self::ReflectOnAnswer => "reflect_on_answer",
            Self::ReflectOnVe => "reflect_on_ve",
            Self::SupervisedRetry => "supervised_retry",
        }
    }

    pub fn requires_trajectory(self) -> bool {
        self == Self::DecoupledThreeStep
    }
}

/// Why an agent is being called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Solve(PromptMode),
    /// Summary-tool, refine-tool or grading judge; text only.
    Judge,
}

/// Simulated perception behaviour of a stochastic agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticProfile {
    pub p_ve: f64,
    pub p_traj: f64,
    pub p_fix_external: f64,
    pub p_fix_internal: f64,
    pub stubbornness: f64,
}

impl StochasticProfile {
    pub fn anchor_grade() -> Self {
        Self { p_ve: 0.85, p_traj: 0.95, p_fix_external: 0.8, p_fix_internal: 0.1, stubbornness: 0.7 }
    }

    pub fn weak_grade() -> Self {
        Self { p_ve: 0.65, p_traj: 0.90, p_fix_external: 0.6, p_fix_internal: 0.05, stubbornness: 0.7 }
    }

    pub fn with_p_ve(mut self, p_ve: f64) -> Self {
        self.p_ve = p_ve;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("p_ve", self.p_ve),
            ("p_traj", self.p_traj),
            ("p_fix_external", self.p_fix_external),
            ("p_fix_internal", self.p_fix_internal),
            ("stubbornness", self.stubbornness),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.p_fix_external < self.p_fix_internal {
            return Err("p_fix_external must be >= p_fix_internal".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Remote,
    Scripted,
    Stochastic,
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<StochasticProfile>,
    /// JSONL fixture for the scripted backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl AgentSpec {
    pub fn stochastic(id: impl Into<String>, profile: StochasticProfile) -> Self {
        Self::bare(id.into(), Backend::Stochastic, Some(profile), None)
    }

    pub fn scripted(id: impl Into<String>, fixture: impl Into<PathBuf>) -> Self {
        Self::bare(id.into(), Backend::Scripted, None, Some(fixture.into()))
    }

    pub fn remote(id: impl Into<String>, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let mut s = Self::bare(id.into(), Backend::Remote, None, None);
        s.endpoint = Some(endpoint.into());
        s.model_name = Some(model.into());
        s
    }

    fn bare(id: String, backend: Backend, profile: Option<StochasticProfile>, fixture: Option<PathBuf>) -> Self {
        Self {
            id,
            backend,
            endpoint: None,
            model_name: None,
            api_key_env: None,
            temperature: 0.0,
            max_retries: default_max_retries(),
            profile,
            fixture,
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let invalid = |reason: &str| AgentError::InvalidSpec { id: self.id.clone(), reason: reason.to_string() };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(invalid("temperature must be >= 0"));
        }
        match self.backend {
            Backend::Remote if self.endpoint.is_none() || self.model_name.is_none() => {
                Err(invalid("remote backend needs `endpoint` and `model_name`"))
            }
            Backend::Stochastic => match &self.profile {
                None => Err(invalid("stochastic backend needs `profile`")),
                Some(p) => p.validate().map_err(|r| invalid(&r)),
            },
            Backend::Scripted if self.fixture.is_none() => Err(invalid("scripted backend needs `fixture`")),
            _ => Ok(()),
        }
    }

    /// Instantiates the backend. Relative fixture paths resolve against
    /// `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn Agent>, AgentError> {
        self.validate()?;
        Ok(match self.backend {
            Backend::Remote => Arc::new(RemoteAgent::new(self.clone())),
            Backend::Scripted => {
                let path = self.fixture.as_ref().expect("validated");
                let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                Arc::new(ScriptedAgent::from_file(&self.id, &path)?)
            }
            Backend::Stochastic => Arc::new(StochasticAgent::new(&self.id, self.profile.expect("validated"))),
        })
    }
}

/// One call into an agent backend.
#[derive(Debug, Clone, Copy)]
pub struct Invocation<'a> {
    pub problem: &'a Problem,
    pub agent_id: &'a str,
    pub round: u32,
    /// Position among the calls sharing (problem, agent, round): the
    /// re-prompt attempt for solves, the item index for judges.
    pub slot: u32,
    pub seed: u64,
    pub purpose: Purpose,
    pub prompt: &'a str,
    pub payload: Option<&'a PromptPayload>,
}

impl Invocation<'_> {
    /// RNG seed for this call, a pure function of (seed, problem, agent,
    /// round) so results do not depend on scheduling.
    pub fn stream_seed(&self) -> [u8; 32] {
        derive_seed(&[
            &self.seed.to_le_bytes(),
            self.problem.id.as_bytes(),
            self.agent_id.as_bytes(),
            &self.round.to_le_bytes(),
        ])
    }
}

pub trait Agent: Send + Sync {
    fn invoke(&self, invocation: &Invocation<'_>) -> Result<String, AgentError>;
}

#[derive(Default)]
pub struct AgentRegistry {
    agents: BTreeMap<String, Arc<dyn Agent>>,
    calls: AtomicUsize,
}

impl AgentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[AgentSpec], base_dir: &Path) -> Result<Self, AgentError> {
        let mut registry = Self::new();
        for spec in specs {
            if registry.contains(&spec.id) {
                return Err(AgentError::InvalidSpec { id: spec.id.clone(), reason: "duplicate agent id".into() });
            }
            registry.insert(&spec.id, spec.build(base_dir)?);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, id: &str, agent: Arc<dyn Agent>) {
        self.agents.insert(id.to_string(), agent);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.agents.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.agents.keys().map(String::as_str)
    }

    pub fn invoke(&self, invocation: &Invocation<'_>) -> Result<String, AgentError> {
        let agent = self
            .agents
            .get(invocation.agent_id)
            .ok_or_else(|| AgentError::UnknownAgent(invocation.agent_id.to_string()))?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        agent.invoke(invocation)
    }

    /// Total backend calls made through this registry.
    pub fn invocation_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Lets the summary and refine tools call a judge agent for one problem.
#[derive(Clone, Copy)]
pub struct JudgeContext<'a> {
    pub registry: &'a AgentRegistry,
    pub problem: &'a Problem,
    pub round: u32,
    pub seed: u64,
    /// Added to every slot so that separate judge passes within one round
    /// address distinct fixture entries.
    pub slot_base: u32,
}

impl JudgeContext<'_> {
    pub fn ask(&self, agent: &str, prompt: &str, slot: u32) -> Result<String, AgentError> {
        self.registry.invoke(&Invocation {
            problem: self.problem,
            agent_id: agent,
            round: self.round,
            slot: self.slot_base + slot,
            seed: self.seed,
            purpose: Purpose::Judge,
            prompt,
            payload: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveRequest<'a> {
    pub problem: &'a Problem,
    pub agent_id: &'a str,
    pub mode: PromptMode,
    pub payload: Option<&'a PromptPayload>,
    pub round: u32,
    pub seed: u64,
}

/// Builds the prompt, invokes the agent and parses its response,
/// re-prompting up to [`REPROMPT_LIMIT`] times on malformed output. Evidence
/// on synthetic problems is annotated with its canonical key and polarity.
pub fn solve(
    registry: &AgentRegistry,
    templates: &PromptTemplates,
    request: SolveRequest<'_>,
) -> Result<AgentResponse, AgentError> {
    let base = templates.build(request.problem, request.mode, request.payload)?;
    let mut last = None;
    for attempt in 0..=REPROMPT_LIMIT {
        let prompt = match &last {
            None => base.clone(),
            Some(failure) => format!("{base}\n{}", templates.reminder(request.mode, failure)),
        };
        let raw = registry.invoke(&Invocation {
            problem: request.problem,
            agent_id: request.agent_id,
            round: request.round,
            slot: attempt,
            seed: request.seed,
            purpose: Purpose::Solve(request.mode),
            prompt: &prompt,
            payload: request.payload,
        })?;
        match parse_structured_response(&raw, request.mode, request.agent_id, request.round) {
            Ok(mut response) => {
                if let Some(world) = SimWorld::from_problem(request.problem) {
                    world.annotate(&mut response);
                }
                return Ok(response);
            }
            Err(failure) => {
                log::debug!(
                    "agent {} on {} round {}: {failure}",
                    request.agent_id,
                    request.problem.id,
                    request.round
                );
                last = Some(failure);
            }
        }
    }
    Err(AgentError::Parse(last.expect("at least one attempt")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(AgentSpec::stochastic("a", StochasticProfile::anchor_grade()).validate().is_ok());
        let mut s = AgentSpec::remote("r", "http://x", "m");
        s.model_name = None;
        assert!(matches!(s.validate(), Err(AgentError::InvalidSpec { .. })));
        let mut bad = StochasticProfile::anchor_grade();
        bad.p_fix_internal = 0.9;
        assert!(AgentSpec::stochastic("a", bad).validate().is_err());
        let mut s = AgentSpec::stochastic("a", StochasticProfile::anchor_grade());
        s.profile = None;
        assert!(s.validate().is_err());
    }
}
