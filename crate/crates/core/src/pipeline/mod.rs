//! The refinement loop: round-0 initialization, then summarize → regenerate
//! → refine rounds until the selection ratio reaches τ, the round cap is hit
//! or nothing is left to refine.

mod store;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{book_file_name, RunStore, StoreError};

use crate::agents::{solve, AgentError, AgentRegistry, JudgeContext, PromptMode, PromptPayload, PromptTemplates, SolveRequest};
use crate::answer::normalize_text;
use crate::book::{BookError, ContextBook};
use crate::config::{ConfigError, PipelineConfig};
use crate::digest::{canonical_json, sha256_hex};
use crate::domain::{AgentResponse, AnswerKind, Problem, Verdict};
use crate::refine::{answer_consensus, refine_decision, AnswerEquivalence};
use crate::summary::{categorize, EvidenceMatcher};

/// Judge slots for the three judge passes of one round.
const SLOTS_SUMMARY: u32 = 0;
const SLOTS_RECHECK: u32 = 1_000;
const SLOTS_CONSENSUS: u32 = 2_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no problems to run")]
    NoProblems,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("duplicate problem id `{0}`")]
    DuplicateProblem(String),
    #[error("problem set does not match the run state: {0}")]
    ProblemMismatch(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("context book error: {0}")]
    Book(#[from] BookError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// One transcript event. The store stamps it with a time on write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub problem_id: String,
    pub round: u32,
    pub event: String,
    pub payload_digest: String,
}

impl Event {
    fn new(problem_id: &str, round: u32, event: &str, payload: &impl Serialize) -> Self {
        let digest = sha256_hex(canonical_json(payload).expect("payload serializes").as_bytes());
        Self { problem_id: problem_id.to_string(), round, event: event.to_string(), payload_digest: digest }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config: PipelineConfig,
    pub books: BTreeMap<String, ContextBook>,
    /// S: problems whose sample was selected.
    pub selected: BTreeSet<String>,
    /// U = P \ S, including problems quarantined after a failure.
    pub unresolved: BTreeSet<String>,
    pub round: u32,
    /// Round after which |S|/|P| first reached τ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_met_round: Option<u32>,
    pub finished: bool,
}

impl PipelineState {
    /// Unresolved problems still taking part in the loop.
    pub fn active(&self) -> impl Iterator<Item = &str> {
        self.unresolved.iter().filter(|id| !self.books[id.as_str()].is_final()).map(String::as_str)
    }

    pub fn selection_met(&self) -> bool {
        let tau = self.config.tau_fraction();
        (self.selected.len() as u128) * tau.denominator() as u128 >= (self.books.len() as u128) * tau.numerator() as u128
    }

    pub fn final_answers(&self) -> BTreeMap<String, String> {
        self.books
            .iter()
            .map(|(id, b)| (id.clone(), b.final_answer().unwrap_or_default().to_string()))
            .collect()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.selected.is_disjoint(&self.unresolved) {
            return Err("selected and unresolved overlap".into());
        }
        if self.selected.len() + self.unresolved.len() != self.books.len() {
            return Err("selected ∪ unresolved does not cover every problem".into());
        }
        for (id, book) in &self.books {
            book.check_invariants().map_err(|e| format!("{id}: {e}"))?;
        }
        Ok(())
    }
}

/// Receives the state at every round barrier.
pub trait RunSink {
    fn checkpoint(&mut self, state: &PipelineState, events: &[Event]) -> Result<(), StoreError>;
}

/// Discards checkpoints.
pub struct NoSink;

impl RunSink for NoSink {
    fn checkpoint(&mut self, _: &PipelineState, _: &[Event]) -> Result<(), StoreError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    pub matcher: EvidenceMatcher,
    /// Agent that compares free-form answers.
    pub answer_judge: Option<String>,
    pub templates: PromptTemplates,
}

pub struct Engine<'a> {
    config: PipelineConfig,
    registry: &'a AgentRegistry,
    options: EngineOptions,
    pool: Option<rayon::ThreadPool>,
}

struct RoundOutcome {
    book: ContextBook,
    selected: bool,
    events: Vec<Event>,
}

impl<'a> Engine<'a> {
    pub fn new(config: PipelineConfig, registry: &'a AgentRegistry, options: EngineOptions) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut needed: Vec<(&str, &str)> = vec![("anchor", config.anchor.as_str())];
        needed.extend(config.assistants.iter().map(|a| ("assistants", a.as_str())));
        if let EvidenceMatcher::Judge { agent } = &options.matcher {
            needed.push(("matcher", agent.as_str()));
        }
        if let Some(j) = &options.answer_judge {
            needed.push(("answer_judge", j.as_str()));
        }
        for (field, id) in needed {
            if !registry.contains(id) {
                return Err(ConfigError::new(field, format!("agent `{id}` is not defined")).into());
            }
        }
        let pool = if config.parallelism > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.parallelism)
                    .build()
                    .map_err(|e| PipelineError::Pool(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self { config, registry, options, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn equivalence(&self, problem: &Problem) -> Result<AnswerEquivalence, ConfigError> {
        AnswerEquivalence::for_kind(problem.answer_kind)
            .or_else(|| self.options.answer_judge.clone().map(|agent| AnswerEquivalence::Judge { agent }))
            .ok_or_else(|| {
                ConfigError::new("answer_judge", format!("problem `{}` is free-form and needs an answer judge", problem.id))
            })
    }

    /// Maps `f` over `items` on the worker pool, preserving order.
    fn map<T, U, F>(&self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
            None => items.into_iter().map(f).collect(),
        }
    }

    fn solve(&self, problem: &Problem, agent: &str, mode: PromptMode, payload: Option<&PromptPayload>, round: u32) -> Result<AgentResponse, AgentError> {
        solve(
            self.registry,
            &self.options.templates,
            SolveRequest { problem, agent_id: agent, mode, payload, round, seed: self.config.seed },
        )
    }

    /// Round 0: every agent answers every problem once; assistant responses
    /// are frozen into the problem's context book.
    pub fn initialize(&self, problems: &[Problem]) -> Result<(PipelineState, Vec<Event>), PipelineError> {
        if problems.is_empty() {
            return Err(PipelineError::NoProblems);
        }
        let mut ids = BTreeSet::new();
        for p in problems {
            if !ids.insert(p.id.clone()) {
                return Err(PipelineError::DuplicateProblem(p.id.clone()));
            }
            self.equivalence(p)?;
        }
        let results = self.map(problems.iter().collect(), |p| self.initialize_one(p));
        let mut books = BTreeMap::new();
        let mut events = Vec::new();
        for r in results {
            let (book, ev) = r?;
            events.extend(ev);
            books.insert(book.problem_id.clone(), book);
        }
        let state = PipelineState {
            config: self.config.clone(),
            books,
            selected: BTreeSet::new(),
            unresolved: ids,
            round: 0,
            tau_met_round: None,
            finished: false,
        };
        Ok((state, events))
    }

    fn initialize_one(&self, p: &Problem) -> Result<(ContextBook, Vec<Event>), PipelineError> {
        let mut events = Vec::new();
        let anchor = self.solve(p, &self.config.anchor, PromptMode::StructuredVe, None, 0);
        let mut assistants = Vec::new();
        for id in &self.config.assistants {
            match self.solve(p, id, PromptMode::StructuredVe, None, 0) {
                Ok(r) => {
                    events.push(Event::new(&p.id, 0, "assistant_answered", &r));
                    assistants.push(r);
                }
                Err(e) => {
                    log::warn!("assistant {id} abstains on {}: {e}", p.id);
                    events.push(Event::new(&p.id, 0, "assistant_abstained", &e.to_string()));
                }
            }
        }
        let book = match anchor {
            Err(e) => {
                log::warn!("anchor failed on {}: {e}", p.id);
                events.push(Event::new(&p.id, 0, "quarantined", &e.to_string()));
                ContextBook::quarantined(&p.id, None, assistants)
            }
            Ok(a) if assistants.is_empty() => {
                log::warn!("every assistant abstained on {}", p.id);
                events.push(Event::new(&p.id, 0, "quarantined", &a));
                ContextBook::quarantined(&p.id, Some(a), assistants)
            }
            Ok(a) => {
                events.push(Event::new(&p.id, 0, "anchor_answered", &a));
                ContextBook::new(p, &self.config.anchor, a, assistants)?
            }
        };
        Ok((book, events))
    }

    /// One summarize → regenerate → refine pass over every active problem.
    pub fn run_round(&self, state: &mut PipelineState, problems: &[Problem]) -> Result<Vec<Event>, PipelineError> {
        let round = state.round + 1;
        let by_id: BTreeMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut work = Vec::new();
        for p in problems {
            if state.unresolved.contains(&p.id) && !state.books[&p.id].is_final() {
                let book = state.books.remove(&p.id).expect("book exists");
                work.push((by_id[p.id.as_str()], book));
            }
        }
        let outcomes = self.map(work, |(p, book)| self.refine_one(p, book, round));
        let mut events = Vec::new();
        for o in outcomes {
            let o = o?;
            if o.selected {
                state.unresolved.remove(&o.book.problem_id);
                state.selected.insert(o.book.problem_id.clone());
            }
            events.extend(o.events);
            state.books.insert(o.book.problem_id.clone(), o.book);
        }
        state.round = round;
        Ok(events)
    }

    fn refine_one(&self, p: &Problem, mut book: ContextBook, round: u32) -> Result<RoundOutcome, PipelineError> {
        let mut events = Vec::new();
        let previous = book.latest_anchor().expect("active book has an anchor response").clone();
        let lists: Vec<Vec<_>> = book.assistant_responses().iter().map(|r| r.evidence.clone()).collect();
        let judge = |slot_base| JudgeContext { registry: self.registry, problem: p, round, seed: self.config.seed, slot_base };
        let quarantine = |book: &mut ContextBook, events: &mut Vec<Event>, reason: String| -> Result<(), PipelineError> {
            log::warn!("quarantining {} in round {round}: {reason}", p.id);
            events.push(Event::new(&p.id, round, "quarantined", &reason));
            let answer = book.latest_anchor().map(|a| a.answer.clone()).unwrap_or_default();
            book.finalize(answer, false)?;
            Ok(())
        };

        let summary = match categorize(&previous.evidence, &lists, &self.options.matcher, Some(&judge(SLOTS_SUMMARY))) {
            Ok(s) => s,
            Err(e) => {
                quarantine(&mut book, &mut events, e.to_string())?;
                return Ok(RoundOutcome { book, selected: false, events });
            }
        };
        events.push(Event::new(&p.id, round, "summarized", &summary));

        let payload = PromptPayload::Summary { summary: summary.clone(), previous: previous.clone() };
        let regenerated = match self.solve(p, &self.config.anchor, PromptMode::RegenerateWithSummary, Some(&payload), round) {
            Ok(r) => r,
            Err(e) => {
                quarantine(&mut book, &mut events, e.to_string())?;
                return Ok(RoundOutcome { book, selected: false, events });
            }
        };
        events.push(Event::new(&p.id, round, "regenerated", &regenerated));

        let recheck = categorize(&regenerated.evidence, &lists, &self.options.matcher, Some(&judge(SLOTS_RECHECK)));
        let eq = self.equivalence(p)?;
        let answers: Vec<&str> = book.assistant_responses().iter().map(|r| r.answer.as_str()).collect();
        let consensus = answer_consensus(&regenerated.answer, &answers, self.config.assistants.len(), &eq, Some(&judge(SLOTS_CONSENSUS)));
        let (recheck, consensus) = match (recheck, consensus) {
            (Ok(r), Ok(c)) => (r, c),
            (Err(e), _) => {
                quarantine(&mut book, &mut events, e.to_string())?;
                return Ok(RoundOutcome { book, selected: false, events });
            }
            (_, Err(e)) => {
                quarantine(&mut book, &mut events, e.to_string())?;
                return Ok(RoundOutcome { book, selected: false, events });
            }
        };

        let mut decision = refine_decision(recheck.ratio(), consensus, self.config.conflict_threshold);
        decision.answer_changed = Some(!same_answer(p.answer_kind, &eq, &previous.answer, &regenerated.answer));
        let selected = decision.verdict == Verdict::Select;
        events.push(Event::new(&p.id, round, if selected { "selected" } else { "rejected" }, &decision));
        let answer = regenerated.answer.clone();
        book.push_round(summary, regenerated, decision)?;
        if selected {
            book.finalize(answer, true)?;
        }
        Ok(RoundOutcome { book, selected, events })
    }

    /// Runs the whole loop from round 0.
    pub fn run(&self, problems: &[Problem], sink: &mut dyn RunSink) -> Result<PipelineState, PipelineError> {
        let (state, events) = self.initialize(problems)?;
        sink.checkpoint(&state, &events)?;
        self.drive(state, problems, sink)
    }

    /// Continues a run from its last round barrier.
    pub fn resume(&self, state: PipelineState, problems: &[Problem], sink: &mut dyn RunSink) -> Result<PipelineState, PipelineError> {
        let ids: BTreeSet<&str> = problems.iter().map(|p| p.id.as_str()).collect();
        let known: BTreeSet<&str> = state.books.keys().map(String::as_str).collect();
        if ids != known {
            return Err(PipelineError::ProblemMismatch(format!("{} problems given, {} books stored", ids.len(), known.len())));
        }
        self.drive(state, problems, sink)
    }

    fn drive(&self, mut state: PipelineState, problems: &[Problem], sink: &mut dyn RunSink) -> Result<PipelineState, PipelineError> {
        while !state.finished {
            if state.selection_met() && state.tau_met_round.is_none() {
                state.tau_met_round = Some(state.round);
            }
            let reflected = match state.tau_met_round {
                Some(r) => !self.config.always_reflect_rejected || state.round > r,
                None => false,
            };
            let stop = reflected || state.round >= self.config.max_rounds || state.active().next().is_none();
            if stop {
                let mut events = Vec::new();
                let pending: Vec<String> = state.active().map(str::to_string).collect();
                for id in pending {
                    let book = state.books.get_mut(&id).expect("book exists");
                    let answer = book.latest_anchor().map(|a| a.answer.clone()).unwrap_or_default();
                    events.push(Event::new(&id, state.round, "finalized_non_converged", &answer));
                    book.finalize(answer, false)?;
                }
                state.finished = true;
                sink.checkpoint(&state, &events)?;
                break;
            }
            let events = self.run_round(&mut state, problems)?;
            sink.checkpoint(&state, &events)?;
        }
        Ok(state)
    }
}

fn same_answer(kind: AnswerKind, eq: &AnswerEquivalence, a: &str, b: &str) -> bool {
    match (kind, eq) {
        (_, AnswerEquivalence::Judge { .. }) => normalize_text(a) == normalize_text(b),
        _ => eq.equivalent(a, b, None, 0, &mut Vec::new()).unwrap_or(false),
    }
}
