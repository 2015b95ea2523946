//! Single-model probes: decoupled solving with component grading,
//! idealized-supervision retries, reflection retries, and the contingency
//! table that relates answer, trajectory and evidence correctness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{solve, AgentError, AgentRegistry, JudgeContext, PromptMode, PromptPayload, PromptTemplates, SolveRequest};
use crate::domain::{AgentResponse, Problem};
use crate::harness::{grade_answer, AnswerJudge, GradeError};
use crate::sim::SimWorld;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("no records")]
    EmptyInput,
    #[error("record for `{0}` has not been graded")]
    UngradedRecord(String),
    #[error("cannot grade visual evidence for `{0}`: no simulation metadata and no judge with ground-truth evidence")]
    UngradableVE(String),
    #[error("problem `{problem_id}` lacks `{field}`")]
    MissingField { problem_id: String, field: &'static str },
    #[error("judge `{agent}` unavailable: {reason}")]
    JudgeUnavailable { agent: String, reason: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Grade(#[from] GradeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    GtJudge,
    GtJudgePlusAnswer,
    GtVe,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] = [Self::GtJudge, Self::GtJudgePlusAnswer, Self::GtVe];

    pub fn name(self) -> &'static str {
        match self {
            Self::GtJudge => "gt_judge",
            Self::GtJudgePlusAnswer => "gt_judge_plus_answer",
            Self::GtVe => "gt_ve",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// What the model is told on its second attempt, plus its first-round
/// transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionPayload {
    pub mode: SupervisionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_evidence: Option<Vec<String>>,
    pub prior_history: AgentResponse,
}

impl SupervisionPayload {
    /// Builds the payload for `mode` from the problem's ground truth.
    pub fn for_problem(mode: SupervisionMode, problem: &Problem, prior: AgentResponse) -> Result<Self, DiagnosticsError> {
        let missing = |field| DiagnosticsError::MissingField { problem_id: problem.id.clone(), field };
        let (gt_answer, gt_evidence) = match mode {
            SupervisionMode::GtJudge => (None, None),
            SupervisionMode::GtJudgePlusAnswer => (Some(problem.ground_truth.clone().ok_or_else(|| missing("answer"))?), None),
            SupervisionMode::GtVe => {
                let ev = problem.gt_evidence.clone().filter(|e| !e.is_empty()).ok_or_else(|| missing("gt_evidence"))?;
                (None, Some(ev))
            }
        };
        Ok(Self { mode, gt_answer, gt_evidence, prior_history: prior })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupledRecord {
    pub problem_id: String,
    pub response: AgentResponse,
    pub ve_correct: Option<bool>,
    pub traj_correct: Option<bool>,
    pub ans_correct: Option<bool>,
}

impl DecoupledRecord {
    pub fn is_graded(&self) -> bool {
        self.ve_correct.is_some() && self.traj_correct.is_some() && self.ans_correct.is_some()
    }
}

/// Agents, templates and seed shared by every probe.
#[derive(Clone, Copy)]
pub struct Probe<'a> {
    pub registry: &'a AgentRegistry,
    pub templates: &'a PromptTemplates,
    pub seed: u64,
}

impl Probe<'_> {
    fn solve(&self, problem: &Problem, agent: &str, mode: PromptMode, payload: Option<&PromptPayload>, round: u32) -> Result<AgentResponse, AgentError> {
        solve(self.registry, self.templates, SolveRequest { problem, agent_id: agent, mode, payload, round, seed: self.seed })
    }

    /// One decoupled solve: evidence, trajectory and answer in one reply.
    pub fn decoupled_solve(&self, problem: &Problem, agent: &str) -> Result<DecoupledRecord, DiagnosticsError> {
        let response = self.solve(problem, agent, PromptMode::DecoupledThreeStep, None, 0)?;
        Ok(DecoupledRecord { problem_id: problem.id.clone(), response, ve_correct: None, traj_correct: None, ans_correct: None })
    }

    /// Second attempt after idealized supervision.
    pub fn supervised_retry(&self, problem: &Problem, payload: &SupervisionPayload, agent: &str) -> Result<AgentResponse, DiagnosticsError> {
        let payload = PromptPayload::Supervision(payload.clone());
        Ok(self.solve(problem, agent, PromptMode::SupervisedRetry, Some(&payload), 1)?)
    }

    /// Second attempt with only a reflection instruction.
    pub fn reflection_retry(&self, problem: &Problem, prior: &AgentResponse, mode: PromptMode, agent: &str) -> Result<AgentResponse, DiagnosticsError> {
        assert!(matches!(mode, PromptMode::ReflectOnAnswer | PromptMode::ReflectOnVe), "not a reflection mode: {mode:?}");
        let payload = PromptPayload::Prior(prior.clone());
        Ok(self.solve(problem, agent, mode, Some(&payload), 1)?)
    }
}

/// Grades evidence, trajectory and answer. Synthetic problems are graded
/// from their metadata; others need a judge and ground-truth evidence.
pub fn grade_components(
    mut record: DecoupledRecord,
    problem: &Problem,
    judge: Option<&AnswerJudge<'_>>,
) -> Result<DecoupledRecord, DiagnosticsError> {
    record.ans_correct = Some(grade_answer(&record.response.answer, problem, judge)?);
    if let Some(world) = SimWorld::from_problem(problem) {
        record.ve_correct = Some(world.evidence_correct(&record.response));
        record.traj_correct = Some(world.trajectory_correct(record.response.trajectory.as_deref().unwrap_or_default()));
        return Ok(record);
    }
    let (Some(judge), Some(gt)) = (judge, problem.gt_evidence.as_ref()) else {
        return Err(DiagnosticsError::UngradableVE(problem.id.clone()));
    };
    let ctx = JudgeContext { registry: judge.registry, problem, round: 0, seed: judge.seed, slot_base: 3_000 };
    let unavailable = |e: AgentError| DiagnosticsError::JudgeUnavailable { agent: judge.agent.to_string(), reason: e.to_string() };
    let ve = ctx.ask(judge.agent, &evidence_grading_prompt(problem, gt, &record.response), 0).map_err(unavailable)?;
    record.ve_correct = Some(parse_verdict(&ve));
    let traj = ctx.ask(judge.agent, &trajectory_grading_prompt(problem, gt, &record.response), 1).map_err(unavailable)?;
    record.traj_correct = Some(parse_verdict(&traj));
    Ok(record)
}

fn evidence_grading_prompt(problem: &Problem, gt: &[String], response: &AgentResponse) -> String {
    let mut p = format!("Question: {}\nVerified visual evidence:\n", problem.question);
    for (i, s) in gt.iter().enumerate() {
        p.push_str(&format!("{}. {s}\n", i + 1));
    }
    p.push_str("Extracted visual evidence:\n");
    for (i, s) in response.statements().enumerate() {
        p.push_str(&format!("{}. {s}\n", i + 1));
    }
    p.push_str("Is every extracted statement consistent with the verified evidence, and is all evidence needed to solve the problem present? Reply CORRECT or INCORRECT.\n");
    p
}

fn trajectory_grading_prompt(problem: &Problem, gt: &[String], response: &AgentResponse) -> String {
    let mut p = format!("Question: {}\nVerified visual evidence:\n", problem.question);
    for (i, s) in gt.iter().enumerate() {
        p.push_str(&format!("{}. {s}\n", i + 1));
    }
    p.push_str("Planned solution steps:\n");
    for (i, s) in response.trajectory.iter().flatten().enumerate() {
        p.push_str(&format!("{}. {s}\n", i + 1));
    }
    p.push_str("Assuming the evidence is read correctly, would these steps reach the right answer? Reply CORRECT or INCORRECT.\n");
    p
}

fn parse_verdict(raw: &str) -> bool {
    let upper = raw.to_ascii_uppercase();
    upper.contains("CORRECT") && !upper.contains("INCORRECT")
}

/// One `count (pct%)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub count: u64,
    pub of: u64,
}

impl Share {
    /// Percentage in tenths, rounded half-up with integer arithmetic.
    pub fn tenths(&self) -> u64 {
        if self.of == 0 {
            0
        } else {
            (2000 * self.count + self.of) / (2 * self.of)
        }
    }

    pub fn percent(&self) -> String {
        let t = self.tenths();
        format!("{}.{}", t / 10, t % 10)
    }
}

impl std::fmt::Display for Share {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}%)", self.count, self.percent())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeGroup {
    pub total: Share,
    pub traj_correct: Share,
    pub traj_wrong: Share,
    pub ve_correct: Share,
    pub ve_wrong: Share,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub samples: u64,
    pub success: OutcomeGroup,
    pub failed: OutcomeGroup,
    /// Correct trajectories and evidence lists over all samples.
    pub traj_total: Share,
    pub ve_total: Share,
}

/// Groups graded records by answer correctness, then by trajectory and
/// evidence correctness within each group.
pub fn contingency_table(records: &[DecoupledRecord]) -> Result<ContingencyTable, DiagnosticsError> {
    if records.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let mut counts = [[0u64; 3]; 2]; // [failed, success] × [total, traj ok, ve ok]
    for r in records {
        let (Some(ans), Some(traj), Some(ve)) = (r.ans_correct, r.traj_correct, r.ve_correct) else {
            return Err(DiagnosticsError::UngradedRecord(r.problem_id.clone()));
        };
        let g = &mut counts[ans as usize];
        g[0] += 1;
        g[1] += traj as u64;
        g[2] += ve as u64;
    }
    let n = records.len() as u64;
    let group = |c: [u64; 3]| OutcomeGroup {
        total: Share { count: c[0], of: n },
        traj_correct: Share { count: c[1], of: c[0] },
        traj_wrong: Share { count: c[0] - c[1], of: c[0] },
        ve_correct: Share { count: c[2], of: c[0] },
        ve_wrong: Share { count: c[0] - c[2], of: c[0] },
    };
    Ok(ContingencyTable {
        samples: n,
        success: group(counts[1]),
        failed: group(counts[0]),
        traj_total: Share { count: counts[0][1] + counts[1][1], of: n },
        ve_total: Share { count: counts[0][2] + counts[1][2], of: n },
    })
}

impl ContingencyTable {
    pub fn to_markdown(&self, label: &str) -> String {
        let mut s = format!("| All {} Samples | | {label} trajectory | {label} VE list |\n| --- | --- | --- | --- |\n", self.samples);
        for (name, g) in [("Success", &self.success), ("Failed", &self.failed)] {
            s.push_str(&format!("| {name} | Total | {} | |\n", g.total));
            s.push_str(&format!("| | ✓ | {} | {} |\n", g.traj_correct, g.ve_correct));
            s.push_str(&format!("| | ✗ | {} | {} |\n", g.traj_wrong, g.ve_wrong));
        }
        s.push_str(&format!("| Success Total | | {} | {} |\n", self.traj_total, self.ve_total));
        s
    }

    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        for (name, g) in [("success", &self.success), ("failed", &self.failed)] {
            for (cell, share) in [
                ("total", g.total),
                ("traj_correct", g.traj_correct),
                ("traj_wrong", g.traj_wrong),
                ("ve_correct", g.ve_correct),
                ("ve_wrong", g.ve_wrong),
            ] {
                rows.push([name.to_string(), cell.to_string(), share.count.to_string(), share.percent()]);
            }
        }
        rows.push(["all".into(), "traj_correct".into(), self.traj_total.count.to_string(), self.traj_total.percent()]);
        rows.push(["all".into(), "ve_correct".into(), self.ve_total.count.to_string(), self.ve_total.percent()]);
        rows
    }
}

/// Second-round correction counts for one supervision mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionRow {
    pub mode: SupervisionMode,
    /// Evidence fixed, over first-round samples whose evidence was wrong
    /// (for gt_judge_plus_answer) or over all failed samples (otherwise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ve_fixed: Option<Share>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_fixed: Option<Share>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionRow {
    pub label: String,
    pub ve_correct: u64,
    pub answer_correct: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ve_delta: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_delta: Option<i64>,
    /// Answers that differ from the first round's.
    pub answers_changed: u64,
}

/// Runs `f` over problems on `parallelism` threads, keeping input order.
fn par_map<T: Send, F>(problems: &[Problem], parallelism: usize, f: F) -> Vec<T>
where
    F: Fn(&Problem) -> T + Sync + Send,
{
    if parallelism <= 1 {
        return problems.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| problems.par_iter().map(&f).collect()),
        Err(_) => problems.iter().map(f).collect(),
    }
}

/// Decoupled solve plus grading over a dataset. Problems whose response
/// cannot be obtained are skipped with a warning.
pub fn decouple_sweep(
    probe: &Probe<'_>,
    problems: &[Problem],
    agent: &str,
    judge: Option<&AnswerJudge<'_>>,
    parallelism: usize,
) -> Result<Vec<DecoupledRecord>, DiagnosticsError> {
    let results = par_map(problems, parallelism, |p| {
        probe.decoupled_solve(p, agent).and_then(|r| grade_components(r, p, judge))
    });
    let mut out = Vec::new();
    for (p, r) in problems.iter().zip(results) {
        match r {
            Ok(rec) => out.push(rec),
            Err(DiagnosticsError::Agent(e)) => log::warn!("skipping {}: {e}", p.id),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Idealized-supervision sweep over the first `limit` samples whose
/// first-round answer was wrong.
pub fn supervision_sweep(
    probe: &Probe<'_>,
    problems: &[Problem],
    agent: &str,
    modes: &[SupervisionMode],
    limit: usize,
    judge: Option<&AnswerJudge<'_>>,
    parallelism: usize,
) -> Result<Vec<SupervisionRow>, DiagnosticsError> {
    for p in problems {
        for m in modes {
            if *m == SupervisionMode::GtVe && p.gt_evidence.as_ref().is_none_or(|e| e.is_empty()) {
                return Err(DiagnosticsError::MissingField { problem_id: p.id.clone(), field: "gt_evidence" });
            }
        }
    }
    let records = decouple_sweep(probe, problems, agent, judge, parallelism)?;
    let by_id: std::collections::HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let failed: Vec<(&Problem, &DecoupledRecord)> = records
        .iter()
        .filter(|r| r.ans_correct == Some(false))
        .take(limit)
        .map(|r| (by_id[r.problem_id.as_str()], r))
        .collect();
    let failed_problems: Vec<Problem> = failed.iter().map(|(p, _)| (*p).clone()).collect();
    let mut rows = Vec::new();
    for &mode in modes {
        let outcomes = par_map(&failed_problems, parallelism, |p| {
            let prior = &failed.iter().find(|(q, _)| q.id == p.id).expect("failed record").1.response;
            let payload = SupervisionPayload::for_problem(mode, p, prior.clone())?;
            let retry = probe.supervised_retry(p, &payload, agent)?;
            let graded = grade_components(
                DecoupledRecord { problem_id: p.id.clone(), response: retry, ve_correct: None, traj_correct: None, ans_correct: None },
                p,
                judge,
            )?;
            Ok::<_, DiagnosticsError>(graded)
        });
        let mut answers = 0;
        let mut ve_fixed = 0;
        let mut ve_pool = 0;
        let mut n = 0;
        for ((_, first), o) in failed.iter().zip(outcomes) {
            let graded = match o {
                Ok(g) => g,
                Err(DiagnosticsError::Agent(e)) => {
                    log::warn!("supervised retry failed on {}: {e}", first.problem_id);
                    n += 1;
                    if first.ve_correct == Some(false) {
                        ve_pool += 1;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            n += 1;
            answers += graded.ans_correct.unwrap_or(false) as u64;
            let counts_for_ve = mode != SupervisionMode::GtJudgePlusAnswer || first.ve_correct == Some(false);
            if counts_for_ve {
                ve_pool += 1;
                ve_fixed += graded.ve_correct.unwrap_or(false) as u64;
            }
        }
        rows.push(SupervisionRow {
            mode,
            ve_fixed: (mode != SupervisionMode::GtVe).then_some(Share { count: ve_fixed, of: ve_pool }),
            answer_fixed: (mode != SupervisionMode::GtJudgePlusAnswer).then_some(Share { count: answers, of: n }),
        });
    }
    Ok(rows)
}

/// First-round solve, then each reflection mode over every problem;
/// counts correct evidence lists and answers per mode.
pub fn reflection_sweep(
    probe: &Probe<'_>,
    problems: &[Problem],
    agent: &str,
    modes: &[PromptMode],
    judge: Option<&AnswerJudge<'_>>,
    parallelism: usize,
) -> Result<Vec<ReflectionRow>, DiagnosticsError> {
    let records = decouple_sweep(probe, problems, agent, judge, parallelism)?;
    let by_id: std::collections::HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let base_ve = records.iter().filter(|r| r.ve_correct == Some(true)).count() as u64;
    let base_ans = records.iter().filter(|r| r.ans_correct == Some(true)).count() as u64;
    let mut rows = vec![ReflectionRow {
        label: "original".into(),
        ve_correct: base_ve,
        answer_correct: base_ans,
        ve_delta: None,
        answer_delta: None,
        answers_changed: 0,
    }];
    let solved: Vec<Problem> = records.iter().map(|r| by_id[r.problem_id.as_str()].clone()).collect();
    for &mode in modes {
        let outcomes = par_map(&solved, parallelism, |p| {
            let first = records.iter().find(|r| r.problem_id == p.id).expect("record");
            let retry = probe.reflection_retry(p, &first.response, mode, agent)?;
            let changed = retry.answer != first.response.answer;
            let graded = grade_components(
                DecoupledRecord { problem_id: p.id.clone(), response: retry, ve_correct: None, traj_correct: None, ans_correct: None },
                p,
                judge,
            )?;
            Ok::<_, DiagnosticsError>((graded, changed))
        });
        let (mut ve, mut ans, mut changed) = (0u64, 0u64, 0u64);
        for (first, o) in records.iter().zip(outcomes) {
            match o {
                Ok((g, c)) => {
                    ve += g.ve_correct.unwrap_or(false) as u64;
                    ans += g.ans_correct.unwrap_or(false) as u64;
                    changed += c as u64;
                }
                Err(DiagnosticsError::Agent(e)) => {
                    log::warn!("reflection failed on {}: {e}; keeping first answer", first.problem_id);
                    ve += first.ve_correct.unwrap_or(false) as u64;
                    ans += first.ans_correct.unwrap_or(false) as u64;
                }
                Err(e) => return Err(e),
            }
        }
        rows.push(ReflectionRow {
            label: mode.name().to_string(),
            ve_correct: ve,
            answer_correct: ans,
            ve_delta: Some(ve as i64 - base_ve as i64),
            answer_delta: Some(ans as i64 - base_ans as i64),
            answers_changed: changed,
        });
    }
    Ok(rows)
}

pub fn supervision_markdown(rows: &[SupervisionRow], label: &str) -> String {
    let mut s = format!("| Add Info | {label} VE | {label} Answer |\n| --- | --- | --- |\n");
    let cell = |x: &Option<Share>| x.map(|s| format!("{}/{}", s.count, s.of)).unwrap_or_else(|| "-".into());
    for r in rows {
        s.push_str(&format!("| {} | {} | {} |\n", r.mode.name(), cell(&r.ve_fixed), cell(&r.answer_fixed)));
    }
    s
}

pub fn reflection_markdown(rows: &[ReflectionRow], label: &str) -> String {
    let mut s = format!("| Reflect Mode | {label} VE | {label} Answer | Answers changed |\n| --- | --- | --- | --- |\n");
    let with_delta = |v: u64, d: Option<i64>| match d {
        Some(d) if d < 0 => format!("{v} ({d})"),
        Some(d) => format!("{v} (+{d})"),
        None => v.to_string(),
    };
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.label,
            with_delta(r.ve_correct, r.ve_delta),
            with_delta(r.answer_correct, r.answer_delta),
            r.answers_changed
        ));
    }
    s
}
