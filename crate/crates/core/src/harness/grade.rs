use thiserror::Error;

use crate::agents::{AgentError, AgentRegistry, JudgeContext};
use crate::answer::{choice_label, numeric_equivalent, resolve_choice};
use crate::domain::{AnswerKind, Problem};
use crate::refine::{parse_same, same_answer_prompt};

#[derive(Debug, Error)]
pub enum GradeError {
    #[error("problem `{0}` has no ground-truth answer")]
    MissingGroundTruth(String),
    #[error("problem `{0}` is free-form and no judge agent is configured")]
    JudgeRequired(String),
    #[error("grading judge failed: {0}")]
    Judge(#[from] AgentError),
}

/// Judge agent used to grade free-form answers.
#[derive(Clone, Copy)]
pub struct AnswerJudge<'a> {
    pub registry: &'a AgentRegistry,
    pub agent: &'a str,
    pub seed: u64,
}

/// Whether `predicted` matches the problem's ground truth.
pub fn grade_answer(predicted: &str, problem: &Problem, judge: Option<&AnswerJudge<'_>>) -> Result<bool, GradeError> {
    let truth = problem
        .ground_truth
        .as_deref()
        .ok_or_else(|| GradeError::MissingGroundTruth(problem.id.clone()))?;
    match problem.answer_kind {
        AnswerKind::MultipleChoice => {
            let choices = problem.choices.as_deref().unwrap_or_default();
            let want = resolve_choice(truth, choices).or_else(|| choice_label(truth));
            let got = resolve_choice(predicted, choices);
            Ok(want.is_some() && want == got)
        }
        AnswerKind::Numeric => Ok(numeric_equivalent(predicted, truth)),
        AnswerKind::FreeForm => {
            let judge = judge.ok_or_else(|| GradeError::JudgeRequired(problem.id.clone()))?;
            let ctx = JudgeContext { registry: judge.registry, problem, round: u32::MAX, seed: judge.seed, slot_base: 0 };
            let raw = ctx.ask(judge.agent, &same_answer_prompt(predicted, truth), 0)?;
            Ok(parse_same(&raw))
        }
    }
}
