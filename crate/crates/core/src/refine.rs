//! Refine tool: answer consensus plus the conflict-ratio gate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::JudgeContext;
use crate::answer::{choice_equivalent, numeric_equivalent};
use crate::domain::{AnswerKind, RefineDecision, Verdict};
use crate::fraction::Fraction;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("answer judge `{agent}` unavailable: {reason}")]
    JudgeUnavailable { agent: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerEquivalence {
    ChoiceLetter,
    Numeric,
    Judge { agent: String },
}

impl AnswerEquivalence {
    /// The rule-based equivalence for an answer kind, if there is one.
    pub fn for_kind(kind: AnswerKind) -> Option<Self> {
        match kind {
            AnswerKind::MultipleChoice => Some(Self::ChoiceLetter),
            AnswerKind::Numeric => Some(Self::Numeric),
            AnswerKind::FreeForm => None,
        }
    }

    pub fn equivalent(
        &self,
        a: &str,
        b: &str,
        judge: Option<&JudgeContext<'_>>,
        slot: u32,
        audit: &mut Vec<String>,
    ) -> Result<bool, RefineError> {
        match self {
            Self::ChoiceLetter => Ok(choice_equivalent(a, b)),
            Self::Numeric => Ok(numeric_equivalent(a, b)),
            Self::Judge { agent } => {
                let unavailable = |reason: String| RefineError::JudgeUnavailable { agent: agent.clone(), reason };
                let ctx = judge.ok_or_else(|| unavailable("no judge context".into()))?;
                let prompt = same_answer_prompt(a, b);
                let raw = ctx.ask(agent, &prompt, slot).map_err(|e| unavailable(e.to_string()))?;
                audit.push(format!("{a} vs {b}: {}", raw.trim()));
                Ok(parse_same(&raw))
            }
        }
    }
}

pub fn same_answer_prompt(a: &str, b: &str) -> String {
    format!(
        "Decide whether two final answers to the same problem are equivalent.\n\
         Answer 1: {a}\nAnswer 2: {b}\n\
         Reply with exactly one word: SAME or DIFFERENT.\n"
    )
}

/// `SAME` anywhere before any `DIFFERENT` counts as agreement; anything else
/// is a disagreement.
pub fn parse_same(raw: &str) -> bool {
    let upper = raw.to_ascii_uppercase();
    match (upper.find("SAME"), upper.find("DIFFERENT")) {
        (Some(s), Some(d)) => s < d,
        (Some(_), None) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consensus {
    pub agree_count: u32,
    pub ensemble_size: u32,
    pub high_consensus: bool,
    pub audit: Vec<String>,
}

/// Counts assistant answers equivalent to the anchor's. `ensemble_size` is
/// the configured number of assistants; abstentions (missing answers)
/// count as disagreement.
pub fn answer_consensus(
    anchor_answer: &str,
    assistant_answers: &[&str],
    ensemble_size: usize,
    eq: &AnswerEquivalence,
    judge: Option<&JudgeContext<'_>>,
) -> Result<Consensus, RefineError> {
    let mut audit = Vec::new();
    let mut agree = 0u32;
    for (slot, answer) in assistant_answers.iter().enumerate() {
        if eq.equivalent(anchor_answer, answer, judge, slot as u32, &mut audit)? {
            agree += 1;
        }
    }
    let n = ensemble_size.max(assistant_answers.len()) as u32;
    Ok(Consensus { agree_count: agree, ensemble_size: n, high_consensus: 2 * agree >= n, audit })
}

/// Reject iff the conflict ratio strictly exceeds the threshold and the
/// answer lacks high consensus.
pub fn gate(conflict_ratio: Fraction, high_consensus: bool, threshold: Fraction) -> Verdict {
    if conflict_ratio.gt(&threshold) && !high_consensus {
        Verdict::Reject
    } else {
        Verdict::Select
    }
}

pub fn refine_decision(conflict_ratio: Fraction, consensus: Consensus, threshold: f64) -> RefineDecision {
    let threshold_fraction = Fraction::from_decimal(threshold).expect("validated threshold");
    RefineDecision {
        verdict: gate(conflict_ratio, consensus.high_consensus, threshold_fraction),
        conflicts: conflict_ratio.numerator(),
        anchor_total: conflict_ratio.denominator(),
        conflict_ratio: conflict_ratio.value(),
        threshold,
        agree_count: consensus.agree_count,
        assistants_total: consensus.ensemble_size,
        high_consensus: consensus.high_consensus,
        answer_changed: None,
        audit: consensus.audit,
    }
}
