//! Per-problem context book: frozen assistant responses, the anchor's
//! evolving history, and every summary and refine decision along the way.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::canonical_json;
use crate::domain::{AgentResponse, Problem, RefineDecision};
use crate::summary::CategorizedEvidence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BookError {
    #[error("response from `{agent}` has round {round}, expected 0")]
    MixedRounds { agent: String, round: u32 },
    #[error("anchor response came from `{got}`, expected `{expected}`")]
    WrongAnchor { expected: String, got: String },
    #[error("no assistant responses")]
    EmptyEnsemble,
    #[error("book for `{0}` is already finalized")]
    AlreadyFinal(String),
    #[error("round mismatch: expected round {expected}, got {got}")]
    RoundMismatch { expected: u32, got: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BookStatus {
    Unresolved,
    Selected,
    FinalizedNonConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBook {
    pub problem_id: String,
    assistant_responses: Vec<AgentResponse>,
    anchor_history: Vec<AgentResponse>,
    summaries: Vec<CategorizedEvidence>,
    decisions: Vec<RefineDecision>,
    status: BookStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_answer: Option<String>,
}

impl ContextBook {
    pub fn new(
        problem: &Problem,
        expected_anchor: &str,
        anchor: AgentResponse,
        assistants: Vec<AgentResponse>,
    ) -> Result<Self, BookError> {
        for r in std::iter::once(&anchor).chain(assistants.iter()) {
            if r.round != 0 {
                return Err(BookError::MixedRounds { agent: r.agent.clone(), round: r.round });
            }
        }
        if anchor.agent != expected_anchor {
            return Err(BookError::WrongAnchor { expected: expected_anchor.to_string(), got: anchor.agent });
        }
        if assistants.is_empty() {
            return Err(BookError::EmptyEnsemble);
        }
        Ok(Self {
            problem_id: problem.id.clone(),
            assistant_responses: assistants,
            anchor_history: vec![anchor],
            summaries: Vec::new(),
            decisions: Vec::new(),
            status: BookStatus::Unresolved,
            final_answer: None,
        })
    }

    /// A book for a problem that could not enter the loop (the anchor or the
    /// whole ensemble failed at round 0). Finalized immediately.
    pub fn quarantined(problem_id: &str, anchor: Option<AgentResponse>, assistants: Vec<AgentResponse>) -> Self {
        let answer = anchor.as_ref().map(|a| a.answer.clone()).unwrap_or_default();
        Self {
            problem_id: problem_id.to_string(),
            assistant_responses: assistants,
            anchor_history: anchor.into_iter().collect(),
            summaries: Vec::new(),
            decisions: Vec::new(),
            status: BookStatus::FinalizedNonConverged,
            final_answer: Some(answer),
        }
    }

    pub fn assistant_responses(&self) -> &[AgentResponse] {
        &self.assistant_responses
    }

    pub fn anchor_history(&self) -> &[AgentResponse] {
        &self.anchor_history
    }

    pub fn summaries(&self) -> &[CategorizedEvidence] {
        &self.summaries
    }

    pub fn decisions(&self) -> &[RefineDecision] {
        &self.decisions
    }

    pub fn status(&self) -> BookStatus {
        self.status
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_deref()
    }

    pub fn is_final(&self) -> bool {
        self.status != BookStatus::Unresolved
    }

    pub fn latest_anchor(&self) -> Option<&AgentResponse> {
        self.anchor_history.last()
    }

    /// Refinement rounds completed after round 0.
    pub fn rounds_completed(&self) -> usize {
        self.decisions.len()
    }

    /// Appends one completed round: the summary that conditioned the
    /// regeneration, the regenerated anchor response, and its verdict.
    pub fn push_round(
        &mut self,
        summary: CategorizedEvidence,
        regenerated: AgentResponse,
        decision: RefineDecision,
    ) -> Result<(), BookError> {
        if self.is_final() {
            return Err(BookError::AlreadyFinal(self.problem_id.clone()));
        }
        let expected = self.anchor_history.len() as u32;
        if regenerated.round != expected {
            return Err(BookError::RoundMismatch { expected, got: regenerated.round });
        }
        self.summaries.push(summary);
        self.anchor_history.push(regenerated);
        self.decisions.push(decision);
        Ok(())
    }

    pub fn finalize(&mut self, answer: impl Into<String>, converged: bool) -> Result<(), BookError> {
        if self.is_final() {
            return Err(BookError::AlreadyFinal(self.problem_id.clone()));
        }
        self.status = if converged { BookStatus::Selected } else { BookStatus::FinalizedNonConverged };
        self.final_answer = Some(answer.into());
        Ok(())
    }

    /// Structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (k, r) in self.anchor_history.iter().enumerate() {
            if r.round as usize != k {
                return Err(format!("anchor_history[{k}] has round {}", r.round));
            }
        }
        if self.assistant_responses.iter().any(|r| r.round != 0) {
            return Err("assistant response outside round 0".into());
        }
        let after_zero = self.anchor_history.len().saturating_sub(1);
        if self.summaries.len() != after_zero || self.decisions.len() != after_zero {
            return Err(format!(
                "{} summaries and {} decisions for {} refinement rounds",
                self.summaries.len(),
                self.decisions.len(),
                after_zero
            ));
        }
        if self.is_final() != self.final_answer.is_some() {
            return Err("final_answer present iff finalized".into());
        }
        if let Some(d) = self.decisions.iter().find(|d| !d.is_consistent()) {
            return Err(format!("inconsistent decision {d:?}"));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self).expect("context book serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AnswerKind, EvidenceItem};

    fn problem() -> Problem {
        Problem {
            id: "p1".into(),
            question: "q".into(),
            image: "img.png".into(),
            choices: None,
            ground_truth: Some("B".into()),
            gt_evidence: None,
            answer_kind: AnswerKind::Numeric,
        }
    }

    fn resp(agent: &str, round: u32) -> AgentResponse {
        AgentResponse {
            agent: agent.into(),
            round,
            evidence: vec![EvidenceItem::new(1, "fact", agent, round)],
            answer: "B".into(),
            trajectory: None,
            raw: "raw".into(),
        }
    }

    fn book() -> ContextBook {
        ContextBook::new(&problem(), "a0", resp("a0", 0), vec![resp("a1", 0), resp("a2", 0), resp("a3", 0)]).unwrap()
    }

    #[test]
    fn constructs_unresolved_book() {
        let b = book();
        assert_eq!(b.status(), BookStatus::Unresolved);
        assert_eq!(b.assistant_responses().len(), 3);
        assert_eq!(b.anchor_history().len(), 1);
        b.check_invariants().unwrap();
    }

    #[test]
    fn construction_errors() {
        let err = ContextBook::new(&problem(), "a0", resp("a0", 1), vec![resp("a1", 0)]).unwrap_err();
        assert!(matches!(err, BookError::MixedRounds { .. }));
        let err = ContextBook::new(&problem(), "a0", resp("a9", 0), vec![resp("a1", 0)]).unwrap_err();
        assert!(matches!(err, BookError::WrongAnchor { .. }));
        let err = ContextBook::new(&problem(), "a0", resp("a0", 0), vec![]).unwrap_err();
        assert_eq!(err, BookError::EmptyEnsemble);
    }

    #[test]
    fn finalize_transitions() {
        let mut b = book();
        b.finalize("B", true).unwrap();
        assert_eq!(b.status(), BookStatus::Selected);
        assert_eq!(b.final_answer(), Some("B"));
        assert!(matches!(b.finalize("C", true), Err(BookError::AlreadyFinal(_))));

        let mut b = book();
        b.finalize("B", false).unwrap();
        assert_eq!(b.status(), BookStatus::FinalizedNonConverged);
    }

    #[test]
    fn canonical_json_round_trips_bytes() {
        let mut b = book();
        b.finalize("B", true).unwrap();
        let text = b.to_canonical_json();
        let again = ContextBook::from_json(&text).unwrap().to_canonical_json();
        assert_eq!(text, again);
    }
}
