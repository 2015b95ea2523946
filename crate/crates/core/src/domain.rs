//! Domain values shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::fraction::Fraction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    MultipleChoice,
    Numeric,
    FreeForm,
}

/// One benchmark item. Serialized with the dataset JSONL field names, so
/// `ground_truth` appears as `answer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_evidence: Option<Vec<String>>,
    pub answer_kind: AnswerKind,
}

impl Problem {
    /// Checks the per-item invariants. Returns the offending field name.
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.id.trim().is_empty() {
            return Err("id");
        }
        if self.question.trim().is_empty() {
            return Err("question");
        }
        if self.answer_kind == AnswerKind::MultipleChoice
            && self.choices.as_ref().is_none_or(|c| c.is_empty())
        {
            return Err("choices");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Correct,
    Corrupted,
}

/// One visual-evidence statement. `key` and `polarity` are only populated
/// for synthetic problems, where the simulator knows the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub index: u32,
    pub statement: String,
    pub source_agent: String,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

impl EvidenceItem {
    pub fn new(index: u32, statement: impl Into<String>, source_agent: impl Into<String>, round: u32) -> Self {
        Self {
            index,
            statement: statement.into(),
            source_agent: source_agent.into(),
            round,
            key: None,
            polarity: None,
        }
    }

    pub fn with_canonical(mut self, key: impl Into<String>, polarity: Polarity) -> Self {
        self.key = Some(key.into());
        self.polarity = Some(polarity);
        self
    }

    pub fn is_valid(&self) -> bool {
        self.index >= 1 && !self.statement.trim().is_empty() && self.key.is_some() == self.polarity.is_some()
    }
}

/// One agent's structured output for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub agent: String,
    pub round: u32,
    pub evidence: Vec<EvidenceItem>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<String>>,
    pub raw: String,
}

impl AgentResponse {
    pub fn statements(&self) -> impl Iterator<Item = &str> {
        self.evidence.iter().map(|e| e.statement.as_str())
    }

    /// Renders the response in the wire grammar accepted by
    /// [`crate::agents::parse_structured_response`].
    pub fn render(&self) -> String {
        let mut out = String::from("VISUAL_EVIDENCE:\n");
        for (i, item) in self.evidence.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, item.statement));
        }
        if let Some(steps) = &self.trajectory {
            out.push_str("TRAJECTORY:\n");
            for (i, step) in steps.iter().enumerate() {
                out.push_str(&format!("{}. {}\n", i + 1, step));
            }
        }
        out.push_str(&format!("ANSWER: {}\n", self.answer));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Select,
    Reject,
}

/// Refine-tool outcome for one sample in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineDecision {
    pub verdict: Verdict,
    pub conflicts: u64,
    pub anchor_total: u64,
    pub conflict_ratio: f64,
    pub threshold: f64,
    pub agree_count: u32,
    pub assistants_total: u32,
    pub high_consensus: bool,
    /// Whether the regenerated answer differs from the previous anchor
    /// answer. Recorded for audit; does not feed the verdict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_changed: Option<bool>,
    /// Raw judge transcripts when answers were compared by a judge agent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<String>,
}

impl RefineDecision {
    pub fn ratio(&self) -> Option<Fraction> {
        Fraction::new(self.conflicts, self.anchor_total)
    }

    /// Recomputes the verdict from the stored ratio and consensus flag.
    pub fn is_consistent(&self) -> bool {
        let (Some(ratio), Some(threshold)) = (self.ratio(), Fraction::from_decimal(self.threshold)) else {
            return false;
        };
        let reject = ratio.gt(&threshold) && !self.high_consensus;
        (self.verdict == Verdict::Reject) == reject
            && self.agree_count <= self.assistants_total
            && self.high_consensus == (2 * self.agree_count >= self.assistants_total)
    }
}
