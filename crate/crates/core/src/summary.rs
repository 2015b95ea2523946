//! Summary tool: sorts the anchor's evidence against the frozen assistant
//! lists into consistent, complementary and conflicting groups and computes
//! the conflict ratio.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::JudgeContext;
use crate::answer::normalize_text;
use crate::domain::EvidenceItem;
use crate::fraction::Fraction;

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("anchor evidence list is empty")]
    EmptyAnchor,
    #[error("evidence judge `{agent}` unavailable: {reason}")]
    JudgeUnavailable { agent: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Supports,
    Contradicts,
    Unrelated,
}

/// How anchor items are compared against assistant items.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceMatcher {
    /// Keyed items match on key and conflict on differing polarity.
    /// Unkeyed items only ever support each other, on equal normalized text.
    #[default]
    Canonical,
    /// A lightweight judge agent labels each (anchor item, assistant item)
    /// pair.
    Judge { agent: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub anchor: EvidenceItem,
    pub assistant: EvidenceItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedEvidence {
    pub consistent: Vec<EvidenceItem>,
    pub complementary: Vec<EvidenceItem>,
    pub conflicting: Vec<ConflictPair>,
    /// Anchor items no assistant mentions. Counted in `anchor_total` only.
    pub anchor_only: Vec<EvidenceItem>,
    pub anchor_total: u64,
    pub conflict_count: u64,
    pub conflict_ratio: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<String>,
}

impl CategorizedEvidence {
    pub fn ratio(&self) -> Fraction {
        compute_conflict_ratio(self)
    }
}

/// Exact conflict ratio: distinct conflicted anchor items over anchor total.
pub fn compute_conflict_ratio(categorized: &CategorizedEvidence) -> Fraction {
    Fraction::new(categorized.conflict_count, categorized.anchor_total.max(1)).expect("nonzero denominator")
}

pub fn canonical_relation(anchor: &EvidenceItem, other: &EvidenceItem) -> Relation {
    match (&anchor.key, &other.key) {
        (Some(a), Some(b)) if a == b => {
            if anchor.polarity == other.polarity {
                Relation::Supports
            } else {
                Relation::Contradicts
            }
        }
        (None, None) if normalize_text(&anchor.statement) == normalize_text(&other.statement) => Relation::Supports,
        _ => Relation::Unrelated,
    }
}

fn same_item(matcher: &EvidenceMatcher, a: &EvidenceItem, b: &EvidenceItem) -> bool {
    match matcher {
        EvidenceMatcher::Canonical => canonical_relation(a, b) == Relation::Supports,
        EvidenceMatcher::Judge { .. } => normalize_text(&a.statement) == normalize_text(&b.statement),
    }
}

pub fn categorize(
    anchor: &[EvidenceItem],
    assistants: &[Vec<EvidenceItem>],
    matcher: &EvidenceMatcher,
    judge: Option<&JudgeContext<'_>>,
) -> Result<CategorizedEvidence, SummaryError> {
    if anchor.is_empty() {
        return Err(SummaryError::EmptyAnchor);
    }
    let flat: Vec<&EvidenceItem> = assistants.iter().flatten().collect();
    let mut audit = Vec::new();

    // relations[i][f]: anchor item i against flattened assistant item f.
    let relations: Vec<Vec<Relation>> = match matcher {
        EvidenceMatcher::Canonical => anchor
            .iter()
            .map(|a| flat.iter().map(|b| canonical_relation(a, b)).collect())
            .collect(),
        EvidenceMatcher::Judge { agent } => {
            let ctx = judge.ok_or_else(|| SummaryError::JudgeUnavailable {
                agent: agent.clone(),
                reason: "no judge context".into(),
            })?;
            let mut rows = Vec::with_capacity(anchor.len());
            for (slot, a) in anchor.iter().enumerate() {
                let prompt = judge_prompt(a, &flat);
                let raw = ctx
                    .ask(agent, &prompt, slot as u32)
                    .map_err(|e| SummaryError::JudgeUnavailable { agent: agent.clone(), reason: e.to_string() })?;
                audit.push(format!("anchor item {}: {}", a.index, raw.trim()));
                rows.push(parse_judge_labels(&raw, flat.len()));
            }
            rows
        }
    };

    let mut consistent = Vec::new();
    let mut conflicting: Vec<ConflictPair> = Vec::new();
    let mut anchor_only = Vec::new();
    let mut conflict_count = 0u64;
    for (a, row) in anchor.iter().zip(&relations) {
        let contradictors: Vec<&EvidenceItem> =
            flat.iter().zip(row).filter(|(_, r)| **r == Relation::Contradicts).map(|(b, _)| *b).collect();
        if !contradictors.is_empty() {
            conflict_count += 1;
            let mut kept: Vec<&EvidenceItem> = Vec::new();
            for b in contradictors {
                if !kept.iter().any(|k| same_item(matcher, k, b)) {
                    kept.push(b);
                    conflicting.push(ConflictPair { anchor: a.clone(), assistant: b.clone() });
                }
            }
        } else if row.contains(&Relation::Supports) {
            consistent.push(a.clone());
        } else {
            anchor_only.push(a.clone());
        }
    }

    let mut complementary: Vec<EvidenceItem> = Vec::new();
    for (f, b) in flat.iter().enumerate() {
        let mentioned = relations.iter().any(|row| row[f] != Relation::Unrelated);
        if !mentioned && !complementary.iter().any(|c| same_item(matcher, c, b)) {
            complementary.push((*b).clone());
        }
    }

    let anchor_total = anchor.len() as u64;
    Ok(CategorizedEvidence {
        consistent,
        complementary,
        conflicting,
        anchor_only,
        anchor_total,
        conflict_count,
        conflict_ratio: conflict_count as f64 / anchor_total as f64,
        audit,
    })
}

fn judge_prompt(anchor: &EvidenceItem, candidates: &[&EvidenceItem]) -> String {
    let mut p = String::from(
        "You compare visual-evidence statements extracted from the same figure.\n\
         Reference statement: ",
    );
    p.push_str(&anchor.statement);
    p.push_str("\nCandidate statements:\n");
    for (i, c) in candidates.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, c.statement));
    }
    p.push_str(
        "For each candidate write exactly one line `<number>: <LABEL>` where LABEL is\n\
         SUPPORTS (states the same fact as the reference), CONTRADICTS (gives an\n\
         incompatible value for the same quantity) or UNRELATED.\n",
    );
    p
}

static LABEL_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*[*_]*\s*(\d+)\s*[*_]*\s*[:.)\-]\s*[*_]*\s*(supports|contradicts|unrelated)\b").expect("regex")
});

/// One label per line; anything missing or unparseable counts as unrelated.
pub fn parse_judge_labels(raw: &str, expected: usize) -> Vec<Relation> {
    let mut labels = vec![Relation::Unrelated; expected];
    for line in raw.lines() {
        if let Some(c) = LABEL_LINE.captures(line) {
            let Ok(n) = c[1].parse::<usize>() else { continue };
            if n == 0 || n > expected {
                continue;
            }
            labels[n - 1] = match c[2].to_ascii_lowercase().as_str() {
                "supports" => Relation::Supports,
                "contradicts" => Relation::Contradicts,
                _ => Relation::Unrelated,
            };
        }
    }
    labels
}
