use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grade::{grade_answer, AnswerJudge, GradeError};
use crate::book::ContextBook;
use crate::domain::{Problem, Verdict};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("incomplete run: {0}")]
    IncompleteRun(String),
    #[error(transparent)]
    Grade(#[from] GradeError),
}

/// Sample count and accuracy (percent, unrounded) of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCell {
    pub count: u64,
    pub accuracy_pct: f64,
}

impl StageCell {
    pub fn new(count: u64, accuracy_pct: f64) -> Self {
        Self { count, accuracy_pct }
    }

    pub fn from_counts(correct: u64, count: u64) -> Self {
        let accuracy_pct = if count == 0 { 0.0 } else { 100.0 * correct as f64 / count as f64 };
        Self { count, accuracy_pct }
    }

    /// Accuracy rounded half-up to one decimal.
    pub fn rounded(&self) -> f64 {
        round_tenth(self.accuracy_pct)
    }
}

pub fn round_tenth(value: f64) -> f64 {
    (value * 10.0).round() / 10.0
}

/// Count-weighted mean of disjoint partitions.
pub fn combine(cells: &[StageCell]) -> StageCell {
    let count: u64 = cells.iter().map(|c| c.count).sum();
    if count == 0 {
        return StageCell::new(0, 0.0);
    }
    let weighted: f64 = cells.iter().map(|c| c.count as f64 * c.accuracy_pct).sum();
    StageCell::new(count, weighted / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Every sample regenerated this round.
    pub regenerate: StageCell,
    pub select: StageCell,
    pub reject: StageCell,
    /// This round's rejects, graded on their next regeneration. Absent when
    /// no reject was regenerated again.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflect: Option<StageCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub cot_infer: StageCell,
    pub rounds: Vec<RoundMetrics>,
    pub all: StageCell,
}

impl StageMetrics {
    pub fn is_empty(&self) -> bool {
        self.all.count == 0
    }

    pub fn first_round(&self) -> Option<&RoundMetrics> {
        self.rounds.first()
    }
}

/// Grades every stage of a finished run.
pub fn stage_metrics(
    problems: &[Problem],
    books: &BTreeMap<String, ContextBook>,
    judge: Option<&AnswerJudge<'_>>,
) -> Result<StageMetrics, MetricsError> {
    if problems.is_empty() {
        return Err(MetricsError::IncompleteRun("no problems".into()));
    }
    let mut cache: HashMap<(String, String), bool> = HashMap::new();
    let mut grade = |problem: &Problem, answer: &str| -> Result<bool, GradeError> {
        if answer.trim().is_empty() {
            return Ok(false);
        }
        let key = (problem.id.clone(), answer.to_string());
        if let Some(v) = cache.get(&key) {
            return Ok(*v);
        }
        let v = grade_answer(answer, problem, judge)?;
        cache.insert(key, v);
        Ok(v)
    };

    let mut entries = Vec::with_capacity(problems.len());
    for p in problems {
        let book = books
            .get(&p.id)
            .ok_or_else(|| MetricsError::IncompleteRun(format!("no context book for `{}`", p.id)))?;
        let answer = book
            .final_answer()
            .ok_or_else(|| MetricsError::IncompleteRun(format!("`{}` has no final answer", p.id)))?;
        entries.push((p, book, answer));
    }

    let total = entries.len() as u64;
    let mut cot = 0;
    let mut all = 0;
    let max_round = entries.iter().map(|(_, b, _)| b.rounds_completed()).max().unwrap_or(0);
    let mut rounds = Vec::with_capacity(max_round);
    for (p, book, answer) in &entries {
        if let Some(first) = book.anchor_history().first() {
            cot += grade(p, &first.answer)? as u64;
        }
        all += grade(p, answer)? as u64;
    }
    for k in 1..=max_round {
        let (mut regen, mut sel, mut rej, mut refl) = ([0u64; 2], [0u64; 2], [0u64; 2], [0u64; 2]);
        for (p, book, _) in &entries {
            if book.rounds_completed() < k {
                continue;
            }
            let ok = grade(p, &book.anchor_history()[k].answer)? as u64;
            regen[0] += ok;
            regen[1] += 1;
            match book.decisions()[k - 1].verdict {
                Verdict::Select => {
                    sel[0] += ok;
                    sel[1] += 1;
                }
                Verdict::Reject => {
                    rej[0] += ok;
                    rej[1] += 1;
                    if let Some(next) = book.anchor_history().get(k + 1) {
                        refl[0] += grade(p, &next.answer)? as u64;
                        refl[1] += 1;
                    }
                }
            }
        }
        rounds.push(RoundMetrics {
            round: k as u32,
            regenerate: StageCell::from_counts(regen[0], regen[1]),
            select: StageCell::from_counts(sel[0], sel[1]),
            reject: StageCell::from_counts(rej[0], rej[1]),
            reflect: (refl[1] > 0).then(|| StageCell::from_counts(refl[0], refl[1])),
        });
    }
    Ok(StageMetrics {
        cot_infer: StageCell::from_counts(cot, total),
        rounds,
        all: StageCell::from_counts(all, total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_weights_by_count() {
        let c = combine(&[StageCell::new(3, 100.0), StageCell::new(1, 0.0)]);
        assert_eq!(c.count, 4);
        assert_eq!(c.accuracy_pct, 75.0);
        assert_eq!(combine(&[]).count, 0);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(StageCell::from_counts(1, 8).rounded(), 12.5);
        assert_eq!(StageCell::from_counts(182, 304).rounded(), 59.9);
        assert_eq!(StageCell::from_counts(208, 304).rounded(), 68.4);
    }
}
