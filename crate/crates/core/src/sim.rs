//! Synthetic problem world used by the stochastic agent backend.
//!
//! A synthetic problem carries `m` canonical facts (`k1 = 37`, ...) in its
//! `gt_evidence`, an image reference `synthetic://<id>?distractors=<d>`, and
//! a numeric answer. Each fact has exactly one corrupted value, so two
//! agents that misperceive the same fact agree with each other. Wrong
//! answers come from a pool of `d` distractors, chosen by hashing which
//! facts were corrupted.

use std::collections::BTreeSet;

use crate::digest::stable_u64;
use crate::domain::{AgentResponse, AnswerKind, Polarity, Problem};

pub const SYNTHETIC_SCHEME: &str = "synthetic://";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub key: String,
    pub truth: i64,
    pub corrupted: i64,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    problem_id: String,
    facts: Vec<Fact>,
    answer: i64,
    distractors: u64,
}

fn parse_fact(statement: &str) -> Option<(&str, i64)> {
    let (key, value) = statement.split_once('=')?;
    let key = key.trim();
    if key.is_empty() || key.contains(char::is_whitespace) {
        return None;
    }
    Some((key, value.trim().parse().ok()?))
}

fn distractor_param(image: &str) -> Option<u64> {
    let (_, query) = image.strip_prefix(SYNTHETIC_SCHEME)?.split_once('?')?;
    query.split('&').find_map(|kv| kv.strip_prefix("distractors=")?.parse().ok())
}

impl SimWorld {
    /// `None` unless the problem is synthetic and well formed.
    pub fn from_problem(problem: &Problem) -> Option<Self> {
        let distractors = distractor_param(&problem.image).filter(|d| *d >= 1)?;
        let facts = problem
            .gt_evidence
            .as_ref()?
            .iter()
            .map(|s| {
                let (key, truth) = parse_fact(s)?;
                let shift = 1 + (stable_u64(&[problem.id.as_bytes(), key.as_bytes(), b"corrupt"]) % 9) as i64;
                Some(Fact { key: key.to_string(), truth, corrupted: truth + shift })
            })
            .collect::<Option<Vec<_>>>()?;
        let answer = problem.ground_truth.as_deref()?.trim().parse().ok()?;
        if facts.is_empty() || problem.answer_kind != AnswerKind::Numeric {
            return None;
        }
        Some(Self { problem_id: problem.id.clone(), facts, answer, distractors })
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn correct_answer(&self) -> String {
        self.answer.to_string()
    }

    pub fn statement(&self, index: usize, correct: bool) -> String {
        let f = &self.facts[index];
        format!("{} = {}", f.key, if correct { f.truth } else { f.corrupted })
    }

    /// Key and polarity of a `key = value` statement about one of the facts.
    pub fn classify(&self, statement: &str) -> Option<(String, Polarity)> {
        let (key, value) = parse_fact(statement)?;
        let fact = self.facts.iter().find(|f| f.key == key)?;
        let polarity = if value == fact.truth { Polarity::Correct } else { Polarity::Corrupted };
        Some((fact.key.clone(), polarity))
    }

    pub fn annotate(&self, response: &mut AgentResponse) {
        for item in &mut response.evidence {
            if let Some((key, polarity)) = self.classify(&item.statement) {
                item.key = Some(key);
                item.polarity = Some(polarity);
            }
        }
    }

    /// The correct answer when nothing was corrupted and the plan was sound;
    /// otherwise a distractor chosen by hashing the failure.
    pub fn answer_for<'a>(&self, corrupted: impl IntoIterator<Item = &'a str>, trajectory_ok: bool) -> String {
        let keys: BTreeSet<&str> = corrupted.into_iter().collect();
        if keys.is_empty() && trajectory_ok {
            return self.correct_answer();
        }
        let signature = if keys.is_empty() {
            "trajectory".to_string()
        } else {
            keys.into_iter().collect::<Vec<_>>().join(",")
        };
        let pick = stable_u64(&[self.problem_id.as_bytes(), signature.as_bytes(), b"distractor"]) % self.distractors;
        (self.answer + 3 * (pick as i64 + 1)).to_string()
    }

    pub fn plan_token(&self, correct: bool) -> String {
        let tag: &[u8] = if correct { b"plan" } else { b"plan-wrong" };
        format!("R{:08x}", stable_u64(&[self.problem_id.as_bytes(), tag]) as u32)
    }

    pub fn trajectory(&self, correct: bool) -> Vec<String> {
        let keys: Vec<&str> = self.facts.iter().map(|f| f.key.as_str()).collect();
        vec![
            format!("Read {} from the figure.", keys.join(", ")),
            format!("Combine them with relation {}.", self.plan_token(correct)),
            "Evaluate the result.".to_string(),
        ]
    }

    pub fn trajectory_correct(&self, steps: &[String]) -> bool {
        let token = self.plan_token(true);
        steps.iter().any(|s| s.contains(&token))
    }

    /// All evidence items carry `Correct` polarity and every fact is covered.
    pub fn evidence_correct(&self, response: &AgentResponse) -> bool {
        let mut seen = BTreeSet::new();
        for item in &response.evidence {
            match self.classify(&item.statement) {
                Some((key, Polarity::Correct)) => {
                    seen.insert(key);
                }
                _ => return false,
            }
        }
        seen.len() == self.facts.len()
    }
}

/// Deterministic synthetic benchmark: `count` numeric problems with `facts`
/// keys and a pool of `distractors` wrong answers each.
pub fn generate_problems(seed: u64, count: usize, facts: usize, distractors: usize) -> Vec<Problem> {
    let seed_bytes = seed.to_le_bytes();
    (0..count)
        .map(|j| {
            let id = format!("sim-{seed}-{j:04}");
            let gt_evidence: Vec<String> = (1..=facts)
                .map(|k| {
                    let key = format!("k{k}");
                    let value = 10 + stable_u64(&[&seed_bytes, id.as_bytes(), key.as_bytes()]) % 90;
                    format!("{key} = {value}")
                })
                .collect();
            let answer: i64 = gt_evidence.iter().filter_map(|s| parse_fact(s)).map(|(_, v)| v).sum();
            Problem {
                question: format!(
                    "Synthetic item {j}: read {} from the figure and compute the target quantity.",
                    (1..=facts).map(|k| format!("k{k}")).collect::<Vec<_>>().join(", ")
                ),
                image: format!("{SYNTHETIC_SCHEME}{id}?distractors={distractors}"),
                choices: None,
                ground_truth: Some(answer.to_string()),
                gt_evidence: Some(gt_evidence),
                answer_kind: AnswerKind::Numeric,
                id,
            }
        })
        .collect()
}
