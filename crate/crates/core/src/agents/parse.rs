//! Line-based parser for the VISUAL_EVIDENCE / TRAJECTORY / ANSWER grammar.
//!
//! Headers match case-insensitively, with or without markdown emphasis or a
//! heading marker. Evidence and trajectory items are numbered (`1.`, `2)`,
//! `(3)`) or bulleted (`-`, `*`, `•`) lines; a block with no list markers
//! takes each nonempty line as an item.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::PromptMode;
use crate::domain::{AgentResponse, EvidenceItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseFailureReason {
    EmptyInput,
    NoEvidenceBlock,
    EmptyEvidence,
    NoAnswerHeader,
    EmptyAnswer,
    NoTrajectory,
}

impl fmt::Display for ParseFailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EmptyInput => "empty_input",
            Self::NoEvidenceBlock => "no_evidence_block",
            Self::EmptyEvidence => "empty_evidence",
            Self::NoAnswerHeader => "no_answer_header",
            Self::EmptyAnswer => "empty_answer",
            Self::NoTrajectory => "no_trajectory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct ParseFailure {
    pub reason: ParseFailureReason,
}

impl From<ParseFailureReason> for ParseFailure {
    fn from(reason: ParseFailureReason) -> Self {
        Self { reason }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Evidence,
    Trajectory,
    Answer,
}

const HEADER_NAMES: &str =
    r"visual[\s_-]*evidence(?:[\s_-]*list)?|(?:reasoning[\s_-]*|solution[\s_-]*)?trajectory|final[\s_-]*answer|answer";

static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i)^\s*(?:#{{1,6}}\s*)?[*_`]*\s*({HEADER_NAMES})\s*[*_`]*\s*:\s*[*_`]*\s*(.*?)\s*$"))
        .expect("header regex")
});

// A header standing alone on its line without a colon, e.g. `## Answer`.
static BARE_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i)^\s*(?:#{{1,6}}\s*)?[*_`]*\s*({HEADER_NAMES})\s*[*_`]*\s*$")).expect("bare header regex")
});

/// Prose sections a model may insert between the required blocks. They end
/// the open block and are otherwise ignored.
static PROSE_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:#{1,6}\s*)?[*_`]*\s*(?:reasoning|explanation|solution|analysis|calculation|computation|working|steps|thoughts?)\s*[*_`]*\s*:",
    )
    .expect("prose header regex")
});

static LIST_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\(\d+\)|\d+[.):]|[-*•+])\s+(.*?)\s*$").expect("list regex"));

fn section_of(name: &str) -> Section {
    let lower = name.to_ascii_lowercase();
    if lower.contains("evidence") {
        Section::Evidence
    } else if lower.contains("trajectory") {
        Section::Trajectory
    } else {
        Section::Answer
    }
}

fn header(line: &str) -> Option<(Section, String)> {
    if let Some(c) = HEADER.captures(line) {
        return Some((section_of(&c[1]), strip_emphasis(&c[2])));
    }
    BARE_HEADER.captures(line).map(|c| (section_of(&c[1]), String::new()))
}

fn strip_emphasis(s: &str) -> String {
    s.trim().trim_matches(|c: char| matches!(c, '*' | '_' | '`')).trim().to_string()
}

/// Turns the raw lines of a list block into items.
fn list_items(lines: &[&str]) -> Vec<String> {
    let has_markers = lines.iter().any(|l| LIST_ITEM.is_match(l));
    let mut items: Vec<String> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        if !has_markers {
            items.push(line.trim().to_string());
        } else if let Some(c) = LIST_ITEM.captures(line) {
            items.push(c[1].to_string());
        } else if let Some(last) = items.last_mut() {
            last.push(' ');
            last.push_str(line.trim());
        }
    }
    items.retain(|s| !s.trim().is_empty());
    items
}

pub fn parse_structured_response(raw: &str, mode: PromptMode, agent: &str, round: u32) -> Result<AgentResponse, ParseFailure> {
    if raw.trim().is_empty() {
        return Err(ParseFailureReason::EmptyInput.into());
    }
    let mut evidence: Option<Vec<&str>> = None;
    let mut evidence_inline: Option<String> = None;
    let mut trajectory: Option<Vec<&str>> = None;
    let mut answer: Option<(String, Vec<&str>)> = None;
    let mut current: Option<Section> = None;

    for line in raw.lines() {
        if let Some((section, inline)) = header(line) {
            current = Some(section);
            match section {
                Section::Evidence => {
                    evidence = Some(Vec::new());
                    evidence_inline = (!inline.is_empty()).then_some(inline);
                }
                Section::Trajectory => trajectory = Some(Vec::new()),
                Section::Answer => answer = Some((inline, Vec::new())),
            }
            continue;
        }
        if PROSE_HEADER.is_match(line) {
            current = None;
            continue;
        }
        match current {
            Some(Section::Evidence) => evidence.as_mut().expect("open block").push(line),
            Some(Section::Trajectory) => trajectory.as_mut().expect("open block").push(line),
            Some(Section::Answer) => answer.as_mut().expect("open block").1.push(line),
            None => {}
        }
    }

    let Some(evidence_lines) = evidence else {
        return Err(ParseFailureReason::NoEvidenceBlock.into());
    };
    let mut statements: Vec<String> = evidence_inline.into_iter().collect();
    statements.extend(list_items(&evidence_lines));
    if statements.is_empty() {
        return Err(ParseFailureReason::EmptyEvidence.into());
    }
    let Some((inline, following)) = answer else {
        return Err(ParseFailureReason::NoAnswerHeader.into());
    };
    let answer_text = if inline.is_empty() {
        let joined: Vec<&str> = following.iter().map(|l| l.trim()).filter(|l| !l.is_empty()).collect();
        strip_emphasis(&joined.join(" "))
    } else {
        inline
    };
    if answer_text.is_empty() {
        return Err(ParseFailureReason::EmptyAnswer.into());
    }
    let trajectory = match (mode.requires_trajectory(), trajectory) {
        (true, None) => return Err(ParseFailureReason::NoTrajectory.into()),
        (true, Some(lines)) => {
            let steps = list_items(&lines);
            if steps.is_empty() {
                return Err(ParseFailureReason::NoTrajectory.into());
            }
            Some(steps)
        }
        (false, _) => None,
    };

    let evidence = statements
        .into_iter()
        .enumerate()
        .map(|(i, s)| EvidenceItem::new(i as u32 + 1, s, agent, round))
        .collect();
    Ok(AgentResponse {
        agent: agent.to_string(),
        round,
        evidence,
        answer: answer_text,
        trajectory,
        raw: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(raw: &str) -> Result<AgentResponse, ParseFailure> {
        parse_structured_response(raw, PromptMode::StructuredVe, "a0", 0)
    }

    #[test]
    fn well_formed() {
        let r = parse("VISUAL_EVIDENCE:\n1. The radius is 5.\n2. Angle AOB = 60 degrees.\nANSWER: 25").unwrap();
        let s: Vec<_> = r.statements().collect();
        assert_eq!(s, ["The radius is 5.", "Angle AOB = 60 degrees."]);
        assert_eq!(r.answer, "25");
        assert_eq!(r.evidence[1].index, 2);
    }

    #[test]
    fn tolerant_headers() {
        let r = parse("**Visual Evidence:**\n- hypotenuse = 13\n**Answer:** B").unwrap();
        assert_eq!(r.evidence.len(), 1);
        assert_eq!(r.evidence[0].statement, "hypotenuse = 13");
        assert_eq!(r.answer, "B");
    }

    #[test]
    fn no_evidence_block() {
        assert_eq!(parse("The answer is 42.").unwrap_err().reason, ParseFailureReason::NoEvidenceBlock);
    }

    #[test]
    fn other_failures() {
        assert_eq!(parse("").unwrap_err().reason, ParseFailureReason::EmptyInput);
        assert_eq!(parse("VISUAL_EVIDENCE:\nANSWER: 3").unwrap_err().reason, ParseFailureReason::EmptyEvidence);
        assert_eq!(parse("VISUAL_EVIDENCE:\n1. x\n").unwrap_err().reason, ParseFailureReason::NoAnswerHeader);
        assert_eq!(parse("VISUAL_EVIDENCE:\n1. x\nANSWER:").unwrap_err().reason, ParseFailureReason::EmptyAnswer);
    }

    #[test]
    fn last_answer_header_wins() {
        let r = parse("VISUAL_EVIDENCE:\n1. x = 1\nAnswer: 3\nWait, recheck.\nFinal Answer: 4").unwrap();
        assert_eq!(r.answer, "4");
    }

    #[test]
    fn answer_on_following_line() {
        let r = parse("## Visual Evidence\n1. a\n## Answer\n**C**").unwrap();
        assert_eq!(r.answer, "C");
    }

    #[test]
    fn trajectory_required_in_decoupled_mode() {
        let raw = "VISUAL_EVIDENCE:\n1. a = 2\nANSWER: 4";
        let err = parse_structured_response(raw, PromptMode::DecoupledThreeStep, "a0", 0).unwrap_err();
        assert_eq!(err.reason, ParseFailureReason::NoTrajectory);
        let raw = "VISUAL_EVIDENCE:\n1. a = 2\nTRAJECTORY:\n1. square a\nANSWER: 4";
        let r = parse_structured_response(raw, PromptMode::DecoupledThreeStep, "a0", 0).unwrap();
        assert_eq!(r.trajectory.unwrap(), ["square a"]);
    }

    #[test]
    fn prose_section_closes_evidence_block() {
        let r = parse("VISUAL_EVIDENCE:\n1. a = 2\nReasoning: double it.\nANSWER: 4").unwrap();
        assert_eq!(r.statements().collect::<Vec<_>>(), ["a = 2"]);
    }

    #[test]
    fn continuation_lines_join_previous_item() {
        let r = parse("VISUAL_EVIDENCE:\n1. a long\n   statement\n2. b\nANSWER: x").unwrap();
        let s: Vec<_> = r.statements().collect();
        assert_eq!(s, ["a long statement", "b"]);
    }
}
