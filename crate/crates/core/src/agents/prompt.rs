use std::collections::BTreeMap;
use std::path::Path;

use super::{AgentError, ParseFailure, PromptMode};
use crate::answer::label_for;
use crate::diagnostics::{SupervisionMode, SupervisionPayload};
use crate::domain::{AgentResponse, EvidenceItem, Problem};
use crate::summary::CategorizedEvidence;

/// Bumped whenever a bundled template changes wording.
pub const PROMPT_VERSION: &str = "v1";

const FORMAT: &str = include_str!("../../prompts/format.txt");

fn bundled(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::CotPlain => include_str!("../../prompts/cot_plain.txt"),
        PromptMode::StructuredVe => include_str!("../../prompts/structured_ve.txt"),
        PromptMode::DecoupledThreeStep => include_str!("../../prompts/decoupled_three_step.txt"),
        PromptMode::RegenerateWithSummary => include_str!("../../prompts/regenerate_with_summary.txt"),
        PromptMode::ReflectOnAnswer => include_str!("../../prompts/reflect_on_answer.txt"),
        PromptMode::ReflectOnVe => include_str!("../../prompts/reflect_on_ve.txt"),
        PromptMode::SupervisedRetry => include_str!("../../prompts/supervised_retry.txt"),
    }
}

/// Extra context a prompt mode needs.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptPayload {
    /// Categorized evidence plus the anchor response it was computed from.
    Summary { summary: CategorizedEvidence, previous: AgentResponse },
    /// The agent's own earlier response, for reflection.
    Prior(AgentResponse),
    Supervision(SupervisionPayload),
}

/// Prompt templates, bundled by default and overridable per mode from a
/// directory of `<mode>.txt` files (plus `format.txt`).
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    modes: BTreeMap<&'static str, String>,
    format: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            modes: PromptMode::ALL.iter().map(|m| (m.name(), bundled(*m).to_string())).collect(),
            format: FORMAT.to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        for mode in PromptMode::ALL {
            let path = dir.join(format!("{}.txt", mode.name()));
            if path.exists() {
                t.modes.insert(mode.name(), std::fs::read_to_string(path)?);
            }
        }
        let format = dir.join("format.txt");
        if format.exists() {
            t.format = std::fs::read_to_string(format)?;
        }
        Ok(t)
    }

    pub fn build(&self, problem: &Problem, mode: PromptMode, payload: Option<&PromptPayload>) -> Result<String, AgentError> {
        let mut vars: Vec<(&str, String)> = vec![
            ("question", problem.question.clone()),
            ("choices", render_choices(problem)),
            ("format", self.format_block(mode)),
        ];
        let missing = || AgentError::MissingExtras(mode);
        match mode {
            PromptMode::CotPlain | PromptMode::StructuredVe | PromptMode::DecoupledThreeStep => {}
            PromptMode::RegenerateWithSummary => {
                let Some(PromptPayload::Summary { summary, previous }) = payload else { return Err(missing()) };
                vars.push(("previous_evidence", numbered(previous.evidence.iter().map(|e| e.statement.as_str()))));
                vars.push(("previous_answer", previous.answer.clone()));
                vars.push(("consistent", numbered(summary.consistent.iter().map(|e| e.statement.as_str()))));
                vars.push(("complementary", numbered(summary.complementary.iter().map(|e| e.statement.as_str()))));
                vars.push((
                    "conflicting",
                    numbered(summary.conflicting.iter().map(|p| {
                        format!("yours: {} | other solver ({}): {}", p.anchor.statement, p.assistant.source_agent, p.assistant.statement)
                    })),
                ));
            }
            PromptMode::ReflectOnAnswer | PromptMode::ReflectOnVe => {
                let Some(PromptPayload::Prior(prior)) = payload else { return Err(missing()) };
                vars.push(("previous_response", prior.raw.trim_end().to_string()));
                vars.push(("previous_evidence", evidence_block(&prior.evidence)));
                vars.push(("previous_answer", prior.answer.clone()));
            }
            PromptMode::SupervisedRetry => {
                let Some(PromptPayload::Supervision(sup)) = payload else { return Err(missing()) };
                vars.push(("previous_response", sup.prior_history.raw.trim_end().to_string()));
                vars.push(("supervision", supervision_text(sup).ok_or_else(missing)?));
            }
        }
        Ok(fill(&self.modes[mode.name()], &vars))
    }

    fn format_block(&self, mode: PromptMode) -> String {
        let traj = if mode.requires_trajectory() {
            "TRAJECTORY:\n1. <one planned reasoning step per line>\n2. <...>\n"
        } else {
            ""
        };
        fill(&self.format, &[("trajectory_format", traj.to_string())])
    }

    /// Appended to the prompt when the previous attempt did not parse.
    pub fn reminder(&self, mode: PromptMode, failure: &ParseFailure) -> String {
        format!(
            "Your previous reply could not be read ({failure}). Reply again using exactly the required format.\n{}",
            self.format_block(mode)
        )
    }
}

/// Builds the prompt for `mode` with the bundled templates.
pub fn build_solve_prompt(problem: &Problem, mode: PromptMode, payload: Option<&PromptPayload>) -> Result<String, AgentError> {
    PromptTemplates::default().build(problem, mode, payload)
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

fn render_choices(problem: &Problem) -> String {
    match &problem.choices {
        Some(choices) if !choices.is_empty() => {
            let mut s = String::from("Choices:\n");
            for (i, c) in choices.iter().enumerate() {
                let label = label_for(i);
                if c.trim_start().starts_with(label) {
                    s.push_str(&format!("{c}\n"));
                } else {
                    s.push_str(&format!("{label}. {c}\n"));
                }
            }
            s.push_str("Answer with the option letter only.\n");
            s
        }
        _ => String::new(),
    }
}

fn numbered<I, S>(items: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let lines: Vec<String> = items.into_iter().enumerate().map(|(i, s)| format!("{}. {}", i + 1, s.as_ref())).collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

fn evidence_block(items: &[EvidenceItem]) -> String {
    numbered(items.iter().map(|e| e.statement.as_str()))
}

fn supervision_text(sup: &SupervisionPayload) -> Option<String> {
    match sup.mode {
        SupervisionMode::GtJudge => {
            Some("Your previous answer is incorrect. Review your work and answer the question again.".to_string())
        }
        SupervisionMode::GtJudgePlusAnswer => {
            let answer = sup.gt_answer.as_deref()?;
            Some(format!(
                "Your previous answer is incorrect. The correct final answer is {answer}. \
                 Revise your visual evidence so that it reflects what the image actually shows, \
                 then give the final answer."
            ))
        }
        SupervisionMode::GtVe => {
            let evidence = sup.gt_evidence.as_ref().filter(|e| !e.is_empty())?;
            Some(format!(
                "Your previous answer is incorrect. The following visual evidence has been verified as correct:\n{}\n\
                 Re-answer the question using exactly this evidence.",
                numbered(evidence)
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AnswerKind;

    fn problem() -> Problem {
        Problem {
            id: "p".into(),
            question: "Find the area.".into(),
            image: "fig.png".into(),
            choices: None,
            ground_truth: Some("25".into()),
            gt_evidence: None,
            answer_kind: AnswerKind::Numeric,
        }
    }

    fn prior() -> AgentResponse {
        AgentResponse {
            agent: "a0".into(),
            round: 0,
            evidence: vec![EvidenceItem::new(1, "The radius is 5.", "a0", 0), EvidenceItem::new(2, "AB = 3", "a0", 0)],
            answer: "25".into(),
            trajectory: None,
            raw: "VISUAL_EVIDENCE:\n1. The radius is 5.\n2. AB = 3\nANSWER: 25\n".into(),
        }
    }

    #[test]
    fn structured_prompt_has_headers() {
        let p = build_solve_prompt(&problem(), PromptMode::StructuredVe, None).unwrap();
        assert!(p.contains("VISUAL_EVIDENCE:"));
        assert!(p.contains("ANSWER:"));
        assert!(!p.contains("TRAJECTORY:"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn decoupled_prompt_has_trajectory() {
        let p = build_solve_prompt(&problem(), PromptMode::DecoupledThreeStep, None).unwrap();
        assert!(p.contains("TRAJECTORY:"));
        assert!(p.contains("VISUAL_EVIDENCE:"));
    }

    #[test]
    fn missing_extras() {
        for mode in [PromptMode::RegenerateWithSummary, PromptMode::ReflectOnVe, PromptMode::SupervisedRetry] {
            let err = build_solve_prompt(&problem(), mode, None).unwrap_err();
            assert!(matches!(err, AgentError::MissingExtras(m) if m == mode));
        }
        let wrong = PromptPayload::Prior(prior());
        let err = build_solve_prompt(&problem(), PromptMode::RegenerateWithSummary, Some(&wrong)).unwrap_err();
        assert!(matches!(err, AgentError::MissingExtras(_)));
    }

    #[test]
    fn summary_prompt_has_group_headings() {
        let summary = CategorizedEvidence {
            consistent: vec![EvidenceItem::new(1, "The radius is 5.", "a0", 0)],
            complementary: vec![EvidenceItem::new(1, "Angle AOB = 60", "a1", 0)],
            conflicting: vec![],
            anchor_only: vec![],
            anchor_total: 2,
            conflict_count: 0,
            conflict_ratio: 0.0,
            audit: vec![],
        };
        let payload = PromptPayload::Summary { summary, previous: prior() };
        let p = build_solve_prompt(&problem(), PromptMode::RegenerateWithSummary, Some(&payload)).unwrap();
        for h in ["CONSISTENT", "COMPLEMENTARY", "CONFLICTING"] {
            assert!(p.contains(h), "missing {h}");
        }
        assert!(p.contains("Angle AOB = 60"));
    }

    #[test]
    fn reflection_prompts_embed_prior() {
        let payload = PromptPayload::Prior(prior());
        let ve = build_solve_prompt(&problem(), PromptMode::ReflectOnVe, Some(&payload)).unwrap();
        assert!(ve.contains("1. The radius is 5.\n2. AB = 3"));
        let ans = build_solve_prompt(&problem(), PromptMode::ReflectOnAnswer, Some(&payload)).unwrap();
        assert!(ans.contains(prior().raw.trim_end()));
    }

    #[test]
    fn supervision_payload_contracts() {
        let mk = |mode, gt_answer: Option<&str>, gt_evidence: Option<Vec<String>>| {
            PromptPayload::Supervision(SupervisionPayload {
                mode,
                gt_answer: gt_answer.map(str::to_string),
                gt_evidence,
                prior_history: prior(),
            })
        };
        let p = build_solve_prompt(&problem(), PromptMode::SupervisedRetry, Some(&mk(SupervisionMode::GtJudge, Some("31"), None))).unwrap();
        assert!(p.contains("incorrect"));
        assert!(!p.contains("31"));

        let statements: Vec<String> = (1..=4).map(|i| format!("fact number {i}")).collect();
        let p = build_solve_prompt(
            &problem(),
            PromptMode::SupervisedRetry,
            Some(&mk(SupervisionMode::GtVe, None, Some(statements.clone()))),
        )
        .unwrap();
        for s in &statements {
            assert!(p.contains(s.as_str()));
        }
        assert_eq!(p.matches("fact number").count(), 4);

        let err = build_solve_prompt(&problem(), PromptMode::SupervisedRetry, Some(&mk(SupervisionMode::GtJudgePlusAnswer, None, None)))
            .unwrap_err();
        assert!(matches!(err, AgentError::MissingExtras(_)));
    }

    #[test]
    fn choices_are_listed() {
        let mut p = problem();
        p.answer_kind = AnswerKind::MultipleChoice;
        p.choices = Some(vec!["12".into(), "15".into()]);
        let text = build_solve_prompt(&p, PromptMode::StructuredVe, None).unwrap();
        assert!(text.contains("A. 12\nB. 15"));
    }
}
