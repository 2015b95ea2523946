mod common;

use std::sync::{Arc, Mutex};

use common::{response, synthetic, Script};
use veloop::agents::{Agent, AgentError, AgentRegistry, Invocation, PromptMode, PromptTemplates, StochasticAgent, StochasticProfile};
use veloop::diagnostics::{
    contingency_table, decouple_sweep, grade_components, reflection_sweep, supervision_sweep, DecoupledRecord,
    DiagnosticsError, Probe, SupervisionMode, SupervisionPayload,
};
use veloop::sim::generate_problems;
use veloop::{AgentResponse, AnswerKind, EvidenceItem, Problem};

fn record(i: usize, ans: bool, traj: bool, ve: bool) -> DecoupledRecord {
    DecoupledRecord {
        problem_id: format!("p{i}"),
        response: AgentResponse {
            agent: "m".into(),
            round: 0,
            evidence: vec![EvidenceItem::new(1, "x", "m", 0)],
            answer: "1".into(),
            trajectory: Some(vec!["s".into()]),
            raw: String::new(),
        },
        ve_correct: Some(ve),
        traj_correct: Some(traj),
        ans_correct: Some(ans),
    }
}

/// Records with the given marginals of one model column.
fn column(success: usize, s_traj: usize, s_ve: usize, failed: usize, f_traj: usize, f_ve: usize) -> Vec<DecoupledRecord> {
    let mut out: Vec<_> = (0..success).map(|i| record(i, true, i < s_traj, i < s_ve)).collect();
    out.extend((0..failed).map(|i| record(success + i, false, i < f_traj, i < f_ve)));
    out
}

#[test]
fn contingency_first_column() {
    let t = contingency_table(&column(208, 205, 170, 96, 67, 12)).unwrap();
    assert_eq!(t.samples, 304);
    let cells = [
        (t.success.total, "208 (68.4%)"),
        (t.success.traj_correct, "205 (98.6%)"),
        (t.success.traj_wrong, "3 (1.4%)"),
        (t.success.ve_correct, "170 (81.7%)"),
        (t.success.ve_wrong, "38 (18.3%)"),
        (t.failed.total, "96 (31.6%)"),
        (t.failed.traj_correct, "67 (69.8%)"),
        (t.failed.traj_wrong, "29 (30.2%)"),
        (t.failed.ve_correct, "12 (12.5%)"),
        (t.failed.ve_wrong, "84 (87.5%)"),
        (t.traj_total, "272 (89.5%)"),
    ];
    for (share, printed) in cells {
        assert_eq!(share.to_string(), printed);
    }
    // 182/304 = 59.87 rounds half-up to 59.9.
    assert_eq!(t.ve_total.to_string(), "182 (59.9%)");
    let md = t.to_markdown("model A");
    for needle in ["68.4", "81.7", "12.5", "89.5"] {
        assert!(md.contains(needle), "{md}");
    }
}

#[test]
fn contingency_second_column_groups() {
    let t = contingency_table(&column(210, 201, 170, 94, 62, 16)).unwrap();
    let cells = [
        (t.success.total, "210 (69.1%)"),
        (t.success.traj_correct, "201 (95.7%)"),
        (t.success.traj_wrong, "9 (4.3%)"),
        (t.success.ve_correct, "170 (81.0%)"),
        (t.failed.total, "94 (30.9%)"),
        (t.failed.traj_correct, "62 (66.0%)"),
        (t.failed.traj_wrong, "32 (34.0%)"),
        (t.failed.ve_correct, "16 (17.0%)"),
        (t.failed.ve_wrong, "78 (83.0%)"),
    ];
    for (share, printed) in cells {
        assert_eq!(share.to_string(), printed);
    }
}

#[test]
fn percentages_close_within_groups() {
    let t = contingency_table(&column(31, 17, 9, 12, 5, 2)).unwrap();
    for g in [t.success, t.failed] {
        assert_eq!(g.traj_correct.count + g.traj_wrong.count, g.total.count);
        assert_eq!(g.ve_correct.count + g.ve_wrong.count, g.total.count);
    }
    assert_eq!(t.success.total.count + t.failed.total.count, t.samples);
}

#[test]
fn empty_and_ungraded_inputs() {
    assert!(matches!(contingency_table(&[]), Err(DiagnosticsError::EmptyInput)));
    let mut r = record(0, true, true, true);
    r.traj_correct = None;
    assert!(matches!(contingency_table(&[r]), Err(DiagnosticsError::UngradedRecord(_))));
}

#[test]
fn scripted_decoupled_solve() {
    let world = synthetic(1, 2);
    let (p, w) = &world[0];
    let mut s = Script::default();
    let text = format!(
        "VISUAL_EVIDENCE:\n1. {}\n2. {}\nTRAJECTORY:\n{}\nANSWER: {}",
        w.statement(0, true),
        w.statement(1, false),
        w.trajectory(true).iter().enumerate().map(|(i, t)| format!("{}. {t}", i + 1)).collect::<Vec<_>>().join("\n"),
        w.answer_for(["k2"], true)
    );
    s.say(&p.id, "m", 0, text);
    let registry = s.registry(&["m"]);
    let templates = PromptTemplates::default();
    let probe = Probe { registry: &registry, templates: &templates, seed: 0 };
    let rec = probe.decoupled_solve(p, "m").unwrap();
    assert_eq!(rec.response.trajectory.as_ref().unwrap().len(), 3);
    let graded = grade_components(rec, p, None).unwrap();
    assert_eq!((graded.ans_correct, graded.traj_correct, graded.ve_correct), (Some(false), Some(true), Some(false)));
}

#[test]
fn missing_trajectory_is_a_parse_failure() {
    let world = synthetic(1, 2);
    let (p, w) = &world[0];
    let mut s = Script::default();
    for _ in 0..=veloop::agents::REPROMPT_LIMIT {
        s.say(&p.id, "m", 0, response(&[w.statement(0, true)], "3"));
    }
    let registry = s.registry(&["m"]);
    let templates = PromptTemplates::default();
    let probe = Probe { registry: &registry, templates: &templates, seed: 0 };
    match probe.decoupled_solve(p, "m") {
        Err(DiagnosticsError::Agent(AgentError::Parse(f))) => {
            assert_eq!(f.reason, veloop::agents::ParseFailureReason::NoTrajectory)
        }
        other => panic!("expected a parse failure, got {other:?}"),
    }
}

#[test]
fn live_record_without_evidence_or_judge_is_ungradable() {
    let p = Problem {
        id: "live".into(),
        question: "q".into(),
        image: "img.png".into(),
        choices: None,
        ground_truth: Some("4".into()),
        gt_evidence: None,
        answer_kind: AnswerKind::Numeric,
    };
    assert!(matches!(grade_components(record(0, true, true, true), &p, None), Err(DiagnosticsError::UngradableVE(_))));
}

/// Captures every prompt and answers with a fixed well-formed reply.
struct Capture {
    prompts: Arc<Mutex<Vec<(u32, String)>>>,
}

impl Agent for Capture {
    fn invoke(&self, inv: &Invocation<'_>) -> Result<String, AgentError> {
        self.prompts.lock().unwrap().push((inv.round, inv.prompt.to_string()));
        Ok("VISUAL_EVIDENCE:\n1. k1 = 10\nTRAJECTORY:\n1. add\nANSWER: 999".into())
    }
}

type Prompts = Arc<Mutex<Vec<(u32, String)>>>;

fn capture() -> (AgentRegistry, Prompts) {
    let prompts = Arc::new(Mutex::new(Vec::new()));
    let mut r = AgentRegistry::new();
    r.insert("m", Arc::new(Capture { prompts: prompts.clone() }));
    (r, prompts)
}

fn prior(problem: &Problem) -> AgentResponse {
    AgentResponse {
        agent: "m".into(),
        round: 0,
        evidence: vec![EvidenceItem::new(1, "k1 = 12", "m", 0), EvidenceItem::new(2, "k2 = 40", "m", 0)],
        answer: "52".into(),
        trajectory: Some(vec!["add k1 and k2".into()]),
        raw: format!("raw first-round reply for {}", problem.id),
    }
}

#[test]
fn supervision_prompts_follow_payload_contract() {
    let problem = generate_problems(1, 1, 4, 100).remove(0);
    let (registry, prompts) = capture();
    let templates = PromptTemplates::default();
    let probe = Probe { registry: &registry, templates: &templates, seed: 0 };
    let truth = problem.ground_truth.clone().unwrap();

    let payload = SupervisionPayload::for_problem(SupervisionMode::GtJudge, &problem, prior(&problem)).unwrap();
    probe.supervised_retry(&problem, &payload, "m").unwrap();
    let judged = prompts.lock().unwrap().pop().unwrap().1;
    assert!(judged.to_lowercase().contains("incorrect"), "{judged}");
    assert!(!judged.contains(&format!("answer is {truth}")) && !judged.contains(&format!(": {truth}\n")));
    assert!(judged.contains("raw first-round reply"));

    let payload = SupervisionPayload::for_problem(SupervisionMode::GtVe, &problem, prior(&problem)).unwrap();
    probe.supervised_retry(&problem, &payload, "m").unwrap();
    let with_ve = prompts.lock().unwrap().pop().unwrap().1;
    for statement in problem.gt_evidence.as_ref().unwrap() {
        assert_eq!(with_ve.matches(statement.as_str()).count(), 1, "{statement} in {with_ve}");
    }

    let payload = SupervisionPayload::for_problem(SupervisionMode::GtJudgePlusAnswer, &problem, prior(&problem)).unwrap();
    probe.supervised_retry(&problem, &payload, "m").unwrap();
    let with_answer = prompts.lock().unwrap().pop().unwrap().1;
    assert!(with_answer.contains(&truth));
    assert!(with_answer.to_lowercase().contains("revise your visual evidence"), "{with_answer}");
}

#[test]
fn supervision_payload_requires_mode_fields() {
    let mut problem = generate_problems(1, 1, 2, 100).remove(0);
    problem.gt_evidence = None;
    let err = SupervisionPayload::for_problem(SupervisionMode::GtVe, &problem, prior(&problem)).unwrap_err();
    assert!(matches!(err, DiagnosticsError::MissingField { field: "gt_evidence", .. }));
    problem.ground_truth = None;
    let err = SupervisionPayload::for_problem(SupervisionMode::GtJudgePlusAnswer, &problem, prior(&problem)).unwrap_err();
    assert!(matches!(err, DiagnosticsError::MissingField { .. }));
}

#[test]
fn reflection_prompts_embed_the_prior_response() {
    let problem = generate_problems(1, 1, 2, 100).remove(0);
    let (registry, prompts) = capture();
    let templates = PromptTemplates::default();
    let probe = Probe { registry: &registry, templates: &templates, seed: 0 };
    let first = prior(&problem);
    probe.reflection_retry(&problem, &first, PromptMode::ReflectOnVe, "m").unwrap();
    let ve = prompts.lock().unwrap().pop().unwrap();
    assert_eq!(ve.0, 1);
    assert!(ve.1.contains("k1 = 12") && ve.1.contains("k2 = 40"));
    probe.reflection_retry(&problem, &first, PromptMode::ReflectOnAnswer, "m").unwrap();
    let full = prompts.lock().unwrap().pop().unwrap().1;
    assert!(full.contains(&first.raw) || full.contains(first.render().trim()), "{full}");
}

fn stochastic(profile: StochasticProfile) -> AgentRegistry {
    let mut r = AgentRegistry::new();
    r.insert("m", Arc::new(StochasticAgent::new("m", profile)));
    r
}

#[test]
fn perfect_planner_always_has_correct_trajectories() {
    let mut profile = StochasticProfile::weak_grade();
    profile.p_traj = 1.0;
    let registry = stochastic(profile);
    let templates = PromptTemplates::default();
    let probe = Probe { registry: &registry, templates: &templates, seed: 9 };
    let records = decouple_sweep(&probe, &generate_problems(9, 200, 3, 100), "m", None, 4).unwrap();
    assert_eq!(records.len(), 200);
    assert!(records.iter().all(|r| r.traj_correct == Some(true)));
}

#[test]
fn sweeps_are_parallelism_independent() {
    let registry = stochastic(StochasticProfile::anchor_grade());
    let templates = PromptTemplates::default();
    let problems = generate_problems(4, 120, 4, 100);
    let probe = Probe { registry: &registry, templates: &templates, seed: 4 };
    let run = |par| {
        (
            supervision_sweep(&probe, &problems, "m", &SupervisionMode::ALL, 40, None, par).unwrap(),
            reflection_sweep(&probe, &problems, "m", &[PromptMode::ReflectOnAnswer, PromptMode::ReflectOnVe], None, par).unwrap(),
        )
    };
    assert_eq!(run(1), run(6));
}

#[test]
fn supervision_ordering_on_a_few_seeds() {
    let registry = stochastic(StochasticProfile::anchor_grade());
    let templates = PromptTemplates::default();
    for seed in 0..3 {
        let problems = generate_problems(seed, 400, 4, 100);
        let probe = Probe { registry: &registry, templates: &templates, seed };
        let rows = supervision_sweep(&probe, &problems, "m", &SupervisionMode::ALL, 96, None, 4).unwrap();
        let answers = |m: SupervisionMode| rows.iter().find(|r| r.mode == m).unwrap().answer_fixed.unwrap();
        let gt_ve = answers(SupervisionMode::GtVe);
        let gt_judge = answers(SupervisionMode::GtJudge);
        assert_eq!(gt_ve.of, 96);
        assert!(gt_ve.count > gt_judge.count, "seed {seed}: {gt_ve:?} vs {gt_judge:?}");
    }
}

#[test]
fn isolated_stubborn_reflection_changes_nothing() {
    let mut profile = StochasticProfile::anchor_grade();
    profile.p_fix_internal = 0.0;
    profile.stubbornness = 1.0;
    let registry = stochastic(profile);
    let templates = PromptTemplates::default();
    let problems = generate_problems(2, 150, 4, 100);
    let probe = Probe { registry: &registry, templates: &templates, seed: 2 };
    let rows = reflection_sweep(&probe, &problems, "m", &[PromptMode::ReflectOnAnswer, PromptMode::ReflectOnVe], None, 2).unwrap();
    for r in &rows[1..] {
        assert_eq!(r.answers_changed, 0);
        assert_eq!(r.answer_delta, Some(0));
        assert_eq!(r.ve_delta, Some(0));
    }
}
