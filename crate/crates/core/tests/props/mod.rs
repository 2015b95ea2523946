#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};
use veloop::agents::{parse_structured_response, AgentRegistry, PromptMode, StochasticAgent, StochasticProfile};
use veloop::answer::{choice_equivalent, numeric_equivalent};
use veloop::harness::grade_answer;
use veloop::pipeline::{Engine, EngineOptions, Event, PipelineState, RunSink, StoreError};
use veloop::refine::{answer_consensus, gate, AnswerEquivalence};
use veloop::sim::generate_problems;
use veloop::summary::{categorize, EvidenceMatcher};
use veloop::{AgentResponse, AnswerKind, ContextBook, EvidenceItem, Fraction, PipelineConfig, Polarity, Problem, Verdict};

/// Runs one property over `cases` random inputs.
fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Abstract item: a keyed fact `(key, correct)` or an unkeyed text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Item {
    Keyed(u8, bool),
    Text(u8),
}

fn item() -> impl Strategy<Value = Item> {
    prop_oneof![
        4 => (0u8..5, any::<bool>()).prop_map(|(k, c)| Item::Keyed(k, c)),
        1 => (0u8..3).prop_map(Item::Text),
    ]
}

fn to_evidence(items: &[Item], agent: &str) -> Vec<EvidenceItem> {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let index = i as u32 + 1;
            match it {
                Item::Keyed(k, c) => {
                    let pol = if *c { Polarity::Correct } else { Polarity::Corrupted };
                    EvidenceItem::new(index, format!("k{k} = {}", if *c { 10 } else { 11 }), agent, 0)
                        .with_canonical(format!("k{k}"), pol)
                }
                Item::Text(t) => EvidenceItem::new(index, format!("note {t}"), agent, 0),
            }
        })
        .collect()
}

fn abstract_of(e: &EvidenceItem) -> Item {
    match (&e.key, e.polarity) {
        (Some(k), Some(p)) => Item::Keyed(k[1..].parse().unwrap(), p == Polarity::Correct),
        _ => Item::Text(e.statement["note ".len()..].parse().unwrap()),
    }
}

fn supports(a: &Item, b: &Item) -> bool {
    a == b
}

fn contradicts(a: &Item, b: &Item) -> bool {
    matches!((a, b), (Item::Keyed(ka, ca), Item::Keyed(kb, cb)) if ka == kb && ca != cb)
}

fn mentions(a: &Item, b: &Item) -> bool {
    supports(a, b) || contradicts(a, b)
}

#[derive(Debug, PartialEq, Eq)]
struct Grouping {
    consistent: Vec<Item>,
    anchor_only: Vec<Item>,
    conflicted: Vec<Item>,
    pairs: BTreeSet<(Item, Item)>,
    complementary: BTreeSet<Item>,
}

/// Exhaustive pairwise classification, straight from the definitions.
fn brute_force(anchor: &[Item], assistants: &[Vec<Item>]) -> Grouping {
    let all: Vec<&Item> = assistants.iter().flatten().collect();
    let mut g = Grouping {
        consistent: vec![],
        anchor_only: vec![],
        conflicted: vec![],
        pairs: BTreeSet::new(),
        complementary: BTreeSet::new(),
    };
    for a in anchor {
        let against: Vec<&Item> = all.iter().copied().filter(|b| contradicts(a, b)).collect();
        if !against.is_empty() {
            g.conflicted.push(a.clone());
            for b in against {
                g.pairs.insert((a.clone(), b.clone()));
            }
        } else if all.iter().any(|b| supports(a, b)) {
            g.consistent.push(a.clone());
        } else {
            g.anchor_only.push(a.clone());
        }
    }
    for b in &all {
        if !anchor.iter().any(|a| mentions(a, b)) {
            g.complementary.insert((*b).clone());
        }
    }
    for v in [&mut g.consistent, &mut g.anchor_only, &mut g.conflicted] {
        v.sort();
    }
    g
}

fn observed(anchor: &[Item], assistants: &[Vec<Item>]) -> (Grouping, veloop::summary::CategorizedEvidence) {
    let lists: Vec<Vec<EvidenceItem>> =
        assistants.iter().enumerate().map(|(i, l)| to_evidence(l, &format!("a{i}"))).collect();
    let c = categorize(&to_evidence(anchor, "anchor"), &lists, &EvidenceMatcher::Canonical, None).unwrap();
    let mut g = Grouping {
        consistent: c.consistent.iter().map(abstract_of).collect(),
        anchor_only: c.anchor_only.iter().map(abstract_of).collect(),
        conflicted: Vec::new(),
        pairs: c.conflicting.iter().map(|p| (abstract_of(&p.anchor), abstract_of(&p.assistant))).collect(),
        complementary: c.complementary.iter().map(abstract_of).collect(),
    };
    let mut seen = BTreeSet::new();
    for p in &c.conflicting {
        if seen.insert(p.anchor.index) {
            g.conflicted.push(abstract_of(&p.anchor));
        }
    }
    for v in [&mut g.consistent, &mut g.anchor_only, &mut g.conflicted] {
        v.sort();
    }
    (g, c)
}

fn scenario() -> impl Strategy<Value = (Vec<Item>, Vec<Vec<Item>>)> {
    (prop::collection::vec(item(), 1..=6), prop::collection::vec(prop::collection::vec(item(), 0..=6), 1..=3))
}

pub fn categorize_partitions_anchor_items(cases: u32) -> Result<(), String> {
    check(cases, scenario(), |(anchor, assistants)| {
        let (_, c) = observed(&anchor, &assistants);
        let mut indices: Vec<u32> = c.consistent.iter().chain(&c.anchor_only).map(|e| e.index).collect();
        let conflicted: BTreeSet<u32> = c.conflicting.iter().map(|p| p.anchor.index).collect();
        indices.extend(conflicted.iter().copied());
        indices.sort();
        prop_assert_eq!(indices, (1..=anchor.len() as u32).collect::<Vec<_>>());
        prop_assert_eq!(c.anchor_total, anchor.len() as u64);
        prop_assert_eq!(c.conflict_count, conflicted.len() as u64);
        let ratio = c.ratio();
        prop_assert!(ratio.numerator() <= ratio.denominator());
        prop_assert_eq!(ratio.numerator() == 0, c.conflicting.is_empty());
        prop_assert!(c.complementary.iter().all(|e| e.source_agent != "anchor"));
        Ok(())
    })
}

pub fn categorize_matches_brute_force(cases: u32) -> Result<(), String> {
    check(cases, scenario(), |(anchor, assistants)| {
        let (g, _) = observed(&anchor, &assistants);
        prop_assert_eq!(g, brute_force(&anchor, &assistants));
        Ok(())
    })
}

pub fn categorize_ignores_assistant_order(cases: u32) -> Result<(), String> {
    check(cases, (scenario(), any::<prop::sample::Index>(), any::<bool>()), |((anchor, assistants), shuffle, inner)| {
        let mut permuted = assistants.clone();
        let k = shuffle.index(permuted.len());
        permuted.rotate_left(k);
        if inner {
            for l in &mut permuted {
                l.reverse();
            }
        }
        let (a, ca) = observed(&anchor, &assistants);
        let (b, cb) = observed(&anchor, &permuted);
        prop_assert_eq!(a, b);
        prop_assert_eq!(ca.conflict_count, cb.conflict_count);
        Ok(())
    })
}

fn fraction() -> impl Strategy<Value = Fraction> {
    (1u64..=50).prop_flat_map(|den| (0..=den).prop_map(move |num| Fraction::new(num, den).unwrap()))
}

fn threshold() -> impl Strategy<Value = (u64, f64)> {
    (0u64..=1000).prop_map(|milli| (milli, milli as f64 / 1000.0))
}

pub fn gate_truth_table(cases: u32) -> Result<(), String> {
    check(cases, (fraction(), any::<bool>(), threshold()), |(ratio, consensus, (milli, t))| {
        let th = Fraction::from_decimal(t).unwrap();
        let above = ratio.numerator() as u128 * 1000 > milli as u128 * ratio.denominator() as u128;
        let expected = if above && !consensus { Verdict::Reject } else { Verdict::Select };
        prop_assert_eq!(gate(ratio, consensus, th), expected);
        let verdicts: Vec<Verdict> = [(false, false), (false, true), (true, false), (true, true)]
            .iter()
            .map(|(hi, c)| gate(if *hi { Fraction::one() } else { Fraction::zero() }, *c, Fraction::new(1, 2).unwrap()))
            .collect();
        prop_assert_eq!(verdicts.iter().filter(|v| **v == Verdict::Reject).count(), 1);
        Ok(())
    })
}

pub fn raising_threshold_never_rejects_more(cases: u32) -> Result<(), String> {
    check(cases, (fraction(), any::<bool>(), threshold(), threshold()), |(ratio, consensus, (_, a), (_, b))| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let lo = Fraction::from_decimal(lo).unwrap();
        let hi = Fraction::from_decimal(hi).unwrap();
        if gate(ratio, consensus, lo) == Verdict::Select {
            prop_assert_eq!(gate(ratio, consensus, hi), Verdict::Select);
        }
        Ok(())
    })
}

pub fn agreeing_assistant_never_rejects_more(cases: u32) -> Result<(), String> {
    let strategy = (fraction(), prop::collection::vec(0u8..4, 0..6), 0usize..3, threshold());
    check(cases, strategy, |(ratio, others, abstained, (_, t))| {
        let th = Fraction::from_decimal(t).unwrap();
        let answers: Vec<String> = others.iter().map(|v| v.to_string()).collect();
        let refs: Vec<&str> = answers.iter().map(String::as_str).collect();
        let n = refs.len() + abstained;
        if n == 0 {
            return Ok(());
        }
        let before = answer_consensus("0", &refs, n, &AnswerEquivalence::Numeric, None).unwrap();
        let mut more = refs.clone();
        more.push("0");
        let after = answer_consensus("0", &more, n + 1, &AnswerEquivalence::Numeric, None).unwrap();
        prop_assert_eq!(after.agree_count, before.agree_count + 1);
        prop_assert_eq!(before.high_consensus, 2 * before.agree_count as usize >= n);
        prop_assert!(before.agree_count as usize <= n);
        if gate(ratio, before.high_consensus, th) == Verdict::Select {
            prop_assert_eq!(gate(ratio, after.high_consensus, th), Verdict::Select);
        }
        Ok(())
    })
}

fn number_text() -> impl Strategy<Value = String> {
    prop_oneof![
        (-500i64..500).prop_map(|v| v.to_string()),
        (-500i64..500, 0usize..4).prop_map(|(v, d)| format!("{:.*}", d, v as f64 / 4.0)),
        (-50i64..50, 1i64..12).prop_map(|(p, q)| format!("{p}/{q}")),
        (0i64..500).prop_map(|v| format!(" {v} ")),
        "[a-z]{1,4}".prop_map(String::from),
    ]
}

fn choice_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[A-Ea-e]".prop_map(String::from),
        "\\([A-E]\\)".prop_map(String::from),
        "[A-E]\\. [a-z]{1,5}".prop_map(String::from),
        "[a-z]{2,6}".prop_map(String::from),
    ]
}

fn numeric_problem(truth: &str) -> Problem {
    Problem {
        id: "p".into(),
        question: "q".into(),
        image: "i".into(),
        choices: None,
        ground_truth: Some(truth.into()),
        gt_evidence: None,
        answer_kind: AnswerKind::Numeric,
    }
}

pub fn grading_is_symmetric(cases: u32) -> Result<(), String> {
    check(cases, (number_text(), number_text(), choice_text(), choice_text()), |(a, b, x, y)| {
        prop_assert_eq!(numeric_equivalent(&a, &b), numeric_equivalent(&b, &a));
        prop_assert_eq!(choice_equivalent(&x, &y), choice_equivalent(&y, &x));
        let forward = grade_answer(&a, &numeric_problem(&b), None).unwrap();
        let backward = grade_answer(&b, &numeric_problem(&a), None).unwrap();
        prop_assert_eq!(forward, backward);
        prop_assert!(numeric_equivalent(&a, &a) || veloop::answer::parse_number(&a).is_none());
        Ok(())
    })
}

fn statement() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9 =+,]{0,30}[a-z0-9]".prop_filter("not a section header", |s| {
        let lower = s.to_ascii_lowercase();
        !["answer", "final answer", "trajectory", "visual evidence"].iter().any(|h| lower.starts_with(h))
    })
}

pub fn render_then_parse_round_trips(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(statement(), 1..8),
        "[0-9A-Za-z][0-9A-Za-z./-]{0,8}",
        prop::option::of(prop::collection::vec(statement(), 1..4)),
    );
    check(cases, strategy, |(statements, answer, steps)| {
        let response = AgentResponse {
            agent: "a".into(),
            round: 0,
            evidence: statements.iter().enumerate().map(|(i, s)| EvidenceItem::new(i as u32 + 1, s.clone(), "a", 0)).collect(),
            answer: answer.clone(),
            trajectory: steps.clone(),
            raw: String::new(),
        };
        let mode = if steps.is_some() { PromptMode::DecoupledThreeStep } else { PromptMode::StructuredVe };
        let parsed = parse_structured_response(&response.render(), mode, "a", 0).unwrap();
        prop_assert_eq!(parsed.statements().collect::<Vec<_>>(), statements.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(parsed.answer, answer);
        prop_assert_eq!(parsed.trajectory, steps);
        Ok(())
    })
}

/// Checks S/U bookkeeping at every round barrier.
struct Auditor {
    ids: BTreeSet<String>,
    selected: BTreeSet<String>,
    unresolved: Option<BTreeSet<String>>,
    frozen: BTreeMap<String, Vec<AgentResponse>>,
    max_rounds: u32,
    violations: Vec<String>,
}

impl RunSink for Auditor {
    fn checkpoint(&mut self, state: &PipelineState, _: &[Event]) -> Result<(), StoreError> {
        if let Err(e) = state.check_invariants() {
            self.violations.push(e);
        }
        let union: BTreeSet<String> = state.selected.union(&state.unresolved).cloned().collect();
        if union != self.ids {
            self.violations.push("S ∪ U changed".into());
        }
        if !self.selected.is_subset(&state.selected) {
            self.violations.push("S shrank".into());
        }
        if self.unresolved.as_ref().is_some_and(|prev| !state.unresolved.is_subset(prev)) {
            self.violations.push("U grew".into());
        }
        if state.round > self.max_rounds {
            self.violations.push(format!("round {} beyond max", state.round));
        }
        for (id, book) in &state.books {
            let frozen = self.frozen.entry(id.clone()).or_insert_with(|| book.assistant_responses().to_vec());
            if frozen.as_slice() != book.assistant_responses() {
                self.violations.push(format!("{id}: assistant context changed"));
            }
            let json = book.to_canonical_json();
            if ContextBook::from_json(&json).map(|b| b.to_canonical_json()).ok().as_deref() != Some(json.as_str()) {
                self.violations.push(format!("{id}: book does not round-trip"));
            }
        }
        self.selected = state.selected.clone();
        self.unresolved = Some(state.unresolved.clone());
        Ok(())
    }
}

fn profile() -> impl Strategy<Value = StochasticProfile> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(ve, tr, a, b, st)| StochasticProfile {
        p_ve: ve,
        p_traj: tr,
        p_fix_external: a.max(b),
        p_fix_internal: a.min(b),
        stubbornness: st,
    })
}

pub fn selection_sets_are_conserved(cases: u32) -> Result<(), String> {
    let strategy = (
        profile(),
        prop::collection::vec(profile(), 1..4),
        (1usize..6, 1usize..5),
        (1u32..=10, 1u32..4, any::<bool>()),
        any::<u64>(),
    );
    check(cases, strategy, |(anchor, assistants, (problems, facts), (tau_tenths, max_rounds, reflect), seed)| {
        let mut registry = AgentRegistry::new();
        registry.insert("anchor", Arc::new(StochasticAgent::new("anchor", anchor)));
        let ids: Vec<String> = (0..assistants.len()).map(|i| format!("h{i}")).collect();
        for (id, p) in ids.iter().zip(&assistants) {
            registry.insert(id, Arc::new(StochasticAgent::new(id, *p)));
        }
        let mut cfg = PipelineConfig::new("anchor", ids);
        cfg.tau = tau_tenths as f64 / 10.0;
        cfg.max_rounds = max_rounds;
        cfg.always_reflect_rejected = reflect;
        cfg.seed = seed;
        let problems = generate_problems(seed, problems, facts, 20);
        let engine = Engine::new(cfg, &registry, EngineOptions::default()).unwrap();
        let mut auditor = Auditor {
            ids: problems.iter().map(|p| p.id.clone()).collect(),
            selected: BTreeSet::new(),
            unresolved: None,
            frozen: BTreeMap::new(),
            max_rounds,
            violations: Vec::new(),
        };
        let state = engine.run(&problems, &mut auditor).unwrap();
        prop_assert!(auditor.violations.is_empty(), "{:?}", auditor.violations);
        prop_assert!(state.finished);
        prop_assert!(state.books.values().all(|b| b.is_final()));
        for book in state.books.values() {
            prop_assert!(book.decisions().iter().all(|d| d.is_consistent()));
        }
        Ok(())
    })
}

pub type Suite = (&'static str, fn(u32) -> Result<(), String>);

/// Every property suite, by name.
pub const SUITES: &[Suite] = &[
    ("partition", categorize_partitions_anchor_items),
    ("brute-force oracle", categorize_matches_brute_force),
    ("order invariance", categorize_ignores_assistant_order),
    ("gate truth table", gate_truth_table),
    ("threshold monotonicity", raising_threshold_never_rejects_more),
    ("agreeing assistant monotonicity", agreeing_assistant_never_rejects_more),
    ("grading symmetry", grading_is_symmetric),
    ("parse/render round trip", render_then_parse_round_trips),
    ("S/U conservation", selection_sets_are_conserved),
];
