//! Simulated agent for synthetic problems.
//!
//! An answer is correct iff every fact is perceived correctly and the
//! trajectory draw succeeds. All random draws for one call are taken up
//! front, in a fixed order, from the call's own stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Agent, AgentError, Invocation, PromptMode, PromptPayload, Purpose, StochasticProfile};
use crate::diagnostics::{SupervisionMode, SupervisionPayload};
use crate::domain::{AgentResponse, Polarity};
use crate::sim::SimWorld;
use crate::summary::CategorizedEvidence;

pub struct StochasticAgent {
    id: String,
    profile: StochasticProfile,
}

struct Draws {
    stubborn: f64,
    facts: Vec<(f64, f64)>,
    trajectory: f64,
}

impl Draws {
    fn take(rng: &mut ChaCha8Rng, facts: usize) -> Self {
        let stubborn = rng.random();
        let facts = (0..facts).map(|_| (rng.random(), rng.random())).collect();
        Self { stubborn, facts, trajectory: rng.random() }
    }
}

/// Perceived correctness per fact, trajectory soundness and an optional
/// forced answer.
struct Draft {
    correct: Vec<bool>,
    trajectory_ok: bool,
    answer: Option<String>,
}

impl StochasticAgent {
    pub fn new(id: &str, profile: StochasticProfile) -> Self {
        Self { id: id.to_string(), profile }
    }

    fn fresh(&self, d: &Draws) -> Draft {
        Draft {
            correct: d.facts.iter().map(|(_, u)| *u < self.profile.p_ve).collect(),
            trajectory_ok: d.trajectory < self.profile.p_traj,
            answer: None,
        }
    }

    /// Re-solve without external information: previously wrong facts are
    /// fixed with `p_fix_internal`, everything else is perceived afresh.
    fn resolve_alone(&self, world: &SimWorld, prior: &AgentResponse, d: &Draws) -> Draft {
        let prior = prior_polarities(world, prior);
        let correct = d
            .facts
            .iter()
            .zip(&prior)
            .map(|((fix, fresh), p)| match p {
                Some(Polarity::Corrupted) => *fix < self.profile.p_fix_internal || *fresh < self.profile.p_ve,
                _ => *fresh < self.profile.p_ve,
            })
            .collect();
        Draft { correct, trajectory_ok: d.trajectory < self.profile.p_traj, answer: None }
    }

    fn regenerate(&self, world: &SimWorld, summary: &CategorizedEvidence, previous: &AgentResponse, d: &Draws) -> Draft {
        let prior = prior_polarities(world, previous);
        let correct = world
            .facts()
            .iter()
            .zip(&d.facts)
            .zip(&prior)
            .map(|((fact, (fix, fresh)), p)| match p {
                Some(Polarity::Correct) => true,
                Some(Polarity::Corrupted) => {
                    let contradictors: Vec<Polarity> = summary
                        .conflicting
                        .iter()
                        .filter(|pair| world.classify(&pair.anchor.statement).is_some_and(|(k, _)| k == fact.key))
                        .filter_map(|pair| world.classify(&pair.assistant.statement).map(|(_, pol)| pol))
                        .collect();
                    let p_fix = if contradictors.is_empty() {
                        self.profile.p_fix_internal
                    } else if contradictors.contains(&Polarity::Correct) {
                        self.profile.p_fix_external
                    } else {
                        self.profile.p_fix_internal
                    };
                    *fix < p_fix
                }
                None => {
                    let offered = summary
                        .complementary
                        .iter()
                        .find_map(|item| world.classify(&item.statement).filter(|(k, _)| *k == fact.key));
                    match offered {
                        Some((_, pol)) if *fix < self.profile.p_fix_external => pol == Polarity::Correct,
                        _ => *fresh < self.profile.p_ve,
                    }
                }
            })
            .collect();
        Draft { correct, trajectory_ok: d.trajectory < self.profile.p_traj, answer: None }
    }

    fn supervised(&self, world: &SimWorld, sup: &SupervisionPayload, d: &Draws) -> Option<Draft> {
        match sup.mode {
            SupervisionMode::GtJudge => {
                (d.stubborn >= self.profile.stubbornness).then(|| self.resolve_alone(world, &sup.prior_history, d))
            }
            SupervisionMode::GtJudgePlusAnswer => (d.stubborn >= self.profile.stubbornness).then(|| {
                let prior = prior_polarities(world, &sup.prior_history);
                let correct = d
                    .facts
                    .iter()
                    .zip(&prior)
                    .map(|((fix, fresh), p)| match p {
                        Some(Polarity::Correct) => true,
                        _ => *fix < self.profile.p_fix_internal || *fresh < self.profile.p_ve,
                    })
                    .collect();
                Draft { correct, trajectory_ok: true, answer: sup.gt_answer.clone() }
            }),
            SupervisionMode::GtVe => Some(Draft {
                correct: vec![true; world.facts().len()],
                trajectory_ok: d.trajectory < self.profile.p_traj,
                answer: None,
            }),
        }
    }

    fn render(&self, world: &SimWorld, draft: &Draft, with_trajectory: bool) -> String {
        let mut out = String::from("VISUAL_EVIDENCE:\n");
        for (i, ok) in draft.correct.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, world.statement(i, *ok)));
        }
        if with_trajectory {
            out.push_str("TRAJECTORY:\n");
            for (i, step) in world.trajectory(draft.trajectory_ok).iter().enumerate() {
                out.push_str(&format!("{}. {}\n", i + 1, step));
            }
        }
        let answer = draft.answer.clone().unwrap_or_else(|| {
            let corrupted = world.facts().iter().zip(&draft.correct).filter(|(_, ok)| !**ok).map(|(f, _)| f.key.as_str());
            world.answer_for(corrupted, draft.trajectory_ok)
        });
        out.push_str(&format!("ANSWER: {answer}\n"));
        out
    }
}

/// Polarity of the prior response's statement for each fact, in fact order.
fn prior_polarities(world: &SimWorld, prior: &AgentResponse) -> Vec<Option<Polarity>> {
    let classified: Vec<(String, Polarity)> = prior.statements().filter_map(|s| world.classify(s)).collect();
    world
        .facts()
        .iter()
        .map(|f| classified.iter().find(|(k, _)| *k == f.key).map(|(_, p)| *p))
        .collect()
}

impl Agent for StochasticAgent {
    fn invoke(&self, inv: &Invocation<'_>) -> Result<String, AgentError> {
        let unsupported = |reason: &str| AgentError::Unsupported { agent: self.id.clone(), reason: reason.to_string() };
        let Purpose::Solve(mode) = inv.purpose else {
            return Err(unsupported("stochastic agents do not act as judges"));
        };
        let world = SimWorld::from_problem(inv.problem).ok_or_else(|| unsupported("problem is not synthetic"))?;
        let mut rng = ChaCha8Rng::from_seed(inv.stream_seed());
        let draws = Draws::take(&mut rng, world.facts().len());
        let missing = || AgentError::MissingExtras(mode);

        let draft = match mode {
            PromptMode::CotPlain | PromptMode::StructuredVe | PromptMode::DecoupledThreeStep => self.fresh(&draws),
            PromptMode::RegenerateWithSummary => {
                let Some(PromptPayload::Summary { summary, previous }) = inv.payload else { return Err(missing()) };
                self.regenerate(&world, summary, previous, &draws)
            }
            PromptMode::ReflectOnAnswer | PromptMode::ReflectOnVe => {
                let Some(PromptPayload::Prior(prior)) = inv.payload else { return Err(missing()) };
                if draws.stubborn < self.profile.stubbornness {
                    return Ok(prior.raw.clone());
                }
                self.resolve_alone(&world, prior, &draws)
            }
            PromptMode::SupervisedRetry => {
                let Some(PromptPayload::Supervision(sup)) = inv.payload else { return Err(missing()) };
                match self.supervised(&world, sup, &draws) {
                    Some(d) => d,
                    None => return Ok(sup.prior_history.raw.clone()),
                }
            }
        };
        Ok(self.render(&world, &draft, mode.requires_trajectory()))
    }
}
