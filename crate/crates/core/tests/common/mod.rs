#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use veloop::agents::{Agent, AgentError, AgentRegistry, FixtureEntry, Invocation, ScriptedAgent};
use veloop::sim::{generate_problems, SimWorld};
use veloop::Problem;

/// In-memory fixture shared by every scripted agent of a test.
#[derive(Debug, Clone, Default)]
pub struct Script {
    pub entries: Vec<FixtureEntry>,
}

impl Script {
    pub fn say(&mut self, problem: &str, agent: &str, round: u32, text: impl Into<String>) -> &mut Self {
        self.entries.push(FixtureEntry {
            problem_id: problem.into(),
            agent_id: agent.into(),
            round,
            text: text.into(),
        });
        self
    }

    pub fn registry(&self, agents: &[&str]) -> AgentRegistry {
        let mut r = AgentRegistry::new();
        for id in agents {
            r.insert(id, Arc::new(ScriptedAgent::new(id, self.entries.clone())));
        }
        r
    }

    /// Like [`Script::registry`], but every call is logged in `log`.
    pub fn recorded(&self, agents: &[&str], log: &CallLog) -> AgentRegistry {
        let mut r = AgentRegistry::new();
        for id in agents {
            let inner = Arc::new(ScriptedAgent::new(id, self.entries.clone()));
            r.insert(id, Arc::new(Recording { inner, log: log.clone() }));
        }
        r
    }
}

pub type CallLog = Arc<Mutex<Vec<(String, String, u32)>>>;

struct Recording {
    inner: Arc<ScriptedAgent>,
    log: CallLog,
}

impl Agent for Recording {
    fn invoke(&self, inv: &Invocation<'_>) -> Result<String, AgentError> {
        self.log.lock().unwrap().push((inv.agent_id.to_string(), inv.problem.id.clone(), inv.round));
        self.inner.invoke(inv)
    }
}

pub fn response(statements: &[String], answer: &str) -> String {
    let mut out = String::from("VISUAL_EVIDENCE:\n");
    for (i, s) in statements.iter().enumerate() {
        out.push_str(&format!("{}. {s}\n", i + 1));
    }
    out.push_str(&format!("ANSWER: {answer}\n"));
    out
}

/// Synthetic problems whose evidence the canonical matcher can key.
pub fn synthetic(count: usize, facts: usize) -> Vec<(Problem, SimWorld)> {
    generate_problems(7, count, facts, 100)
        .into_iter()
        .map(|p| {
            let w = SimWorld::from_problem(&p).expect("synthetic");
            (p, w)
        })
        .collect()
}

/// A response listing every fact, correct where `pattern` is true, and
/// the answer the world assigns to that perception.
pub fn keyed(world: &SimWorld, pattern: &[bool]) -> String {
    let statements: Vec<String> = pattern.iter().enumerate().map(|(i, ok)| world.statement(i, *ok)).collect();
    let corrupted: Vec<&str> = world
        .facts()
        .iter()
        .zip(pattern)
        .filter(|(_, ok)| !**ok)
        .map(|(f, _)| f.key.as_str())
        .collect();
    response(&statements, &world.answer_for(corrupted, true))
}

pub fn all_correct(world: &SimWorld) -> String {
    keyed(world, &vec![true; world.facts().len()])
}

/// Anchor and three assistants whose evidence mixes agreement and conflict
/// across problems and rounds. Serves the agents "anchor", "a1", "a2", "a3".
pub fn mixed_script(n: usize) -> (Vec<Problem>, Script) {
    let world = synthetic(n, 4);
    let mut s = Script::default();
    for (i, (p, w)) in world.iter().enumerate() {
        let pats: [[bool; 4]; 4] = [[true; 4], [false, true, true, true], [true, false, false, true], [false, false, true, true]];
        s.say(&p.id, "a1", 0, all_correct(w));
        s.say(&p.id, "a2", 0, keyed(w, &pats[(i + 1) % 4]));
        s.say(&p.id, "a3", 0, keyed(w, &pats[(i + 2) % 4]));
        for round in 0..=3 {
            s.say(&p.id, "anchor", round, keyed(w, &pats[(i + round as usize) % 4]));
        }
    }
    (world.into_iter().map(|(p, _)| p).collect(), s)
}
