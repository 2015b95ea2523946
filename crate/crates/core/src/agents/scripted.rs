use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Agent, AgentError, Invocation};

/// One line of a scripted-agent fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub problem_id: String,
    pub agent_id: String,
    pub round: u32,
    pub text: String,
}

/// Replays canned responses. Entries sharing (problem, agent, round) are
/// served in file order, indexed by the invocation slot, so a re-prompt
/// after a parse failure receives the next entry.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    id: String,
    entries: HashMap<(String, u32), Vec<String>>,
}

impl ScriptedAgent {
    pub fn new(id: &str, entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut map: HashMap<(String, u32), Vec<String>> = HashMap::new();
        for e in entries.into_iter().filter(|e| e.agent_id == id) {
            map.entry((e.problem_id, e.round)).or_default().push(e.text);
        }
        Self { id: id.to_string(), entries: map }
    }

    pub fn from_file(id: &str, path: &Path) -> Result<Self, AgentError> {
        let invalid = |reason: String| AgentError::InvalidSpec { id: id.to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("fixture {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(line)
                .map_err(|e| invalid(format!("fixture {} line {}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(id, entries))
    }
}

impl Agent for ScriptedAgent {
    fn invoke(&self, inv: &Invocation<'_>) -> Result<String, AgentError> {
        self.entries
            .get(&(inv.problem.id.clone(), inv.round))
            .and_then(|texts| texts.get(inv.slot as usize))
            .cloned()
            .ok_or_else(|| AgentError::FixtureExhausted {
                problem_id: inv.problem.id.clone(),
                agent_id: self.id.clone(),
                round: inv.round,
                slot: inv.slot,
            })
    }
}
