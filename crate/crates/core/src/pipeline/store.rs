//! Flat-file run directory:
//! `config.json`, `problems.jsonl`, `books/<problem>.json`, `state.json`,
//! `metrics.json` and the append-only `transcript.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Event, PipelineState, RunSink};
use crate::book::ContextBook;
use crate::config::PipelineConfig;
use crate::digest::{canonical_json, sha256_hex};
use crate::domain::Problem;

const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt run: {0}")]
    CorruptRun(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct BookEntry {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    config: PipelineConfig,
    round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_met_round: Option<u32>,
    finished: bool,
    selected: Vec<String>,
    unresolved: Vec<String>,
    books: BTreeMap<String, BookEntry>,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    ts: u128,
    #[serde(flatten)]
    event: &'a Event,
}

/// File name for a problem's book: the id itself when it is file-safe,
/// otherwise a sanitized id plus a short digest.
pub fn book_file_name(problem_id: &str) -> String {
    let safe = problem_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !problem_id.starts_with('.')
        && !problem_id.is_empty();
    if safe {
        format!("{problem_id}.json")
    } else {
        let cleaned: String =
            problem_id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).take(48).collect();
        format!("{cleaned}-{}.json", &sha256_hex(problem_id.as_bytes())[..12])
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    /// Opens (creating if needed) a run directory.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let books = dir.join("books");
        fs::create_dir_all(&books).map_err(io(&books))?;
        Ok(Self { dir })
    }

    /// Opens an existing run directory without creating anything.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        if !dir.join("state.json").is_file() {
            return Err(StoreError::CorruptRun(format!("{} has no state.json", dir.display())));
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), StoreError> {
        let path = self.path(name);
        write_atomic(&path, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), StoreError> {
        self.write_text(name, &canonical_json(value).expect("value serializes"))
    }

    pub fn read_text(&self, name: &str) -> Result<String, StoreError> {
        let path = self.path(name);
        fs::read_to_string(&path).map_err(io(&path))
    }

    pub fn write_problems(&self, problems: &[Problem]) -> Result<(), StoreError> {
        let mut text = String::new();
        for p in problems {
            text.push_str(&serde_json::to_string(p).expect("problem serializes"));
            text.push('\n');
        }
        self.write_text("problems.jsonl", &text)
    }

    pub fn load_problems(&self) -> Result<Vec<Problem>, StoreError> {
        let text = self.read_text("problems.jsonl")?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::CorruptRun(format!("problems.jsonl line {}: {e}", i + 1)))
            })
            .collect()
    }

    /// Reconstructs the state, verifying every book against its recorded
    /// checksum.
    pub fn load_state(&self) -> Result<PipelineState, StoreError> {
        let text = self.read_text("state.json")?;
        let file: StateFile =
            serde_json::from_str(&text).map_err(|e| StoreError::CorruptRun(format!("state.json: {e}")))?;
        if file.version != STATE_VERSION {
            return Err(StoreError::CorruptRun(format!("state.json version {} (expected {STATE_VERSION})", file.version)));
        }
        let mut books = BTreeMap::new();
        for (id, entry) in &file.books {
            let path = self.dir.join("books").join(&entry.file);
            let text = fs::read_to_string(&path).map_err(|e| {
                StoreError::CorruptRun(format!("book for problem `{id}` ({}) unreadable: {e}", path.display()))
            })?;
            if sha256_hex(text.as_bytes()) != entry.sha256 {
                return Err(StoreError::CorruptRun(format!("book for problem `{id}` ({}) fails its checksum", path.display())));
            }
            let book = ContextBook::from_json(&text)
                .map_err(|e| StoreError::CorruptRun(format!("book for problem `{id}` ({}): {e}", path.display())))?;
            if &book.problem_id != id {
                return Err(StoreError::CorruptRun(format!("book {} belongs to `{}`, not `{id}`", path.display(), book.problem_id)));
            }
            books.insert(id.clone(), book);
        }
        let state = PipelineState {
            config: file.config,
            books,
            selected: file.selected.into_iter().collect(),
            unresolved: file.unresolved.into_iter().collect(),
            round: file.round,
            tau_met_round: file.tau_met_round,
            finished: file.finished,
        };
        state.check_invariants().map_err(StoreError::CorruptRun)?;
        Ok(state)
    }

    pub fn append_events(&self, events: &[Event]) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let path = self.path("transcript.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let mut buf = String::new();
        for event in events {
            buf.push_str(&serde_json::to_string(&TranscriptLine { ts, event }).expect("event serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(io(&path))
    }
}

impl RunSink for RunStore {
    fn checkpoint(&mut self, state: &PipelineState, events: &[Event]) -> Result<(), StoreError> {
        let mut entries = BTreeMap::new();
        for (id, book) in &state.books {
            let file = book_file_name(id);
            let text = book.to_canonical_json();
            let path = self.dir.join("books").join(&file);
            let unchanged = fs::read_to_string(&path).map(|old| old == text).unwrap_or(false);
            if !unchanged {
                write_atomic(&path, text.as_bytes())?;
            }
            entries.insert(id.clone(), BookEntry { file, sha256: sha256_hex(text.as_bytes()) });
        }
        self.append_events(events)?;
        let file = StateFile {
            version: STATE_VERSION,
            config: state.config.clone(),
            round: state.round,
            tau_met_round: state.tau_met_round,
            finished: state.finished,
            selected: state.selected.iter().cloned().collect(),
            unresolved: state.unresolved.iter().cloned().collect(),
            books: entries,
        };
        self.write_json("state.json", &file)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names() {
        assert_eq!(book_file_name("p-01"), "p-01.json");
        let odd = book_file_name("a/b c");
        assert!(odd.starts_with("a_b_c-") && odd.ends_with(".json"));
        assert_ne!(book_file_name("a/b"), book_file_name("a_b"));
    }
}
