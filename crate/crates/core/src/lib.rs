//! Multi-agent visual-evidence context engineering.
//!
//! An anchor agent and a frozen set of assistant agents each answer a
//! perception-heavy problem with an explicit visual-evidence list. The
//! [`summary`] tool sorts the anchor's evidence against the assistants' into
//! consistent, complementary and conflicting groups; the [`refine`] tool gates
//! each sample on conflict ratio and answer consensus; the [`pipeline`] loops
//! summarize → regenerate → refine until enough samples are selected.
//!
//! [`diagnostics`] hosts the single-model probes (decoupled solving,
//! supervised retries, reflection) and [`harness`] the dataset loader,
//! grading, stage metrics, reports and the stochastic ensemble simulator.

pub mod agents;
pub mod answer;
pub mod book;
pub mod config;
pub mod diagnostics;
pub mod digest;
pub mod domain;
pub mod fraction;
pub mod harness;
pub mod pipeline;
pub mod refine;
pub mod sim;
pub mod summary;

pub use book::{BookError, BookStatus, ContextBook};
pub use config::{ConfigError, PipelineConfig};
pub use domain::{AgentResponse, AnswerKind, EvidenceItem, Polarity, Problem, RefineDecision, Verdict};
pub use fraction::Fraction;
