//! Dataset loading, grading, stage metrics, reports and the stochastic
//! ensemble simulator.

mod dataset;
mod grade;
mod metrics;
mod report;
mod simulate;

pub use dataset::{load_dataset, parse_dataset, DatasetError};
pub use grade::{grade_answer, AnswerJudge, GradeError};
pub use metrics::{combine, round_tenth, stage_metrics, MetricsError, RoundMetrics, StageCell, StageMetrics};
pub use report::{delta_note, parse_csv, render, render_csv, render_markdown, ReportError, ReportFormat};
pub use simulate::{
    simulate_ensemble, simulate_seed, write_simulation, PipelineOverrides, ANCHOR_ID, SeedOutcome, SimConfig, SimError, SimOutcome,
    SimSummary, StageSummary,
};
