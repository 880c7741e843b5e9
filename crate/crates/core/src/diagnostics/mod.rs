//! Experiments that check the method's claims and write thresholded
//! reports.

pub mod checks;
pub mod maze;
pub mod oracle;
pub mod report;

use std::collections::BTreeMap;

pub use checks::{run_identity_suite, run_iql_oracle_check};
pub use maze::{
    run_codebook_ablation, run_constraint_sweep, run_continuous_cell, run_penalty_gap_diagnostic, run_saq_cell,
    run_state_conditioning_ablation, MazeSetup, SaqRun,
};
pub use report::{Cell, ExperimentReport, Relation, SummaryRow, Verdict};

use crate::error::{Result, SaqError};

pub const EXPERIMENTS: [&str; 6] = ["penalty-gap", "iql-oracle", "codebook", "state-cond", "constraint-sweep", "identities"];

fn verdicts_for(experiment: &str, cells: &[Cell]) -> Result<(Vec<SummaryRow>, Vec<Verdict>)> {
    match experiment {
        "penalty-gap" => maze::penalty_gap_verdicts(cells),
        "iql-oracle" => checks::iql_oracle_verdicts(cells),
        "codebook" => maze::codebook_verdicts(cells),
        "state-cond" => maze::state_conditioning_verdicts(cells),
        "constraint-sweep" => maze::constraint_sweep_verdicts(cells),
        "identities" => checks::identity_verdicts(cells),
        other => Err(SaqError::InvalidConfig(format!("unknown experiment {other}"))),
    }
}

pub(crate) fn assemble(experiment: &str, config: BTreeMap<String, String>, cells: Vec<Cell>) -> Result<ExperimentReport> {
    let (summary, verdicts) = verdicts_for(experiment, &cells)?;
    Ok(ExperimentReport {
        experiment: experiment.into(),
        config,
        cells,
        summary,
        verdicts,
    })
}

pub(crate) fn cell<'a>(cells: &'a [Cell], name: &str) -> Result<&'a Cell> {
    cells
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| SaqError::InvalidConfig(format!("missing cell {name}")))
}

/// Recomputes summary and verdicts from the stored traces, e.g. after
/// reading a report back from disk.
pub fn recompute_verdicts(report: &ExperimentReport) -> Result<ExperimentReport> {
    let (summary, verdicts) = verdicts_for(&report.experiment, &report.cells)?;
    Ok(ExperimentReport {
        summary,
        verdicts,
        ..report.clone()
    })
}
