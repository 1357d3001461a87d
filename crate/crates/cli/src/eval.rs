use chainplan::tasks::{evaluate, Thresholds};
use log::{info, warn};

use crate::compose::{cases, summary_path};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::io::{chunks_from_rows, median, read_csv, write_csv, EvalRow, FrameRow, RunRow};

/// Summary metrics are written with full precision, so a recomputation
/// should agree to rounding.
const MATCH_TOLERANCE: f64 = 1e-9;

pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub median_residual: f64,
    pub success_rate: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= MATCH_TOLERANCE * (1.0 + a.abs().max(b.abs()))
}

/// Recomputes the metrics of every run listed in the compose summary from
/// its `chunks.csv`, writes `eval.csv`, and applies the `[acceptance]`
/// checks of the config.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutput, CliError> {
    let summary = summary_path(cfg, cfg.sampler.kind);
    if !summary.exists() {
        return Err(CliError::Config(format!(
            "{} does not exist; run `compose` first",
            summary.display()
        )));
    }
    let runs: Vec<RunRow> = read_csv(&summary)?;
    let cases = cases(cfg);
    let th = Thresholds::uniform(cfg.threshold());
    let mut rows = Vec::with_capacity(runs.len());
    let mut residuals = Vec::with_capacity(runs.len());
    for run in &runs {
        let case = cases.get(run.case).ok_or_else(|| {
            CliError::Config(format!("{}: case {} not in config", summary.display(), run.case))
        })?;
        let path = cfg.output_dir.join(&run.run_dir).join("chunks.csv");
        let frames: Vec<FrameRow> = read_csv(&path)?;
        let chunks = chunks_from_rows(&frames).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let chain = cfg.chain_for(case.start, case.goal)?;
        let m = evaluate(&chunks, &chain, &th).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let matches_summary = m.success == run.success
            && close(m.start_err, run.start_err)
            && close(m.goal_err, run.goal_err)
            && close(m.max_transition_err, run.max_transition_err)
            && close(m.smoothness, run.smoothness);
        if !matches_summary {
            warn!("{}: recomputed metrics differ from the summary", run.run_dir);
        }
        residuals.push(m.max_residual());
        rows.push(EvalRow {
            run_dir: run.run_dir.clone(),
            success: m.success,
            start_err: m.start_err,
            goal_err: m.goal_err,
            max_transition_err: m.max_transition_err,
            smoothness: m.smoothness,
            matches_summary,
        });
    }
    write_csv(&cfg.output_dir.join("eval.csv"), &rows)?;
    let out = EvalOutput {
        median_residual: median(&residuals),
        success_rate: rows.iter().filter(|r| r.success).count() as f64 / rows.len().max(1) as f64,
        rows,
    };
    info!(
        "{} runs: median max residual {:.4}, success rate {:.2}",
        out.rows.len(),
        out.median_residual,
        out.success_rate
    );
    check(cfg, &out)?;
    Ok(out)
}

fn check(cfg: &ExperimentConfig, out: &EvalOutput) -> Result<(), CliError> {
    let a = &cfg.acceptance;
    let mut failures = Vec::new();
    if let Some(bad) = out.rows.iter().find(|r| !r.matches_summary) {
        failures.push(format!("{} does not match its summary row", bad.run_dir));
    }
    if let Some(limit) = a.max_median_residual {
        if !(out.median_residual <= limit) {
            failures.push(format!("median residual {:.4} > {limit}", out.median_residual));
        }
    }
    if let Some(limit) = a.min_success_rate {
        if out.success_rate < limit {
            failures.push(format!("success rate {:.2} < {limit}", out.success_rate));
        }
    }
    if let Some(limit) = a.max_success_rate {
        if out.success_rate > limit {
            failures.push(format!("success rate {:.2} > {limit}", out.success_rate));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(failures.join("; ")))
    }
}
