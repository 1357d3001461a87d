use std::path::PathBuf;
use std::time::Instant;

use chainplan::bethegap::{gap_sweep, verify_random, DiscreteChain, GapError, Structure, VerifyConfig, VerifyReport};
use log::info;

use crate::error::CliError;
use crate::io::{write_csv, GapRow, GapSweepRow};

/// Largest tolerated disagreement between the two gap computations.
pub const MAX_ABS_DIFF: f64 = 1e-12;
/// Largest tolerated `|Δ|` when the channel is the identity.
pub const ZERO_NOISE_DELTA: f64 = 1e-14;

/// Sweep instance: sticky chain, flip strengths as fractions of the maximum.
const SWEEP_STAY: f64 = 0.9;
const SWEEP_POINTS: usize = 11;

#[derive(Debug, Clone)]
pub struct GapOptions {
    pub verify: VerifyConfig,
    pub out: PathBuf,
}

pub struct GapOutput {
    pub report: VerifyReport,
    pub sweep: Vec<GapSweepRow>,
    pub seconds: f64,
}

fn gap_err(e: GapError) -> CliError {
    CliError::Config(e.to_string())
}

pub fn gap_rows(report: &VerifyReport) -> Vec<GapRow> {
    report
        .rows
        .iter()
        .map(|r| GapRow {
            trial: r.trial,
            k: r.k,
            obs: format!("{}-{}-{}", r.obs[0], r.obs[1], r.obs[2]),
            delta_direct: r.delta_direct,
            delta_formula: r.delta_formula,
            abs_diff: r.abs_diff,
        })
        .collect()
}

fn sweep(k: usize) -> Result<Vec<GapSweepRow>, CliError> {
    let chain = DiscreteChain::sticky(k, SWEEP_STAY).map_err(gap_err)?;
    let max = (k - 1) as f64 / k as f64;
    let strengths: Vec<f64> = (0..SWEEP_POINTS)
        .map(|i| max * i as f64 / (SWEEP_POINTS - 1) as f64)
        .collect();
    Ok(gap_sweep(&chain, &strengths)
        .map_err(gap_err)?
        .into_iter()
        .map(|r| GapSweepRow {
            strength: r.strength,
            max_abs_delta: r.max_abs_delta,
        })
        .collect())
}

/// Cross-checks the direct and covariance forms of the gap, writing
/// `gap.csv` and `gap_sweep.csv` under `out`. Fails with an acceptance
/// error when the forms disagree, or when a zero-strength run has a gap.
pub fn cmd_gap_verify(opts: &GapOptions) -> Result<GapOutput, CliError> {
    let started = Instant::now();
    let report = verify_random(&opts.verify).map_err(gap_err)?;
    let seconds = started.elapsed().as_secs_f64();
    let sweep = sweep(opts.verify.alphabet.unwrap_or(3))?;

    write_csv(&opts.out.join("gap.csv"), &gap_rows(&report))?;
    write_csv(&opts.out.join("gap_sweep.csv"), &sweep)?;
    info!(
        "{} trials ({} skipped) in {seconds:.2}s: max |diff| {:.3e}, max |delta| {:.3e}",
        report.rows.len(),
        report.skipped.len(),
        report.max_abs_diff(),
        report.max_abs_delta()
    );
    check(&report, opts.verify.strength)?;
    Ok(GapOutput { report, sweep, seconds })
}

fn check(report: &VerifyReport, strength: Option<f64>) -> Result<(), CliError> {
    let diff = report.max_abs_diff();
    if !(diff <= MAX_ABS_DIFF) {
        return Err(CliError::Acceptance(format!(
            "direct and covariance gaps differ by {diff:.3e} (limit {MAX_ABS_DIFF:e})"
        )));
    }
    if strength == Some(0.0) {
        let delta = report.max_abs_delta();
        if !(delta < ZERO_NOISE_DELTA) {
            return Err(CliError::Acceptance(format!(
                "noise-free gap is {delta:.3e} (limit {ZERO_NOISE_DELTA:e})"
            )));
        }
    }
    Ok(())
}

pub fn parse_structure(s: &str) -> Result<Structure, CliError> {
    s.parse().map_err(CliError::Config)
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use super::*;

    fn opts(dir: &Path, strength: Option<f64>) -> GapOptions {
        GapOptions {
            verify: VerifyConfig {
                trials: 50,
                strength,
                seed: 3,
                ..VerifyConfig::default()
            },
            out: dir.to_path_buf(),
        }
    }

    #[test]
    fn writes_both_tables() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_gap_verify(&opts(dir.path(), None)).unwrap();
        assert_eq!(out.sweep.len(), SWEEP_POINTS);
        assert!(out.sweep[0].max_abs_delta < ZERO_NOISE_DELTA);
        // Both ends are exact: no noise, and a uniform channel that carries no
        // information. The gap lives in between.
        assert!(out.sweep[SWEEP_POINTS - 1].max_abs_delta < ZERO_NOISE_DELTA);
        assert!(out.sweep[SWEEP_POINTS / 2].max_abs_delta > 1e-3);
        let text = std::fs::read_to_string(dir.path().join("gap.csv")).unwrap();
        assert!(text.starts_with("trial,k,obs,delta_direct,delta_formula,abs_diff"));
        assert_eq!(text.lines().count(), out.report.rows.len() + 1);
    }

    #[test]
    fn zero_strength_passes() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_gap_verify(&opts(dir.path(), Some(0.0))).unwrap();
        assert!(out.report.max_abs_delta() < ZERO_NOISE_DELTA);
    }

    #[test]
    fn disagreement_is_an_acceptance_failure() {
        let mut report = VerifyReport::default();
        report.rows.push(chainplan::bethegap::TrialRow {
            trial: 0,
            k: 2,
            obs: [0, 0, 0],
            delta_direct: 0.1,
            delta_formula: 0.2,
            abs_diff: 0.1,
        });
        assert_eq!(check(&report, None).unwrap_err().exit_code(), 3);
        report.rows[0].abs_diff = f64::NAN;
        assert_eq!(check(&report, None).unwrap_err().exit_code(), 3);
    }
}
