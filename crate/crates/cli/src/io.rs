//! CSV records and SVG plots. Schemas are listed in `docs/formats.md`.

use std::fmt::Write as _;
use std::path::Path;

use chainplan::{FactorChain, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
}

/// One frame of one chunk: dataset files and sampled chunk files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub chunk_id: usize,
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
}

/// One frame of a merged plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

/// `[rows, F·2]` chunks to frame records.
pub fn chunk_rows(chunks: &Tensor) -> Vec<FrameRow> {
    let frames = chunks.row_len() / 2;
    (0..chunks.rows())
        .flat_map(|c| {
            let row = chunks.row(c);
            (0..frames).map(move |k| FrameRow {
                chunk_id: c,
                frame_index: k,
                x: row[2 * k],
                y: row[2 * k + 1],
            })
        })
        .collect()
}

/// Inverse of [`chunk_rows`]; rows must be grouped by chunk in frame order.
pub fn chunks_from_rows(rows: &[FrameRow]) -> Result<Tensor, String> {
    let count = rows.iter().map(|r| r.chunk_id + 1).max().unwrap_or(0);
    if count == 0 || rows.len() % count != 0 {
        return Err(format!("{} frame rows do not split into {count} chunks", rows.len()));
    }
    let frames = rows.len() / count;
    for (i, r) in rows.iter().enumerate() {
        if r.chunk_id != i / frames || r.frame_index != i % frames {
            return Err(format!("row {i} is out of order"));
        }
    }
    let data = rows.iter().flat_map(|r| [r.x, r.y]).collect();
    Tensor::new(data, vec![count, frames * 2]).map_err(|e| e.to_string())
}

pub fn plan_rows(plan: &Tensor) -> Vec<PlanRow> {
    (0..plan.rows())
        .map(|k| PlanRow {
            frame: k,
            x: plan.row(k)[0],
            y: plan.row(k)[1],
        })
        .collect()
}

/// Per-step sampler record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub sigma: f64,
    pub sync_loss: f64,
    pub async_loss: f64,
    pub start_err: f64,
    pub goal_err: f64,
    pub max_transition_err: f64,
    pub nfe: usize,
    pub guided: bool,
    pub radius: f64,
    pub step_norm: f64,
}

/// One sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub sampler: String,
    pub scheme: String,
    pub steps: usize,
    pub case: usize,
    pub start_index: usize,
    pub goal_index: usize,
    pub split: String,
    pub seed: u64,
    pub success: bool,
    pub start_err: f64,
    pub goal_err: f64,
    pub max_transition_err: f64,
    pub max_residual: f64,
    pub smoothness: f64,
    pub nfe_chunk: usize,
    pub nfe_boundary: usize,
    pub skipped_guidance: usize,
    /// Directory of the run's files, relative to the output directory.
    pub run_dir: String,
}

/// Aggregate over the runs of one ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub scheme: String,
    pub steps: usize,
    pub runs: usize,
    pub median_residual: f64,
    pub mean_residual: f64,
    pub median_transition: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub trial: usize,
    pub k: usize,
    /// Observed symbols `u1-u2-u3`.
    pub obs: String,
    pub delta_direct: f64,
    pub delta_formula: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSweepRow {
    pub strength: f64,
    pub max_abs_delta: f64,
}

/// Recomputed metrics for one run, written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_dir: String,
    pub success: bool,
    pub start_err: f64,
    pub goal_err: f64,
    pub max_transition_err: f64,
    pub smoothness: f64,
    pub matches_summary: bool,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

/// Chunks as colored polylines, the merged plan dashed on top, the start as
/// a green circle and the goal as a red square.
pub fn plan_svg(chain: &FactorChain, chunks: &Tensor, plan: &Tensor, title: &str) -> String {
    let mut pts: Vec<[f64; 2]> = (0..plan.rows()).map(|k| [plan.row(k)[0], plan.row(k)[1]]).collect();
    for c in 0..chunks.rows() {
        pts.extend(chunks.row(c).chunks(2).map(|p| [p[0], p[1]]));
    }
    pts.push([chain.start()[0], chain.start()[1]]);
    pts.push([chain.goal()[0], chain.goal()[1]]);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    // y grows upward in plan space and downward in SVG.
    let map = |x: f64, y: f64| (MARGIN + (x - lo[0]) * scale, SIZE - MARGIN - (y - lo[1]) * scale);
    let polyline = |coords: &mut dyn Iterator<Item = (f64, f64)>| {
        coords
            .map(|(x, y)| {
                let (u, v) = map(x, y);
                format!("{u:.2},{v:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for c in 0..chunks.rows() {
        let color = PALETTE[c % PALETTE.len()];
        let line = polyline(&mut chunks.row(c).chunks(2).map(|p| (p[0], p[1])));
        let _ = writeln!(
            s,
            r#"<polyline points="{line}" fill="none" stroke="{color}" stroke-width="3" stroke-opacity="0.7"/>"#
        );
        for p in chunks.row(c).chunks(2) {
            let (u, v) = map(p[0], p[1]);
            let _ = writeln!(s, r#"<circle cx="{u:.2}" cy="{v:.2}" r="3" fill="{color}"/>"#);
        }
    }
    let line = polyline(&mut (0..plan.rows()).map(|k| (plan.row(k)[0], plan.row(k)[1])));
    let _ = writeln!(
        s,
        r#"<polyline points="{line}" fill="none" stroke="black" stroke-width="1" stroke-dasharray="4 3"/>"#
    );
    let (u, v) = map(chain.start()[0], chain.start()[1]);
    let _ = writeln!(
        s,
        r#"<circle cx="{u:.2}" cy="{v:.2}" r="7" fill="none" stroke="green" stroke-width="2"/>"#
    );
    let (u, v) = map(chain.goal()[0], chain.goal()[1]);
    let _ = writeln!(
        s,
        r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="none" stroke="red" stroke-width="2"/>"#,
        u - 6.0,
        v - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="16" font-family="monospace" font-size="12">{}</text>"#,
        escape(title)
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_rows_round_trip() {
        let t = Tensor::new((0..12).map(f64::from).collect(), vec![2, 6]).unwrap();
        let rows = chunk_rows(&t);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[4], FrameRow { chunk_id: 1, frame_index: 1, x: 8.0, y: 9.0 });
        assert_eq!(chunks_from_rows(&rows).unwrap(), t);
        assert!(chunks_from_rows(&rows[1..]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let rows = vec![
            FrameRow { chunk_id: 0, frame_index: 0, x: 0.1 + 0.2, y: -1.0 / 3.0 },
            FrameRow { chunk_id: 0, frame_index: 1, x: 1e-300, y: std::f64::consts::PI },
        ];
        write_csv(&path, &rows).unwrap();
        let back: Vec<FrameRow> = read_csv(&path).unwrap();
        assert_eq!(back, rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("chunk_id,frame_index,x,y\n"));
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
    }

    #[test]
    fn svg_has_one_polyline_per_chunk_plus_plan() {
        let chain = FactorChain::new(2, 3, 2, vec![0.0, 0.0], vec![4.0, 0.0]).unwrap();
        let plan = Tensor::new((0..5).flat_map(|k| [k as f64, 0.5 * k as f64]).collect(), vec![5, 2]).unwrap();
        let chunks = chain.split_plan(&plan).unwrap();
        let svg = plan_svg(&chain, &chunks, &plan, "a<b");
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
