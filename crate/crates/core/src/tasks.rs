//! Planar datasets and plan metrics.
//!
//! * Arcs: `F` equally spaced points on a 120° circle arc with random center
//!   and phase.
//! * Segments: `N` starts on a left column and `N` goals on a right column,
//!   all demonstrations sharing one corridor, so that every unseen
//!   start–goal pairing can be stitched from seen fragments.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainError, FactorChain};
use crate::gradtape::Tensor;

pub const ARC_DEGREES: f64 = 120.0;
/// Success tolerance as a fraction of the task's characteristic length.
pub const TOLERANCE_FRACTION: f64 = 0.05;

/// Points of a counter-clockwise 120° arc.
pub fn arc_points(center: [f64; 2], radius: f64, phase: f64, frames: usize) -> Vec<[f64; 2]> {
    let span = ARC_DEGREES.to_radians();
    (0..frames)
        .map(|k| {
            let theta = phase + span * k as f64 / (frames - 1) as f64;
            [
                center[0] + radius * theta.cos(),
                center[1] + radius * theta.sin(),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcDataset {
    pub radius: f64,
    pub frames: usize,
    pub centers: Vec<[f64; 2]>,
    pub phases: Vec<f64>,
    /// `[count, F·2]`.
    pub chunks: Tensor,
}

impl ArcDataset {
    /// Distance between the two ends of one arc, `√3·r`.
    pub fn chord(&self) -> f64 {
        arc_chord(self.radius)
    }
}

pub fn arc_chord(radius: f64) -> f64 {
    2.0 * radius * (ARC_DEGREES.to_radians() / 2.0).sin()
}

/// Arcs with centers uniform in `[−1, 1]²` and uniform phase.
pub fn gen_arcs<R: Rng + ?Sized>(radius: f64, frames: usize, count: usize, rng: &mut R) -> ArcDataset {
    assert!(frames >= 2 && count >= 1, "need F ≥ 2 and count ≥ 1");
    let mut centers = Vec::with_capacity(count);
    let mut phases = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * frames * 2);
    for _ in 0..count {
        let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let phase = rng.random_range(0.0..2.0 * PI);
        for p in arc_points(center, radius, phase, frames) {
            data.extend_from_slice(&p);
        }
        centers.push(center);
        phases.push(phase);
    }
    ArcDataset {
        radius,
        frames,
        centers,
        phases,
        chunks: Tensor::new(data, vec![count, frames * 2]).expect("arc shape"),
    }
}

/// Frames per demonstration: two approach steps, four corridor steps, two
/// exit steps.
pub const DEMO_FRAMES: usize = 9;
pub const CORRIDOR_ENTRY: [f64; 2] = [1.0, 0.0];
pub const CORRIDOR_EXIT: [f64; 2] = [3.0, 0.0];
pub const GOAL_COLUMN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    /// Number of start rows, which equals the number of goal rows.
    pub routes: usize,
    pub frames: usize,
    pub chunks: usize,
    /// Vertical distance between neighboring starts, also the corridor width.
    pub spacing: f64,
    /// Per-coordinate Gaussian jitter on demonstration frames.
    pub jitter: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            routes: 3,
            frames: 3,
            chunks: 4096,
            spacing: 1.0,
            jitter: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTaskSet {
    pub config: SegmentConfig,
    pub starts: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    /// Seen `(start, goal)` pairs.
    pub ind: Vec<(usize, usize)>,
    /// Unseen pairs.
    pub ood: Vec<(usize, usize)>,
    /// `[chunks, F·2]` windows of jittered demonstrations.
    pub chunks: Tensor,
    /// Demonstration (route index) and window offset of every chunk.
    pub sources: Vec<(usize, usize)>,
}

fn lerp(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// Noise-free 9-frame path from `start` to `goal` through the corridor.
pub fn route(start: [f64; 2], goal: [f64; 2]) -> Vec<[f64; 2]> {
    let mut path = vec![start, lerp(start, CORRIDOR_ENTRY, 0.5)];
    for k in 0..=4 {
        path.push(lerp(CORRIDOR_ENTRY, CORRIDOR_EXIT, k as f64 / 4.0));
    }
    path.push(lerp(CORRIDOR_EXIT, goal, 0.5));
    path.push(goal);
    debug_assert_eq!(path.len(), DEMO_FRAMES);
    path
}

/// Waypoints of the corridor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Waypoint {
    Start(usize),
    Entry,
    Exit,
    Goal(usize),
}

impl SegmentTaskSet {
    pub fn route(&self, start: usize, goal: usize) -> Vec<[f64; 2]> {
        route(self.starts[start], self.goals[goal])
    }

    /// Waypoint edges covered by the demonstrations.
    pub fn corridor_edges(&self) -> BTreeSet<(Waypoint, Waypoint)> {
        let mut edges = BTreeSet::new();
        for &(i, j) in &self.ind {
            edges.insert((Waypoint::Start(i), Waypoint::Entry));
            edges.insert((Waypoint::Entry, Waypoint::Exit));
            edges.insert((Waypoint::Exit, Waypoint::Goal(j)));
        }
        edges
    }

    /// Whether demonstrated fragments connect `start` to `goal`.
    pub fn reachable(&self, start: usize, goal: usize) -> bool {
        let edges = self.corridor_edges();
        let target = Waypoint::Goal(goal);
        let mut seen = BTreeSet::from([Waypoint::Start(start)]);
        let mut queue = VecDeque::from([Waypoint::Start(start)]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                return true;
            }
            for &(a, b) in &edges {
                if a == node && seen.insert(b) {
                    queue.push_back(b);
                }
            }
        }
        false
    }

    pub fn tolerance(&self) -> f64 {
        TOLERANCE_FRACTION * self.config.spacing
    }
}

/// Starts at `(0, y_i)` and goals at `(4, y_i)` with rows centered on the
/// corridor; IND pairs are `(i, i)`.
pub fn gen_segments<R: Rng + ?Sized>(config: SegmentConfig, rng: &mut R) -> SegmentTaskSet {
    assert!(config.routes >= 2, "need at least two routes");
    assert!(
        (2..=DEMO_FRAMES).contains(&config.frames),
        "chunk frames must be in [2, {DEMO_FRAMES}]"
    );
    let n = config.routes;
    let ys: Vec<f64> = (0..n)
        .map(|i| (i as f64 - (n - 1) as f64 / 2.0) * config.spacing)
        .collect();
    let starts: Vec<[f64; 2]> = ys.iter().map(|&y| [0.0, y]).collect();
    let goals: Vec<[f64; 2]> = ys.iter().map(|&y| [GOAL_COLUMN, y]).collect();
    let ind: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let ood: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();

    let f = config.frames;
    let offsets = DEMO_FRAMES - f + 1;
    let mut data = Vec::with_capacity(config.chunks * f * 2);
    let mut sources = Vec::with_capacity(config.chunks);
    for _ in 0..config.chunks {
        let demo = rng.random_range(0..n);
        let offset = rng.random_range(0..offsets);
        let path = route(starts[ind[demo].0], goals[ind[demo].1]);
        for p in &path[offset..offset + f] {
            for c in p {
                let e: f64 = StandardNormal.sample(rng);
                data.push(c + config.jitter * e);
            }
        }
        sources.push((demo, offset));
    }
    SegmentTaskSet {
        config,
        starts,
        goals,
        ind,
        ood,
        chunks: Tensor::new(data, vec![config.chunks, f * 2]).expect("segment shape"),
        sources,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub start: f64,
    pub goal: f64,
    pub transition: f64,
}

impl Thresholds {
    pub fn uniform(tau: f64) -> Self {
        Self {
            start: tau,
            goal: tau,
            transition: tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanMetrics {
    pub success: bool,
    pub start_err: f64,
    pub goal_err: f64,
    pub max_transition_err: f64,
    pub smoothness: f64,
}

impl PlanMetrics {
    /// Largest of the anchor and transition residuals.
    pub fn max_residual(&self) -> f64 {
        self.start_err.max(self.goal_err).max(self.max_transition_err)
    }
}

/// Mean squared second difference of a `[m, d]` plan; 0 for `m < 3`.
pub fn smoothness(plan: &Tensor) -> f64 {
    let m = plan.rows();
    if m < 3 {
        return 0.0;
    }
    let total: f64 = (1..m - 1)
        .map(|k| {
            plan.row(k + 1)
                .iter()
                .zip(plan.row(k))
                .zip(plan.row(k - 1))
                .map(|((a, b), c)| (a - 2.0 * b + c).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / (m - 2) as f64
}

/// Metrics of per-chunk samples: anchor and transition residuals come from
/// the chunks, smoothness from their merged plan.
pub fn evaluate(chunks: &Tensor, chain: &FactorChain, th: &Thresholds) -> Result<PlanMetrics, ChainError> {
    let res = chain.boundary_residuals(chunks)?;
    let plan = chain.merge(chunks)?;
    let max_transition_err = res.max_transition();
    Ok(PlanMetrics {
        success: res.start_err <= th.start
            && res.goal_err <= th.goal
            && max_transition_err <= th.transition,
        start_err: res.start_err,
        goal_err: res.goal_err,
        max_transition_err,
        smoothness: smoothness(&plan),
    })
}

/// Metrics of an already merged `[m, d]` plan, whose transitions agree by
/// construction.
pub fn evaluate_plan(plan: &Tensor, chain: &FactorChain, th: &Thresholds) -> Result<PlanMetrics, ChainError> {
    evaluate(&chain.split_plan(plan)?, chain, th)
}
