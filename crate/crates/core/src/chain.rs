//! Chain-structured factor graph over overlapping chunks.
//!
//! A plan of `m = n(F−1)+1` frames is covered by `n` chunks of `F` frames.
//! Consecutive chunks share exactly one frame: the last frame of chunk `i`
//! and the first frame of chunk `i+1`. Chunk tensors are stored as
//! `[n, F·d]`, one chunk per row.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::gradtape::Tensor;
use crate::rng::gaussian_vec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("invalid chain: {0}")]
    Invalid(String),
    #[error("expected {expected:?} elements layout, got shape {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorChain {
    factors: usize,
    frames: usize,
    dim: usize,
    start: Vec<f64>,
    goal: Vec<f64>,
}

/// First- or last-frame extraction from a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    First,
    Last,
}

impl Selector {
    /// Frame index inside a chunk of `frames` frames.
    pub fn frame(self, frames: usize) -> usize {
        match self {
            Selector::First => 0,
            Selector::Last => frames - 1,
        }
    }

    pub fn apply(self, chunk: &[f64], frames: usize, dim: usize) -> &[f64] {
        let f = self.frame(frames);
        &chunk[f * dim..(f + 1) * dim]
    }

    /// Dense `d × F·d` matrix form.
    pub fn matrix(self, frames: usize, dim: usize) -> Tensor {
        let mut m = Tensor::zeros(&[dim, frames * dim]);
        let f = self.frame(frames);
        for r in 0..dim {
            m.data_mut()[r * frames * dim + f * dim + r] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryResiduals {
    pub start_err: f64,
    pub goal_err: f64,
    pub transition_errs: Vec<f64>,
}

impl BoundaryResiduals {
    pub fn max_transition(&self) -> f64 {
        self.transition_errs.iter().copied().fold(0.0, f64::max)
    }

    /// Largest of all anchor and transition residuals.
    pub fn max(&self) -> f64 {
        self.start_err.max(self.goal_err).max(self.max_transition())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl FactorChain {
    pub fn new(
        factors: usize,
        frames: usize,
        dim: usize,
        start: Vec<f64>,
        goal: Vec<f64>,
    ) -> Result<Self, ChainError> {
        if factors == 0 {
            return Err(ChainError::Invalid("need at least one factor".into()));
        }
        if frames < 2 {
            return Err(ChainError::Invalid(format!(
                "chunks need at least two frames, got {frames}"
            )));
        }
        if dim == 0 {
            return Err(ChainError::Invalid("frame dimension must be positive".into()));
        }
        if start.len() != dim || goal.len() != dim {
            return Err(ChainError::Invalid(format!(
                "start/goal must have {dim} entries, got {} and {}",
                start.len(),
                goal.len()
            )));
        }
        Ok(Self {
            factors,
            frames,
            dim,
            start,
            goal,
        })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    /// Total frames in the merged plan.
    pub fn plan_frames(&self) -> usize {
        self.factors * (self.frames - 1) + 1
    }

    pub fn chunk_len(&self) -> usize {
        self.frames * self.dim
    }

    /// Entries in the stacked chunk state.
    pub fn element_count(&self) -> usize {
        self.factors * self.chunk_len()
    }

    pub fn chunk_shape(&self) -> [usize; 2] {
        [self.factors, self.chunk_len()]
    }

    /// Plan frame index of frame `f` in chunk `i`.
    pub fn plan_index(&self, chunk: usize, frame: usize) -> usize {
        chunk * (self.frames - 1) + frame
    }

    fn check_chunks(&self, chunks: &Tensor) -> Result<(), ChainError> {
        if chunks.len() != self.element_count() || chunks.rows() != self.factors {
            return Err(ChainError::Shape {
                expected: self.chunk_shape().to_vec(),
                got: chunks.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_plan(&self, plan: &Tensor) -> Result<(), ChainError> {
        if plan.len() != self.plan_frames() * self.dim || plan.rows() != self.plan_frames() {
            return Err(ChainError::Shape {
                expected: vec![self.plan_frames(), self.dim],
                got: plan.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Draws one Gaussian plan and copies every shared frame into both of its
    /// chunks.
    pub fn split_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let plan = Tensor::new(
            gaussian_vec(rng, self.plan_frames() * self.dim),
            vec![self.plan_frames(), self.dim],
        )
        .expect("plan shape");
        self.split_plan(&plan).expect("plan drawn with chain shape")
    }

    /// Cuts a `[m, d]` plan into overlapping `[n, F·d]` chunks.
    pub fn split_plan(&self, plan: &Tensor) -> Result<Tensor, ChainError> {
        self.check_plan(plan)?;
        let span = self.chunk_len();
        let step = (self.frames - 1) * self.dim;
        let mut data = Vec::with_capacity(self.element_count());
        for i in 0..self.factors {
            data.extend_from_slice(&plan.data()[i * step..i * step + span]);
        }
        Ok(Tensor::new(data, self.chunk_shape().to_vec()).expect("chunk shape"))
    }

    /// Joins chunks into a `[m, d]` plan, averaging each shared frame over its
    /// two owners.
    pub fn merge(&self, chunks: &Tensor) -> Result<Tensor, ChainError> {
        self.check_chunks(chunks)?;
        let (m, d, f) = (self.plan_frames(), self.dim, self.frames);
        let mut sum = vec![0.0; m * d];
        let mut count = vec![0u32; m];
        for i in 0..self.factors {
            let chunk = chunks.row(i);
            for k in 0..f {
                let p = self.plan_index(i, k);
                for j in 0..d {
                    sum[p * d + j] += chunk[k * d + j];
                }
                count[p] += 1;
            }
        }
        for p in 0..m {
            if count[p] > 1 {
                for v in &mut sum[p * d..(p + 1) * d] {
                    *v /= count[p] as f64;
                }
            }
        }
        Ok(Tensor::new(sum, vec![m, d]).expect("plan shape"))
    }

    pub fn boundary_residuals(&self, chunks: &Tensor) -> Result<BoundaryResiduals, ChainError> {
        self.check_chunks(chunks)?;
        let (f, d) = (self.frames, self.dim);
        let first = |i: usize| Selector::First.apply(chunks.row(i), f, d);
        let last = |i: usize| Selector::Last.apply(chunks.row(i), f, d);
        Ok(BoundaryResiduals {
            start_err: dist(first(0), &self.start),
            goal_err: dist(last(self.factors - 1), &self.goal),
            transition_errs: (0..self.factors - 1)
                .map(|i| dist(last(i), first(i + 1)))
                .collect(),
        })
    }
}
