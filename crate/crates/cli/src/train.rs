use std::path::PathBuf;

use chainplan::denoiser::{sample_batch, Checkpoint};
use chainplan::rng::substream;
use chainplan::tasks::{gen_arcs, gen_segments, SegmentTaskSet};
use chainplan::{Denoiser, EmaPair, NoiseSchedule, Tensor};
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, SamplerKind, TaskKind, DIM};
use crate::error::CliError;
use crate::io::{chunk_rows, chunks_from_rows, read_csv, write_csv, write_text, FrameRow, LossRow};

/// RNG streams derived from the training seed.
const DATA_STREAM: u64 = 1;
const CHUNK_MODEL_STREAM: u64 = 2;
const BOUNDARY_MODEL_STREAM: u64 = 3;

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule, CliError> {
    NoiseSchedule::linear(cfg.schedule).map_err(|e| CliError::Config(e.to_string()))
}

/// The segment task set for `cfg`; demonstrations depend only on the
/// training seed.
pub fn segment_tasks(cfg: &ExperimentConfig) -> SegmentTaskSet {
    gen_segments(cfg.segment_config(), &mut substream(cfg.train.seed, DATA_STREAM))
}

/// Training chunks: read from `train.dataset` when set, generated otherwise.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Tensor, CliError> {
    if let Some(path) = &cfg.train.dataset {
        if !path.exists() {
            return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
        }
        let rows: Vec<FrameRow> = read_csv(path)?;
        let chunks = chunks_from_rows(&rows).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if chunks.row_len() != cfg.chain.frames * DIM {
            return Err(CliError::Config(format!(
                "{}: chunks have {} frames, config expects {}",
                path.display(),
                chunks.row_len() / DIM,
                cfg.chain.frames
            )));
        }
        return Ok(chunks);
    }
    Ok(match cfg.task {
        TaskKind::Arcs => {
            let mut rng = substream(cfg.train.seed, DATA_STREAM);
            gen_arcs(cfg.arcs.radius, cfg.chain.frames, cfg.train.dataset_size, &mut rng).chunks
        }
        TaskKind::Segments => segment_tasks(cfg).chunks,
    })
}

/// First and last frame of every chunk, as single-frame rows.
pub fn boundary_frames(chunks: &Tensor) -> Tensor {
    let f = chunks.row_len() / DIM;
    let mut data = Vec::with_capacity(chunks.rows() * 2 * DIM);
    for c in 0..chunks.rows() {
        let row = chunks.row(c);
        data.extend_from_slice(&row[..DIM]);
        data.extend_from_slice(&row[(f - 1) * DIM..]);
    }
    Tensor::new(data, vec![chunks.rows() * 2, DIM]).expect("frame shape")
}

/// Trains a fresh pair on the rows of `data`.
pub fn train_pair(
    cfg: &ExperimentConfig,
    data: &Tensor,
    frames: usize,
    schedule: &NoiseSchedule,
    stream: u64,
) -> Result<(EmaPair, Vec<LossRow>), CliError> {
    let t = &cfg.train;
    let mut rng = substream(t.seed, stream);
    let model = Denoiser::new(t.model(frames, DIM), schedule, &mut rng)?;
    let mut pair = EmaPair::new(model, t.ema_decay, t.lr)?;
    let mut losses = Vec::with_capacity(t.steps / t.log_every + 1);
    for step in 0..t.steps {
        let batch = sample_batch(data, t.batch, &mut rng);
        let loss = pair.train_step(&batch, schedule, &mut rng)?;
        if step % t.log_every == 0 {
            losses.push(LossRow {
                step: step as u64,
                loss,
            });
        }
        if (step + 1) % 1000 == 0 {
            info!("frames={frames} step {} loss {loss:.5}", step + 1);
        }
    }
    Ok((pair, losses))
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskManifest {
    pub starts: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    pub ind: Vec<[usize; 2]>,
    pub ood: Vec<[usize; 2]>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub pair: EmaPair,
    pub losses: Vec<LossRow>,
    pub boundary: Option<(EmaPair, Vec<LossRow>)>,
    pub files: Vec<PathBuf>,
}

pub fn needs_boundary_model(cfg: &ExperimentConfig) -> bool {
    cfg.train.boundary_model || cfg.sampler.kind == SamplerKind::Diffcollage
}

/// Trains the chunk model (and the single-frame model when the diffcollage
/// sampler needs it) and writes checkpoints, loss curves and the dataset.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput, CliError> {
    let schedule = schedule(cfg)?;
    let data = dataset(cfg)?;
    let out = &cfg.output_dir;
    let mut files = Vec::new();

    let path = out.join("dataset.csv");
    write_csv(&path, &chunk_rows(&data))?;
    files.push(path);
    if cfg.task == TaskKind::Segments {
        let set = segment_tasks(cfg);
        let manifest = TaskManifest {
            starts: set.starts.clone(),
            goals: set.goals.clone(),
            ind: set.ind.iter().map(|&(i, j)| [i, j]).collect(),
            ood: set.ood.iter().map(|&(i, j)| [i, j]).collect(),
        };
        let path = out.join("manifest.toml");
        write_text(&path, &toml::to_string(&manifest).expect("manifest serializes"))?;
        files.push(path);
    }

    let (pair, losses) = train_pair(cfg, &data, cfg.chain.frames, &schedule, CHUNK_MODEL_STREAM)?;
    Checkpoint::from_pair(&pair, &schedule).save(&cfg.checkpoint_path())?;
    files.push(cfg.checkpoint_path());
    let path = out.join("loss.csv");
    write_csv(&path, &losses)?;
    files.push(path);

    let boundary = if needs_boundary_model(cfg) {
        let frames = boundary_frames(&data);
        let (bpair, blosses) = train_pair(cfg, &frames, 1, &schedule, BOUNDARY_MODEL_STREAM)?;
        Checkpoint::from_pair(&bpair, &schedule).save(&cfg.boundary_checkpoint_path())?;
        files.push(cfg.boundary_checkpoint_path());
        let path = out.join("boundary_loss.csv");
        write_csv(&path, &blosses)?;
        files.push(path);
        Some((bpair, blosses))
    } else {
        None
    };
    Ok(TrainOutput {
        pair,
        losses,
        boundary,
        files,
    })
}
