use std::path::Path;

use chainplan::denoiser::Checkpoint;
use chainplan::sampler::{compose_diffcollage, compose_guided, compose_independent, Messages};
use chainplan::tasks::{evaluate, PlanMetrics, Thresholds};
use chainplan::{Denoiser, EmaPair, FactorChain, GuidanceConfig, MessageWeights, NoiseSchedule, SampleTrace, SyncSystem};
use log::info;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, PairSet, SamplerKind, Scheme, TaskKind};
use crate::error::CliError;
use crate::io::{chunk_rows, mean, median, plan_rows, plan_svg, write_csv, write_text, CellRow, RunRow, StepRow};
use crate::train::{schedule, segment_tasks};

/// One start–goal problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub index: usize,
    pub start_index: usize,
    pub goal_index: usize,
    pub split: &'static str,
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

/// Problems posed by the config: the single arc anchor pair, or the selected
/// segment start–goal pairs in split order.
pub fn cases(cfg: &ExperimentConfig) -> Vec<Case> {
    match cfg.task {
        TaskKind::Arcs => vec![Case {
            index: 0,
            start_index: 0,
            goal_index: 0,
            split: "arc",
            start: cfg.arcs.start,
            goal: cfg.arcs.goal,
        }],
        TaskKind::Segments => {
            let set = segment_tasks(cfg);
            let mut pairs: Vec<((usize, usize), &'static str)> = Vec::new();
            if matches!(cfg.segments.pairs, PairSet::Ind | PairSet::All) {
                pairs.extend(set.ind.iter().map(|&p| (p, "ind")));
            }
            if matches!(cfg.segments.pairs, PairSet::Ood | PairSet::All) {
                pairs.extend(set.ood.iter().map(|&p| (p, "ood")));
            }
            pairs
                .into_iter()
                .enumerate()
                .map(|(index, ((i, j), split))| Case {
                    index,
                    start_index: i,
                    goal_index: j,
                    split,
                    start: set.starts[i],
                    goal: set.goals[j],
                })
                .collect()
        }
    }
}

pub struct Models {
    pub pair: EmaPair,
    pub boundary: Option<Denoiser>,
}

fn load_checkpoint(path: &Path, schedule: &NoiseSchedule, lr: f64) -> Result<EmaPair, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist; run `train` first",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?.into_pair(schedule, lr)?)
}

pub fn load_models(cfg: &ExperimentConfig, schedule: &NoiseSchedule, boundary: bool) -> Result<Models, CliError> {
    let pair = load_checkpoint(&cfg.checkpoint_path(), schedule, cfg.train.lr)?;
    if pair.latest.config().frames != cfg.chain.frames {
        return Err(CliError::Config(format!(
            "checkpoint has {} frames per chunk, config has {}",
            pair.latest.config().frames,
            cfg.chain.frames
        )));
    }
    let boundary = if boundary {
        Some(load_checkpoint(&cfg.boundary_checkpoint_path(), schedule, cfg.train.lr)?.ema)
    } else {
        None
    };
    Ok(Models { pair, boundary })
}

/// Everything that distinguishes one sampling run.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub sampler: SamplerKind,
    pub scheme: Option<Scheme>,
    pub steps: usize,
    pub case: &'a Case,
    pub seed: u64,
}

impl RunSpec<'_> {
    /// Sampling seed: the configured seed in the high bits, the case index
    /// in the low 32.
    pub fn sampling_seed(&self) -> u64 {
        (self.seed << 32) ^ self.case.index as u64
    }

    pub fn dir_name(&self) -> String {
        let scheme = self.scheme.map(|s| format!("_{}", s.name())).unwrap_or_default();
        format!(
            "runs/{}{scheme}_k{}/case{}_s{}",
            self.sampler.name(),
            self.steps,
            self.case.index,
            self.seed
        )
    }
}

pub struct RunResult {
    pub row: RunRow,
    pub metrics: PlanMetrics,
    pub trace: SampleTrace,
    pub chain: FactorChain,
}

pub fn run_one(
    cfg: &ExperimentConfig,
    models: &Models,
    schedule: &NoiseSchedule,
    spec: RunSpec<'_>,
) -> Result<RunResult, CliError> {
    let chain = cfg.chain_for(spec.case.start, spec.case.goal)?;
    let g = GuidanceConfig {
        g_r: cfg.sampler.g_r,
        steps: spec.steps,
        seed: spec.sampling_seed(),
    };
    let trace = match spec.sampler {
        SamplerKind::Guided => {
            let sync = if cfg.sampler.variances.is_empty() {
                SyncSystem::unit(&chain)
            } else {
                SyncSystem::build(&chain, &cfg.sampler.variances).map_err(|e| CliError::Config(e.to_string()))?
            };
            let base = cfg.sampler.weights();
            let weights = spec.scheme.map_or(base, |s| s.weights(base));
            let messages = Messages {
                sync: &sync,
                async_cfg: cfg.sampler.async_config(),
                weights,
            };
            compose_guided(&models.pair, &chain, schedule, messages, &g)?
        }
        SamplerKind::Diffcollage => compose_diffcollage(&models.pair.ema, models.boundary.as_ref(), &chain, schedule, &g)?,
        SamplerKind::Independent => compose_independent(&models.pair, &chain, schedule, &g)?,
    };
    let metrics = evaluate(&trace.chunks, &chain, &Thresholds::uniform(cfg.threshold()))
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let row = RunRow {
        sampler: spec.sampler.name().into(),
        scheme: spec
            .scheme
            .map(|s| s.name().to_string())
            .unwrap_or_else(|| scheme_label(spec.sampler, cfg.sampler.weights())),
        steps: spec.steps,
        case: spec.case.index,
        start_index: spec.case.start_index,
        goal_index: spec.case.goal_index,
        split: spec.case.split.into(),
        seed: spec.seed,
        success: metrics.success,
        start_err: metrics.start_err,
        goal_err: metrics.goal_err,
        max_transition_err: metrics.max_transition_err,
        max_residual: metrics.max_residual(),
        smoothness: metrics.smoothness,
        nfe_chunk: trace.nfe.chunk_model,
        nfe_boundary: trace.nfe.boundary_model,
        skipped_guidance: trace.skipped_guidance,
        run_dir: spec.dir_name(),
    };
    Ok(RunResult {
        row,
        metrics,
        trace,
        chain,
    })
}

fn scheme_label(sampler: SamplerKind, w: MessageWeights) -> String {
    if sampler != SamplerKind::Guided {
        return "none".into();
    }
    match (w.w_sync > 0.0, w.w_async > 0.0) {
        (true, true) => "joint",
        (true, false) => "sync",
        (false, true) => "async",
        (false, false) => "none",
    }
    .into()
}

pub fn step_rows(trace: &SampleTrace) -> Vec<StepRow> {
    trace
        .records
        .iter()
        .enumerate()
        .map(|(step, r)| StepRow {
            step,
            t: r.t,
            t_prev: r.t_prev,
            sigma: r.sigma,
            sync_loss: r.sync_loss,
            async_loss: r.async_loss,
            start_err: r.residuals.start_err,
            goal_err: r.residuals.goal_err,
            max_transition_err: r.residuals.max_transition(),
            nfe: r.nfe,
            guided: r.guided,
            radius: r.radius,
            step_norm: r.step_norm,
        })
        .collect()
}

/// Writes the per-step metrics, chunks, merged plan and SVG of one run.
pub fn write_run(out: &Path, result: &RunResult) -> Result<(), CliError> {
    let dir = out.join(&result.row.run_dir);
    write_csv(&dir.join("metrics.csv"), &step_rows(&result.trace))?;
    write_csv(&dir.join("chunks.csv"), &chunk_rows(&result.trace.chunks))?;
    write_csv(&dir.join("plan.csv"), &plan_rows(&result.trace.plan))?;
    let title = format!(
        "{} case {} seed {}: max residual {:.4}",
        result.row.sampler, result.row.case, result.row.seed, result.row.max_residual
    );
    write_text(
        &dir.join("plot.svg"),
        &plan_svg(&result.chain, &result.trace.chunks, &result.trace.plan, &title),
    )
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

pub fn summary_path(cfg: &ExperimentConfig, sampler: SamplerKind) -> std::path::PathBuf {
    cfg.output_dir.join(format!("compose_{}.csv", sampler.name()))
}

/// Runs the configured sampler for every case and seed, writing per-run
/// files and `compose_<sampler>.csv`.
pub fn cmd_compose(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<RunRow>, CliError> {
    let schedule = schedule(cfg)?;
    let sampler = cfg.sampler.kind;
    let models = load_models(cfg, &schedule, sampler == SamplerKind::Diffcollage)?;
    let cases = cases(cfg);
    let specs: Vec<RunSpec<'_>> = cases
        .iter()
        .flat_map(|case| {
            cfg.seeds.iter().map(move |&seed| RunSpec {
                sampler,
                scheme: None,
                steps: cfg.sampler.steps,
                case,
                seed,
            })
        })
        .collect();
    let pool = thread_pool(threads)?;
    let rows = pool.install(|| {
        specs
            .par_iter()
            .map(|&spec| {
                let result = run_one(cfg, &models, &schedule, spec)?;
                write_run(&cfg.output_dir, &result)?;
                Ok(result.row)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    write_csv(&summary_path(cfg, sampler), &rows)?;
    let residuals: Vec<f64> = rows.iter().map(|r| r.max_residual).collect();
    info!(
        "{} runs, median max residual {:.4}, success {}/{}",
        rows.len(),
        median(&residuals),
        rows.iter().filter(|r| r.success).count(),
        rows.len()
    );
    Ok(rows)
}

pub fn aggregate(rows: &[RunRow], scheme: &str, steps: usize) -> CellRow {
    let cell: Vec<&RunRow> = rows.iter().filter(|r| r.scheme == scheme && r.steps == steps).collect();
    let residuals: Vec<f64> = cell.iter().map(|r| r.max_residual).collect();
    let transitions: Vec<f64> = cell.iter().map(|r| r.max_transition_err).collect();
    CellRow {
        scheme: scheme.into(),
        steps,
        runs: cell.len(),
        median_residual: median(&residuals),
        mean_residual: mean(&residuals),
        median_transition: median(&transitions),
        success_rate: cell.iter().filter(|r| r.success).count() as f64 / cell.len().max(1) as f64,
    }
}

pub struct AblateOutput {
    pub runs: Vec<RunRow>,
    pub cells: Vec<CellRow>,
}

/// Guided sampling over every scheme × step count × case × seed; writes
/// `ablate_runs.csv` and the per-cell `ablate.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<AblateOutput, CliError> {
    let schedule = schedule(cfg)?;
    let models = load_models(cfg, &schedule, false)?;
    let cases = cases(cfg);
    let mut specs = Vec::new();
    for &scheme in &cfg.ablate.schemes {
        for &steps in &cfg.ablate.steps {
            for case in &cases {
                for &seed in &cfg.seeds {
                    specs.push(RunSpec {
                        sampler: SamplerKind::Guided,
                        scheme: Some(scheme),
                        steps,
                        case,
                        seed,
                    });
                }
            }
        }
    }
    let pool = thread_pool(threads)?;
    let runs = pool.install(|| {
        specs
            .par_iter()
            .map(|&spec| run_one(cfg, &models, &schedule, spec).map(|r| r.row))
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let cells: Vec<CellRow> = cfg
        .ablate
        .schemes
        .iter()
        .flat_map(|s| cfg.ablate.steps.iter().map(|&k| aggregate(&runs, s.name(), k)))
        .collect();
    write_csv(&cfg.output_dir.join("ablate_runs.csv"), &runs)?;
    write_csv(&cfg.output_dir.join("ablate.csv"), &cells)?;
    for c in &cells {
        info!(
            "{:>5} steps={:>3}: median residual {:.4}, success {:.2}",
            c.scheme, c.steps, c.median_residual, c.success_rate
        );
    }
    Ok(AblateOutput { runs, cells })
}
