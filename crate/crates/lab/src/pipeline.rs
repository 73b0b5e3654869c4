//! Pipeline stages shared by the CLI and the acceptance suite.

use std::time::Instant;

use rflow_core::estimator::{ConditionSeq, Estimator, EstimatorConfig, LatentSeq};
use rflow_core::metrics::{alignment_accuracy, w2_between};
use rflow_core::rectify::{self, ReflowStore};
use rflow_core::rfm::{self, Stage, StepRecord, TrainConfig, TrainItem, TrainSource};
use rflow_core::rng::{self, Purpose};
use rflow_core::sampler::{solve_many, CountingField, Solution};
use rflow_core::toydata::GaussTaskSpec;
use rflow_core::{Executor, GuidanceConfig, SolverConfig, SolverKind};
use serde::Serialize;

use crate::checkpoint::{params_id, Checkpoint, CheckpointMeta, VERSION};
use crate::error::{LabError, LabResult};
use crate::task::Task;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Trains `est` in place and returns the per-step losses.
pub fn run_stage<E: Executor>(
    est: &mut Estimator,
    source: TrainSource<'_>,
    stage: Stage,
    tc: &TrainConfig,
    exec: &E,
    progress: &mut dyn FnMut(&LossRow),
) -> LabResult<(rflow_core::optim::AdamState, Vec<LossRow>)> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(tc.steps);
    let out = rfm::train(est, source, stage, tc, exec, &mut |r: StepRecord| {
        let row = LossRow {
            step: r.step,
            loss: r.loss,
            grad_norm: r.grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        progress(&row);
        rows.push(row);
    })?;
    Ok((out.adam, rows))
}

fn checkpoint(
    est: Estimator,
    adam: rflow_core::optim::AdamState,
    stage: &str,
    parent: Option<String>,
    reflow_store: Option<String>,
    task: &Task,
    sample_gamma: f64,
    steps: usize,
    run_config: serde_json::Value,
) -> Checkpoint {
    let meta = CheckpointMeta {
        id: params_id(&est.params),
        stage: stage.into(),
        parent,
        reflow_store,
        task: task.clone(),
        sample_gamma,
        steps_trained: steps,
        version: VERSION.into(),
        run_config,
    };
    Checkpoint {
        config: est.cfg,
        params: est.params,
        adam: Some(adam),
        meta,
    }
}

/// First-stage rectified flow matching from a fresh initialisation.
#[allow(clippy::too_many_arguments)]
pub fn train_rfm<E: Executor>(
    task: &Task,
    est_cfg: &EstimatorConfig,
    items: &[TrainItem],
    tc: &TrainConfig,
    init_seed: u64,
    sample_gamma: f64,
    run_config: serde_json::Value,
    exec: &E,
    progress: &mut dyn FnMut(&LossRow),
) -> LabResult<(Checkpoint, Vec<LossRow>)> {
    task.check_estimator(est_cfg)?;
    for it in items {
        task.check_item(it)?;
    }
    let mut est = Estimator::new(est_cfg.clone(), init_seed)?;
    let stage = Stage::Rfm {
        cond_drop_prob: tc.cond_drop_prob,
    };
    let (adam, rows) = run_stage(&mut est, TrainSource::Items(items), stage, tc, exec, progress)?;
    Ok((
        checkpoint(est, adam, "rfm", None, None, task, sample_gamma, tc.steps, run_config),
        rows,
    ))
}

/// Samples triplets from a first-stage checkpoint.
pub fn reflow_generate<E: Executor>(
    ck: &Checkpoint,
    items: &[TrainItem],
    solver: &SolverConfig,
    guidance: &GuidanceConfig,
    seed: u64,
    exec: &E,
) -> LabResult<ReflowStore> {
    let est = ck.estimator()?;
    Ok(rectify::generate_reflow_data(
        &est, items, solver, guidance, seed, &ck.meta.id, exec,
    )?)
}

/// Reflow (`distill == false`) or distillation on a triplet store, starting
/// from the parameters of `ck`.
#[allow(clippy::too_many_arguments)]
pub fn train_on_store<E: Executor>(
    ck: &Checkpoint,
    store: &ReflowStore,
    store_id: &str,
    distill: bool,
    tc: &TrainConfig,
    sample_gamma: f64,
    run_config: serde_json::Value,
    exec: &E,
    progress: &mut dyn FnMut(&LossRow),
) -> LabResult<(Checkpoint, Vec<LossRow>)> {
    if store.triplets.is_empty() {
        return Err(LabError::Mismatch("reflow store is empty".into()));
    }
    let mut est = ck.estimator()?;
    let g = GuidanceConfig {
        gamma: store.meta.gamma,
        enabled: store.meta.guidance_enabled,
    };
    let gamma = g.effective().unwrap_or(1.0);
    let (stage, name) = if distill {
        (Stage::Distill { gamma }, "distill")
    } else {
        (Stage::Reflow { gamma }, "reflow")
    };
    let (adam, rows) = run_stage(&mut est, TrainSource::Triplets(&store.triplets), stage, tc, exec, progress)?;
    Ok((
        checkpoint(
            est,
            adam,
            name,
            Some(ck.meta.id.clone()),
            Some(store_id.into()),
            &ck.meta.task,
            sample_gamma,
            tc.steps,
            run_config,
        ),
        rows,
    ))
}

/// Null-branch drift between two checkpoints, probed at the midpoint of the
/// first `probes` triplets of `store`.
pub fn store_drift(before: &Checkpoint, after: &Checkpoint, store: &ReflowStore, probes: usize) -> LabResult<f64> {
    let probes: Vec<_> = store
        .triplets
        .iter()
        .take(probes)
        .map(|tr| {
            let (x, _) = rfm::interpolate(&tr.x0_prime, &tr.x1_hat, 0.5)?;
            Ok((x, 0.5, tr.c.clone()))
        })
        .collect::<rflow_core::Result<_>>()?;
    Ok(rectify::null_branch_drift(&before.estimator()?, &after.estimator()?, &probes)?)
}

/// Sampling noise for output `i`.
pub fn sample_noise(seed: u64, i: usize, shape: &[usize]) -> LatentSeq {
    rng::normal_tensor(&mut rng::stream(seed, Purpose::Sample, i as u64, 1), shape)
}

pub fn sample<E: Executor>(
    est: &Estimator,
    shape: &[usize],
    conds: &[ConditionSeq],
    solver: &SolverConfig,
    guidance: &GuidanceConfig,
    seed: u64,
    exec: &E,
) -> LabResult<Vec<Solution>> {
    let noise: Vec<LatentSeq> = (0..conds.len()).map(|i| sample_noise(seed, i, shape)).collect();
    Ok(solve_many(est, &noise, conds, solver, guidance, exec)?)
}

/// Quality of a sample batch generated from `Task::eval_conditions(n)`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Quality {
    /// Mean over classes of the per-class W2 (Gauss).
    pub w2: Option<f64>,
    pub w2_per_class: Vec<f64>,
    pub alignment: Option<f64>,
    pub chance: Option<f64>,
    pub events: Option<usize>,
}

/// Ground-truth batch of class `k`, independent of the training data.
pub fn gauss_reference(spec: &GaussTaskSpec, k: usize, n: usize, seed: u64) -> Vec<LatentSeq> {
    spec.class_batch(k, n, seed ^ 0x7e57)
}

pub fn quality(task: &Task, xs: &[LatentSeq], conds: &[ConditionSeq], n: usize, seed: u64) -> LabResult<Quality> {
    match task {
        Task::Gauss(spec) => {
            let mut per = Vec::with_capacity(spec.num_classes);
            for k in 0..spec.num_classes {
                let block = &xs[k * n..(k + 1) * n];
                per.push(w2_between(block, &gauss_reference(spec, k, n, seed))?);
            }
            Ok(Quality {
                w2: Some(per.iter().sum::<f64>() / per.len() as f64),
                w2_per_class: per,
                ..Quality::default()
            })
        }
        Task::Events(spec) => {
            let r = alignment_accuracy(xs, conds, spec)?;
            Ok(Quality {
                alignment: Some(r.accuracy),
                chance: Some(r.chance),
                events: Some(r.events),
                ..Quality::default()
            })
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    /// `steps` or `gamma`.
    pub grid: String,
    pub solver: String,
    pub steps: usize,
    pub gamma: f64,
    pub w2: Option<f64>,
    pub alignment: Option<f64>,
    pub chance: Option<f64>,
    /// Mean field evaluations per sample.
    pub field_evals: f64,
    pub wall_ms: f64,
}

/// Samples and scores one solver/guidance setting.
pub fn evaluate<E: Executor>(
    est: &Estimator,
    task: &Task,
    solver: &SolverConfig,
    guidance: &GuidanceConfig,
    n: usize,
    seed: u64,
    exec: &E,
) -> LabResult<(Quality, Vec<LatentSeq>, f64, f64)> {
    let conds = task.eval_conditions(n)?;
    let counter = CountingField::new(est);
    let noise: Vec<LatentSeq> = (0..conds.len())
        .map(|i| sample_noise(seed, i, &task.latent_shape()))
        .collect();
    let start = Instant::now();
    let sols = solve_many(&counter, &noise, &conds, solver, guidance, exec)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    let xs: Vec<LatentSeq> = sols.into_iter().map(|s| s.x1).collect();
    let q = quality(task, &xs, &conds, n, seed)?;
    Ok((q, xs, counter.count() as f64 / conds.len() as f64, wall))
}

#[derive(Clone, Debug)]
pub struct EvalGrid {
    pub steps: Vec<usize>,
    pub dopri5: Option<(f64, f64)>,
    pub gammas: Vec<f64>,
    pub sweep_steps: usize,
    /// Guidance for the step grid.
    pub gamma: f64,
    pub samples: usize,
}

pub fn eval_suite<E: Executor>(est: &Estimator, task: &Task, grid: &EvalGrid, seed: u64, exec: &E) -> LabResult<Vec<EvalRow>> {
    let mut rows = Vec::new();
    let mut push = |grid_name: &str, solver: &SolverConfig, gamma: f64| -> LabResult<()> {
        let g = GuidanceConfig::scale(gamma);
        let (q, _, evals, wall) = evaluate(est, task, solver, &g, grid.samples, seed, exec)?;
        rows.push(EvalRow {
            grid: grid_name.into(),
            solver: match solver.kind {
                SolverKind::Euler => "euler".into(),
                SolverKind::Dopri5 => "dopri5".into(),
            },
            steps: if solver.kind == SolverKind::Euler { solver.steps } else { 0 },
            gamma,
            w2: q.w2,
            alignment: q.alignment,
            chance: q.chance,
            field_evals: evals,
            wall_ms: wall,
        });
        Ok(())
    };
    for &s in &grid.steps {
        push("steps", &SolverConfig::euler(s), grid.gamma)?;
    }
    if let Some((rtol, atol)) = grid.dopri5 {
        push("steps", &SolverConfig::dopri5(rtol, atol), grid.gamma)?;
    }
    for &g in &grid.gammas {
        push("gamma", &SolverConfig::euler(grid.sweep_steps), g)?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub solver: String,
    pub steps: usize,
    pub samples: usize,
    pub ms_per_sample: f64,
    pub field_evals: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Wall-clock ratio of 25-step to 1-step sampling.
    pub ratio_25_to_1: f64,
}

/// Wall-clock cost per sample for 1, 5 and 25 Euler steps and Dopri5.
///
/// Each setting is timed `repeats` times and the fastest run is kept.
pub fn bench<E: Executor>(
    est: &Estimator,
    task: &Task,
    gamma: f64,
    samples: usize,
    repeats: usize,
    exec: &E,
) -> LabResult<BenchReport> {
    let conds: Vec<ConditionSeq> = task.eval_conditions(samples)?.into_iter().take(samples).collect();
    let g = GuidanceConfig::scale(gamma);
    let mut rows = Vec::new();
    let settings = [
        SolverConfig::euler(1),
        SolverConfig::euler(5),
        SolverConfig::euler(25),
        SolverConfig::dopri5(1e-5, 1e-5),
    ];
    for s in &settings {
        let mut best = f64::INFINITY;
        let mut evals = 0.0;
        for _ in 0..repeats.max(1) {
            let counter = CountingField::new(est);
            let noise: Vec<LatentSeq> = (0..conds.len())
                .map(|i| sample_noise(0, i, &task.latent_shape()))
                .collect();
            let start = Instant::now();
            solve_many(&counter, &noise, &conds, s, &g, exec)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
            evals = counter.count() as f64 / conds.len() as f64;
        }
        rows.push(BenchRow {
            solver: if s.kind == SolverKind::Euler { "euler".into() } else { "dopri5".into() },
            steps: if s.kind == SolverKind::Euler { s.steps } else { 0 },
            samples: conds.len(),
            ms_per_sample: best / conds.len() as f64,
            field_evals: evals,
        });
    }
    let ratio_25_to_1 = rows[2].ms_per_sample / rows[0].ms_per_sample;
    Ok(BenchReport { rows, ratio_25_to_1 })
}
