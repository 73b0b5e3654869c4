use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rflow_core::sampler::{straightness, CountingField};
use rflow_core::{GuidanceConfig, SolverConfig};
use rflow_lab::checkpoint::{Checkpoint, VERSION};
use rflow_lab::config::{load_json, RunConfig};
use rflow_lab::error::{LabError, LabResult};
use rflow_lab::exec::Pool;
use rflow_lab::format::{self, content_id, write_file};
use rflow_lab::pipeline::{self, EvalGrid, LossRow};
use rflow_lab::report::{self, Series};
use rflow_lab::store::{load_store, save_store};
use rflow_lab::task::Task;
use serde_json::{json, Value};

/// Rectified flow matching lab: toy data, training, reflow, distillation,
/// sampling and evaluation.
///
/// Worker threads are set by RF_THREADS; results do not depend on it.
#[derive(Parser)]
#[command(name = "rflow", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a toy dataset from a task spec.
    GenData {
        /// Task spec JSON, e.g. {"kind": "gauss", "seed": 1}.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset file; a `.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// First-stage rectified flow matching.
    Train(ConfigArg),
    /// Sample reflow triplets from the first-stage checkpoint.
    ReflowGen(ConfigArg),
    /// Reflow training on the triplet store.
    ReflowTrain(ConfigArg),
    /// One-step distillation of the reflowed checkpoint.
    Distill(ConfigArg),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint over the step and guidance grids.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output CSV report.
        #[arg(long)]
        report: PathBuf,
        /// Run config whose `eval` section and seed are used; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time sampling at 1, 5 and 25 Euler steps and with Dopri5.
    Bench {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output CSV report.
        #[arg(long)]
        report: PathBuf,
        /// Samples per setting.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Timed runs per setting; the fastest is kept.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Guidance scale; defaults to the checkpoint's sampling scale.
        #[arg(long)]
        gamma: Option<f64>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run config JSON (schema in docs/config.md).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Euler steps [default: the config's solver, else 25].
    #[arg(long, conflicts_with = "dopri5")]
    steps: Option<usize>,
    /// Use the adaptive Dopri5 solver instead of Euler.
    #[arg(long)]
    dopri5: bool,
    /// Dopri5 relative tolerance.
    #[arg(long, default_value_t = 1e-5)]
    rtol: f64,
    /// Dopri5 absolute tolerance.
    #[arg(long, default_value_t = 1e-5)]
    atol: f64,
    /// Number of samples.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Guidance scale; without it sampling is unguided.
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write trajectories as CSV and SVG.
    #[arg(long)]
    trajectory: bool,
    /// Run config whose task must match the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> LabResult<()> {
    let pool = Pool::from_env();
    match cmd {
        Cmd::GenData { spec, out } => gen_data(&spec, &out),
        Cmd::Train(a) => train(&RunConfig::load(&a.config)?, &pool),
        Cmd::ReflowGen(a) => reflow_gen(&RunConfig::load(&a.config)?, &pool),
        Cmd::ReflowTrain(a) => train_on_store(&RunConfig::load(&a.config)?, false, &pool),
        Cmd::Distill(a) => train_on_store(&RunConfig::load(&a.config)?, true, &pool),
        Cmd::Sample(a) => sample(&a, &pool),
        Cmd::Eval { ckpt, report, config } => eval(&ckpt, &report, config.as_deref(), &pool),
        Cmd::Bench {
            ckpt,
            report,
            n,
            repeats,
            gamma,
        } => bench(&ckpt, &report, n, repeats, gamma, &pool),
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json(path: &Path, v: &Value) -> LabResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| LabError::Config(e.to_string()))?;
    write_file(path, text.as_bytes())
}

/// Writes `<path>.json` with the version string and `extra`.
fn write_sidecar(path: &Path, extra: Value) -> LabResult<()> {
    let mut v = json!({ "version": VERSION });
    if let (Some(m), Value::Object(e)) = (v.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json(&sidecar_path(path), &v)
}

fn require(path: &Path) -> LabResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LabError::Missing(path.into()))
    }
}

fn gen_data(spec: &Path, out: &Path) -> LabResult<()> {
    let task: Task = load_json(spec)?;
    task.validate()?;
    let items = task.generate()?;
    let bytes = format::encode_dataset(&items);
    write_file(out, &bytes)?;
    write_sidecar(
        out,
        json!({ "spec": task, "count": items.len(), "id": content_id(&bytes) }),
    )?;
    println!("{} items -> {}", items.len(), out.display());
    Ok(())
}

fn progress(stage: &'static str, total: usize) -> impl FnMut(&LossRow) {
    let every = (total / 20).max(1);
    move |r: &LossRow| {
        if r.step % every == 0 || r.step + 1 == total {
            eprintln!(
                "{stage} step {}/{total} loss {:.5} |g| {:.3}",
                r.step + 1,
                r.loss,
                r.grad_norm
            );
        }
    }
}

/// Writes the resolved config into `out_dir` before a stage runs.
fn begin(cfg: &RunConfig) -> LabResult<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| LabError::io(&cfg.out_dir, e))?;
    write_json(
        &cfg.out_dir.join("config.resolved.json"),
        &json!({ "version": VERSION, "config": cfg.to_value() }),
    )
}

fn finish_stage(cfg: &RunConfig, ck: &Checkpoint, rows: &[LossRow], drift: Option<f64>) -> LabResult<()> {
    let stage = ck.meta.stage.as_str();
    let ck_path = cfg.stage_path(stage);
    ck.save(&ck_path)?;
    let loss_path = cfg.loss_path(stage);
    report::write_csv(&loss_path, rows)?;
    write_sidecar(
        &loss_path,
        json!({ "checkpoint": ck.meta.id, "null_branch_drift": drift, "config": cfg.to_value() }),
    )?;
    println!("{stage} checkpoint {} -> {}", ck.meta.id, ck_path.display());
    Ok(())
}

fn load_items(cfg: &RunConfig) -> LabResult<Vec<rflow_core::rfm::TrainItem>> {
    let path = cfg.data_path();
    if cfg.data.is_some() || path.exists() {
        require(&path)?;
        return format::load_dataset(&path);
    }
    let items = cfg.task.generate()?;
    let bytes = format::encode_dataset(&items);
    write_file(&path, &bytes)?;
    write_sidecar(
        &path,
        json!({ "spec": cfg.task, "count": items.len(), "id": content_id(&bytes) }),
    )?;
    Ok(items)
}

fn train(cfg: &RunConfig, pool: &Pool) -> LabResult<()> {
    begin(cfg)?;
    let items = load_items(cfg)?;
    let est = cfg.estimator.resolve(&cfg.task)?;
    let (ck, rows) = pipeline::train_rfm(
        &cfg.task,
        &est,
        &items,
        &cfg.train,
        cfg.seed,
        cfg.guidance.effective().unwrap_or(1.0),
        cfg.to_value(),
        pool,
        &mut progress("rfm", cfg.train.steps),
    )?;
    finish_stage(cfg, &ck, &rows, None)
}

fn reflow_gen(cfg: &RunConfig, pool: &Pool) -> LabResult<()> {
    let ck_path = cfg.stage_path("rfm");
    require(&ck_path)?;
    begin(cfg)?;
    let ck = rflow_lab::checkpoint::load_for_task(&ck_path, &cfg.task)?;
    let items = load_items(cfg)?;
    let store = pipeline::reflow_generate(&ck, &items, &cfg.reflow.solver, &cfg.reflow.guidance, cfg.seed, pool)?;
    if !store.meta.skipped.is_empty() {
        eprintln!("skipped {} items whose solve failed", store.meta.skipped.len());
    }
    let dir = cfg.store_dir();
    let meta = save_store(&dir, &store, cfg.reflow.shard_size, cfg.to_value())?;
    println!("{} triplets, store {} -> {}", store.triplets.len(), meta.id, dir.display());
    Ok(())
}

fn train_on_store(cfg: &RunConfig, distill: bool, pool: &Pool) -> LabResult<()> {
    let parent = cfg.stage_path(if distill { "reflow" } else { "rfm" });
    require(&parent)?;
    let dir = cfg.store_dir();
    require(&dir)?;
    begin(cfg)?;
    let ck = rflow_lab::checkpoint::load_for_task(&parent, &cfg.task)?;
    let (store, meta) = load_store(&dir)?;
    let tc = if distill { &cfg.reflow.distill } else { &cfg.reflow.train };
    let (trained, rows) = pipeline::train_on_store(
        &ck,
        &store,
        &meta.id,
        distill,
        tc,
        cfg.reflow.sample_gamma,
        cfg.to_value(),
        pool,
        &mut progress(if distill { "distill" } else { "reflow" }, tc.steps),
    )?;
    let drift = pipeline::store_drift(&ck, &trained, &store, 32)?;
    println!("null-branch drift {drift:.4}");
    finish_stage(cfg, &trained, &rows, Some(drift))
}

fn load_ckpt(path: &Path, config: Option<&Path>) -> LabResult<(Checkpoint, Option<RunConfig>)> {
    match config {
        Some(c) => {
            let cfg = RunConfig::load(c)?;
            let ck = rflow_lab::checkpoint::load_for_task(path, &cfg.task)?;
            Ok((ck, Some(cfg)))
        }
        None => {
            let ck = Checkpoint::load(path)?;
            ck.meta.task.check_estimator(&ck.config)?;
            Ok((ck, None))
        }
    }
}

fn sample(a: &SampleArgs, pool: &Pool) -> LabResult<()> {
    let (ck, cfg) = load_ckpt(&a.ckpt, a.config.as_deref())?;
    let task = &ck.meta.task;
    let est = ck.estimator()?;
    let mut solver = match (a.dopri5, a.steps, cfg) {
        (true, _, _) => SolverConfig::dopri5(a.rtol, a.atol),
        (false, Some(n), _) => SolverConfig::euler(n),
        (false, None, Some(cfg)) => cfg.solver,
        (false, None, None) => SolverConfig::euler(25),
    };
    if a.trajectory {
        solver = solver.recording();
    }
    solver.validate()?;
    let guidance = match a.gamma {
        Some(g) => GuidanceConfig::scale(g),
        None => GuidanceConfig::off(),
    };
    guidance.validate()?;
    let conds = task.sample_conditions(a.n)?;
    let noise: Vec<_> = (0..conds.len())
        .map(|i| pipeline::sample_noise(a.seed, i, &task.latent_shape()))
        .collect();
    let counter = CountingField::new(&est);
    let sols = rflow_core::sampler::solve_many(&counter, &noise, &conds, &solver, &guidance, pool)?;
    let evals = counter.count() as f64 / conds.len().max(1) as f64;

    std::fs::create_dir_all(&a.out).map_err(|e| LabError::io(&a.out, e))?;
    let items: Vec<_> = sols
        .iter()
        .zip(&conds)
        .map(|(s, c)| rflow_core::rfm::TrainItem {
            x1: s.x1.clone(),
            c: c.clone(),
        })
        .collect();
    let out = a.out.join("samples.rfds");
    format::save_dataset(&out, &items)?;
    let straight: Vec<f64> = sols
        .iter()
        .filter_map(|s| s.trajectory.as_ref())
        .map(straightness)
        .collect::<Result<_, _>>()?;
    let mean_straight = (!straight.is_empty()).then(|| straight.iter().sum::<f64>() / straight.len() as f64);
    write_sidecar(
        &out,
        json!({
            "checkpoint": ck.meta.id,
            "stage": ck.meta.stage,
            "solver": solver,
            "guidance": guidance,
            "n": a.n,
            "seed": a.seed,
            "field_evals_per_sample": evals,
            "straightness": mean_straight,
            "config": ck.meta.run_config,
        }),
    )?;
    if a.trajectory {
        let trajs: Vec<_> = sols.iter().filter_map(|s| s.trajectory.clone()).collect();
        let csv = a.out.join("trajectories.csv");
        report::write_trajectories(&csv, &trajs)?;
        write_sidecar(&csv, json!({ "checkpoint": ck.meta.id, "config": ck.meta.run_config }))?;
        if noise.first().is_some_and(|x| x.numel() == 2) {
            trajectory_svg(&a.out, &ck, &trajs, &noise, &sols)?;
        }
    }
    println!(
        "{} samples -> {} ({evals} field evaluations per sample)",
        items.len(),
        out.display()
    );
    Ok(())
}

/// Polyline plot of 2D trajectories.
fn trajectory_svg(
    dir: &Path,
    ck: &Checkpoint,
    trajs: &[rflow_core::Trajectory],
    noise: &[rflow_core::LatentSeq],
    sols: &[rflow_core::sampler::Solution],
) -> LabResult<()> {
    {
        let paths: Vec<Vec<[f64; 2]>> = trajs
            .iter()
            .map(|t| t.states.iter().map(|x| first_two(x.data())).collect())
            .collect();
        let ends: Vec<[f64; 2]> = sols.iter().map(|s| first_two(s.x1.data())).collect();
        let starts: Vec<[f64; 2]> = noise.iter().map(|x| first_two(x.data())).collect();
        let svg = report::scatter_svg(
            &format!("{} {} samples", ck.meta.stage, sols.len()),
            &[
                Series {
                    label: "noise",
                    color: "#1f77b4",
                    points: &starts,
                },
                Series {
                    label: "sample",
                    color: "#d62728",
                    points: &ends,
                },
            ],
            &paths,
        );
        let svg_path = dir.join("trajectories.svg");
        write_file(&svg_path, svg.as_bytes())?;
        write_sidecar(&svg_path, json!({ "checkpoint": ck.meta.id, "config": ck.meta.run_config }))?;
    }
    Ok(())
}

fn first_two(d: &[f32]) -> [f64; 2] {
    [
        d.first().copied().unwrap_or(0.0) as f64,
        d.get(1).copied().unwrap_or(0.0) as f64,
    ]
}

fn eval(ckpt: &Path, report_path: &Path, config: Option<&Path>, pool: &Pool) -> LabResult<()> {
    let (ck, cfg) = load_ckpt(ckpt, config)?;
    let cfg = cfg.unwrap_or_default();
    let e = &cfg.eval;
    let grid = EvalGrid {
        steps: e.steps.clone(),
        dopri5: e.dopri5.then_some((e.rtol, e.atol)),
        gammas: e.gammas.clone(),
        sweep_steps: e.sweep_steps,
        gamma: ck.meta.sample_gamma,
        samples: e.samples,
    };
    let rows = pipeline::eval_suite(&ck.estimator()?, &ck.meta.task, &grid, cfg.seed, pool)?;
    report::write_csv(report_path, &rows)?;
    write_sidecar(
        report_path,
        json!({ "checkpoint": ck.meta.id, "stage": ck.meta.stage, "eval": e, "seed": cfg.seed, "config": ck.meta.run_config }),
    )?;
    println!("{} rows -> {}", rows.len(), report_path.display());
    Ok(())
}

fn bench(ckpt: &Path, report_path: &Path, n: usize, repeats: usize, gamma: Option<f64>, pool: &Pool) -> LabResult<()> {
    let (ck, _) = load_ckpt(ckpt, None)?;
    let gamma = gamma.unwrap_or(ck.meta.sample_gamma);
    let r = pipeline::bench(&ck.estimator()?, &ck.meta.task, gamma, n, repeats, pool)?;
    report::write_csv(report_path, &r.rows)?;
    write_sidecar(
        report_path,
        json!({
            "checkpoint": ck.meta.id,
            "gamma": gamma,
            "threads": pool.threads(),
            "ratio_25_to_1": r.ratio_25_to_1,
            "config": ck.meta.run_config,
        }),
    )?;
    for row in &r.rows {
        println!(
            "{:>6} {:>3} steps: {:.3} ms/sample, {:.1} field evals",
            row.solver, row.steps, row.ms_per_sample, row.field_evals
        );
    }
    println!("25-step / 1-step wall-clock ratio: {:.2}", r.ratio_25_to_1);
    Ok(())
}
