//! Command-line entry point tying generation, training, planning,
//! evaluation, and sweeps together around one strict TOML configuration.
//!
//! Commands: `generate`, `train`, `plan`, `eval`, `sweep`, all driven by
//! `--config <file>`. Artifacts land under the configured output directory,
//! and every command writes the effective configuration next to them so a
//! run can be repeated from its artifacts alone; consumers re-verify dataset
//! manifests and checkpoint headers against the configuration before use.
//! Concurrent invocations on the same output directory are rejected via a
//! lock file. Exit codes: 0 success, 2 configuration error, 3 runtime
//! invariant violation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::dataset::{
    env_config_hash, generate_to_disk, slice, split, Dataset, DatasetManifest, DatasetReader,
    SliceRecord, Trajectory,
};
use crate::env::{render, sample_episode, Observation};
use crate::eval::{
    evaluate_checkpoint, fit_state_probe, CheckpointMetrics, EpisodeProtocol, MetricSeries,
    SpearmanReport,
};
use crate::model::{load_checkpoint, Conditioning, Model};
use crate::planning::{
    mpc_episode, plan, write_cost_trace_csv, write_episode_jsonl, Distance, EpisodeResult,
    PlanProblem, PlanResult, PlannerConfig, PlannerKind,
};
use crate::rng::derive_seed;
use crate::training::{encode_trajectory, train, EncodedTraj, TrainReport};
use crate::{Error, Result};

/// Probe fits subsample the training observations down to at most this many
/// frames (deterministic stride); plenty for a 4-target linear readout.
const PROBE_FIT_CAP: usize = 20_000;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "wmplan",
    version,
    about = "Latent world-model planning toolkit: dataset generation, predictor training, \
             trajectory optimization, and evaluation over deterministic 2D environments"
)]
pub struct Cli {
    /// Run configuration file (strict TOML; unknown keys rejected).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configuration's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override the configuration's `io.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the configured data-collection policy and write the dataset.
    Generate,
    /// Train the predictor on the configured dataset; writes per-epoch
    /// checkpoints and a metrics table.
    Train,
    /// Run one planning episode from a checkpoint; writes the first planning
    /// call's result and trace plus the executed episode trace.
    Plan {
        /// Trained predictor checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode seed (draws the start state and goal).
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
    },
    /// Evaluate every checkpoint matching a glob; writes `metrics.csv` and,
    /// given at least two checkpoints, `spearman.csv`.
    Eval {
        /// Checkpoint path glob, e.g. `runs/wall_base/ckpt_ep*.bin`.
        #[arg(long)]
        checkpoints: String,
    },
    /// Vary exactly one axis against the base configuration and write a
    /// comparison table.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
}

/// Study axes. Levels are fixed to the studied values: context `w` in
/// {1,2,3,5,7}, `rollout_steps` in {1,2,3,6}, `depth` in {3,6,12}, `width`
/// in {64,128,256}, `proprio` in {off,on}, `conditioning` over both modes,
/// and `planner` crossing all four optimizers with both distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    Planner,
    RolloutSteps,
    Proprio,
    W,
    Conditioning,
    Depth,
    Width,
}

impl SweepAxis {
    pub fn slug(self) -> &'static str {
        match self {
            SweepAxis::Planner => "planner",
            SweepAxis::RolloutSteps => "rollout_steps",
            SweepAxis::Proprio => "proprio",
            SweepAxis::W => "w",
            SweepAxis::Conditioning => "conditioning",
            SweepAxis::Depth => "depth",
            SweepAxis::Width => "width",
        }
    }
}

/// Parses the process arguments, runs the selected command, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Dispatches a parsed invocation.
pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        init_threads(n)?;
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            cmd_generate(&cfg)?;
        }
        Command::Train => {
            cmd_train(&cfg)?;
        }
        Command::Plan {
            checkpoint,
            episode_seed,
        } => {
            cmd_plan(&cfg, checkpoint, *episode_seed)?;
        }
        Command::Eval { checkpoints } => {
            cmd_eval(&cfg, checkpoints)?;
        }
        Command::Sweep { axis } => {
            cmd_sweep(&cfg, *axis)?;
        }
    }
    Ok(())
}

fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("missing required flag --config <FILE>".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.io.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Output-directory lock
// ---------------------------------------------------------------------------

/// Holds `<out_dir>/.lock` for the duration of a command; a second
/// invocation on the same output directory fails instead of interleaving
/// writes. The file is removed on drop; after a crash the error message
/// names the stale file to delete.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out_dir: &Path) -> Result<OutDirLock> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(f) => {
                use std::io::Write as _;
                let mut f = f;
                let _ = write!(f, "{}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Runtime(format!(
                "output directory {} is locked by another invocation (delete {} if stale)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Generates the configured dataset to `io.dataset_prefix`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetManifest> {
    let _lock = OutDirLock::acquire(&cfg.out_dir())?;
    let manifest = generate_impl(cfg)?;
    cfg.save(&cfg.out_dir().join("config.toml"))?;
    println!(
        "generate: {} trajectories x {} steps -> {}",
        manifest.n_traj,
        manifest.traj_len,
        cfg.dataset_prefix().display()
    );
    Ok(manifest)
}

fn generate_impl(cfg: &RunConfig) -> Result<DatasetManifest> {
    let d = &cfg.dataset;
    generate_to_disk(
        &cfg.env,
        d.policy,
        d.n_traj,
        d.traj_len,
        d.frameskip,
        cfg.dataset_seed(),
        d.train_frac,
        &cfg.dataset_prefix(),
    )
}

/// Opens the configured dataset and rejects it unless its manifest matches
/// the configuration (environment hash, policy, sizes, seed, split), so a
/// command restarted from artifacts can trust what it reads.
fn open_verified_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, Dataset)> {
    let reader = DatasetReader::open(&cfg.dataset_prefix())?;
    verify_manifest(&reader.manifest, cfg)?;
    let manifest = reader.manifest.clone();
    let data = reader.read_all()?;
    Ok((manifest, data))
}

fn verify_manifest(m: &DatasetManifest, cfg: &RunConfig) -> Result<()> {
    let prefix = cfg.dataset_prefix();
    let mismatch = |field: &str, want: &str, got: &str| {
        Err(Error::Config(format!(
            "dataset {} does not match the configuration: {field} is {got}, config expects \
             {want}; regenerate with `wmplan generate`",
            prefix.display()
        )))
    };
    let want_hash = env_config_hash(&cfg.env);
    if m.env_hash != want_hash {
        return mismatch("env_hash", &want_hash, &m.env_hash);
    }
    if m.policy != cfg.dataset.policy {
        return mismatch(
            "policy",
            &format!("{:?}", cfg.dataset.policy),
            &format!("{:?}", m.policy),
        );
    }
    if m.frameskip != cfg.dataset.frameskip {
        return mismatch(
            "frameskip",
            &cfg.dataset.frameskip.to_string(),
            &m.frameskip.to_string(),
        );
    }
    if m.n_traj != cfg.dataset.n_traj {
        return mismatch("n_traj", &cfg.dataset.n_traj.to_string(), &m.n_traj.to_string());
    }
    if m.traj_len != cfg.dataset.traj_len {
        return mismatch(
            "traj_len",
            &cfg.dataset.traj_len.to_string(),
            &m.traj_len.to_string(),
        );
    }
    if m.seed != cfg.dataset_seed() {
        return mismatch("seed", &cfg.dataset_seed().to_string(), &m.seed.to_string());
    }
    if m.train_frac != cfg.dataset.train_frac {
        return mismatch(
            "train_frac",
            &cfg.dataset.train_frac.to_string(),
            &m.train_frac.to_string(),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Trains the configured model on the configured dataset; checkpoints and
/// `metrics.csv` land under `io.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let _lock = OutDirLock::acquire(&cfg.out_dir())?;
    let (report, _model) = train_impl(cfg)?;
    println!(
        "train: {} epochs, {} checkpoints, metrics -> {}",
        report.epochs.len(),
        report.checkpoint_paths.len(),
        report.metrics_path.display()
    );
    Ok(report)
}

fn train_impl(cfg: &RunConfig) -> Result<(TrainReport, Model)> {
    let (manifest, data) = open_verified_dataset(cfg)?;
    let (train_idx, val_idx) = split(manifest.n_traj, manifest.train_frac, manifest.seed)?;
    let mut model = cfg.new_model(manifest.norm_stats.clone())?;
    let train_trajs = encode_subset(&data.trajectories, &train_idx, &model)?;
    let val_trajs = encode_subset(&data.trajectories, &val_idx, &model)?;
    drop(data);
    let tc = cfg.train_config();
    let report = train(&train_trajs, &val_trajs, &mut model, &tc, &cfg.out_dir())?;
    cfg.save(&cfg.out_dir().join("config.toml"))?;
    Ok((report, model))
}

/// Encodes the indexed trajectories in parallel, preserving index order.
fn encode_subset(trajs: &[Trajectory], idx: &[usize], model: &Model) -> Result<Vec<EncodedTraj>> {
    use rayon::prelude::*;
    idx.par_iter()
        .map(|&i| encode_trajectory(&trajs[i], model))
        .collect()
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

/// Artifacts of one `plan` invocation.
#[derive(Debug)]
pub struct PlanOutputs {
    /// First planning call, re-run standalone with the episode's call-0 seed.
    pub first_plan: PlanResult,
    pub episode: EpisodeResult,
    pub plan_path: PathBuf,
    pub trace_csv_path: PathBuf,
    pub episode_path: PathBuf,
    pub episode_trace_path: PathBuf,
}

/// Plans one episode with the configured planner from a trained checkpoint.
///
/// Writes `plan_seed<N>.json` (the first planning call's plan and budget),
/// `plan_seed<N>_trace.csv` (its convergence trace), `episode_seed<N>.json`
/// (the episode outcome), and `episode_seed<N>.jsonl` (the executed steps).
pub fn cmd_plan(cfg: &RunConfig, checkpoint: &Path, episode_seed: u64) -> Result<PlanOutputs> {
    let _lock = OutDirLock::acquire(&cfg.out_dir())?;
    let model = load_checkpoint(checkpoint)?;
    verify_model_matches(&model, cfg, checkpoint)?;
    let planner = cfg.planner_config();
    let out = cfg.out_dir();

    // The episode harness derives per-call seeds from (planner seed, episode
    // seed, call index); re-issue call 0 standalone so its full convergence
    // trace can be recorded.
    let (init, goal_obs) = sample_episode(episode_seed, &cfg.env);
    let problem = PlanProblem {
        init_obs: render(&init, &cfg.env),
        goal_obs: goal_obs.clone(),
        h: cfg.objective.h,
        alpha: cfg.objective.alpha,
        wp: cfg.objective.wp,
        distance: cfg.objective.distance,
    };
    let mut first_cfg = planner.clone();
    first_cfg.seed = derive_seed(derive_seed(planner.seed, episode_seed), 0);
    let first_plan = plan(&problem, &model, &first_cfg)?;
    let plan_path = out.join(format!("plan_seed{episode_seed}.json"));
    std::fs::write(
        &plan_path,
        serde_json::to_string_pretty(&first_plan)
            .map_err(|e| Error::Runtime(format!("plan json: {e}")))?,
    )?;
    let trace_csv_path = out.join(format!("plan_seed{episode_seed}_trace.csv"));
    write_cost_trace_csv(&first_plan.cost_trace, &trace_csv_path)?;

    let (episode, trace) = mpc_episode(
        &model,
        &cfg.env,
        &cfg.objective,
        &planner,
        &cfg.mpc,
        episode_seed,
    )?;
    let episode_path = out.join(format!("episode_seed{episode_seed}.json"));
    std::fs::write(
        &episode_path,
        serde_json::to_string_pretty(&episode)
            .map_err(|e| Error::Runtime(format!("episode json: {e}")))?,
    )?;
    let episode_trace_path = out.join(format!("episode_seed{episode_seed}.jsonl"));
    write_episode_jsonl(&trace, &episode_trace_path)?;
    cfg.save(&out.join("config.toml"))?;

    println!(
        "plan: seed {episode_seed} success {} steps {} final distance {:.4} ({} planning calls)",
        episode.success, episode.steps_taken, episode.final_distance, episode.planning_calls
    );
    Ok(PlanOutputs {
        first_plan,
        episode,
        plan_path,
        trace_csv_path,
        episode_path,
        episode_trace_path,
    })
}

/// Rejects a checkpoint whose architecture or normalization disagrees with
/// the configuration and its dataset.
fn verify_model_matches(model: &Model, cfg: &RunConfig, path: &Path) -> Result<()> {
    if model.cfg != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model section than the configuration",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Artifacts of one `eval` invocation.
#[derive(Debug)]
pub struct EvalOutputs {
    pub series: MetricSeries,
    /// Present when at least two checkpoints were evaluated.
    pub spearman: Option<SpearmanReport>,
    pub metrics_path: PathBuf,
    pub spearman_path: Option<PathBuf>,
}

/// Evaluates every checkpoint matching `pattern` on the configured episode
/// set and validation slices; writes `eval/metrics.csv` (one row per
/// checkpoint) and, with two or more rows, `eval/spearman.csv` under the
/// output directory.
pub fn cmd_eval(cfg: &RunConfig, pattern: &str) -> Result<EvalOutputs> {
    let _lock = OutDirLock::acquire(&cfg.out_dir())?;
    let checkpoints = expand_checkpoints(pattern)?;
    let ctx = build_eval_context(cfg)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in &checkpoints {
        let model = load_checkpoint(path)?;
        verify_model_matches(&model, cfg, path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let row = eval_one(cfg, &ctx, &model, &label)?;
        println!("eval {label}: success {:.3}", row.success);
        rows.push(row);
    }
    let series = MetricSeries { rows };
    // Scoped to `eval/` so the training run's own metrics.csv survives.
    let eval_dir = cfg.out_dir().join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let metrics_path = eval_dir.join("metrics.csv");
    series.write_csv(&metrics_path)?;
    let (spearman, spearman_path) = if series.rows.len() >= 2 {
        let rep = series.spearman_vs_success()?;
        let p = eval_dir.join("spearman.csv");
        rep.write_csv(&p)?;
        (Some(rep), Some(p))
    } else {
        (None, None)
    };
    cfg.save(&eval_dir.join("config.toml"))?;
    println!(
        "eval: {} checkpoints -> {}",
        series.rows.len(),
        metrics_path.display()
    );
    Ok(EvalOutputs {
        series,
        spearman,
        metrics_path,
        spearman_path,
    })
}

fn expand_checkpoints(pattern: &str) -> Result<Vec<PathBuf>> {
    let matches = glob::glob(pattern)
        .map_err(|e| Error::Config(format!("bad checkpoint glob {pattern}: {e}")))?;
    let mut out = Vec::new();
    for entry in matches {
        out.push(entry.map_err(|e| Error::Runtime(format!("checkpoint glob: {e}")))?);
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint glob matched no files: {pattern}"
        )));
    }
    Ok(out)
}

/// Checkpoint-independent evaluation inputs: validation slices at the
/// largest horizon and (when the probe is enabled) probe-fit observations.
struct EvalContext {
    val_batch: Vec<SliceRecord>,
    probe_obs: Vec<Observation>,
}

fn build_eval_context(cfg: &RunConfig) -> Result<EvalContext> {
    let (manifest, data) = open_verified_dataset(cfg)?;
    let (_, val_idx) = split(manifest.n_traj, manifest.train_frac, manifest.seed)?;
    let (train_raw, val_raw) = partition_trajectories(data.trajectories, &val_idx);
    let probe_obs = if cfg.eval.probe {
        probe_fit_observations(&train_raw)
    } else {
        Vec::new()
    };
    drop(train_raw);
    let w_eval = *cfg.eval.horizons.last().expect("validated nonempty");
    let val_data = Dataset {
        env: manifest.env.clone(),
        policy: manifest.policy,
        frameskip: manifest.frameskip,
        seed: manifest.seed,
        train_frac: manifest.train_frac,
        trajectories: val_raw,
    };
    let (val_batch, _skips) = slice(&val_data, w_eval)?;
    Ok(EvalContext {
        val_batch,
        probe_obs,
    })
}

/// Evaluates one model with the configuration's planner and episode set.
/// The probe (when enabled) is fit per model: its features come from the
/// model's own visual map.
fn eval_one(
    cfg: &RunConfig,
    ctx: &EvalContext,
    model: &Model,
    label: &str,
) -> Result<CheckpointMetrics> {
    let planner = cfg.planner_config();
    let proto = EpisodeProtocol {
        env: &cfg.env,
        objective: &cfg.objective,
        planner: &planner,
        mpc: &cfg.mpc,
    };
    let probe = if cfg.eval.probe {
        Some(fit_state_probe(model, &ctx.probe_obs)?)
    } else {
        None
    };
    evaluate_checkpoint(
        label,
        model,
        &proto,
        cfg.eval.episodes,
        cfg.eval.seed_base,
        &ctx.val_batch,
        probe.as_ref(),
        &cfg.eval.horizons,
    )
}

/// Splits owned trajectories into (train, val) by the validation index set,
/// preserving ascending trajectory order within each side.
fn partition_trajectories(
    trajs: Vec<Trajectory>,
    val_idx: &[usize],
) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let val_set: HashSet<usize> = val_idx.iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, t) in trajs.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(t);
        } else {
            train.push(t);
        }
    }
    (train, val)
}

/// Deterministic strided subsample of all training observations.
fn probe_fit_observations(train: &[Trajectory]) -> Vec<Observation> {
    let total: usize = train.iter().map(|t| t.observations.len()).sum();
    let stride = total.div_ceil(PROBE_FIT_CAP).max(1);
    train
        .iter()
        .flat_map(|t| t.observations.iter())
        .step_by(stride)
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Varies one axis against the base configuration: trains each level (the
/// planner axis trains once and re-plans), evaluates its final model, and
/// writes one table row per level to `sweep_<axis>/table.csv` under the
/// output directory.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<PathBuf> {
    let _lock = OutDirLock::acquire(&cfg.out_dir())?;
    let sweep_dir = cfg.out_dir().join(format!("sweep_{}", axis.slug()));
    std::fs::create_dir_all(&sweep_dir)?;
    let mut rows = match axis {
        SweepAxis::Planner => sweep_planner(cfg, &sweep_dir)?,
        _ => sweep_levels(cfg, axis, &sweep_dir)?,
    };
    align_optional_columns(&mut rows);
    let series = MetricSeries { rows };
    let table = sweep_dir.join("table.csv");
    series.write_csv(&table)?;
    cfg.save(&sweep_dir.join("base_config.toml"))?;
    println!(
        "sweep {}: {} rows -> {}",
        axis.slug(),
        series.rows.len(),
        table.display()
    );
    Ok(table)
}

/// Planner axis: one base model, all four optimizers crossed with both
/// distances. Sampling planners keep the base budgets; gradient planners use
/// the gradient defaults (single trajectory, long refinement).
fn sweep_planner(cfg: &RunConfig, sweep_dir: &Path) -> Result<Vec<CheckpointMetrics>> {
    let mut base = cfg.clone();
    base.io.out_dir = sweep_dir.join("base").display().to_string();
    base.validate()?;
    ensure_dataset(&base)?;
    let (_report, model) = train_impl(&base)?;
    let ctx = build_eval_context(&base)?;
    let mut rows = Vec::new();
    for kind in [
        PlannerKind::Cem,
        PlannerKind::CmaDiag,
        PlannerKind::Gd,
        PlannerKind::Adam,
    ] {
        for dist in [Distance::L1, Distance::L2] {
            let mut level = base.clone();
            level.planner = match kind {
                PlannerKind::Cem | PlannerKind::CmaDiag => PlannerConfig {
                    kind,
                    ..cfg.planner.clone()
                },
                PlannerKind::Gd | PlannerKind::Adam => PlannerConfig {
                    seed: cfg.planner.seed,
                    action_clip: cfg.planner.action_clip,
                    // The elite count is a sampling-planner knob; keep it
                    // consistent with the single gradient trajectory.
                    k: 1,
                    ..PlannerConfig::gradient_defaults(kind)
                },
            };
            level.objective.distance = dist;
            level.validate()?;
            let label = format!("{}_{}", kind_slug(kind), dist_slug(dist));
            let row = eval_one(&level, &ctx, &model, &label)?;
            println!("sweep planner {label}: success {:.3}", row.success);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Every other axis: one training run per level.
fn sweep_levels(cfg: &RunConfig, axis: SweepAxis, sweep_dir: &Path) -> Result<Vec<CheckpointMetrics>> {
    let mut rows = Vec::new();
    for (label, mut level) in axis_levels(cfg, axis) {
        level.io.out_dir = sweep_dir.join(&label).display().to_string();
        if env_config_hash(&level.env) != env_config_hash(&cfg.env) {
            // A changed environment needs its own dataset; levels sharing the
            // base environment reuse the base prefix.
            level.io.dataset_prefix = sweep_dir.join(format!("data_{label}")).display().to_string();
        }
        level.validate()?;
        ensure_dataset(&level)?;
        let (_report, model) = train_impl(&level)?;
        let ctx = build_eval_context(&level)?;
        let row = eval_one(&level, &ctx, &model, &label)?;
        println!("sweep {} {label}: success {:.3}", axis.slug(), row.success);
        rows.push(row);
    }
    Ok(rows)
}

/// The studied levels for each axis, as (label, derived configuration).
/// Dependent minima are raised just enough to keep the configuration valid
/// (e.g. the trained window must cover the rollout depth).
fn axis_levels(base: &RunConfig, axis: SweepAxis) -> Vec<(String, RunConfig)> {
    match axis {
        SweepAxis::Planner => unreachable!("planner axis is handled by sweep_planner"),
        SweepAxis::RolloutSteps => [1usize, 2, 3, 6]
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.training.k_max = k;
                c.training.w = c.training.w.max(k);
                c.model.capacity = c.model.capacity.max(c.training.w);
                (format!("k{k}"), c)
            })
            .collect(),
        SweepAxis::Proprio => [false, true]
            .iter()
            .map(|&p| {
                let mut c = base.clone();
                c.env.proprio = p;
                c.model.proprio = p;
                if !p {
                    c.eval.probe = false;
                    c.objective.alpha = 0.0;
                }
                (format!("proprio_{}", if p { "on" } else { "off" }), c)
            })
            .collect(),
        SweepAxis::W => [1usize, 2, 3, 5, 7]
            .iter()
            .map(|&w| {
                let mut c = base.clone();
                c.training.w = w;
                c.model.capacity = w;
                c.training.k_max = c.training.k_max.min(w);
                c.objective.wp = c.objective.wp.min(w);
                (format!("w{w}"), c)
            })
            .collect(),
        SweepAxis::Conditioning => [Conditioning::FeatureConcat, Conditioning::LayerModulation]
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.model.conditioning = m;
                let label = match m {
                    Conditioning::FeatureConcat => "feature_concat",
                    Conditioning::LayerModulation => "layer_modulation",
                };
                (label.to_string(), c)
            })
            .collect(),
        SweepAxis::Depth => [3usize, 6, 12]
            .iter()
            .map(|&d| {
                let mut c = base.clone();
                c.model.depth = d;
                (format!("depth{d}"), c)
            })
            .collect(),
        SweepAxis::Width => [64usize, 128, 256]
            .iter()
            .map(|&wd| {
                let mut c = base.clone();
                c.model.width = wd;
                (format!("width{wd}"), c)
            })
            .collect(),
    }
}

/// Reuses an existing on-disk dataset when its manifest matches the level's
/// configuration; otherwise generates it.
fn ensure_dataset(cfg: &RunConfig) -> Result<()> {
    let ok = match DatasetReader::open(&cfg.dataset_prefix()) {
        Ok(r) => verify_manifest(&r.manifest, cfg).is_ok(),
        Err(_) => false,
    };
    if !ok {
        generate_impl(cfg)?;
    }
    Ok(())
}

/// Blanks optional metric columns that only some rows carry (e.g. the
/// proprio axis yields proprio unroll errors for one level only), so the
/// table keeps one aligned schema.
fn align_optional_columns(rows: &mut [CheckpointMetrics]) {
    if rows.iter().any(|r| r.unroll.prop_l1.is_none()) {
        for r in rows.iter_mut() {
            r.unroll.prop_l1 = None;
            r.unroll.prop_l2 = None;
        }
    }
    if rows.iter().any(|r| r.probe.is_none()) {
        for r in rows.iter_mut() {
            r.probe = None;
        }
    }
    if rows.iter().any(|r| r.action_error.is_none()) {
        for r in rows.iter_mut() {
            r.action_error = None;
            r.action_score = None;
        }
    }
}

fn kind_slug(kind: PlannerKind) -> &'static str {
    match kind {
        PlannerKind::Cem => "cem",
        PlannerKind::CmaDiag => "cma_diag",
        PlannerKind::Gd => "gd",
        PlannerKind::Adam => "adam",
    }
}

fn dist_slug(dist: Distance) -> &'static str {
    match dist {
        Distance::L1 => "l1",
        Distance::L2 => "l2",
    }
}
