//! Evaluation suite: the episode success protocol, planning-independent
//! model-quality metrics (unrolling error, linear state probe, action
//! error/score), and the rank correlation between each metric and success.
//!
//! The unroll-error accumulation deliberately mirrors the training loss
//! runner's chunked reduction, so the horizon-1 L2 error on a batch is
//! bit-identical to the teacher-forcing loss on the same batch.

use crate::dataset::SliceRecord;
use crate::env::{EnvConfig, Observation};
use crate::model::{
    encode_action, encode_proprio_normalized, encode_vis, predict_next, ContextWindow, LatentState,
    Model,
};
use crate::planning::{mpc_episode, MpcConfig, PlanObjective, PlannerConfig};
use crate::training::{encode_records, mse_mean, EncodedTraj, REDUCTION_CHUNK};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use crate::planning::EpisodeResult;

/// Ridge strength for the state-probe fallback when the normal equations
/// are singular.
pub const PROBE_RIDGE_LAMBDA: f64 = 1e-6;

/// Default episode count for success-rate evaluation.
pub const DEFAULT_EPISODES: usize = 96;

// ---------------------------------------------------------------------------
// Success protocol
// ---------------------------------------------------------------------------

/// Everything an episode run needs besides the model: environment, planning
/// objective, optimizer, and episode control.
#[derive(Debug, Clone)]
pub struct EpisodeProtocol<'a> {
    pub env: &'a EnvConfig,
    pub objective: &'a PlanObjective,
    pub planner: &'a PlannerConfig,
    pub mpc: &'a MpcConfig,
}

/// Runs `episodes` planning episodes with seeds `seed_base..seed_base+episodes`,
/// in parallel, returning results in seed order.
pub fn run_episodes(
    model: &Model,
    proto: &EpisodeProtocol,
    episodes: usize,
    seed_base: u64,
) -> Result<Vec<EpisodeResult>> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("success_rate: episodes must be >= 1".into()));
    }
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            mpc_episode(
                model,
                proto.env,
                proto.objective,
                proto.planner,
                proto.mpc,
                seed_base + i as u64,
            )
            .map(|(r, _)| r)
        })
        .collect()
}

/// Mean success over [`run_episodes`].
pub fn success_rate(
    model: &Model,
    proto: &EpisodeProtocol,
    episodes: usize,
    seed_base: u64,
) -> Result<f64> {
    let results = run_episodes(model, proto, episodes, seed_base)?;
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Writes episode results as JSON lines.
pub fn write_episode_results_jsonl(results: &[EpisodeResult], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Runtime(format!("jsonl: {e}")))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean and population standard deviation of the last `min(n, len)` values;
/// the paper-style trailing success average with its error bar.
pub fn trailing_average(series: &[f64], n: usize) -> Result<(f64, f64)> {
    if series.is_empty() || n == 0 {
        return Err(Error::InvalidArgument(
            "trailing_average: series and n must be nonempty/positive".into(),
        ));
    }
    let tail = &series[series.len().saturating_sub(n)..];
    let m = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / m;
    let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// Unrolling error
// ---------------------------------------------------------------------------

fn l1_mean(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n
}

/// Per-horizon embedding errors of the predictor unrolled on ground-truth
/// actions. `total_*` adds the visual and proprio terms the way the training
/// loss does; `prop_*` is present only for proprio models.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollErrorReport {
    pub horizons: Vec<usize>,
    pub vis_l1: Vec<f64>,
    pub vis_l2: Vec<f64>,
    pub prop_l1: Option<Vec<f64>>,
    pub prop_l2: Option<Vec<f64>>,
    pub total_l1: Vec<f64>,
    pub total_l2: Vec<f64>,
    /// Prediction terms behind each horizon's mean.
    pub counts: Vec<usize>,
}

/// Folds per-item contributions into `width` sums with the same fixed-chunk
/// grouping the training loss uses, so results are independent of the worker
/// count and, for matching term streams, bit-identical to training.
fn chunked_sums<T, F>(items: &[T], width: usize, f: F) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<()> + Sync,
{
    let partials: Vec<Result<Vec<f64>>> = items
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; width];
            for item in chunk {
                f(item, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut sums = vec![0.0; width];
    for part in partials {
        for (a, b) in sums.iter_mut().zip(&part?) {
            *a += b;
        }
    }
    Ok(sums)
}

/// Ground-truth latents and action embeddings for one encoded slice.
fn slice_context(enc: &EncodedTraj, w: usize, model: &Model) -> (Vec<LatentState>, Vec<Vec<f64>>) {
    let gt: Vec<LatentState> = (0..=w)
        .map(|pos| LatentState {
            z_vis: enc.z_vis[pos].clone(),
            z_prop: enc
                .p_norm
                .as_ref()
                .map(|p| encode_proprio_normalized(&p[pos], model)),
        })
        .collect();
    let act: Vec<Vec<f64>> = (0..w).map(|pos| encode_action(&enc.a_norm[pos], model)).collect();
    (gt, act)
}

/// Runs every unroll chain of one slice: from each ground-truth prefix
/// `rho = 1..=w`, feed predictions back (with true actions) out to horizon
/// `max_h`, visiting each prediction with its order `k` and target position.
fn walk_chains<F>(
    gt: &[LatentState],
    act: &[Vec<f64>],
    w: usize,
    max_h: usize,
    model: &Model,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, usize, &LatentState),
{
    // Slices wider than the model's context capacity slide the window, the
    // same way planning unrolls past Wp; narrower ones keep every slot so
    // the horizon-1 chain is exactly the teacher-forcing context.
    let cap = w.min(model.cfg.capacity);
    for rho in 1..=w {
        let mut ctx = ContextWindow::new();
        for pos in rho.saturating_sub(cap)..rho {
            ctx.push(gt[pos].clone(), act[pos].clone(), cap);
        }
        let mut prev: Option<LatentState> = None;
        for k in 1..=max_h {
            let target = rho + k - 1;
            if target > w {
                break;
            }
            if let Some(p) = prev.take() {
                ctx.push(p, act[target - 1].clone(), cap);
            }
            let (pred, _) = predict_next(&ctx, model)?;
            visit(k, target, &pred);
            prev = Some(pred);
        }
    }
    Ok(())
}

fn check_horizons(horizons: &[usize], w: usize) -> Result<usize> {
    if horizons.is_empty() {
        return Err(Error::InvalidArgument("unroll_error: empty horizon list".into()));
    }
    let max_h = *horizons.iter().max().expect("nonempty");
    for &h in horizons {
        if h == 0 || h > w {
            return Err(Error::InvalidArgument(format!(
                "unroll_error: horizon {h} outside 1..={w} (slice window W = {w})"
            )));
        }
    }
    Ok(max_h)
}

/// Unrolls the model on a validation batch over ground-truth actions and
/// reports per-horizon L1/L2 embedding errors. Horizon k averages over
/// every chain long enough to reach it: `B * (W + 1 - k)` terms.
pub fn unroll_error(
    model: &Model,
    batch: &[SliceRecord],
    horizons: &[usize],
) -> Result<UnrollErrorReport> {
    let (encoded, w) = encode_records(batch, model)?;
    let max_h = check_horizons(horizons, w)?;
    let proprio = model.cfg.proprio;

    // Streams: vis_l1, vis_l2, prop_l1, prop_l2, total_l1, total_l2 — each
    // max_h wide. The total streams accumulate each term as vis + prop in
    // one addition chain, matching the training loss arithmetic exactly.
    let width = 6 * max_h;
    let sums = chunked_sums(&encoded, width, |enc, acc| {
        let (gt, act) = slice_context(enc, w, model);
        let (v1o, v2o, p1o, p2o, t1o, t2o) = (0, max_h, 2 * max_h, 3 * max_h, 4 * max_h, 5 * max_h);
        walk_chains(&gt, &act, w, max_h, model, |k, target, pred| {
            let i = k - 1;
            let v2 = mse_mean(&pred.z_vis, &gt[target].z_vis);
            let v1 = l1_mean(&pred.z_vis, &gt[target].z_vis);
            let mut t2 = v2;
            let mut t1 = v1;
            if let Some(zp) = &pred.z_prop {
                let tp = gt[target].z_prop.as_ref().expect("gt prop");
                let p2 = mse_mean(zp, tp);
                let p1 = l1_mean(zp, tp);
                acc[p1o + i] += p1;
                acc[p2o + i] += p2;
                t2 += p2;
                t1 += p1;
            }
            acc[v1o + i] += v1;
            acc[v2o + i] += v2;
            acc[t1o + i] += t1;
            acc[t2o + i] += t2;
        })
    })?;

    let counts_all: Vec<usize> = (1..=max_h).map(|k| batch.len() * (w + 1 - k)).collect();
    let select = |base: usize| -> Vec<f64> {
        horizons
            .iter()
            .map(|&h| sums[base + h - 1] / counts_all[h - 1] as f64)
            .collect()
    };
    Ok(UnrollErrorReport {
        horizons: horizons.to_vec(),
        vis_l1: select(0),
        vis_l2: select(max_h),
        prop_l1: proprio.then(|| select(2 * max_h)),
        prop_l2: proprio.then(|| select(3 * max_h)),
        total_l1: select(4 * max_h),
        total_l2: select(5 * max_h),
        counts: horizons.iter().map(|&h| counts_all[h - 1]).collect(),
    })
}

// ---------------------------------------------------------------------------
// State probe
// ---------------------------------------------------------------------------

/// Linear read-out from the visual embedding to the raw (pos, vel) state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateProbe {
    /// Row-major 4 x (d_vis + 1); the last column is the bias.
    pub weights: Vec<f64>,
    pub d_vis: usize,
    /// True when the fit needed the ridge fallback.
    pub ridged: bool,
}

impl StateProbe {
    pub fn decode(&self, z_vis: &[f64]) -> [f64; 4] {
        let p = self.d_vis + 1;
        let mut out = [0.0; 4];
        for (j, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[j * p..(j + 1) * p];
            *slot = row[self.d_vis]
                + z_vis.iter().zip(&row[..self.d_vis]).map(|(z, w)| z * w).sum::<f64>();
        }
        out
    }
}

/// In-place lower Cholesky factorization; fails (returns false) when a pivot
/// drops below the positive-definiteness threshold.
fn cholesky(a: &mut [f64], n: usize, threshold: f64) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= threshold {
            return false;
        }
        let l = d.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    true
}

/// Solves `L L^T x = b` in place given the lower factor.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Column-wise least squares `min ||X b - Y||` via the normal equations;
/// singular systems retry with ridge regularization of strength `lambda`.
/// `x` is n rows of p features, `y` n rows of q targets. Returns p rows of q
/// coefficients and whether the ridge fallback was used.
pub fn ridge_least_squares(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, bool)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(
            "least_squares: X and Y must be nonempty with matching rows".into(),
        ));
    }
    let p = x[0].len();
    let q = y[0].len();
    if x.iter().any(|r| r.len() != p) || y.iter().any(|r| r.len() != q) {
        return Err(Error::InvalidArgument("least_squares: ragged rows".into()));
    }
    let mut xtx = vec![0.0; p * p];
    for row in x {
        for i in 0..p {
            for j in i..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[i * p + j] = xtx[j * p + i];
        }
    }
    let mut xty = vec![vec![0.0; p]; q];
    for (xr, yr) in x.iter().zip(y) {
        for (c, yv) in yr.iter().enumerate() {
            for (i, xv) in xr.iter().enumerate() {
                xty[c][i] += xv * yv;
            }
        }
    }

    let max_diag = (0..p).map(|i| xtx[i * p + i]).fold(0.0f64, f64::max);
    let threshold = 1e-10 * max_diag.max(1.0);
    let mut l = xtx.clone();
    let mut ridged = false;
    if !cholesky(&mut l, p, threshold) {
        ridged = true;
        l.copy_from_slice(&xtx);
        for i in 0..p {
            l[i * p + i] += lambda;
        }
        if !cholesky(&mut l, p, 0.0) {
            return Err(Error::Runtime(
                "least_squares: ridge-regularized normal equations still singular".into(),
            ));
        }
    }
    let mut beta = vec![vec![0.0; q]; p];
    for (c, col) in xty.iter().enumerate() {
        let mut b = col.clone();
        cholesky_solve(&l, p, &mut b);
        for i in 0..p {
            beta[i][c] = b[i];
        }
    }
    Ok((beta, ridged))
}

/// Fits the linear state probe on observations that carry ground-truth
/// (pos, vel) proprio readings; the embedding gets an appended bias feature.
pub fn fit_state_probe(model: &Model, observations: &[Observation]) -> Result<StateProbe> {
    if observations.is_empty() {
        return Err(Error::InvalidArgument("fit_state_probe: no observations".into()));
    }
    let mut x = Vec::with_capacity(observations.len());
    let mut y = Vec::with_capacity(observations.len());
    for obs in observations {
        let state = obs.proprio.ok_or_else(|| {
            Error::InvalidArgument(
                "fit_state_probe: observations must carry proprio ground truth".into(),
            )
        })?;
        let mut feats = encode_vis(obs, &model.enc)?;
        feats.push(1.0);
        x.push(feats);
        y.push(state.to_vec());
    }
    let d_vis = x[0].len() - 1;
    let (beta, ridged) = ridge_least_squares(&x, &y, PROBE_RIDGE_LAMBDA)?;
    let p = d_vis + 1;
    let mut weights = vec![0.0; 4 * p];
    for (i, row) in beta.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            weights[j * p + i] = *v;
        }
    }
    Ok(StateProbe { weights, d_vis, ridged })
}

/// Per-horizon mean Euclidean errors of probe-decoded unrolled latents
/// against the true future states.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeErrorReport {
    pub horizons: Vec<usize>,
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
}

/// Decodes unrolled predictions with the probe and reports position and
/// velocity error per horizon. The batch records must carry proprio ground
/// truth (the model itself may be proprio-free).
pub fn probe_error(
    probe: &StateProbe,
    model: &Model,
    batch: &[SliceRecord],
    horizons: &[usize],
) -> Result<ProbeErrorReport> {
    let (encoded, w) = encode_records(batch, model)?;
    let max_h = check_horizons(horizons, w)?;
    for rec in batch {
        if rec.obs_window.iter().any(|o| o.proprio.is_none()) {
            return Err(Error::InvalidArgument(
                "probe_error: records must carry proprio ground truth".into(),
            ));
        }
    }
    let items: Vec<(usize, &EncodedTraj)> = encoded.iter().enumerate().collect();
    let width = 2 * max_h;
    let sums = chunked_sums(&items, width, |(bi, enc), acc| {
        let (gt, act) = slice_context(enc, w, model);
        let rec = &batch[*bi];
        walk_chains(&gt, &act, w, max_h, model, |k, target, pred| {
            let decoded = probe.decode(&pred.z_vis);
            let truth = rec.obs_window[target].proprio.expect("checked above");
            let dp = ((decoded[0] - truth[0]).powi(2) + (decoded[1] - truth[1]).powi(2)).sqrt();
            let dv = ((decoded[2] - truth[2]).powi(2) + (decoded[3] - truth[3]).powi(2)).sqrt();
            acc[k - 1] += dp;
            acc[max_h + k - 1] += dv;
        })
    })?;
    let counts: Vec<usize> = (1..=max_h).map(|k| batch.len() * (w + 1 - k)).collect();
    let select = |base: usize| -> Vec<f64> {
        horizons.iter().map(|&h| sums[base + h - 1] / counts[h - 1] as f64).collect()
    };
    Ok(ProbeErrorReport {
        horizons: horizons.to_vec(),
        pos: select(0),
        vel: select(max_h),
    })
}

// ---------------------------------------------------------------------------
// Action error and score
// ---------------------------------------------------------------------------

/// Mean absolute action error E over all entries, and the rescaled score
/// `800 * (0.1 - E)` when `E < 0.1`, else 0. The score lives in [0, 80].
pub fn action_error_and_score(
    planned: &[[f64; 2]],
    groundtruth: &[[f64; 2]],
) -> Result<(f64, f64)> {
    if planned.is_empty() || planned.len() != groundtruth.len() {
        return Err(Error::InvalidArgument(
            "action_error_and_score: shapes must match and be nonempty".into(),
        ));
    }
    let n = (planned.len() * 2) as f64;
    let e = planned
        .iter()
        .zip(groundtruth)
        .map(|(p, g)| (p[0] - g[0]).abs() + (p[1] - g[1]).abs())
        .sum::<f64>()
        / n;
    let score = if e < 0.1 { 800.0 * (0.1 - e) } else { 0.0 };
    Ok((e, score))
}

// ---------------------------------------------------------------------------
// Spearman correlation
// ---------------------------------------------------------------------------

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for t in i..=j {
            ranks[idx[t]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx.sqrt() * syy.sqrt()))
    }
}

/// Spearman rank correlation with average ranks on ties. Constant series
/// have no defined rank correlation and report `None`.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman: series must have equal length >= 2".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman: non-finite values".into()));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

// ---------------------------------------------------------------------------
// Metric series and reports
// ---------------------------------------------------------------------------

/// All metrics measured on one checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointMetrics {
    pub label: String,
    pub success: f64,
    pub unroll: UnrollErrorReport,
    pub probe: Option<ProbeErrorReport>,
    pub action_error: Option<f64>,
    pub action_score: Option<f64>,
}

/// Aligned per-checkpoint metric values across a training run.
#[derive(Debug, Clone, Default)]
pub struct MetricSeries {
    pub rows: Vec<CheckpointMetrics>,
}

/// Per-metric Spearman coefficient against the success column; `None`
/// records an undefined (constant-series) correlation.
#[derive(Debug, Clone)]
pub struct SpearmanReport {
    pub metrics: Vec<(String, Option<f64>)>,
}

impl MetricSeries {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.rows.first() else {
            return Ok(());
        };
        for row in &self.rows[1..] {
            if row.unroll.horizons != first.unroll.horizons
                || row.unroll.prop_l1.is_some() != first.unroll.prop_l1.is_some()
                || row.probe.is_some() != first.probe.is_some()
                || row.action_error.is_some() != first.action_error.is_some()
            {
                return Err(Error::InvalidArgument(
                    "metric series: checkpoints report different metric sets".into(),
                ));
            }
        }
        Ok(())
    }

    /// Named metric columns shared by every checkpoint (success excluded).
    fn metric_columns(&self) -> Vec<(String, Vec<f64>)> {
        let Some(first) = self.rows.first() else {
            return Vec::new();
        };
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        let mut push = |name: String, get: &dyn Fn(&CheckpointMetrics) -> f64| {
            cols.push((name, self.rows.iter().map(get).collect()));
        };
        for (i, &h) in first.unroll.horizons.iter().enumerate() {
            push(format!("vis_l1_h{h}"), &move |r| r.unroll.vis_l1[i]);
            push(format!("vis_l2_h{h}"), &move |r| r.unroll.vis_l2[i]);
            if first.unroll.prop_l1.is_some() {
                push(format!("prop_l1_h{h}"), &move |r| {
                    r.unroll.prop_l1.as_ref().expect("aligned")[i]
                });
                push(format!("prop_l2_h{h}"), &move |r| {
                    r.unroll.prop_l2.as_ref().expect("aligned")[i]
                });
            }
            push(format!("total_l1_h{h}"), &move |r| r.unroll.total_l1[i]);
            push(format!("total_l2_h{h}"), &move |r| r.unroll.total_l2[i]);
        }
        if let Some(probe) = &first.probe {
            for (i, &h) in probe.horizons.iter().enumerate() {
                push(format!("probe_pos_h{h}"), &move |r| {
                    r.probe.as_ref().expect("aligned").pos[i]
                });
                push(format!("probe_vel_h{h}"), &move |r| {
                    r.probe.as_ref().expect("aligned").vel[i]
                });
            }
        }
        if first.action_error.is_some() {
            push("action_error".into(), &|r| r.action_error.expect("aligned"));
            push("action_score".into(), &|r| r.action_score.expect("aligned"));
        }
        cols
    }

    /// One row per checkpoint with fixed columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let cols = self.metric_columns();
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("metrics csv: {e}")))?;
        let mut header = vec!["checkpoint".to_string(), "success".to_string()];
        header.extend(cols.iter().map(|(n, _)| n.clone()));
        w.write_record(&header).map_err(|e| Error::Runtime(format!("metrics csv: {e}")))?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![row.label.clone(), format!("{:.9e}", row.success)];
            rec.extend(cols.iter().map(|(_, v)| format!("{:.9e}", v[i])));
            w.write_record(&rec).map_err(|e| Error::Runtime(format!("metrics csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rank correlation of every metric column against success.
    pub fn spearman_vs_success(&self) -> Result<SpearmanReport> {
        self.validate()?;
        if self.rows.len() < 2 {
            return Err(Error::InvalidArgument(
                "spearman report: need at least 2 checkpoints".into(),
            ));
        }
        let success: Vec<f64> = self.rows.iter().map(|r| r.success).collect();
        let metrics = self
            .metric_columns()
            .into_iter()
            .map(|(name, vals)| spearman(&vals, &success).map(|c| (name, c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SpearmanReport { metrics })
    }
}

impl SpearmanReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Runtime(format!("spearman csv: {e}")))?;
        w.write_record(["metric", "spearman_vs_success"])
            .map_err(|e| Error::Runtime(format!("spearman csv: {e}")))?;
        for (name, coef) in &self.metrics {
            let val = coef.map_or("".to_string(), |c| format!("{c:.6}"));
            w.write_record([name.as_str(), val.as_str()])
                .map_err(|e| Error::Runtime(format!("spearman csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Convenience filler: evaluates success, unroll error, and (when the batch
/// carries proprio ground truth) the probe error for one checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint(
    label: &str,
    model: &Model,
    proto: &EpisodeProtocol,
    episodes: usize,
    seed_base: u64,
    val_batch: &[SliceRecord],
    probe: Option<&StateProbe>,
    horizons: &[usize],
) -> Result<CheckpointMetrics> {
    let success = success_rate(model, proto, episodes, seed_base)?;
    let unroll = unroll_error(model, val_batch, horizons)?;
    let probe = match probe {
        Some(p) => Some(probe_error(p, model, val_batch, horizons)?),
        None => None,
    };
    Ok(CheckpointMetrics {
        label: label.to_string(),
        success,
        unroll,
        probe,
        action_error: None,
        action_score: None,
    })
}
