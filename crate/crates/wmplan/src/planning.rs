//! Latent unrolling, the goal-distance planning cost, four trajectory
//! optimizers (cross-entropy method, diagonal CMA-ES, gradient descent,
//! Adam), and the model-predictive-control episode harness.
//!
//! Planning works entirely in normalized action space: optimizers propose
//! H×2 action sequences, the cost unrolls the predictor over them with a
//! sliding context window of at most `Wp` latents, and the episode harness
//! denormalizes the winning plan before stepping the environment.
//!
//! ## Determinism
//!
//! Candidate sampling uses one RNG stream per (iteration, candidate index),
//! and candidate costs are collected in candidate order, so results are
//! independent of the rayon worker count. Elite selection breaks cost ties
//! by candidate index.

use crate::env::{is_success, render, sample_episode, step, EnvConfig, EnvState, Observation};
use crate::model::{
    backward, encode_action, encode_action_input_grad, encode_state, predict_next, ContextWindow,
    LatentState, Model, Tape,
};
use crate::rng::{derive_seed, standard_normal, stream_rng2};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Action dimensionality (planar force).
pub const ACTION_DIM: usize = 2;

/// Salt for cross-entropy-method candidate sampling streams.
const SALT_CEM: u64 = 0xCE;
/// Salt for CMA-ES candidate sampling streams.
const SALT_CMA: u64 = 0xC3A;
/// Salt for the gradient planners' Gaussian initialization.
const SALT_GD_INIT: u64 = 0x6D1;
/// Salt for the gradient planners' per-iteration exploration noise.
const SALT_GD_NOISE: u64 = 0x6D0;

// ---------------------------------------------------------------------------
// Cost definition
// ---------------------------------------------------------------------------

/// Embedding-space dissimilarity for the planning objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Mean absolute difference over embedding dimensions.
    L1,
    /// Mean squared difference over embedding dimensions.
    L2,
}

impl Distance {
    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        match self {
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
            Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
        }
    }

    /// Gradient of `value(a, b)` with respect to `a`, scaled by `scale`.
    /// The L1 subgradient at zero is zero.
    pub fn grad(&self, a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
        let n = a.len() as f64;
        match self {
            Distance::L1 => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x - y;
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    scale * s / n
                })
                .collect(),
            Distance::L2 => a.iter().zip(b).map(|(x, y)| scale * 2.0 * (x - y) / n).collect(),
        }
    }
}

/// One goal-reaching planning task.
#[derive(Debug, Clone)]
pub struct PlanProblem {
    pub init_obs: Observation,
    pub goal_obs: Observation,
    /// Planning horizon H in model actions.
    pub h: usize,
    /// Proprio cost weight; forced to 0 for models without proprioception.
    pub alpha: f64,
    /// Maximum planning context length.
    pub wp: usize,
    pub distance: Distance,
}

impl PlanProblem {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.h == 0 {
            return Err(Error::InvalidArgument("plan: H must be >= 1".into()));
        }
        if self.wp == 0 {
            return Err(Error::InvalidArgument("plan: Wp must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("plan: alpha must be finite and >= 0".into()));
        }
        check_wp(self.wp, model)
    }
}

/// The planning context may not exceed the context length the model was
/// trained with; longer contexts degrade predictions badly.
fn check_wp(wp: usize, model: &Model) -> Result<()> {
    if wp > model.trained_w {
        return Err(Error::InvalidArgument(format!(
            "plan: Wp {} exceeds the model's trained context length {}; unrolling with a longer \
             window than the model ever saw degrades rapidly",
            wp, model.trained_w
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Unrolling
// ---------------------------------------------------------------------------

fn unroll_core(
    init: &LatentState,
    actions: &[[f64; 2]],
    model: &Model,
    wp: usize,
    keep_tapes: bool,
) -> Result<(Vec<LatentState>, Vec<Tape>)> {
    if wp == 0 {
        return Err(Error::InvalidArgument("unroll: Wp must be >= 1".into()));
    }
    if wp > model.cfg.capacity {
        return Err(Error::InvalidArgument(format!(
            "unroll: Wp {} exceeds model capacity {}",
            wp, model.cfg.capacity
        )));
    }
    let mut latents: Vec<LatentState> = Vec::with_capacity(actions.len() + 1);
    latents.push(init.clone());
    let mut tapes = Vec::new();
    let mut ctx = ContextWindow::new();
    for (i, a) in actions.iter().enumerate() {
        let embed = encode_action(a, model);
        ctx.push(latents[i].clone(), embed, wp);
        let (pred, tape) = predict_next(&ctx, model)?;
        latents.push(pred);
        if keep_tapes {
            tapes.push(tape);
        }
    }
    Ok((latents, tapes))
}

/// Unrolls the predictor for `actions.len()` steps from an observation,
/// keeping a sliding window of at most `wp` latents (the encoded start plus
/// the model's own predictions). Returns all latents; index 0 is the encoded
/// observation, index k the k-step prediction. Actions are normalized.
pub fn unroll(
    init_obs: &Observation,
    actions: &[[f64; 2]],
    model: &Model,
    wp: usize,
) -> Result<Vec<LatentState>> {
    check_wp(wp, model)?;
    let init = encode_state(init_obs, model)?;
    Ok(unroll_core(&init, actions, model, wp, false)?.0)
}

/// [`unroll`] without the trained-context guard, for diagnostics that
/// measure exactly how predictions degrade when `wp` exceeds the trained
/// context length. Never use this in planning paths.
pub fn unroll_with_wp_override(
    init_obs: &Observation,
    actions: &[[f64; 2]],
    model: &Model,
    wp: usize,
) -> Result<Vec<LatentState>> {
    let init = encode_state(init_obs, model)?;
    Ok(unroll_core(&init, actions, model, wp, false)?.0)
}

// ---------------------------------------------------------------------------
// Cost evaluation
// ---------------------------------------------------------------------------

/// A cost function over normalized H×2 action sequences.
pub trait CostFn: Sync {
    fn cost(&self, actions: &[[f64; 2]]) -> f64;
}

impl<F: Fn(&[[f64; 2]]) -> f64 + Sync> CostFn for F {
    fn cost(&self, actions: &[[f64; 2]]) -> f64 {
        self(actions)
    }
}

/// A differentiable cost: value plus gradient with respect to every action
/// entry. `finite` is false when the value or any gradient entry is
/// non-finite (the gradient is then zeroed).
pub trait GradCostFn: CostFn {
    fn cost_grad(&self, actions: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>, bool);
}

/// The model-based planning objective: unrolls the predictor over the
/// candidate actions and measures embedding distance to the goal at the
/// final step. Encodes the start and goal observations once at construction.
pub struct CostEval<'a> {
    model: &'a Model,
    init: LatentState,
    goal: LatentState,
    h: usize,
    wp: usize,
    /// Effective proprio weight (0 when the model has no proprio head).
    alpha: f64,
    distance: Distance,
}

impl<'a> CostEval<'a> {
    pub fn new(problem: &PlanProblem, model: &'a Model) -> Result<CostEval<'a>> {
        problem.validate(model)?;
        let init = encode_state(&problem.init_obs, model)?;
        let goal = encode_state(&problem.goal_obs, model)?;
        let alpha = if model.cfg.proprio { problem.alpha } else { 0.0 };
        Ok(CostEval {
            model,
            init,
            goal,
            h: problem.h,
            wp: problem.wp,
            alpha,
            distance: problem.distance,
        })
    }

    fn final_cost(&self, latent: &LatentState) -> f64 {
        let mut c = self.distance.value(&latent.z_vis, &self.goal.z_vis);
        if self.alpha > 0.0 {
            let (zp, gp) = (
                latent.z_prop.as_ref().expect("proprio latent"),
                self.goal.z_prop.as_ref().expect("proprio goal"),
            );
            c += self.alpha * self.distance.value(zp, gp);
        }
        c
    }
}

impl CostFn for CostEval<'_> {
    /// Non-finite outcomes become `+inf`, so bad candidates are discarded by
    /// selection instead of crashing the planner.
    fn cost(&self, actions: &[[f64; 2]]) -> f64 {
        debug_assert_eq!(actions.len(), self.h);
        match unroll_core(&self.init, actions, self.model, self.wp, false) {
            Ok((latents, _)) => {
                let c = self.final_cost(latents.last().expect("unroll latents"));
                if c.is_finite() {
                    c
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }
}

impl GradCostFn for CostEval<'_> {
    /// Full backpropagation through the unroll: unlike training-time
    /// truncation, gradients here flow through every fed-back prediction via
    /// adjoint accumulation on the intermediate latents.
    fn cost_grad(&self, actions: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>, bool) {
        let h = actions.len();
        let zeros = vec![[0.0; 2]; h];
        let (latents, tapes) = match unroll_core(&self.init, actions, self.model, self.wp, true) {
            Ok(v) => v,
            Err(_) => return (f64::INFINITY, zeros, false),
        };
        let cost = self.final_cost(&latents[h]);
        if !cost.is_finite() {
            return (f64::INFINITY, zeros, false);
        }

        let d = self.model.cfg.d_vis;
        let p = self.model.cfg.p_prop;
        let proprio = self.model.cfg.proprio;
        let mut adj_vis: Vec<Vec<f64>> = (0..=h).map(|_| vec![0.0; d]).collect();
        let mut adj_prop: Vec<Option<Vec<f64>>> =
            (0..=h).map(|_| proprio.then(|| vec![0.0; p])).collect();
        adj_vis[h] = self.distance.grad(&latents[h].z_vis, &self.goal.z_vis, 1.0);
        if self.alpha > 0.0 {
            adj_prop[h] = Some(self.distance.grad(
                latents[h].z_prop.as_ref().expect("proprio latent"),
                self.goal.z_prop.as_ref().expect("proprio goal"),
                self.alpha,
            ));
        }

        let mut a_grads = vec![[0.0; 2]; h];
        let mut scratch = vec![0.0; self.model.params.layout.total];
        for i in (0..h).rev() {
            let cg = match backward(
                &adj_vis[i + 1],
                adj_prop[i + 1].as_deref(),
                &tapes[i],
                self.model,
                &mut scratch,
            ) {
                Ok(cg) => cg,
                Err(_) => return (cost, zeros, false),
            };
            // Step i's window held latents lo..=i (and their actions).
            let lo = (i + 1).saturating_sub(self.wp);
            for (s, (dv, dp)) in cg.d_latents.iter().enumerate() {
                let li = lo + s;
                for (acc, g) in adj_vis[li].iter_mut().zip(dv) {
                    *acc += g;
                }
                if let (Some(acc), Some(g)) = (adj_prop[li].as_mut(), dp.as_ref()) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                let da = encode_action_input_grad(&cg.d_action_embeds[s], self.model);
                a_grads[li][0] += da[0];
                a_grads[li][1] += da[1];
            }
        }
        let finite = a_grads.iter().all(|g| g[0].is_finite() && g[1].is_finite());
        if !finite {
            return (cost, zeros, false);
        }
        (cost, a_grads, true)
    }
}

/// Convenience one-shot objective evaluation for a raw action sequence.
pub fn plan_cost(problem: &PlanProblem, actions: &[[f64; 2]], model: &Model) -> Result<f64> {
    if actions.len() != problem.h {
        return Err(Error::InvalidArgument(format!(
            "plan_cost: expected {} actions, got {}",
            problem.h,
            actions.len()
        )));
    }
    Ok(CostEval::new(problem, model)?.cost(actions))
}

// ---------------------------------------------------------------------------
// Planner configuration and results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Cem,
    CmaDiag,
    Gd,
    Adam,
}

/// Optimizer section of the run configuration. `n`, `j`, `k` follow the
/// conventional symbols: candidates per iteration, iterations, elites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    /// Candidates evaluated per iteration (sampling planners).
    pub n: usize,
    /// Optimizer iterations.
    pub j: usize,
    /// Elite count (cross-entropy method only).
    pub k: usize,
    /// Initial proposal mean per action entry.
    pub mu0: f64,
    /// Initial proposal standard deviation per action entry.
    pub sigma0: f64,
    /// Learning rate for the gradient planners.
    pub lr: f64,
    /// Post-step exploration noise std for the gradient planners.
    pub sigma_noise: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional per-timestep action norm bound applied to candidates.
    pub action_clip: Option<f64>,
    /// Gradient planners: start from N(0, sigma0^2) instead of zeros.
    pub gaussian_init: bool,
    /// Nonstandard elitist CMA-ES (keeps the best-seen candidate in the
    /// population); off by default, costs measurable success when on.
    pub elitist: bool,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig::wall_cem()
    }
}

impl PlannerConfig {
    /// The two-room navigation preset: N=300 candidates, J=30 iterations,
    /// K=10 elites, unit proposal.
    pub fn wall_cem() -> Self {
        PlannerConfig {
            kind: PlannerKind::Cem,
            n: 300,
            j: 30,
            k: 10,
            mu0: 0.0,
            sigma0: 1.0,
            lr: 1.0,
            sigma_noise: 0.003,
            beta1: 0.9,
            beta2: 0.995,
            eps: 1e-8,
            action_clip: None,
            gaussian_init: false,
            elitist: false,
            seed: 0,
        }
    }

    /// Gradient-planner defaults: one trajectory refined for 500 iterations
    /// with unit learning rate and 0.003 exploration noise.
    pub fn gradient_defaults(kind: PlannerKind) -> Self {
        PlannerConfig {
            kind,
            n: 1,
            j: 500,
            ..PlannerConfig::wall_cem()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.j == 0 || self.k == 0 {
            return Err(Error::Config("planner: n, j, k must all be >= 1".into()));
        }
        if self.k > self.n {
            return Err(Error::Config(format!(
                "planner: elite count k ({}) cannot exceed candidates n ({})",
                self.k, self.n
            )));
        }
        if self.kind == PlannerKind::CmaDiag && self.n < 2 {
            return Err(Error::Config("planner: cma_diag needs n >= 2".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config("planner: sigma0 must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("planner: lr must be positive".into()));
        }
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return Err(Error::Config("planner: sigma_noise must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("planner: {name} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("planner: eps must be positive".into()));
        }
        if let Some(c) = self.action_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("planner: action_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One row of the optimizer's convergence trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Lowest candidate cost seen so far (cumulative minimum).
    pub best_cost: f64,
    /// Mean cost of this iteration's elite/selected set.
    pub elite_mean: f64,
    /// Sample standard deviation of the elite costs (0 for single elites).
    pub elite_std: f64,
}

/// Outcome of one planning call.
#[derive(Debug, Clone, Serialize)]
pub struct PlanResult {
    /// The plan, in normalized action space.
    pub best_actions: Vec<[f64; 2]>,
    /// Cost of `best_actions`, re-evaluated once after optimization (not
    /// part of the in-loop evaluation budget).
    pub best_cost: f64,
    pub cost_trace: Vec<TraceRow>,
    /// In-loop cost evaluations: exactly n*j for the sampling planners, j
    /// for the gradient planners.
    pub evaluations: usize,
    /// True when at least one iteration produced no finite candidate cost
    /// (the proposal was left unchanged for those iterations).
    pub degenerate: bool,
    /// Gradient-planner iterations whose gradient was zeroed for being
    /// non-finite.
    pub nonfinite_grad_steps: usize,
}

/// Writes the convergence trace as CSV (`iteration,best_cost,elite_mean,elite_std`).
pub fn write_cost_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("trace csv: {e}")))?;
    w.write_record(["iteration", "best_cost", "elite_mean", "elite_std"])
        .map_err(|e| Error::Runtime(format!("trace csv: {e}")))?;
    for r in rows {
        w.write_record(&[
            r.iteration.to_string(),
            format!("{:.9e}", r.best_cost),
            format!("{:.9e}", r.elite_mean),
            format!("{:.9e}", r.elite_std),
        ])
        .map_err(|e| Error::Runtime(format!("trace csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared planner helpers
// ---------------------------------------------------------------------------

fn flat(actions: &[[f64; 2]]) -> Vec<f64> {
    actions.iter().flat_map(|a| a.iter().copied()).collect()
}

fn shaped(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(ACTION_DIM).map(|c| [c[0], c[1]]).collect()
}

/// Scales each timestep's action down to the norm bound, if configured.
fn clip_steps(actions: &mut [[f64; 2]], clip: Option<f64>) {
    if let Some(c) = clip {
        for a in actions.iter_mut() {
            let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
            if n > c {
                let s = c / n;
                a[0] *= s;
                a[1] *= s;
            }
        }
    }
}

/// Ranks candidate indices by (cost, index); `total_cmp` gives infinities a
/// consistent place and the index tie-break makes selection reproducible.
fn rank_by_cost(costs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    order
}

fn cost_stats(costs: &[f64], selected: &[usize]) -> (f64, f64) {
    let k = selected.len();
    let mean = selected.iter().map(|&i| costs[i]).sum::<f64>() / k as f64;
    let std = if k >= 2 {
        (selected.iter().map(|&i| (costs[i] - mean) * (costs[i] - mean)).sum::<f64>()
            / (k - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Samples one iteration's population from the per-(timestep, dim) Gaussian.
/// Candidate `i` of iteration `iter` draws from its own stream, in
/// (timestep, dim) order, so the population is independent of evaluation
/// order and worker count.
pub(crate) fn sample_population(
    mu: &[f64],
    sigma: &[f64],
    h: usize,
    n: usize,
    seed: u64,
    iter: usize,
    clip: Option<f64>,
) -> Vec<Vec<[f64; 2]>> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng2(derive_seed(seed, iter as u64), i as u64, SALT_CEM);
            let mut cand: Vec<[f64; 2]> = (0..h)
                .map(|t| {
                    let mut a = [0.0; 2];
                    for (d, slot) in a.iter_mut().enumerate() {
                        let idx = t * ACTION_DIM + d;
                        *slot = mu[idx] + sigma[idx] * standard_normal(&mut rng);
                    }
                    a
                })
                .collect();
            clip_steps(&mut cand, clip);
            cand
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cross-entropy method
// ---------------------------------------------------------------------------

/// Floor on the proposal standard deviation, preventing premature collapse
/// with small elite counts.
pub const CEM_SIGMA_FLOOR: f64 = 1e-3;

/// Core cross-entropy loop over an arbitrary cost; [`cem_plan`] instantiates
/// it with the model objective.
///
/// Each iteration samples `n` candidates from a per-(timestep, dim) Gaussian
/// (initially mean `mu0`, std `sigma0`), evaluates costs in parallel, keeps
/// the `k` lowest-cost candidates, and refits the Gaussian to their
/// per-entry mean and sample standard deviation. The returned plan is the
/// final mean.
pub fn cem_core<C: CostFn>(h: usize, cfg: &PlannerConfig, cost: &C) -> Result<PlanResult> {
    cfg.validate()?;
    let dims = h * ACTION_DIM;
    let mut mu = vec![cfg.mu0; dims];
    let mut sigma = vec![cfg.sigma0; dims];
    let mut trace = Vec::with_capacity(cfg.j);
    let mut best_so_far = f64::INFINITY;
    let mut evaluations = 0usize;
    let mut degenerate = false;

    for j in 0..cfg.j {
        let pop = sample_population(&mu, &sigma, h, cfg.n, cfg.seed, j, cfg.action_clip);
        let costs: Vec<f64> = pop.par_iter().map(|c| cost.cost(c)).collect();
        evaluations += cfg.n;
        let order = rank_by_cost(&costs);
        if !costs[order[0]].is_finite() {
            degenerate = true;
            trace.push(TraceRow {
                iteration: j + 1,
                best_cost: best_so_far,
                elite_mean: f64::INFINITY,
                elite_std: 0.0,
            });
            continue;
        }
        best_so_far = best_so_far.min(costs[order[0]]);
        let elites = &order[..cfg.k];
        for d in 0..dims {
            let mean = elites.iter().map(|&i| pop[i][d / ACTION_DIM][d % ACTION_DIM]).sum::<f64>()
                / cfg.k as f64;
            mu[d] = mean;
            if cfg.k >= 2 {
                let var = elites
                    .iter()
                    .map(|&i| {
                        let v = pop[i][d / ACTION_DIM][d % ACTION_DIM] - mean;
                        v * v
                    })
                    .sum::<f64>()
                    / (cfg.k - 1) as f64;
                sigma[d] = var.sqrt().max(CEM_SIGMA_FLOOR);
            }
        }
        let (elite_mean, elite_std) = cost_stats(&costs, elites);
        trace.push(TraceRow {
            iteration: j + 1,
            best_cost: best_so_far,
            elite_mean,
            elite_std,
        });
    }

    let best_actions = shaped(&mu);
    let best_cost = cost.cost(&best_actions);
    Ok(PlanResult {
        best_actions,
        best_cost,
        cost_trace: trace,
        evaluations,
        degenerate,
        nonfinite_grad_steps: 0,
    })
}

pub fn cem_plan(problem: &PlanProblem, model: &Model, cfg: &PlannerConfig) -> Result<PlanResult> {
    if cfg.kind != PlannerKind::Cem {
        return Err(Error::InvalidArgument("cem_plan: cfg.kind must be cem".into()));
    }
    let eval = CostEval::new(problem, model)?;
    cem_core(problem.h, cfg, &eval)
}

// ---------------------------------------------------------------------------
// Diagonal (separable) CMA-ES
// ---------------------------------------------------------------------------

struct CmaConstants {
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
}

/// Standard strategy constants, with the covariance learning rates scaled by
/// (n+2)/3 as usual for the separable variant (the diagonal model has only n
/// parameters, so it can learn faster).
fn cma_constants(nd: usize, lambda: usize) -> CmaConstants {
    let n = nd as f64;
    let mu_sel = lambda / 2;
    let mut weights: Vec<f64> = (0..mu_sel)
        .map(|i| ((mu_sel as f64) + 0.5).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
    let sep = (n + 2.0) / 3.0;
    let c1 = (sep * 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff)).min(1.0);
    let c_mu = (sep * 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff))
        .min(1.0 - c1);
    let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
    CmaConstants {
        weights,
        mu_eff,
        c_sigma,
        d_sigma,
        c_c,
        c1,
        c_mu,
        chi_n,
    }
}

/// Core separable CMA-ES loop: rank-weighted recombination, cumulative
/// step-size adaptation, and a diagonal covariance with its own evolution
/// path. Budget-matched to the cross-entropy method (n candidates per
/// generation, j generations) and returns the best candidate ever evaluated.
pub fn cma_diag_core<C: CostFn>(h: usize, cfg: &PlannerConfig, cost: &C) -> Result<PlanResult> {
    cfg.validate()?;
    if cfg.n < 2 {
        return Err(Error::Config("cma_diag: n must be >= 2".into()));
    }
    let nd = h * ACTION_DIM;
    let kc = cma_constants(nd, cfg.n);
    let mu_sel = cfg.n / 2;

    let mut m = vec![cfg.mu0; nd];
    let mut sigma = cfg.sigma0;
    let mut diag = vec![1.0f64; nd];
    let mut p_sigma = vec![0.0f64; nd];
    let mut p_c = vec![0.0f64; nd];

    let mut best: Option<(f64, Vec<[f64; 2]>)> = None;
    let mut trace = Vec::with_capacity(cfg.j);
    let mut evaluations = 0usize;
    let mut degenerate = false;

    for g in 0..cfg.j {
        let d_sqrt: Vec<f64> = diag.iter().map(|c| c.sqrt()).collect();
        let mut zs: Vec<Vec<f64>> = (0..cfg.n)
            .map(|i| {
                let mut rng = stream_rng2(derive_seed(cfg.seed, g as u64), i as u64, SALT_CMA);
                (0..nd).map(|_| standard_normal(&mut rng)).collect()
            })
            .collect();
        let mut xs: Vec<Vec<[f64; 2]>> = zs
            .iter()
            .map(|z| {
                let mut cand = shaped(
                    &z.iter()
                        .enumerate()
                        .map(|(d, zd)| m[d] + sigma * d_sqrt[d] * zd)
                        .collect::<Vec<f64>>(),
                );
                clip_steps(&mut cand, cfg.action_clip);
                cand
            })
            .collect();
        if cfg.elitist {
            if let Some((_, bx)) = &best {
                // Keep the incumbent in the population; rewrite its z so the
                // distribution update stays consistent.
                let last = cfg.n - 1;
                xs[last] = bx.clone();
                let fx = flat(bx);
                for d in 0..nd {
                    zs[last][d] = (fx[d] - m[d]) / (sigma * d_sqrt[d]);
                }
            }
        }

        let costs: Vec<f64> = xs.par_iter().map(|x| cost.cost(x)).collect();
        evaluations += cfg.n;
        let order = rank_by_cost(&costs);
        if costs[order[0]].is_finite()
            && best.as_ref().map_or(true, |(bc, _)| costs[order[0]] < *bc)
        {
            best = Some((costs[order[0]], xs[order[0]].clone()));
        }
        if !costs[order[0]].is_finite() {
            degenerate = true;
            trace.push(TraceRow {
                iteration: g + 1,
                best_cost: best.as_ref().map_or(f64::INFINITY, |(c, _)| *c),
                elite_mean: f64::INFINITY,
                elite_std: 0.0,
            });
            continue;
        }

        let sel = &order[..mu_sel];
        let mut z_w = vec![0.0f64; nd];
        for (w, &i) in kc.weights.iter().zip(sel) {
            for d in 0..nd {
                z_w[d] += w * zs[i][d];
            }
        }
        let y_w: Vec<f64> = z_w.iter().zip(&d_sqrt).map(|(z, ds)| z * ds).collect();
        for d in 0..nd {
            m[d] += sigma * y_w[d];
        }
        let csig = kc.c_sigma;
        let coef = (csig * (2.0 - csig) * kc.mu_eff).sqrt();
        for d in 0..nd {
            p_sigma[d] = (1.0 - csig) * p_sigma[d] + coef * z_w[d];
        }
        let ps_norm = p_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = (1.0 - (1.0 - csig).powi(2 * (g as i32 + 1))).sqrt();
        let h_sigma = if ps_norm / denom < (1.4 + 2.0 / (nd as f64 + 1.0)) * kc.chi_n {
            1.0
        } else {
            0.0
        };
        let cc = kc.c_c;
        let coef_c = h_sigma * (cc * (2.0 - cc) * kc.mu_eff).sqrt();
        for d in 0..nd {
            p_c[d] = (1.0 - cc) * p_c[d] + coef_c * y_w[d];
        }
        let delta_h = (1.0 - h_sigma) * cc * (2.0 - cc);
        for d in 0..nd {
            let mut rank_mu = 0.0;
            for (w, &i) in kc.weights.iter().zip(sel) {
                let y = d_sqrt[d] * zs[i][d];
                rank_mu += w * y * y;
            }
            diag[d] = (1.0 - kc.c1 - kc.c_mu) * diag[d]
                + kc.c1 * (p_c[d] * p_c[d] + delta_h * diag[d])
                + kc.c_mu * rank_mu;
            diag[d] = diag[d].max(1e-20);
        }
        sigma *= ((csig / kc.d_sigma) * (ps_norm / kc.chi_n - 1.0)).exp();

        let (elite_mean, elite_std) = cost_stats(&costs, sel);
        trace.push(TraceRow {
            iteration: g + 1,
            best_cost: best.as_ref().map_or(f64::INFINITY, |(c, _)| *c),
            elite_mean,
            elite_std,
        });
    }

    let (best_actions, degenerate) = match best {
        Some((_, x)) => (x, degenerate),
        None => (shaped(&m), true),
    };
    let best_cost = cost.cost(&best_actions);
    Ok(PlanResult {
        best_actions,
        best_cost,
        cost_trace: trace,
        evaluations,
        degenerate,
        nonfinite_grad_steps: 0,
    })
}

pub fn cma_diag_plan(problem: &PlanProblem, model: &Model, cfg: &PlannerConfig) -> Result<PlanResult> {
    if cfg.kind != PlannerKind::CmaDiag {
        return Err(Error::InvalidArgument("cma_diag_plan: cfg.kind must be cma_diag".into()));
    }
    let eval = CostEval::new(problem, model)?;
    cma_diag_core(problem.h, cfg, &eval)
}

// ---------------------------------------------------------------------------
// Gradient planners
// ---------------------------------------------------------------------------

/// Core loop shared by the gradient-descent and Adam planners: one action
/// sequence refined for j iterations on the differentiable cost, Gaussian
/// exploration noise after every step, non-finite gradients zeroed and
/// counted. Returns the final iterate.
pub fn gradient_core<C: GradCostFn>(
    h: usize,
    cfg: &PlannerConfig,
    cost: &C,
    adam: bool,
) -> Result<PlanResult> {
    cfg.validate()?;
    let mut actions: Vec<[f64; 2]> = if cfg.gaussian_init {
        let mut rng = stream_rng2(cfg.seed, 0, SALT_GD_INIT);
        (0..h)
            .map(|_| {
                [
                    cfg.sigma0 * standard_normal(&mut rng),
                    cfg.sigma0 * standard_normal(&mut rng),
                ]
            })
            .collect()
    } else {
        vec![[0.0; 2]; h]
    };
    clip_steps(&mut actions, cfg.action_clip);

    let mut m = vec![[0.0f64; 2]; h];
    let mut v = vec![[0.0f64; 2]; h];
    let mut trace = Vec::with_capacity(cfg.j);
    let mut best_so_far = f64::INFINITY;
    let mut nonfinite = 0usize;

    for j in 0..cfg.j {
        let (c, grad, finite) = cost.cost_grad(&actions);
        if !finite {
            nonfinite += 1;
        }
        if c.is_finite() {
            best_so_far = best_so_far.min(c);
        }
        if adam {
            let t = (j + 1) as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..h {
                for d in 0..2 {
                    let g = grad[i][d];
                    m[i][d] = cfg.beta1 * m[i][d] + (1.0 - cfg.beta1) * g;
                    v[i][d] = cfg.beta2 * v[i][d] + (1.0 - cfg.beta2) * g * g;
                    actions[i][d] -= cfg.lr * (m[i][d] / bc1) / ((v[i][d] / bc2).sqrt() + cfg.eps);
                }
            }
        } else {
            for i in 0..h {
                for d in 0..2 {
                    actions[i][d] -= cfg.lr * grad[i][d];
                }
            }
        }
        if cfg.sigma_noise > 0.0 {
            let mut rng = stream_rng2(derive_seed(cfg.seed, j as u64), 0, SALT_GD_NOISE);
            for a in actions.iter_mut() {
                a[0] += cfg.sigma_noise * standard_normal(&mut rng);
                a[1] += cfg.sigma_noise * standard_normal(&mut rng);
            }
        }
        clip_steps(&mut actions, cfg.action_clip);
        trace.push(TraceRow {
            iteration: j + 1,
            best_cost: best_so_far,
            elite_mean: c,
            elite_std: 0.0,
        });
    }

    let best_cost = cost.cost(&actions);
    Ok(PlanResult {
        best_actions: actions,
        best_cost,
        cost_trace: trace,
        evaluations: cfg.j,
        degenerate: nonfinite == cfg.j,
        nonfinite_grad_steps: nonfinite,
    })
}

pub fn gd_plan(problem: &PlanProblem, model: &Model, cfg: &PlannerConfig) -> Result<PlanResult> {
    if cfg.kind != PlannerKind::Gd {
        return Err(Error::InvalidArgument("gd_plan: cfg.kind must be gd".into()));
    }
    let eval = CostEval::new(problem, model)?;
    gradient_core(problem.h, cfg, &eval, false)
}

pub fn adam_plan(problem: &PlanProblem, model: &Model, cfg: &PlannerConfig) -> Result<PlanResult> {
    if cfg.kind != PlannerKind::Adam {
        return Err(Error::InvalidArgument("adam_plan: cfg.kind must be adam".into()));
    }
    let eval = CostEval::new(problem, model)?;
    gradient_core(problem.h, cfg, &eval, true)
}

/// Dispatches on `cfg.kind`.
pub fn plan(problem: &PlanProblem, model: &Model, cfg: &PlannerConfig) -> Result<PlanResult> {
    match cfg.kind {
        PlannerKind::Cem => cem_plan(problem, model, cfg),
        PlannerKind::CmaDiag => cma_diag_plan(problem, model, cfg),
        PlannerKind::Gd => gd_plan(problem, model, cfg),
        PlannerKind::Adam => adam_plan(problem, model, cfg),
    }
}

// ---------------------------------------------------------------------------
// MPC episode harness
// ---------------------------------------------------------------------------

/// The objective-side planning parameters shared by every replanning call of
/// an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanObjective {
    /// Planning horizon H (model actions).
    pub h: usize,
    /// Proprio cost weight.
    pub alpha: f64,
    /// Maximum planning context length.
    pub wp: usize,
    pub distance: Distance,
}

impl Default for PlanObjective {
    fn default() -> Self {
        PlanObjective {
            h: 6,
            alpha: 0.0,
            wp: 2,
            distance: Distance::L2,
        }
    }
}

/// Episode-level control parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Model actions executed per plan (m <= H).
    pub m: usize,
    /// Environment steps per model action (frameskip f).
    pub frameskip: usize,
    /// Episode length M in environment steps.
    pub max_steps: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        // Two-room navigation preset: one plan per episode (M = f * m).
        MpcConfig {
            m: 6,
            frameskip: 5,
            max_steps: 30,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, h: usize) -> Result<()> {
        if self.m == 0 || self.frameskip == 0 {
            return Err(Error::Config("mpc: m and frameskip must be >= 1".into()));
        }
        if self.m > h {
            return Err(Error::Config(format!(
                "mpc: m ({}) cannot exceed the planning horizon H ({})",
                self.m, h
            )));
        }
        Ok(())
    }
}

/// Outcome of one planning episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Environment steps executed (<= max_steps).
    pub steps_taken: usize,
    /// Euclidean distance from the final position to the goal.
    pub final_distance: f64,
    pub planning_calls: usize,
    pub seed: u64,
}

/// One environment step of an episode trace.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeStep {
    pub step: usize,
    pub pos: [f64; 2],
    /// Denormalized action force applied at this step.
    pub action: [f64; 2],
    /// Best imagined cost of the plan being executed.
    pub cost: f64,
}

/// Writes an episode trace as JSON lines.
pub fn write_episode_jsonl(steps: &[EpisodeStep], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in steps {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Runtime(format!("jsonl: {e}")))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs one episode sampled from `seed`: repeatedly plan from the current
/// observation, execute the first `m` actions (each held for `frameskip`
/// environment steps), and stop on success or after `max_steps` steps.
pub fn mpc_episode(
    model: &Model,
    env: &EnvConfig,
    objective: &PlanObjective,
    planner: &PlannerConfig,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<(EpisodeResult, Vec<EpisodeStep>)> {
    let (init, goal_obs) = sample_episode(seed, env);
    mpc_episode_from(model, env, init, goal_obs, objective, planner, mpc, seed)
}

/// [`mpc_episode`] from an explicit initial state and goal frame. Success is
/// checked before any planning (a start inside the goal radius succeeds with
/// zero planning calls) and again after every environment step.
#[allow(clippy::too_many_arguments)]
pub fn mpc_episode_from(
    model: &Model,
    env: &EnvConfig,
    mut state: EnvState,
    goal_obs: Observation,
    objective: &PlanObjective,
    planner: &PlannerConfig,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<(EpisodeResult, Vec<EpisodeStep>)> {
    mpc.validate(objective.h)?;
    let mut steps = 0usize;
    let mut calls = 0usize;
    let mut trace = Vec::new();
    let mut success = is_success(&state, env);

    'episode: while !success && steps < mpc.max_steps {
        let problem = PlanProblem {
            init_obs: render(&state, env),
            goal_obs: goal_obs.clone(),
            h: objective.h,
            alpha: objective.alpha,
            wp: objective.wp,
            distance: objective.distance,
        };
        let mut cfg = planner.clone();
        cfg.seed = derive_seed(derive_seed(planner.seed, seed), calls as u64);
        calls += 1;
        let result = plan(&problem, model, &cfg)?;

        for a_norm in result.best_actions.iter().take(mpc.m) {
            let act = model.norm.denormalize_action(a_norm);
            for _ in 0..mpc.frameskip {
                state = step(&state, &act, env);
                steps += 1;
                trace.push(EpisodeStep {
                    step: steps,
                    pos: state.pos,
                    action: act.force,
                    cost: result.best_cost,
                });
                if is_success(&state, env) {
                    success = true;
                    break 'episode;
                }
                if steps >= mpc.max_steps {
                    break 'episode;
                }
            }
        }
    }

    let dx = state.pos[0] - state.goal_pos[0];
    let dy = state.pos[1] - state.goal_pos[1];
    Ok((
        EpisodeResult {
            success,
            steps_taken: steps,
            final_distance: (dx * dx + dy * dy).sqrt(),
            planning_calls: calls,
            seed,
        },
        trace,
    ))
}
