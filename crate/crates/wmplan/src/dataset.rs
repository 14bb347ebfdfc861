//! Offline trajectory datasets: generation, normalization statistics,
//! (W+1)-slicing, train/val splitting, and a binary on-disk format.
//!
//! A trajectory stores model-level transitions: one record step is one 2-D
//! action applied for `frameskip` simulator sub-steps, and observations are
//! recorded at that cadence. A trajectory of length T therefore holds T+1
//! observations and T actions.
//!
//! The on-disk format is a JSON manifest (`<name>.manifest.json`) plus a
//! single little-endian float32 payload (`<name>.bin`), row-major, with all
//! trajectories laid out contiguously. The manifest records the environment
//! config (and its hash), counts, per-trajectory section offsets, and the
//! normalization statistics of the canonical train split, so every consumer
//! normalizes identically.

use crate::env::{
    frameskip_step, render, sample_episode, Action, EnvConfig, EnvKind, EnvState, Observation,
};
use crate::rng::{derive_seed, stream_rng, stream_rng2};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Salt for the per-trajectory episode seed stream.
const SALT_EPISODE: u64 = 1;
/// Salt for the per-trajectory policy action stream.
const SALT_POLICY: u64 = 2;
/// Salt for the canonical train/val split shuffle.
const SALT_SPLIT: u64 = 3;

/// Std components below this floor are replaced by it, so degenerate
/// constant dimensions cannot produce NaNs.
pub const STD_FLOOR: f64 = 1e-6;

/// Data-collection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// I.i.d. uniform actions in the force box.
    Random,
    /// Mixes uniform actions with door-seeking waypoint actions so both
    /// rooms get covered.
    ScriptedDoor,
}

/// One recorded rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// T+1 observations.
    pub observations: Vec<Observation>,
    /// T actions (raw, unnormalized force commands).
    pub actions: Vec<Action>,
    /// Which simulator produced this trajectory.
    pub env_id: EnvKind,
    /// The episode seed this trajectory was rolled from.
    pub seed: u64,
}

/// An in-memory dataset (used for tests and small runs; large datasets are
/// streamed to disk during generation).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub env: EnvConfig,
    pub policy: Policy,
    pub frameskip: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub trajectories: Vec<Trajectory>,
}

/// Per-dimension normalization statistics (population convention, floored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub action_mean: [f64; 2],
    pub action_std: [f64; 2],
    /// Present iff the dataset carries proprioception.
    pub proprio_mean: Option<[f64; 4]>,
    pub proprio_std: Option<[f64; 4]>,
}

impl NormStats {
    /// Normalizes a raw action: `(a - mean) / std` per dimension.
    pub fn normalize_action(&self, a: &Action) -> [f64; 2] {
        [
            (a.force[0] - self.action_mean[0]) / self.action_std[0],
            (a.force[1] - self.action_mean[1]) / self.action_std[1],
        ]
    }

    /// Inverse of [`Self::normalize_action`].
    pub fn denormalize_action(&self, a: &[f64; 2]) -> Action {
        Action::new(
            a[0] * self.action_std[0] + self.action_mean[0],
            a[1] * self.action_std[1] + self.action_mean[1],
        )
    }

    /// Normalizes a raw proprio vector; identity when stats carry no proprio.
    pub fn normalize_proprio(&self, p: &[f64; 4]) -> [f64; 4] {
        match (&self.proprio_mean, &self.proprio_std) {
            (Some(m), Some(s)) => {
                let mut out = [0.0; 4];
                for i in 0..4 {
                    out[i] = (p[i] - m[i]) / s[i];
                }
                out
            }
            _ => *p,
        }
    }
}

/// A (W+1)-observation, (W+1)-action window into a trajectory.
///
/// The final action is unused by the teacher-forcing objective at the last
/// step but is carried so rollout losses and planners see aligned windows.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub obs_window: Vec<Observation>,
    pub action_window: Vec<Action>,
    /// (trajectory index, offset of the first observation).
    pub source: (usize, usize),
}

/// Lightweight slice locator used when observations are kept encoded
/// elsewhere: same enumeration as [`slice`], without copying windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRef {
    pub traj: usize,
    pub offset: usize,
}

/// Generates `n_traj` rollouts of `traj_len` model-level steps each.
///
/// Per-trajectory RNG streams are derived from `(seed, trajectory index)`,
/// so the result is independent of any parallel execution order and
/// byte-identical across runs with the same seed.
pub fn generate(
    env: &EnvConfig,
    policy: Policy,
    n_traj: usize,
    traj_len: usize,
    frameskip: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_traj == 0 || traj_len == 0 {
        return Err(Error::InvalidArgument(
            "generate: n_traj and traj_len must be >= 1".into(),
        ));
    }
    env.validate()?;
    let trajectories = (0..n_traj)
        .map(|i| generate_trajectory(env, policy, traj_len, frameskip, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        env: env.clone(),
        policy,
        frameskip,
        seed,
        train_frac: 0.9,
        trajectories,
    })
}

/// Rolls out a single trajectory (index `i`) of the dataset.
pub fn generate_trajectory(
    env: &EnvConfig,
    policy: Policy,
    traj_len: usize,
    frameskip: usize,
    seed: u64,
    i: usize,
) -> Result<Trajectory> {
    let ep_seed = derive_seed(derive_seed(seed, i as u64), SALT_EPISODE);
    let mut act_rng = stream_rng2(seed, i as u64, SALT_POLICY);
    let (mut state, _) = sample_episode(ep_seed, env);
    let mut observations = Vec::with_capacity(traj_len + 1);
    let mut actions = Vec::with_capacity(traj_len);
    observations.push(render(&state, env));
    for _ in 0..traj_len {
        let a = sample_policy_action(policy, &state, env, &mut act_rng);
        state = frameskip_step(&state, &a, frameskip, env)?;
        actions.push(a);
        observations.push(render(&state, env));
    }
    Ok(Trajectory {
        observations,
        actions,
        env_id: env.kind,
        seed: ep_seed,
    })
}

fn uniform_action(bound: f64, rng: &mut impl Rng) -> Action {
    Action::new(rng.gen_range(-bound..=bound), rng.gen_range(-bound..=bound))
}

fn sample_policy_action(policy: Policy, state: &EnvState, env: &EnvConfig, rng: &mut impl Rng) -> Action {
    match policy {
        Policy::Random => uniform_action(env.max_force, rng),
        Policy::ScriptedDoor => {
            if rng.gen_bool(0.5) {
                uniform_action(env.max_force, rng)
            } else {
                // PD control toward a point just past the door in the other
                // room, dragging exploration through the bottleneck.
                let side = if state.pos[0] >= env.wall_x { 1.0 } else { -1.0 };
                let target = [env.wall_x - side * 0.25, env.door_center_y];
                let fx = 3.0 * (target[0] - state.pos[0]) - state.vel[0];
                let fy = 3.0 * (target[1] - state.pos[1]) - state.vel[1];
                Action::new(fx, fy).clipped(env)
            }
        }
    }
}

/// Per-dimension mean and population std (floored) over the given
/// trajectories' actions and, when present, proprio vectors.
///
/// Call this on the train split only; the manifest records the result so all
/// consumers share one normalization.
pub fn compute_norm_stats(trajectories: &[&Trajectory]) -> Result<NormStats> {
    if trajectories.iter().all(|t| t.actions.is_empty()) {
        return Err(Error::InvalidArgument(
            "compute_norm_stats: no actions in dataset".into(),
        ));
    }
    let mut a_sum = [0.0f64; 2];
    let mut a_sq = [0.0f64; 2];
    let mut a_n = 0usize;
    let mut p_sum = [0.0f64; 4];
    let mut p_sq = [0.0f64; 4];
    let mut p_n = 0usize;
    for t in trajectories {
        for a in &t.actions {
            for d in 0..2 {
                a_sum[d] += a.force[d];
                a_sq[d] += a.force[d] * a.force[d];
            }
            a_n += 1;
        }
        for o in &t.observations {
            if let Some(p) = o.proprio {
                for d in 0..4 {
                    p_sum[d] += p[d];
                    p_sq[d] += p[d] * p[d];
                }
                p_n += 1;
            }
        }
    }
    let finalize = |sum: f64, sq: f64, n: usize| -> (f64, f64) {
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        (mean, var.sqrt().max(STD_FLOOR))
    };
    let mut action_mean = [0.0; 2];
    let mut action_std = [0.0; 2];
    for d in 0..2 {
        let (m, s) = finalize(a_sum[d], a_sq[d], a_n);
        action_mean[d] = m;
        action_std[d] = s;
    }
    let (proprio_mean, proprio_std) = if p_n > 0 {
        let mut pm = [0.0; 4];
        let mut ps = [0.0; 4];
        for d in 0..4 {
            let (m, s) = finalize(p_sum[d], p_sq[d], p_n);
            pm[d] = m;
            ps[d] = s;
        }
        (Some(pm), Some(ps))
    } else {
        (None, None)
    };
    Ok(NormStats {
        action_mean,
        action_std,
        proprio_mean,
        proprio_std,
    })
}

/// Enumerates all stride-1 windows of W+1 observations and W+1 actions.
///
/// A trajectory with T actions yields `T - W` slices (each slice needs W+1
/// actions); shorter trajectories are skipped and counted.
pub fn slice_refs(action_counts: &[usize], w: usize) -> Result<(Vec<SliceRef>, usize)> {
    if w == 0 {
        return Err(Error::InvalidArgument("slice: W must be >= 1".into()));
    }
    let mut refs = Vec::new();
    let mut skipped = 0usize;
    for (traj, &t) in action_counts.iter().enumerate() {
        if t < w + 1 {
            skipped += 1;
            continue;
        }
        for offset in 0..=(t - w - 1) {
            refs.push(SliceRef { traj, offset });
        }
    }
    Ok((refs, skipped))
}

/// Materializes owned slice records (small datasets / tests; training works
/// from [`slice_refs`] over pre-encoded trajectories instead).
pub fn slice(dataset: &Dataset, w: usize) -> Result<(Vec<SliceRecord>, usize)> {
    let counts: Vec<usize> = dataset.trajectories.iter().map(|t| t.actions.len()).collect();
    let (refs, skipped) = slice_refs(&counts, w)?;
    let records = refs
        .into_iter()
        .map(|r| {
            let t = &dataset.trajectories[r.traj];
            SliceRecord {
                obs_window: t.observations[r.offset..=r.offset + w].to_vec(),
                action_window: t.actions[r.offset..=r.offset + w].to_vec(),
                source: (r.traj, r.offset),
            }
        })
        .collect();
    Ok((records, skipped))
}

/// Deterministic trajectory-level train/val split.
///
/// Shuffles indices with a stream derived from `seed` and takes
/// `floor(train_frac * n)` for train; the remainder is val. Returns
/// `(train_indices, val_indices)`.
pub fn split(n_traj: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(
            "split: train_frac must be in (0, 1)".into(),
        ));
    }
    let mut indices: Vec<usize> = (0..n_traj).collect();
    let mut rng = stream_rng(seed, SALT_SPLIT);
    // Fisher–Yates with explicit draws for platform-stable shuffling.
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let n_train = (train_frac * n_traj as f64).floor() as usize;
    let val = indices.split_off(n_train);
    Ok((indices, val))
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

/// Manifest for the binary payload; field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Format version; readers reject unknown versions.
    pub version: u32,
    pub env: EnvConfig,
    /// SHA-256 of the canonical JSON of `env`.
    pub env_hash: String,
    pub policy: Policy,
    pub frameskip: usize,
    pub seed: u64,
    pub n_traj: usize,
    /// Model-level steps per trajectory (observations = traj_len + 1).
    pub traj_len: usize,
    /// Proprio vector length per observation (0 or 4).
    pub proprio_dim: usize,
    pub action_dim: usize,
    /// f32 elements per trajectory block.
    pub traj_stride: usize,
    /// Offsets (f32 elements) of each section within a trajectory block.
    pub raster_offset: usize,
    pub proprio_offset: usize,
    pub action_offset: usize,
    /// Total payload length in f32 elements.
    pub total_len: usize,
    /// Train fraction of the canonical split used for `norm_stats`.
    pub train_frac: f64,
    /// Normalization statistics over the canonical train split.
    pub norm_stats: NormStats,
    /// Trajectories skipped by slicing consumers (0 for raw datasets).
    pub slice_skips: usize,
    /// Per-trajectory episode seeds (reproducibility audit trail).
    pub episode_seeds: Vec<u64>,
}

/// SHA-256 hex digest of the canonical JSON encoding of the env config.
pub fn env_config_hash(env: &EnvConfig) -> String {
    let json = serde_json::to_string(env).expect("EnvConfig serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    prefix.with_file_name(name)
}

fn bin_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(".bin");
    prefix.with_file_name(name)
}

fn traj_layout(env: &EnvConfig, traj_len: usize) -> (usize, usize, usize, usize) {
    let g2 = env.raster_size * env.raster_size;
    let p = if env.proprio { 4 } else { 0 };
    let raster_off = 0;
    let proprio_off = (traj_len + 1) * g2;
    let action_off = proprio_off + (traj_len + 1) * p;
    let stride = action_off + traj_len * 2;
    (raster_off, proprio_off, action_off, stride)
}

fn write_traj_payload(w: &mut impl Write, t: &Trajectory, env: &EnvConfig) -> Result<()> {
    for o in &t.observations {
        for &v in &o.raster {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    if env.proprio {
        for o in &t.observations {
            let p = o.proprio.ok_or_else(|| {
                Error::Runtime("proprio-enabled dataset holds an observation without proprio".into())
            })?;
            for &v in &p {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    for a in &t.actions {
        for &v in &a.force {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Generates a dataset directly to disk, one trajectory at a time, without
/// holding the full payload in memory. Produces bytes identical to
/// [`write_dataset`] of [`generate`] with the same arguments.
pub fn generate_to_disk(
    env: &EnvConfig,
    policy: Policy,
    n_traj: usize,
    traj_len: usize,
    frameskip: usize,
    seed: u64,
    train_frac: f64,
    prefix: &Path,
) -> Result<DatasetManifest> {
    if n_traj == 0 || traj_len == 0 {
        return Err(Error::InvalidArgument(
            "generate: n_traj and traj_len must be >= 1".into(),
        ));
    }
    env.validate()?;
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let (train_idx, _) = split(n_traj, train_frac, seed)?;
    let mut episode_seeds = Vec::with_capacity(n_traj);
    let mut writer = BufWriter::new(std::fs::File::create(bin_path(prefix))?);

    // Two passes would re-roll everything; instead keep the train split's
    // trajectories long enough to accumulate stats, one at a time.
    let train_set: std::collections::HashSet<usize> = train_idx.iter().copied().collect();
    let mut stats_acc = StatsAccumulator::default();
    for i in 0..n_traj {
        let t = generate_trajectory(env, policy, traj_len, frameskip, seed, i)?;
        episode_seeds.push(t.seed);
        if train_set.contains(&i) {
            stats_acc.add(&t);
        }
        write_traj_payload(&mut writer, &t, env)?;
    }
    writer.flush()?;
    let norm_stats = stats_acc.finalize()?;

    let (raster_offset, proprio_offset, action_offset, traj_stride) = traj_layout(env, traj_len);
    let manifest = DatasetManifest {
        version: 1,
        env: env.clone(),
        env_hash: env_config_hash(env),
        policy,
        frameskip,
        seed,
        n_traj,
        traj_len,
        proprio_dim: if env.proprio { 4 } else { 0 },
        action_dim: 2,
        traj_stride,
        raster_offset,
        proprio_offset,
        action_offset,
        total_len: traj_stride * n_traj,
        train_frac,
        norm_stats,
        slice_skips: 0,
        episode_seeds,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(manifest_path(prefix), json)?;
    Ok(manifest)
}

/// Incremental mean/std accumulator matching [`compute_norm_stats`].
#[derive(Default)]
struct StatsAccumulator {
    a_sum: [f64; 2],
    a_sq: [f64; 2],
    a_n: usize,
    p_sum: [f64; 4],
    p_sq: [f64; 4],
    p_n: usize,
}

impl StatsAccumulator {
    fn add(&mut self, t: &Trajectory) {
        for a in &t.actions {
            for d in 0..2 {
                self.a_sum[d] += a.force[d];
                self.a_sq[d] += a.force[d] * a.force[d];
            }
            self.a_n += 1;
        }
        for o in &t.observations {
            if let Some(p) = o.proprio {
                for d in 0..4 {
                    self.p_sum[d] += p[d];
                    self.p_sq[d] += p[d] * p[d];
                }
                self.p_n += 1;
            }
        }
    }

    fn finalize(&self) -> Result<NormStats> {
        if self.a_n == 0 {
            return Err(Error::InvalidArgument(
                "compute_norm_stats: no actions in dataset".into(),
            ));
        }
        let fin = |sum: f64, sq: f64, n: usize| {
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            (mean, var.sqrt().max(STD_FLOOR))
        };
        let mut action_mean = [0.0; 2];
        let mut action_std = [0.0; 2];
        for d in 0..2 {
            let (m, s) = fin(self.a_sum[d], self.a_sq[d], self.a_n);
            action_mean[d] = m;
            action_std[d] = s;
        }
        let (proprio_mean, proprio_std) = if self.p_n > 0 {
            let mut pm = [0.0; 4];
            let mut ps = [0.0; 4];
            for d in 0..4 {
                let (m, s) = fin(self.p_sum[d], self.p_sq[d], self.p_n);
                pm[d] = m;
                ps[d] = s;
            }
            (Some(pm), Some(ps))
        } else {
            (None, None)
        };
        Ok(NormStats {
            action_mean,
            action_std,
            proprio_mean,
            proprio_std,
        })
    }
}

/// Writes an in-memory dataset with the same bytes as [`generate_to_disk`].
pub fn write_dataset(dataset: &Dataset, prefix: &Path) -> Result<DatasetManifest> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let n_traj = dataset.trajectories.len();
    let traj_len = dataset.trajectories.first().map(|t| t.actions.len()).unwrap_or(0);
    let (mut train_idx, _) = split(n_traj, dataset.train_frac, dataset.seed)?;
    // Canonical accumulation order for the statistics is ascending
    // trajectory index, independent of the shuffled split order.
    train_idx.sort_unstable();
    let train_refs: Vec<&Trajectory> = train_idx.iter().map(|&i| &dataset.trajectories[i]).collect();
    let norm_stats = compute_norm_stats(&train_refs)?;

    let mut writer = BufWriter::new(std::fs::File::create(bin_path(prefix))?);
    for t in &dataset.trajectories {
        if t.actions.len() != traj_len {
            return Err(Error::InvalidArgument(
                "write_dataset: all trajectories must share one length".into(),
            ));
        }
        write_traj_payload(&mut writer, t, &dataset.env)?;
    }
    writer.flush()?;

    let (raster_offset, proprio_offset, action_offset, traj_stride) =
        traj_layout(&dataset.env, traj_len);
    let manifest = DatasetManifest {
        version: 1,
        env: dataset.env.clone(),
        env_hash: env_config_hash(&dataset.env),
        policy: dataset.policy,
        frameskip: dataset.frameskip,
        seed: dataset.seed,
        n_traj,
        traj_len,
        proprio_dim: if dataset.env.proprio { 4 } else { 0 },
        action_dim: 2,
        traj_stride,
        raster_offset,
        proprio_offset,
        action_offset,
        total_len: traj_stride * n_traj,
        train_frac: dataset.train_frac,
        norm_stats,
        slice_skips: 0,
        episode_seeds: dataset.trajectories.iter().map(|t| t.seed).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(manifest_path(prefix), json)?;
    Ok(manifest)
}

/// Streaming reader over the trajectories of an on-disk dataset.
pub struct DatasetReader {
    pub manifest: DatasetManifest,
    reader: BufReader<std::fs::File>,
    next_index: usize,
}

impl DatasetReader {
    /// Opens `<prefix>.manifest.json` + `<prefix>.bin` and validates sizes.
    pub fn open(prefix: &Path) -> Result<Self> {
        let mpath = manifest_path(prefix);
        let json = std::fs::read_to_string(&mpath)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", mpath.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Config(format!("invalid manifest {}: {e}", mpath.display())))?;
        if manifest.version != 1 {
            return Err(Error::Config(format!(
                "unsupported dataset format version {}",
                manifest.version
            )));
        }
        let bpath = bin_path(prefix);
        let file = std::fs::File::open(&bpath)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", bpath.display())))?;
        let expect = (manifest.total_len * 4) as u64;
        let actual = file.metadata()?.len();
        if actual != expect {
            return Err(Error::Runtime(format!(
                "payload size mismatch: manifest expects {expect} bytes, file has {actual}"
            )));
        }
        Ok(DatasetReader {
            manifest,
            reader: BufReader::new(file),
            next_index: 0,
        })
    }

    /// Reads the next trajectory, or `None` past the end.
    pub fn next_trajectory(&mut self) -> Result<Option<Trajectory>> {
        if self.next_index >= self.manifest.n_traj {
            return Ok(None);
        }
        let m = &self.manifest;
        let g2 = m.env.raster_size * m.env.raster_size;
        let n_obs = m.traj_len + 1;
        let mut buf = vec![0u8; m.traj_stride * 4];
        self.reader.read_exact(&mut buf)?;
        let f = |idx: usize| -> f64 {
            f32::from_le_bytes([buf[idx * 4], buf[idx * 4 + 1], buf[idx * 4 + 2], buf[idx * 4 + 3]])
                as f64
        };
        let mut observations = Vec::with_capacity(n_obs);
        for o in 0..n_obs {
            let raster: Vec<f64> = (0..g2).map(|k| f(m.raster_offset + o * g2 + k)).collect();
            let proprio = if m.proprio_dim == 4 {
                let base = m.proprio_offset + o * 4;
                Some([f(base), f(base + 1), f(base + 2), f(base + 3)])
            } else {
                None
            };
            observations.push(Observation { raster, proprio });
        }
        let actions = (0..m.traj_len)
            .map(|t| Action::new(f(m.action_offset + t * 2), f(m.action_offset + t * 2 + 1)))
            .collect();
        let seed = m.episode_seeds[self.next_index];
        self.next_index += 1;
        Ok(Some(Trajectory {
            observations,
            actions,
            env_id: m.env.kind,
            seed,
        }))
    }

    /// Reads all remaining trajectories into an in-memory dataset.
    pub fn read_all(mut self) -> Result<Dataset> {
        let mut trajectories = Vec::with_capacity(self.manifest.n_traj);
        while let Some(t) = self.next_trajectory()? {
            trajectories.push(t);
        }
        Ok(Dataset {
            env: self.manifest.env.clone(),
            policy: self.manifest.policy,
            frameskip: self.manifest.frameskip,
            seed: self.manifest.seed,
            train_frac: self.manifest.train_frac,
            trajectories,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_env() -> EnvConfig {
        let mut env = EnvConfig::wall_default();
        env.raster_size = 8;
        env
    }

    #[test]
    fn generate_shapes_match_contract() {
        let ds = generate(&tiny_env(), Policy::Random, 3, 5, 2, 42).unwrap();
        assert_eq!(ds.trajectories.len(), 3);
        for t in &ds.trajectories {
            assert_eq!(t.observations.len(), 6);
            assert_eq!(t.actions.len(), 5);
        }
    }

    #[test]
    fn generate_minimal_is_one_transition() {
        let ds = generate(&tiny_env(), Policy::Random, 1, 1, 1, 7).unwrap();
        assert_eq!(ds.trajectories[0].observations.len(), 2);
        assert_eq!(ds.trajectories[0].actions.len(), 1);
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate(&tiny_env(), Policy::Random, 2, 4, 2, 99).unwrap();
        let b = generate(&tiny_env(), Policy::Random, 2, 4, 2, 99).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn scripted_door_policy_crosses_rooms() {
        let mut env = tiny_env();
        env.proprio = true;
        let ds = generate(&env, Policy::ScriptedDoor, 8, 50, 5, 11).unwrap();
        let mut left = false;
        let mut right = false;
        for t in &ds.trajectories {
            for o in &t.observations {
                let p = o.proprio.unwrap();
                if p[0] < env.wall_x - 0.2 {
                    left = true;
                }
                if p[0] > env.wall_x + 0.2 {
                    right = true;
                }
            }
        }
        assert!(left && right, "scripted_door must cover both rooms");
    }

    /// Direct arithmetic oracle: actions {-1, +1} give mean 0, std 1.
    #[test]
    fn norm_stats_match_direct_arithmetic() {
        let env = tiny_env();
        let obs = |_: usize| render(
            &EnvState { pos: [0.5, 0.5], vel: [0.0; 2], goal_pos: [0.0; 2] },
            &env,
        );
        let t = Trajectory {
            observations: (0..3).map(obs).collect(),
            actions: vec![Action::new(-1.0, 2.0), Action::new(1.0, 2.0)],
            env_id: EnvKind::Wall,
            seed: 0,
        };
        let stats = compute_norm_stats(&[&t]).unwrap();
        assert_abs_diff_eq!(stats.action_mean[0], 0.0);
        assert_abs_diff_eq!(stats.action_std[0], 1.0);
        // Constant dimension: mean c, std floored.
        assert_abs_diff_eq!(stats.action_mean[1], 2.0);
        assert_eq!(stats.action_std[1], STD_FLOOR);
    }

    #[test]
    fn normalize_roundtrip_is_identity() {
        let stats = NormStats {
            action_mean: [0.3, -0.2],
            action_std: [0.7, 1.3],
            proprio_mean: None,
            proprio_std: None,
        };
        let a = Action::new(0.123456, -0.654321);
        let back = stats.denormalize_action(&stats.normalize_action(&a));
        assert_abs_diff_eq!(back.force[0], a.force[0], epsilon = 1e-12);
        assert_abs_diff_eq!(back.force[1], a.force[1], epsilon = 1e-12);
    }

    /// Enumeration oracle for the slice count: T actions, window W+1 → T−W.
    #[test]
    fn slice_counts_match_enumeration() {
        let (refs, skipped) = slice_refs(&[50], 3).unwrap();
        assert_eq!(refs.len(), 47);
        assert_eq!(skipped, 0);
        // Brute-force enumeration oracle.
        let mut count = 0;
        for offset in 0..50 {
            if offset + 3 < 50 {
                count += 1;
            }
        }
        assert_eq!(refs.len(), count);
    }

    #[test]
    fn too_short_trajectories_are_skipped() {
        // 2 actions (3 observations) with W=3 → no slice, one skip.
        let (refs, skipped) = slice_refs(&[2], 3).unwrap();
        assert!(refs.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn w1_slices_have_two_observations() {
        let ds = generate(&tiny_env(), Policy::Random, 1, 4, 1, 5).unwrap();
        let (slices, _) = slice(&ds, 1).unwrap();
        assert_eq!(slices.len(), 3);
        for s in &slices {
            assert_eq!(s.obs_window.len(), 2);
            assert_eq!(s.action_window.len(), 2);
        }
    }

    #[test]
    fn slices_reassemble_source_trajectory() {
        let ds = generate(&tiny_env(), Policy::Random, 1, 6, 1, 5).unwrap();
        let (slices, _) = slice(&ds, 2).unwrap();
        let t = &ds.trajectories[0];
        for s in &slices {
            let (ti, off) = s.source;
            for (k, o) in s.obs_window.iter().enumerate() {
                assert_eq!(o, &ds.trajectories[ti].observations[off + k]);
            }
        }
        // Stride-1 windows cover every observation that has a full window.
        let covered: std::collections::HashSet<usize> = slices
            .iter()
            .flat_map(|s| (s.source.1..s.source.1 + 3).collect::<Vec<_>>())
            .collect();
        assert!(covered.len() >= t.observations.len() - 1);
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let (train, val) = split(1920, 0.9, 123).unwrap();
        assert_eq!(train.len(), 1728);
        assert_eq!(val.len(), 192);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1920).collect::<Vec<_>>());
        let (train2, val2) = split(1920, 0.9, 123).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let (train3, _) = split(1920, 0.9, 124).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn disk_roundtrip_preserves_payload_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ds");
        let mut env = tiny_env();
        env.proprio = true;
        let ds = generate(&env, Policy::Random, 3, 4, 2, 17).unwrap();
        let manifest = write_dataset(&ds, &prefix).unwrap();
        assert_eq!(manifest.n_traj, 3);
        let back = DatasetReader::open(&prefix).unwrap().read_all().unwrap();
        assert_eq!(back.trajectories.len(), 3);
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a.seed, b.seed);
            for (oa, ob) in a.observations.iter().zip(&b.observations) {
                for (va, vb) in oa.raster.iter().zip(&ob.raster) {
                    assert_eq!(*va as f32, *vb as f32);
                }
                let pa = oa.proprio.unwrap();
                let pb = ob.proprio.unwrap();
                for d in 0..4 {
                    assert_eq!(pa[d] as f32, pb[d] as f32);
                }
            }
        }
    }

    #[test]
    fn streamed_generation_matches_in_memory_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let env = tiny_env();
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        generate_to_disk(&env, Policy::Random, 4, 5, 2, 31, 0.9, &p1).unwrap();
        let ds = generate(&env, Policy::Random, 4, 5, 2, 31).unwrap();
        write_dataset(&ds, &p2).unwrap();
        let bin1 = std::fs::read(dir.path().join("a.bin")).unwrap();
        let bin2 = std::fs::read(dir.path().join("b.bin")).unwrap();
        assert_eq!(bin1, bin2);
        let m1 = std::fs::read_to_string(dir.path().join("a.manifest.json")).unwrap();
        let m2 = std::fs::read_to_string(dir.path().join("b.manifest.json")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let env = tiny_env();
        for name in ["x", "y"] {
            generate_to_disk(&env, Policy::Random, 3, 4, 2, 77, 0.9, &dir.path().join(name)).unwrap();
        }
        let a = std::fs::read(dir.path().join("x.bin")).unwrap();
        let b = std::fs::read(dir.path().join("y.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_stats_error() {
        assert!(compute_norm_stats(&[]).is_err());
    }
}
