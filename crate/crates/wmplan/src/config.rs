//! The strict TOML run configuration shared by every command.
//!
//! A [`RunConfig`] collects one section per module — environment, dataset,
//! model, training, planner, objective, MPC, evaluation, and file layout —
//! plus a single top-level master seed. Unknown keys anywhere in the file
//! are rejected, loading re-validates every section, and cross-section
//! consistency (window sizes, proprioception flags, frameskip agreement) is
//! checked up front so commands can assume a coherent configuration.
//!
//! Per-stage randomness is derived from the master seed: each consumer seed
//! (dataset generation, the frozen visual map, predictor initialization,
//! training order, planner sampling) comes from its own salted stream, so
//! changing `seed` re-seeds the whole pipeline coherently while two runs of
//! the same file stay bit-identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, Policy};
use crate::env::EnvConfig;
use crate::model::{Model, ModelConfig};
use crate::planning::{MpcConfig, PlanObjective, PlannerConfig};
use crate::rng::derive_seed;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Salt for the dataset-generation seed stream.
const SALT_DATASET: u64 = 0xDA7A;
/// Salt for the frozen visual map seed.
const SALT_VIS: u64 = 0xF0F;
/// Salt for predictor parameter initialization.
const SALT_INIT: u64 = 0x1217;
/// Salt for the training loop (shuffles, rollout draws).
const SALT_TRAIN: u64 = 0x7124;
/// Salt for planner sampling streams.
const SALT_PLAN: u64 = 0x914A;

/// Dataset-generation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Data-collection policy.
    pub policy: Policy,
    /// Number of trajectories to roll out.
    pub n_traj: usize,
    /// Model-level steps per trajectory (observations = traj_len + 1).
    pub traj_len: usize,
    /// Environment steps folded into one model-level action.
    pub frameskip: usize,
    /// Fraction of trajectories assigned to the training split.
    pub train_frac: f64,
}

/// Evaluation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Planning episodes per evaluation (e).
    pub episodes: usize,
    /// Trailing-window length for success-rate averaging (n).
    pub trailing_n: usize,
    /// First episode seed; episode i uses `seed_base + i`.
    pub seed_base: u64,
    /// Unroll-error horizons; validation slices are cut to the largest.
    pub horizons: Vec<usize>,
    /// Fit and report the linear state probe (requires proprioception).
    pub probe: bool,
}

/// File-layout section. Paths are interpreted relative to the process
/// working directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    /// Artifact root for checkpoints, metrics, traces, and tables.
    pub out_dir: String,
    /// Dataset prefix: files live at `<prefix>.manifest.json` + `<prefix>.bin`.
    pub dataset_prefix: String,
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it (see module docs).
    pub seed: u64,
    pub env: EnvConfig,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub planner: PlannerConfig,
    pub objective: PlanObjective,
    pub mpc: MpcConfig,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl RunConfig {
    /// Two-room navigation base preset.
    pub fn wall_base() -> RunConfig {
        RunConfig {
            seed: 0,
            env: EnvConfig::wall_default(),
            dataset: DatasetSection {
                policy: Policy::ScriptedDoor,
                n_traj: 1920,
                traj_len: 50,
                frameskip: 5,
                train_frac: 0.9,
            },
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            planner: PlannerConfig::wall_cem(),
            objective: PlanObjective::default(),
            mpc: MpcConfig::default(),
            eval: EvalSection {
                episodes: 96,
                trailing_n: 10,
                seed_base: 0,
                horizons: vec![1, 2, 3],
                probe: false,
            },
            io: IoSection {
                out_dir: "runs/wall_base".into(),
                dataset_prefix: "data/wall_base".into(),
            },
        }
    }

    /// Open-arena point-mass base preset: same budgets, no interior wall.
    pub fn pointmass_base() -> RunConfig {
        let mut cfg = RunConfig::wall_base();
        cfg.env = EnvConfig::pointmass_default();
        cfg.io = IoSection {
            out_dir: "runs/pointmass_base".into(),
            dataset_prefix: "data/pointmass_base".into(),
        };
        cfg
    }

    /// Parses and validates a configuration from TOML text.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Serializes the configuration to TOML. Loading the output yields an
    /// equal configuration (round-trip idempotency).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    /// Writes the configuration to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Checks every section plus cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.planner.validate()?;

        let d = &self.dataset;
        if d.n_traj == 0 || d.traj_len == 0 {
            return Err(Error::Config(
                "dataset.n_traj and dataset.traj_len must be >= 1".into(),
            ));
        }
        if d.frameskip == 0 {
            return Err(Error::Config("dataset.frameskip must be >= 1".into()));
        }
        if !(d.train_frac > 0.0 && d.train_frac < 1.0) {
            return Err(Error::Config(
                "dataset.train_frac must lie strictly between 0 and 1".into(),
            ));
        }
        if d.traj_len < self.training.w + 1 {
            return Err(Error::Config(format!(
                "dataset.traj_len ({}) must be at least training.w + 1 ({}) to yield slices",
                d.traj_len,
                self.training.w + 1
            )));
        }

        if self.objective.h == 0 {
            return Err(Error::Config("objective.h must be >= 1".into()));
        }
        if self.objective.wp == 0 {
            return Err(Error::Config("objective.wp must be >= 1".into()));
        }
        if !(self.objective.alpha.is_finite() && self.objective.alpha >= 0.0) {
            return Err(Error::Config("objective.alpha must be finite and >= 0".into()));
        }
        self.mpc.validate(self.objective.h)?;

        // Cross-section consistency.
        if self.objective.wp > self.training.w {
            return Err(Error::Config(format!(
                "objective.wp ({}) cannot exceed training.w ({}): planning context is capped \
                 by the trained window",
                self.objective.wp, self.training.w
            )));
        }
        if self.training.w > self.model.capacity {
            return Err(Error::Config(format!(
                "training.w ({}) cannot exceed model.capacity ({})",
                self.training.w, self.model.capacity
            )));
        }
        if self.model.proprio != self.env.proprio {
            return Err(Error::Config(format!(
                "model.proprio ({}) and env.proprio ({}) must agree",
                self.model.proprio, self.env.proprio
            )));
        }
        if self.objective.alpha > 0.0 && !self.model.proprio {
            return Err(Error::Config(
                "objective.alpha > 0 requires model.proprio = true".into(),
            ));
        }
        if self.mpc.frameskip != self.dataset.frameskip {
            return Err(Error::Config(format!(
                "mpc.frameskip ({}) must equal dataset.frameskip ({}): the model was trained \
                 on frameskipped transitions",
                self.mpc.frameskip, self.dataset.frameskip
            )));
        }

        let e = &self.eval;
        if e.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        if e.trailing_n == 0 {
            return Err(Error::Config("eval.trailing_n must be >= 1".into()));
        }
        if e.horizons.is_empty() {
            return Err(Error::Config("eval.horizons must be nonempty".into()));
        }
        for pair in e.horizons.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config("eval.horizons must be strictly increasing".into()));
            }
        }
        if e.horizons[0] == 0 {
            return Err(Error::Config("eval.horizons entries must be >= 1".into()));
        }
        let max_h = *e.horizons.last().expect("nonempty");
        if d.traj_len < max_h + 1 {
            return Err(Error::Config(format!(
                "dataset.traj_len ({}) must exceed the largest eval horizon ({max_h})",
                d.traj_len
            )));
        }
        if e.probe && !self.env.proprio {
            return Err(Error::Config(
                "eval.probe requires env.proprio = true (the probe is fit on ground-truth state)"
                    .into(),
            ));
        }

        if self.io.out_dir.is_empty() || self.io.dataset_prefix.is_empty() {
            return Err(Error::Config(
                "io.out_dir and io.dataset_prefix must be nonempty".into(),
            ));
        }
        Ok(())
    }

    /// Seed for dataset generation.
    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, SALT_DATASET)
    }

    /// Seed for the frozen random-feature visual map.
    pub fn vis_seed(&self) -> u64 {
        derive_seed(self.seed, SALT_VIS)
    }

    /// Seed for predictor parameter initialization.
    pub fn model_init_seed(&self) -> u64 {
        derive_seed(self.seed, SALT_INIT)
    }

    /// Training section with its effective seed: the file's `training.seed`
    /// indexes a stream under the master seed.
    pub fn train_config(&self) -> TrainConfig {
        let mut tc = self.training.clone();
        tc.seed = derive_seed(derive_seed(self.seed, SALT_TRAIN), self.training.seed);
        tc
    }

    /// Planner section with its effective seed (same scheme as
    /// [`Self::train_config`]).
    pub fn planner_config(&self) -> PlannerConfig {
        let mut pc = self.planner.clone();
        pc.seed = derive_seed(derive_seed(self.seed, SALT_PLAN), self.planner.seed);
        pc
    }

    /// Builds a fresh model for this configuration around the given
    /// normalization statistics.
    pub fn new_model(&self, norm: NormStats) -> Result<Model> {
        let input_len = self.env.raster_size * self.env.raster_size;
        Model::new(
            &self.model,
            input_len,
            self.vis_seed(),
            self.model_init_seed(),
            norm,
            self.training.w,
        )
    }

    /// Artifact root as a path.
    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.io.out_dir)
    }

    /// Dataset prefix as a path.
    pub fn dataset_prefix(&self) -> PathBuf {
        PathBuf::from(&self.io.dataset_prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::{Distance, PlannerKind};

    #[test]
    fn presets_validate() {
        RunConfig::wall_base().validate().unwrap();
        RunConfig::pointmass_base().validate().unwrap();
    }

    /// The navigation preset pins the published planning and optimization
    /// budgets exactly.
    #[test]
    fn wall_preset_snapshot() {
        let cfg = RunConfig::wall_base();
        assert_eq!(cfg.planner.kind, PlannerKind::Cem);
        assert_eq!(cfg.planner.n, 300);
        assert_eq!(cfg.objective.h, 6);
        assert_eq!(cfg.mpc.m, 6);
        assert_eq!(cfg.planner.k, 10);
        assert_eq!(cfg.planner.j, 30);
        assert_eq!(cfg.objective.wp, 2);
        assert_eq!(cfg.mpc.frameskip, 5);
        assert_eq!(cfg.mpc.max_steps, 30);
        assert_eq!(cfg.objective.distance, Distance::L2);

        assert_eq!(cfg.training.lr, 5e-4);
        assert_eq!(cfg.training.weight_decay_start, 1e-7);
        assert_eq!(cfg.training.weight_decay_final, 1e-6);
        assert_eq!(cfg.training.grad_clip, 1.0);
        assert_eq!(cfg.training.adam_beta1, 0.9);
        assert_eq!(cfg.training.adam_beta2, 0.995);
        assert_eq!(cfg.training.w, 3);
        assert_eq!(cfg.training.epochs, 50);
        assert_eq!(cfg.training.batch_size, 128);

        assert_eq!(cfg.eval.episodes, 96);
        assert_eq!(cfg.dataset.frameskip, 5);
    }

    #[test]
    fn toml_round_trip_is_idempotent() {
        for cfg in [RunConfig::wall_base(), RunConfig::pointmass_base()] {
            let text = cfg.to_toml_string().unwrap();
            let back = RunConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
            let text2 = back.to_toml_string().unwrap();
            assert_eq!(text2, text, "serialize(parse(serialize)) must be stable");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_naming_the_key() {
        let text = RunConfig::wall_base().to_toml_string().unwrap();
        let text = text.replace("[model]\n", "[model]\nnot_a_real_knob = 3\n");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("not_a_real_knob"), "error must name the key: {msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cross_section_violations_are_rejected() {
        let mut cfg = RunConfig::wall_base();
        cfg.objective.wp = cfg.training.w + 1;
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("objective.wp"), "{msg}");

        let mut cfg = RunConfig::wall_base();
        cfg.model.proprio = true; // env stays false
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("proprio"), "{msg}");

        let mut cfg = RunConfig::wall_base();
        cfg.mpc.frameskip = 2;
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("frameskip"), "{msg}");

        let mut cfg = RunConfig::wall_base();
        cfg.training.w = cfg.model.capacity + 1;
        // Keep k_max legal so the cross-check (not TrainConfig) fires.
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("model.capacity"), "{msg}");

        let mut cfg = RunConfig::wall_base();
        cfg.objective.alpha = 0.5; // no proprio in the base preset
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("alpha"), "{msg}");

        let mut cfg = RunConfig::wall_base();
        cfg.eval.horizons = vec![1, 1, 2];
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("horizons"), "{msg}");
    }

    #[test]
    fn derived_seeds_are_distinct_and_track_the_master_seed() {
        let a = RunConfig::wall_base();
        let mut b = RunConfig::wall_base();
        b.seed = 1;

        let a_seeds = [
            a.dataset_seed(),
            a.vis_seed(),
            a.model_init_seed(),
            a.train_config().seed,
            a.planner_config().seed,
        ];
        for (i, x) in a_seeds.iter().enumerate() {
            for (j, y) in a_seeds.iter().enumerate() {
                if i != j {
                    assert_ne!(x, y, "stage seeds must be distinct");
                }
            }
        }
        assert_ne!(a.dataset_seed(), b.dataset_seed());
        assert_ne!(a.train_config().seed, b.train_config().seed);
        // Re-deriving is deterministic.
        assert_eq!(a.train_config().seed, RunConfig::wall_base().train_config().seed);
        // The file-level section seed indexes a distinct stream.
        let mut c = RunConfig::wall_base();
        c.training.seed = 7;
        assert_ne!(c.train_config().seed, a.train_config().seed);
    }

    /// The shipped files in `configs/` are generated by the `dump_presets`
    /// example; this pins them to the in-code presets.
    #[test]
    fn shipped_preset_files_match_the_code() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (name, cfg) in [
            ("wall_base.toml", RunConfig::wall_base()),
            ("pointmass_base.toml", RunConfig::pointmass_base()),
        ] {
            let loaded = RunConfig::load(&root.join(name)).unwrap();
            assert_eq!(loaded, cfg, "configs/{name} has drifted; rerun dump_presets");
        }
    }

    #[test]
    fn missing_config_file_error_names_the_path() {
        let err = RunConfig::load(Path::new("/definitely/not/here.toml")).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("/definitely/not/here.toml"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn save_then_load_preserves_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = RunConfig::wall_base();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
