//! Run configuration: a single JSON document with full defaults. Its hash
//! stamps every artifact a stage writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dal::DalConfig;
use crate::deploy::{CameraNoise, DaggerConfig, FusionConfig};
use crate::env::SimConfig;
use crate::error::{Error, Result};
use crate::eval::{CompletionThresholds, EvalConfig};
use crate::planner::PlannerConfig;
use crate::rl::{PpoConfig, ResidualBounds, RewardWeights};

/// Artifact directories, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub per_category: usize,
    pub steps: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            per_category: 20,
            steps: 200,
        }
    }
}

/// Controller training budget and reference task length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub updates: usize,
    pub task_steps: usize,
    /// Coefficient used by the fingertip-reward variant.
    pub fingertip_coef: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            updates: 200,
            task_steps: 200,
            fingertip_coef: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every available core. Not part of the hash.
    pub workers: Option<usize>,
    pub paths: Paths,
    pub sim: SimConfig,
    pub dataset: DatasetConfig,
    pub planner: PlannerConfig,
    pub ppo: PpoConfig,
    pub controller: ControllerConfig,
    pub reward: RewardWeights,
    pub bounds: ResidualBounds,
    pub thresholds: CompletionThresholds,
    pub dal: DalConfig,
    pub dagger: DaggerConfig,
    pub fusion: FusionConfig,
    pub cameras: CameraNoise,
    pub eval: EvalConfig,
}

fn ensure(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

impl RunConfig {
    /// Reads and validates a config file. Missing keys take defaults;
    /// unknown keys are rejected.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        ensure(s.fingers >= 1, "sim.fingers must be at least 1")?;
        ensure(
            [s.wrist_rate, s.wrist_rot_rate, s.finger_rate, s.grasp_radius]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0),
            "sim rates and grasp radius must be positive",
        )?;
        ensure(
            0.0 <= s.open_threshold && s.open_threshold < s.close_threshold && s.close_threshold <= 1.0,
            "sim thresholds need 0 <= open < close <= 1",
        )?;
        ensure(self.dataset.per_category >= 1, "dataset.per_category must be at least 1")?;
        ensure(self.dataset.steps >= 2, "dataset.steps must be at least 2")?;
        ensure(self.controller.task_steps >= 2, "controller.task_steps must be at least 2")?;
        ensure(
            self.controller.fingertip_coef.is_finite() && self.controller.fingertip_coef >= 0.0,
            "controller.fingertip_coef must be non-negative",
        )?;
        ensure(self.workers != Some(0), "workers must be at least 1")?;
        let t = &self.thresholds;
        ensure(
            [t.translation, t.dimscaled, t.plain, t.joint].iter().all(|v| v.is_finite() && *v > 0.0),
            "thresholds must be positive",
        )?;
        let b = &self.bounds;
        ensure(b.max_translation > 0.0 && b.max_rotation > 0.0, "residual bounds must be positive")?;
        let c = &self.cameras;
        ensure(
            c.sigma >= 0.0 && (0.0..=1.0).contains(&c.outlier_rate) && c.outlier_min <= c.outlier_max,
            "camera noise out of range",
        )?;
        ensure(self.eval.seeds >= 1, "eval.seeds must be at least 1")?;
        self.planner.validate()?;
        self.ppo.validate()?;
        self.dal.validate()?;
        self.dagger.validate()?;
        self.fusion.validate()
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON (sorted keys,
    /// `workers` cleared).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        let canonical = serde_json::to_value(&c)
            .and_then(|v| serde_json::to_string(&v))
            .expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
