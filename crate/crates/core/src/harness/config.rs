//! Experiment configuration: one flat TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::GridSpec;
use crate::learn::{DemoCounts, Hyperparams};
use crate::prompting::EndpointConfig;
use crate::reward::{Formulation, ObjectRewardMode, RewardParams, SparseClassifier};
use crate::sim::{BinSide, ExpertConfig, Projection, TaskPair};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Oracle,
    File,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "file" => Ok(Self::File),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown provider {other:?} (oracle, file, remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// `bin_sort_left` or `bin_sort_right`.
    pub task: String,
    pub image_width: u32,
    pub image_height: u32,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub height_levels: usize,

    pub lambda: f64,
    pub phi: f64,
    pub object_reward: ObjectRewardMode,
    pub formulation: Formulation,
    /// Labels of the offline data during pretraining when set; otherwise the
    /// fine-tuning formulation. Fine-tuning always relabels under its own.
    pub pretrain_formulation: Option<Formulation>,
    pub classifier_prompts: usize,
    pub classifier_p_fp: f64,
    pub classifier_p_fn: f64,

    pub pixel_noise_std: f64,
    pub calibration_samples: usize,
    pub calibration_outlier_fraction: f64,

    pub demo_forward: usize,
    pub demo_backward: usize,
    pub demo_failure: usize,
    pub expert_noise: f64,

    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,

    pub provider: ProviderKind,
    /// Directory holding `forward.json` and `backward.json` (provider = file).
    pub waypoint_path: Option<PathBuf>,
    pub endpoint_base_url: Option<String>,
    pub endpoint_model: Option<String>,
    pub endpoint_api_key_env: Option<String>,
    pub endpoint_timeout_secs: u64,
    pub endpoint_retries: usize,
    /// Use the oracle when the remote provider fails.
    pub fallback_to_oracle: bool,
    pub oracle_lift_level: usize,

    /// Multiplier of the online budget for the 5x demo-reduction regime.
    pub reduced_budget_factor: f64,

    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub conservative_weight: f64,
    pub ood_actions: usize,
    pub tau: f64,
    pub policy_delay: usize,
    pub q_weight: f64,
    pub offline_q_weight: f64,
    pub bc_steps: usize,
    pub bc_weight: f64,
    pub online_bc_weight: f64,
    pub explore_std: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub grad_clip: f64,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub offline_fraction: f64,
    pub updates_per_step: usize,
    pub eval_interval: usize,
    pub eval_trials: usize,
    pub online_capacity: usize,
    /// Allowed critic underestimate of demo returns-to-go after pretraining.
    pub calibration_epsilon: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            task: "bin_sort_left".into(),
            image_width: 100,
            image_height: 100,
            grid_cols: 6,
            grid_rows: 6,
            height_levels: 6,
            lambda: 0.1,
            phi: 15.0,
            object_reward: ObjectRewardMode::Disabled,
            formulation: Formulation::Combined,
            pretrain_formulation: None,
            classifier_prompts: 4,
            classifier_p_fp: 0.02,
            classifier_p_fn: 0.02,
            pixel_noise_std: 1.0,
            calibration_samples: 200,
            calibration_outlier_fraction: 0.2,
            demo_forward: 20,
            demo_backward: 20,
            demo_failure: 8,
            expert_noise: 0.3,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
            provider: ProviderKind::Oracle,
            waypoint_path: None,
            endpoint_base_url: None,
            endpoint_model: None,
            endpoint_api_key_env: None,
            endpoint_timeout_secs: 60,
            endpoint_retries: 3,
            fallback_to_oracle: true,
            oracle_lift_level: 1,
            reduced_budget_factor: 1.75,
            gamma: h.gamma,
            actor_lr: h.actor_lr,
            critic_lr: h.critic_lr,
            batch_size: h.batch_size,
            hidden: h.hidden,
            conservative_weight: h.conservative_weight,
            ood_actions: h.ood_actions,
            tau: h.tau,
            policy_delay: h.policy_delay,
            q_weight: h.q_weight,
            offline_q_weight: h.offline_q_weight,
            bc_steps: h.bc_steps,
            bc_weight: h.bc_weight,
            online_bc_weight: h.online_bc_weight,
            explore_std: h.explore_std,
            target_noise: h.target_noise,
            target_noise_clip: h.target_noise_clip,
            grad_clip: h.grad_clip,
            offline_steps: h.offline_steps,
            online_steps: h.online_steps,
            offline_fraction: h.offline_fraction,
            updates_per_step: h.updates_per_step,
            eval_interval: h.eval_interval,
            eval_trials: h.eval_trials,
            online_capacity: h.online_capacity,
            calibration_epsilon: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut err = |field: &'static str, message: String| errs.push(FieldError { field, message });
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            err(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version),
            );
        }
        if self.bin_side().is_none() {
            err(
                "task",
                format!("unknown task {:?} (bin_sort_left, bin_sort_right)", self.task),
            );
        }
        if let Err(e) = GridSpec::new(
            self.image_width,
            self.image_height,
            self.grid_cols,
            self.grid_rows,
            self.height_levels,
        ) {
            err("grid_cols", e.to_string());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            err("lambda", format!("must be > 0, got {}", self.lambda));
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            err("phi", format!("must be >= 0, got {}", self.phi));
        }
        if self.classifier_prompts == 0 {
            err("classifier_prompts", "must be >= 1".into());
        }
        for (field, p) in [
            ("classifier_p_fp", self.classifier_p_fp),
            ("classifier_p_fn", self.classifier_p_fn),
        ] {
            if !(0.0..1.0).contains(&p) {
                err(field, format!("must be in [0, 1), got {p}"));
            }
        }
        if !(self.pixel_noise_std >= 0.0) {
            err("pixel_noise_std", "must be >= 0".into());
        }
        if self.calibration_samples < crate::reward::MIN_SAMPLES {
            err(
                "calibration_samples",
                format!("need at least {}", crate::reward::MIN_SAMPLES),
            );
        }
        if !(0.0..0.5).contains(&self.calibration_outlier_fraction) {
            err("calibration_outlier_fraction", "must be in [0, 0.5)".into());
        }
        if !(self.expert_noise >= 0.0) {
            err("expert_noise", "must be >= 0".into());
        }
        if self.seeds.is_empty() {
            err("seeds", "must list at least one seed".into());
        }
        match self.provider {
            ProviderKind::File if self.waypoint_path.is_none() => {
                err("waypoint_path", "required when provider = \"file\"".into());
            }
            ProviderKind::Remote => {
                if self.endpoint_base_url.is_none() {
                    err("endpoint_base_url", "required when provider = \"remote\"".into());
                }
                if self.endpoint_model.is_none() {
                    err("endpoint_model", "required when provider = \"remote\"".into());
                }
            }
            _ => {}
        }
        if self.oracle_lift_level >= self.height_levels {
            err(
                "oracle_lift_level",
                format!("must be below height_levels ({})", self.height_levels),
            );
        }
        if !(self.calibration_epsilon >= 0.0 && self.calibration_epsilon.is_finite()) {
            err(
                "calibration_epsilon",
                format!("must be >= 0, got {}", self.calibration_epsilon),
            );
        }
        if !(self.reduced_budget_factor >= 1.0) {
            err("reduced_budget_factor", "must be >= 1".into());
        }
        if let Err(msg) = self.hyperparams().validate() {
            for part in msg.split("; ") {
                let field = HYPER_FIELDS
                    .iter()
                    .find(|f| part.starts_with(*f))
                    .copied()
                    .unwrap_or("hyperparameters");
                err(field, part.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn bin_side(&self) -> Option<BinSide> {
        match self.task.as_str() {
            "bin_sort_left" => Some(BinSide::Left),
            "bin_sort_right" => Some(BinSide::Right),
            _ => None,
        }
    }

    pub fn tasks(&self) -> TaskPair {
        TaskPair::bin_sort(self.bin_side().unwrap_or(BinSide::Left))
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(
            self.image_width,
            self.image_height,
            self.grid_cols,
            self.grid_rows,
            self.height_levels,
        )
        .expect("validated grid")
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            lambda: self.lambda,
            phi: self.phi,
            grid: self.grid(),
        }
    }

    pub fn projection(&self) -> Projection {
        let mut p = Projection::scaled(1.0, self.pixel_noise_std);
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        p.top = [[w, 0.0, 0.0, 0.0], [0.0, h, 0.0, 0.0]];
        p.side = [[w, 0.0, 0.0, 0.0], [0.0, 0.0, h, 0.0]];
        p
    }

    pub fn classifier(&self, seed: u64) -> SparseClassifier {
        SparseClassifier {
            k_prompts: self.classifier_prompts,
            p_fp: self.classifier_p_fp,
            p_fn: self.classifier_p_fn,
            seed,
        }
    }

    pub fn demo_counts(&self) -> DemoCounts {
        DemoCounts::new(self.demo_forward, self.demo_backward, self.demo_failure)
    }

    pub fn expert(&self) -> ExpertConfig {
        ExpertConfig {
            noise: self.expert_noise,
            ..Default::default()
        }
    }

    pub fn endpoint(&self) -> Option<EndpointConfig> {
        Some(EndpointConfig {
            base_url: self.endpoint_base_url.clone()?,
            model: self.endpoint_model.clone()?,
            api_key_env: self.endpoint_api_key_env.clone(),
            timeout_secs: self.endpoint_timeout_secs,
            retries: self.endpoint_retries,
        })
    }

    /// Labels used to pretrain a policy that is fine-tuned under `formulation`.
    pub fn pretrain_labels(&self, formulation: Formulation) -> Formulation {
        self.pretrain_formulation.unwrap_or(formulation)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            gamma: self.gamma,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            batch_size: self.batch_size,
            hidden: self.hidden.clone(),
            conservative_weight: self.conservative_weight,
            ood_actions: self.ood_actions,
            tau: self.tau,
            policy_delay: self.policy_delay,
            q_weight: self.q_weight,
            offline_q_weight: self.offline_q_weight,
            bc_steps: self.bc_steps,
            bc_weight: self.bc_weight,
            online_bc_weight: self.online_bc_weight,
            explore_std: self.explore_std,
            target_noise: self.target_noise,
            target_noise_clip: self.target_noise_clip,
            grad_clip: self.grad_clip,
            offline_steps: self.offline_steps,
            online_steps: self.online_steps,
            offline_fraction: self.offline_fraction,
            updates_per_step: self.updates_per_step,
            eval_interval: self.eval_interval,
            eval_trials: self.eval_trials,
            online_capacity: self.online_capacity,
        }
    }
}

const HYPER_FIELDS: [&str; 10] = [
    "gamma",
    "conservative_weight",
    "tau",
    "offline_fraction",
    "batch_size",
    "policy_delay",
    "eval_interval",
    "eval_trials",
    "online_capacity",
    "hidden",
];
