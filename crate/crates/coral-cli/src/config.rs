//! JSON run configuration. Unknown fields are rejected so typos surface as
//! schema errors instead of silently falling back to defaults; every field
//! has a default documented here and in the sample configs under
//! `configs/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use coral_core::codec::{EncoderConfig, NormMode};
use coral_core::inr::SirenConfig;
use coral_core::processor::{NodeTrainConfig, SamplingSchedule};
use coral_core::train::{OuterConfig, PlateauConfig, ProcTrainConfig};
use coral_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("config schema violation in {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ivp,
    Dynamics,
    Geometry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    #[serde(default)]
    pub test_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_d_z")]
    pub d_z: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
}

fn default_d_z() -> usize {
    32
}
fn default_width() -> usize {
    64
}
fn default_depth() -> usize {
    3
}
fn default_omega0() -> f64 {
    10.0
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d_z: default_d_z(),
            width: default_width(),
            depth: default_depth(),
            omega0: default_omega0(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfigJson {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub learn_alpha: bool,
    /// Learn one rate per code coordinate instead of a shared scalar.
    #[serde(default)]
    pub per_coordinate: bool,
}

fn default_alpha() -> f64 {
    1e-2
}
fn default_k() -> usize {
    3
}

impl Default for EncoderConfigJson {
    fn default() -> Self {
        EncoderConfigJson {
            alpha: default_alpha(),
            k: default_k(),
            learn_alpha: false,
            per_coordinate: false,
        }
    }
}

impl EncoderConfigJson {
    pub fn build(&self, d_z: usize) -> Result<EncoderConfig, ConfigError> {
        let alpha = if self.per_coordinate {
            Tensor::filled(&[d_z], self.alpha)
        } else {
            Tensor::scalar(self.alpha)
        };
        EncoderConfig { alpha, steps: self.k, learn_alpha: self.learn_alpha }
            .validated()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerJson {
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
}

fn default_patience() -> usize {
    250
}
fn default_decay() -> f64 {
    0.75
}
fn default_threshold() -> f64 {
    0.01
}
fn default_min_lr() -> f64 {
    1e-5
}

impl SchedulerJson {
    pub fn build(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.patience,
            decay: self.decay,
            rel_threshold: self.threshold,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InrTrainJson {
    #[serde(default = "default_inr_lr")]
    pub lr: f64,
    #[serde(default = "default_inr_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub meta_alpha_lr: f64,
    #[serde(default = "default_true")]
    pub second_order: bool,
    #[serde(default)]
    pub scheduler: Option<SchedulerJson>,
}

fn default_inr_lr() -> f64 {
    5e-6
}
fn default_inr_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl Default for InrTrainJson {
    fn default() -> Self {
        InrTrainJson {
            lr: default_inr_lr(),
            epochs: default_inr_epochs(),
            batch_size: default_batch(),
            meta_alpha_lr: 0.0,
            second_order: true,
            scheduler: None,
        }
    }
}

impl InrTrainJson {
    pub fn build(&self, seed: u64) -> OuterConfig {
        OuterConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            meta_alpha_lr: self.meta_alpha_lr,
            second_order: self.second_order,
            scheduler: self.scheduler.as_ref().map(|s| s.build()),
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    Mlp,
    Node,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorJson {
    pub kind: ProcessorKind,
    #[serde(default = "default_proc_width")]
    pub width: usize,
    #[serde(default = "default_proc_depth")]
    pub depth: usize,
    /// RK4 substeps per latent time unit (node only).
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_proc_width() -> usize {
    64
}
fn default_proc_depth() -> usize {
    3
}
fn default_substeps() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingJson {
    #[serde(default = "default_eps_init")]
    pub eps_init: f64,
    #[serde(default = "default_eps_decay")]
    pub decay: f64,
    #[serde(default = "default_eps_period")]
    pub period: usize,
}

fn default_eps_init() -> f64 {
    0.99
}
fn default_eps_decay() -> f64 {
    0.99
}
fn default_eps_period() -> usize {
    10
}

impl Default for SamplingJson {
    fn default() -> Self {
        SamplingJson {
            eps_init: default_eps_init(),
            decay: default_eps_decay(),
            period: default_eps_period(),
        }
    }
}

impl SamplingJson {
    pub fn build(&self) -> SamplingSchedule {
        SamplingSchedule { eps_init: self.eps_init, decay: self.decay, period: self.period }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcTrainJson {
    #[serde(default = "default_proc_lr")]
    pub lr: f64,
    #[serde(default = "default_proc_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_proc_scheduler")]
    pub scheduler: Option<SchedulerJson>,
    #[serde(default)]
    pub scheduled_sampling: SamplingJson,
}

fn default_proc_lr() -> f64 {
    1e-3
}
fn default_proc_epochs() -> usize {
    500
}
fn default_proc_scheduler() -> Option<SchedulerJson> {
    Some(SchedulerJson {
        patience: default_patience(),
        decay: default_decay(),
        threshold: default_threshold(),
        min_lr: default_min_lr(),
    })
}

impl Default for ProcTrainJson {
    fn default() -> Self {
        ProcTrainJson {
            lr: default_proc_lr(),
            epochs: default_proc_epochs(),
            batch_size: default_batch(),
            scheduler: default_proc_scheduler(),
            scheduled_sampling: SamplingJson::default(),
        }
    }
}

impl ProcTrainJson {
    pub fn build_mlp(&self, seed: u64) -> ProcTrainConfig {
        ProcTrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            scheduler: self.scheduler.as_ref().map(|s| s.build()),
            seed,
        }
    }

    pub fn build_node(&self, seed: u64, substeps: usize) -> NodeTrainConfig {
        NodeTrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            substeps,
            schedule: self.scheduled_sampling.build(),
            scheduler: self.scheduler.as_ref().map(|s| s.build()),
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormModeJson {
    SharedFeaturewise,
    SeparateFeaturewise,
    SeparateScalar,
    InputOnly,
}

impl NormModeJson {
    pub fn build(self) -> NormMode {
        match self {
            NormModeJson::SharedFeaturewise => NormMode::SharedFeaturewise,
            NormModeJson::SeparateFeaturewise => NormMode::SeparateFeaturewise,
            NormModeJson::SeparateScalar => NormMode::SeparateScalar,
            NormModeJson::InputOnly => NormMode::InputOnly,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalJson {
    /// Percent of the base lattice kept for the train grid (dynamics).
    #[serde(default = "default_pi")]
    pub pi: f64,
    #[serde(default = "default_train_grid_seed")]
    pub train_grid_seed: u64,
    #[serde(default = "default_test_grid_seed")]
    pub test_grid_seed: u64,
    /// Extra grid for the discretization-robustness check; drawn at the
    /// same sparsity with yet another seed.
    #[serde(default)]
    pub fresh_grid_seed: Option<u64>,
    /// Sparse-protocol retention for the initial-value task.
    #[serde(default = "default_sparse_pi")]
    pub sparse_pi: f64,
    /// Regular resolutions for decode-side upsampling evaluation.
    #[serde(default)]
    pub upsample_resolutions: Vec<usize>,
}

fn default_pi() -> f64 {
    20.0
}
fn default_sparse_pi() -> f64 {
    20.0
}
fn default_train_grid_seed() -> u64 {
    101
}
fn default_test_grid_seed() -> u64 {
    202
}

impl Default for EvalJson {
    fn default() -> Self {
        EvalJson {
            pi: default_pi(),
            train_grid_seed: default_train_grid_seed(),
            test_grid_seed: default_test_grid_seed(),
            fresh_grid_seed: None,
            sparse_pi: default_sparse_pi(),
            upsample_resolutions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignJson {
    #[serde(default = "default_design_steps")]
    pub steps: usize,
    #[serde(default = "default_design_lr")]
    pub lr: f64,
    /// Target for the decoded field's grid mean.
    pub target_mean: f64,
    #[serde(default)]
    pub init_scale: f64,
}

fn default_design_steps() -> usize {
    50
}
fn default_design_lr() -> f64 {
    0.02
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub encoder: EncoderConfigJson,
    #[serde(default)]
    pub inr_train: InrTrainJson,
    pub processor: ProcessorJson,
    #[serde(default)]
    pub proc_train: ProcTrainJson,
    #[serde(default)]
    pub norm_mode: Option<NormModeJson>,
    /// Z-score the field values with train-split statistics; metrics are
    /// then reported in that normalized space.
    #[serde(default)]
    pub normalize_fields: Option<bool>,
    #[serde(default)]
    pub eval: EvalJson,
    #[serde(default)]
    pub design: Option<DesignJson>,
}

impl TaskConfig {
    pub fn load(path: &Path) -> Result<TaskConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })?;
        let cfg: TaskConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Schema { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match (self.task, self.processor.kind) {
            (TaskKind::Dynamics, ProcessorKind::Mlp) => Err(ConfigError::Invalid(
                "dynamics uses the node processor".into(),
            )),
            (TaskKind::Ivp | TaskKind::Geometry, ProcessorKind::Node) => Err(
                ConfigError::Invalid("ivp and geometry use the mlp processor".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn siren_config(&self, d_in: usize, d_out: usize) -> SirenConfig {
        SirenConfig {
            d_in,
            d_out,
            width: self.arch.width,
            depth: self.arch.depth,
            omega0: self.arch.omega0,
        }
    }

    /// Code statistics policy, defaulting per task: shared feature-wise
    /// stats for the initial-value task, shared feature-wise over all
    /// frames for dynamics, input-only for geometry.
    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode.map(NormModeJson::build).unwrap_or(match self.task {
            TaskKind::Ivp => NormMode::SharedFeaturewise,
            TaskKind::Dynamics => NormMode::SharedFeaturewise,
            TaskKind::Geometry => NormMode::InputOnly,
        })
    }

    /// Field-value normalization, defaulting per task: on for the PDE
    /// families whose metric is MSE on normalized data, off for geometry
    /// (relative L2 on raw values).
    pub fn normalize_fields(&self) -> bool {
        self.normalize_fields.unwrap_or(!matches!(self.task, TaskKind::Geometry))
    }
}
