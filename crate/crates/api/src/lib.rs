//! Wire types shared by the service and its client.

use std::path::PathBuf;

use coopadapt_core::config::ExperimentConfig;
use coopadapt_core::evaluation::EvalReport;
use coopadapt_core::synthgen::DomainProfile;
use coopadapt_core::training::EpochRecord;
use serde::{Deserialize, Serialize};

pub use coopadapt_core::training::AdaptMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Invalid configuration or request; the CLI maps it to exit code 2.
    Config,
    /// Failure while running; exit code 3.
    Runtime,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ApiError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSpec {
    Named(String),
    Inline(DomainProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub profile: ProfileSpec,
    pub frames: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub out: PathBuf,
    pub frames: usize,
    pub boxes: usize,
    pub profile_hash: String,
    pub warnings: Vec<String>,
}

/// Where a training job reads data and writes its run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLocation {
    /// Parent of the per-experiment run directories.
    pub runs_root: PathBuf,
    /// Continue an interrupted run from this checkpoint.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRequest {
    pub config: ExperimentConfig,
    pub location: RunLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRequest {
    pub method: AdaptKind,
    pub config: ExperimentConfig,
    /// Pretrained checkpoint to start from; `None` only with `train.allow_cold_start`.
    pub from: Option<PathBuf>,
    pub location: RunLocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptKind {
    Dusa,
    Discriminator,
    SelfTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub config: ExperimentConfig,
    pub from: Option<PathBuf>,
    pub location: RunLocation,
    pub lsa_gammas: Vec<f64>,
    pub cia_gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub id: u64,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }
}

/// One cell of a reversal-factor sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lsa_gamma: f64,
    pub cia_gamma: f64,
    pub checkpoint: PathBuf,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub final_checkpoint: Option<PathBuf>,
    pub epochs_completed: usize,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub sweep: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: String,
    pub state: JobState,
    pub run_dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub result: Option<JobResult>,
    pub error: Option<ApiError>,
}
