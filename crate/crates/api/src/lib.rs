//! Request and response bodies of the job service.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Eval,
    Bench,
    Profile,
    GradCheck,
}

impl JobRequest {
    pub fn new(kind: JobKind) -> Self {
        JobRequest {
            kind,
            config: BTreeMap::new(),
            options: BTreeMap::new(),
        }
    }
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobKind::Train => "train",
            JobKind::Eval => "eval",
            JobKind::Bench => "bench",
            JobKind::Profile => "profile",
            JobKind::GradCheck => "grad_check",
        })
    }
}

impl FromStr for JobKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "train" => JobKind::Train,
            "eval" => JobKind::Eval,
            "bench" => JobKind::Bench,
            "profile" => JobKind::Profile,
            "grad_check" | "grad-check" => JobKind::GradCheck,
            _ => return Err(format!("unknown job kind {s:?}")),
        })
    }
}

/// A job to run. `config` holds run-config keys (the same `key=value` pairs a
/// config file takes); `options` holds job-specific ones such as `resume`,
/// `checkpoint`, `batch_sizes` or `steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
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
    pub fn finished(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Number of records emitted so far.
    pub records: usize,
    pub error: Option<String>,
    pub result: Option<serde_json::Value>,
}

/// Records are text rows of space-separated `key=value` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPage {
    pub from: usize,
    pub records: Vec<String>,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}
