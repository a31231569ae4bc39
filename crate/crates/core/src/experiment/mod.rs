//! Config-driven experiment runner and the files it leaves behind.
//!
//! ```text
//! config.json        the configuration exactly as run (replayable)
//! rounds.jsonl       one RoundRecord per line
//! metrics.csv        per-round aggregates
//! assignments.jsonl  cluster assignment of each participant per round (clustered strategies)
//! scores.csv         anomaly scores (oneclass)
//! predictions.csv    public-set predictions (distill, oneshot)
//! personal/          client_<id>.bin personal parameters
//! run.json           wall-clock time, warnings, planted clusters, final metrics
//! summary.json       written by `report`
//! ```

mod config;
mod report;
mod runner;

pub use config::{ExperimentConfig, Hyperparams, ModelConfig, StrategyKind};
pub use report::{report, ResultsBundle, Summary};
pub use runner::{generate_data, run_experiment, RunInfo};

pub const CONFIG_FILE: &str = "config.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const PERSONAL_DIR: &str = "personal";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.json";
