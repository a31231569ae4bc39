use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::RoundRecord;
use crate::error::{FlError, Result};
use crate::experiment::{ExperimentConfig, RunInfo, CONFIG_FILE, ROUNDS_FILE, RUN_FILE, SUMMARY_FILE};
use crate::metrics::cluster_purity;

/// A finished run as read back from its output directory.
#[derive(Clone, Debug)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub info: RunInfo,
}

fn read_required(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FlError::MissingArtifact(path.display().to_string()),
        _ => FlError::Io(e),
    })
}

impl ResultsBundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = ExperimentConfig::from_json(&read_required(dir, CONFIG_FILE)?)?;
        let info: RunInfo = serde_json::from_str(&read_required(dir, RUN_FILE)?)?;
        let records = read_required(dir, ROUNDS_FILE)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| FlError::Parse { line: i as u64 + 1, msg: e.to_string() })
            })
            .collect::<Result<Vec<RoundRecord>>>()?;
        if records.is_empty() {
            return Err(FlError::MissingArtifact(format!("{} has no round records", dir.join(ROUNDS_FILE).display())));
        }
        Ok(ResultsBundle { config, records, info })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub rounds_completed: usize,
    pub final_round: usize,
    pub global_loss: f64,
    pub mean_client_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_clusters: Option<usize>,
    /// Only when the federation carries planted clusters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_purity: Option<f64>,
    pub total_accesses: usize,
    pub warnings: Vec<String>,
    pub extras: BTreeMap<String, f64>,
    pub wall_clock_seconds: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Summary {
    pub fn from_bundle(bundle: &ResultsBundle) -> Self {
        let last = bundle.records.last().expect("bundle has records");
        let info = &bundle.info;
        let clustered = !info.final_assignments.is_empty();
        let num_clusters = clustered.then(|| {
            let mut ks: Vec<usize> = info.final_assignments.values().copied().collect();
            ks.sort_unstable();
            ks.dedup();
            ks.len()
        });
        let purity = match (&info.true_clusters, clustered) {
            (Some(truth), true) => Some(cluster_purity(&info.final_assignments, truth)),
            _ => None,
        };
        Summary {
            strategy: info.strategy.clone(),
            rounds_completed: info.rounds_completed,
            final_round: last.round,
            global_loss: last.global_loss,
            mean_client_loss: mean(last.per_client_loss.values().copied()).unwrap_or(f64::NAN),
            mean_accuracy: mean(last.per_client_accuracy.values().copied()),
            num_clusters,
            cluster_purity: purity,
            total_accesses: info.accesses_used.values().sum(),
            warnings: info.warnings.clone(),
            extras: info.extras.clone(),
            wall_clock_seconds: info.wall_clock_seconds,
        }
    }

    /// Aligned `key  value` lines.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("strategy".into(), self.strategy.clone()),
            ("rounds completed".into(), self.rounds_completed.to_string()),
            ("global loss".into(), format!("{:.6}", self.global_loss)),
            ("mean client loss".into(), format!("{:.6}", self.mean_client_loss)),
        ];
        if let Some(a) = self.mean_accuracy {
            rows.push(("mean accuracy".into(), format!("{a:.4}")));
        }
        if let Some(k) = self.num_clusters {
            rows.push(("clusters".into(), k.to_string()));
        }
        if let Some(p) = self.cluster_purity {
            rows.push(("cluster purity".into(), format!("{p:.4}")));
        }
        for (k, v) in &self.extras {
            rows.push((k.replace('_', " "), format!("{v:.4}")));
        }
        rows.push(("total accesses".into(), self.total_accesses.to_string()));
        rows.push(("wall clock (s)".into(), format!("{:.2}", self.wall_clock_seconds)));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Summarizes a finished run, writes `summary.json` next to it and returns
/// the summary together with its text rendering.
pub fn report(dir: impl AsRef<Path>) -> Result<(Summary, String)> {
    let dir = dir.as_ref();
    let bundle = ResultsBundle::load(dir)?;
    let summary = Summary::from_bundle(&bundle);
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    let text = summary.to_text();
    Ok((summary, text))
}
