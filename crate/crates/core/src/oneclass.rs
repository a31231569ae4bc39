//! One-class anomaly detection: autoencoders trained by FedAvg on normal
//! rows only and scored by reconstruction error.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_weights, ClientData, ClientDataset};
use crate::engine::{run_round, FedAvg, FederationState, RoundOptions, RoundOutcome};
use crate::error::{FlError, Result};
use crate::metrics::roc_auc;
use crate::model::{per_example_loss, Batch, LossKind, ModelKind, ModelSpec, ParamVector};

/// Per-dimension z-scoring with statistics fixed once for the federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Pooled mean and standard deviation over every row of every client.
    /// Constant dimensions get a unit scale.
    pub fn fit(clients: &[ClientData]) -> Result<Self> {
        let d = clients.first().map(ClientData::input_dim).ok_or_else(|| FlError::domain("no clients to fit"))?;
        let n: usize = clients.iter().map(ClientData::len).sum();
        if n == 0 {
            return Err(FlError::domain("no rows to fit"));
        }
        let mut sum = Array1::<f64>::zeros(d);
        for c in clients {
            if c.input_dim() != d {
                return Err(FlError::shape("clients disagree on feature count"));
            }
            sum += &c.x.sum_axis(Axis(0));
        }
        let mean = sum / n as f64;
        let mut sq = Array1::<f64>::zeros(d);
        for c in clients {
            for row in c.x.rows() {
                let r = &row - &mean;
                sq += &(&r * &r);
            }
        }
        let std = (sq / n as f64).mapv(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Ok(Standardizer { mean: mean.to_vec(), std: std.to_vec() })
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(FlError::shape("feature count differs from the fitted statistics"));
        }
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((&x - &mean) / &std)
    }

    pub fn apply_client(&self, c: &ClientData) -> Result<ClientData> {
        ClientData::new(c.client_id, self.apply(c.x.view())?, c.y.clone(), c.weight)
    }
}

fn require_autoencoder(spec: &ModelSpec) -> Result<()> {
    if spec.kind != ModelKind::Autoencoder {
        return Err(FlError::config("one-class detection needs an autoencoder"));
    }
    Ok(())
}

/// One FedAvg round on reconstruction loss. Training data must be free of
/// anomalous rows.
pub fn train_one_class_round(
    state: &mut FederationState,
    clients: &[ClientDataset],
    spec: &ModelSpec,
    opts: &RoundOptions,
) -> Result<RoundOutcome> {
    require_autoencoder(spec)?;
    if let Some(c) = clients.iter().find(|c| c.has_anomalies()) {
        return Err(FlError::ContractViolation(format!(
            "client {} has anomalous rows in its one-class training data",
            c.client_id()
        )));
    }
    let views: Vec<ClientData> = clients.iter().map(|c| c.data.clone()).collect();
    run_round(state, &mut FedAvg, &views, &[], spec, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Anomaly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub example_index: usize,
    /// Mean squared reconstruction error.
    pub score: f64,
    pub label_pred: Verdict,
}

/// Scores every row; a row is anomalous iff its score exceeds `threshold`.
pub fn score(spec: &ModelSpec, params: &ParamVector, x: ArrayView2<f64>, threshold: f64) -> Result<Vec<AnomalyScore>> {
    require_autoencoder(spec)?;
    if !(threshold >= 0.0) {
        return Err(FlError::domain("threshold must be non-negative"));
    }
    if x.nrows() == 0 {
        return Ok(Vec::new());
    }
    let errors = per_example_loss(spec, params, &Batch::unlabeled(x), LossKind::SquaredError)?;
    Ok(errors
        .into_iter()
        .enumerate()
        .map(|(i, s)| AnomalyScore {
            example_index: i,
            score: s,
            label_pred: if s > threshold { Verdict::Anomaly } else { Verdict::Normal },
        })
        .collect())
}

/// Empirical `(1 - target_fpr)` quantile of normal validation scores: the
/// smallest value with at least that share of scores at or below it.
pub fn calibrate_threshold(scores: &[f64], target_fpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(FlError::domain("no validation scores to calibrate on"));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(FlError::domain("target_fpr must lie in (0, 1)"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FlError::domain("validation scores must be finite"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((1.0 - target_fpr) * n as f64 - 1e-9).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Writes `example_index, score, label_pred, true_label`; the last column
/// is empty when ground truth is unknown.
pub fn write_scores_csv<W: Write>(scores: &[AnomalyScore], truth: Option<&[bool]>, out: W) -> Result<()> {
    if truth.is_some_and(|t| t.len() != scores.len()) {
        return Err(FlError::shape("one true label per score is required"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["example_index", "score", "label_pred", "true_label"])?;
    for (i, s) in scores.iter().enumerate() {
        let pred = match s.label_pred {
            Verdict::Normal => "normal",
            Verdict::Anomaly => "anomaly",
        };
        let truth = match truth.map(|t| t[i]) {
            Some(true) => "anomaly",
            Some(false) => "normal",
            None => "",
        };
        w.write_record([s.example_index.to_string(), format!("{:?}", s.score), pred.to_string(), truth.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Training and calibration inputs derived from a federation with anomaly
/// flags. Anomalous training rows are dropped (clients contribute normals
/// only), the tail of each client's normal rows is held out for threshold
/// calibration, and everything is z-scored with statistics of the
/// remaining training rows.
#[derive(Clone, Debug)]
pub struct OneClassData {
    pub train: Vec<ClientDataset>,
    pub calibration: Vec<ClientData>,
    pub tests: Vec<ClientDataset>,
    pub standardizer: Standardizer,
}

impl OneClassData {
    pub fn prepare(clients: &[ClientDataset], tests: &[ClientDataset], calibration_share: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&calibration_share) {
            return Err(FlError::domain("calibration_share must lie in [0, 1)"));
        }
        let mut train_views = Vec::with_capacity(clients.len());
        let mut calibration = Vec::new();
        for c in clients {
            let normal = c.normal_only().data;
            let n_cal = (normal.len() as f64 * calibration_share).round() as usize;
            let n_train = normal.len() - n_cal;
            if n_train == 0 {
                return Err(FlError::domain(format!("client {} has no normal rows to train on", c.client_id())));
            }
            train_views.push(normal.slice_rows(0, n_train));
            if n_cal > 0 {
                calibration.push(normal.slice_rows(n_train, normal.len()));
            }
        }
        normalize_weights(&mut train_views);
        let standardizer = Standardizer::fit(&train_views)?;
        let train = train_views
            .iter()
            .map(|c| Ok(ClientDataset::unlabeled_meta(standardizer.apply_client(c)?)))
            .collect::<Result<_>>()?;
        let calibration = calibration.iter().map(|c| standardizer.apply_client(c)).collect::<Result<_>>()?;
        let tests = tests
            .iter()
            .map(|t| ClientDataset::new(standardizer.apply_client(&t.data)?, t.true_cluster(), t.anomaly_flags().to_vec()))
            .collect::<Result<_>>()?;
        Ok(OneClassData { train, calibration, tests, standardizer })
    }
}

#[derive(Clone, Debug)]
pub struct OneClassEvaluation {
    pub threshold: f64,
    /// Per test client: its id, scores and true anomaly flags.
    pub scores: Vec<(usize, Vec<AnomalyScore>, Vec<bool>)>,
    /// `None` when the test rows are all normal or all anomalous.
    pub auc: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub true_positive_rate: Option<f64>,
}

/// Calibrates on the held-out normals (the training rows when none were
/// held out) and scores every test client.
pub fn evaluate_one_class(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &OneClassData,
    target_fpr: f64,
) -> Result<OneClassEvaluation> {
    let cal_source: Vec<&ClientData> = if data.calibration.is_empty() {
        data.train.iter().map(|c| &c.data).collect()
    } else {
        data.calibration.iter().collect()
    };
    let mut cal_scores = Vec::new();
    for c in cal_source {
        cal_scores.extend(score(spec, params, c.x.view(), 0.0)?.into_iter().map(|s| s.score));
    }
    let threshold = calibrate_threshold(&cal_scores, target_fpr)?;

    let mut scores = Vec::with_capacity(data.tests.len());
    let (mut all, mut flags) = (Vec::new(), Vec::new());
    for t in &data.tests {
        let s = score(spec, params, t.data.x.view(), threshold)?;
        all.extend(s.iter().map(|a| a.score));
        flags.extend_from_slice(t.anomaly_flags());
        scores.push((t.client_id(), s, t.anomaly_flags().to_vec()));
    }
    let auc = roc_auc(&all, &flags).ok();
    let rate = |want: bool| {
        let picked: Vec<bool> = all.iter().zip(&flags).filter(|(_, &f)| f == want).map(|(&s, _)| s > threshold).collect();
        (!picked.is_empty()).then(|| picked.iter().filter(|&&p| p).count() as f64 / picked.len() as f64)
    };
    Ok(OneClassEvaluation {
        threshold,
        scores,
        auc,
        false_positive_rate: rate(false),
        true_positive_rate: rate(true),
    })
}
