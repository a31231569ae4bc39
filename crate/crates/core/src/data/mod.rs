//! Client datasets, synthetic non-IID federation generation and CSV storage.

mod csv_io;
mod store;
mod synth;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::model::{Batch, LossKind};

pub use csv_io::{load_csv, save_csv, write_csv};
pub use store::{load_federation_dir, save_federation_dir, FederationManifest, MANIFEST_FILE};
pub use synth::{class_means, generate_federation};

/// What a strategy sees of a participant: its examples and its weight `p_i`.
/// Planted-cluster metadata is deliberately absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub weight: f64,
}

impl ClientData {
    pub fn new(client_id: usize, x: Array2<f64>, y: Vec<usize>, weight: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(FlError::shape(format!(
                "client {client_id}: {} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(FlError::domain(format!("client {client_id}: weight must be positive")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlError::domain(format!("client {client_id}: non-finite feature")));
        }
        Ok(ClientData { client_id, x, y, weight })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Full-dataset batch with targets appropriate for `loss`.
    pub fn batch(&self, loss: LossKind) -> Batch<'_> {
        match loss {
            LossKind::SquaredError => Batch::unlabeled(self.x.view()),
            _ => Batch::labeled(self.x.view(), &self.y),
        }
    }

    /// Rows `[start, end)` as a new dataset with the same id and weight.
    pub fn slice_rows(&self, start: usize, end: usize) -> ClientData {
        ClientData {
            client_id: self.client_id,
            x: self.x.slice(ndarray::s![start..end, ..]).to_owned(),
            y: self.y[start..end].to_vec(),
            weight: self.weight,
        }
    }

    pub(crate) fn select_rows(&self, rows: &[usize]) -> ClientData {
        ClientData {
            client_id: self.client_id,
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            weight: self.weight,
        }
    }
}

/// A generated or loaded client dataset together with simulator-only
/// metadata (planted cluster, anomaly flags).
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub data: ClientData,
    true_cluster: Option<usize>,
    anomaly: Vec<bool>,
}

impl ClientDataset {
    pub fn new(data: ClientData, true_cluster: Option<usize>, anomaly: Vec<bool>) -> Result<Self> {
        if anomaly.len() != data.len() {
            return Err(FlError::shape("anomaly flags must cover every row"));
        }
        Ok(ClientDataset { data, true_cluster, anomaly })
    }

    pub fn unlabeled_meta(data: ClientData) -> Self {
        let anomaly = vec![false; data.len()];
        ClientDataset { data, true_cluster: None, anomaly }
    }

    pub fn client_id(&self) -> usize {
        self.data.client_id
    }

    pub fn true_cluster(&self) -> Option<usize> {
        self.true_cluster
    }

    pub fn anomaly_flags(&self) -> &[bool] {
        &self.anomaly
    }

    pub fn has_anomalies(&self) -> bool {
        self.anomaly.iter().any(|&a| a)
    }

    /// Copy without the anomalous rows.
    pub fn normal_only(&self) -> ClientDataset {
        let keep: Vec<usize> = (0..self.data.len()).filter(|&i| !self.anomaly[i]).collect();
        ClientDataset {
            data: self.data.select_rows(&keep),
            true_cluster: self.true_cluster,
            anomaly: vec![false; keep.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkewKind {
    FeatureShift,
    LabelSwap,
    LabelSkew,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCount {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl SampleCount {
    pub fn min(&self) -> usize {
        match *self {
            SampleCount::Fixed(n) => n,
            SampleCount::Range { min, .. } => min,
        }
    }
}

fn default_separation() -> f64 {
    3.0
}

fn default_public_size() -> usize {
    200
}

fn default_test_samples() -> usize {
    200
}

fn default_dirichlet_alpha() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub num_clusters: usize,
    pub samples_per_client: SampleCount,
    pub input_dim: usize,
    pub num_classes: usize,
    pub skew_kind: SkewKind,
    #[serde(default)]
    pub anomaly_fraction: f64,
    pub seed: u64,
    /// Distance between class-conditional means, in units of the
    /// within-class standard deviation.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_dirichlet_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_test_samples")]
    pub test_samples_per_client: usize,
    #[serde(default = "default_public_size")]
    pub public_size: usize,
}

impl FederationConfig {
    pub fn new(
        num_clients: usize,
        num_clusters: usize,
        samples_per_client: usize,
        input_dim: usize,
        num_classes: usize,
        skew_kind: SkewKind,
        seed: u64,
    ) -> Self {
        FederationConfig {
            num_clients,
            num_clusters,
            samples_per_client: SampleCount::Fixed(samples_per_client),
            input_dim,
            num_classes,
            skew_kind,
            anomaly_fraction: 0.0,
            seed,
            separation: default_separation(),
            dirichlet_alpha: default_dirichlet_alpha(),
            test_samples_per_client: default_test_samples(),
            public_size: default_public_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 1 || self.num_clients < self.num_clusters {
            return Err(FlError::config("need num_clients >= num_clusters >= 1"));
        }
        if self.num_classes < 2 {
            return Err(FlError::config("num_classes must be at least 2"));
        }
        if self.input_dim < self.num_classes {
            return Err(FlError::config("input_dim must be at least num_classes"));
        }
        match self.samples_per_client {
            SampleCount::Fixed(n) if n < 2 => {
                return Err(FlError::config("samples_per_client must be at least 2"))
            }
            SampleCount::Range { min, max } if min < 2 || max < min => {
                return Err(FlError::config("samples_per_client range must satisfy 2 <= min <= max"))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.anomaly_fraction) {
            return Err(FlError::config("anomaly_fraction must lie in [0, 1)"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(FlError::config("separation must be positive"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(FlError::config("dirichlet_alpha must be positive"));
        }
        if self.test_samples_per_client == 0 || self.public_size == 0 {
            return Err(FlError::config("test and public sets must be nonempty"));
        }
        Ok(())
    }
}

/// Shared unlabeled pool used for distillation. Labels are kept for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct PublicSet {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    pub clients: Vec<ClientDataset>,
    /// Held-out examples from each client's distribution, same order as `clients`.
    pub tests: Vec<ClientDataset>,
    pub public: PublicSet,
    pub num_classes: usize,
}

impl Federation {
    /// Training views handed to strategies.
    pub fn client_views(&self) -> Vec<ClientData> {
        self.clients.iter().map(|c| c.data.clone()).collect()
    }

    pub fn test_views(&self) -> Vec<ClientData> {
        self.tests.iter().map(|c| c.data.clone()).collect()
    }

    pub fn true_clusters(&self) -> Option<std::collections::BTreeMap<usize, usize>> {
        self.clients
            .iter()
            .map(|c| c.true_cluster().map(|k| (c.client_id(), k)))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.public.x.ncols()
    }
}

/// Sets `weight = |D_i| / sum_j |D_j|`.
pub fn normalize_weights(clients: &mut [ClientData]) {
    let total: usize = clients.iter().map(ClientData::len).sum();
    for c in clients.iter_mut() {
        c.weight = c.len() as f64 / total as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_data_validation() {
        assert!(ClientData::new(0, Array2::zeros((3, 2)), vec![0, 1], 1.0).is_err());
        assert!(ClientData::new(0, Array2::zeros((2, 2)), vec![0, 1], 0.0).is_err());
        assert!(ClientData::new(0, Array2::zeros((2, 2)), vec![0, 1], 0.5).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = FederationConfig::new(4, 2, 10, 3, 2, SkewKind::LabelSwap, 1);
        assert!(c.validate().is_ok());
        c.num_clusters = 5;
        assert!(c.validate().is_err());
        c.num_clusters = 2;
        c.samples_per_client = SampleCount::Fixed(1);
        assert!(c.validate().is_err());
        c.samples_per_client = SampleCount::Range { min: 5, max: 3 };
        assert!(c.validate().is_err());
        c.samples_per_client = SampleCount::Fixed(5);
        c.anomaly_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sample_count_parses_number_or_range() {
        let f: SampleCount = serde_json::from_str("12").unwrap();
        assert_eq!(f, SampleCount::Fixed(12));
        let r: SampleCount = serde_json::from_str(r#"{"min": 3, "max": 9}"#).unwrap();
        assert_eq!(r, SampleCount::Range { min: 3, max: 9 });
    }
}
