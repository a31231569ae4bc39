//! Directory layout for a saved federation:
//!
//! ```text
//! federation.json      manifest (sizes, optional planted clusters, anomaly rows)
//! client_<id>.csv      training rows
//! test_<id>.csv        held-out rows
//! public.csv           shared pool, stored under client id `num_clients`
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, normalize_weights, save_csv, ClientData, ClientDataset, Federation, PublicSet};
use crate::error::{FlError, Result};

pub const MANIFEST_FILE: &str = "federation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationManifest {
    pub num_clients: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_clusters: Option<BTreeMap<usize, usize>>,
    #[serde(default)]
    pub train_anomalies: BTreeMap<usize, Vec<usize>>,
    #[serde(default)]
    pub test_anomalies: BTreeMap<usize, Vec<usize>>,
}

fn anomaly_rows(ds: &ClientDataset) -> Vec<usize> {
    ds.anomaly_flags().iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

pub fn save_federation_dir(fed: &Federation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = FederationManifest {
        num_clients: fed.clients.len(),
        input_dim: fed.input_dim(),
        num_classes: fed.num_classes,
        true_clusters: fed.true_clusters(),
        train_anomalies: fed
            .clients
            .iter()
            .map(|c| (c.client_id(), anomaly_rows(c)))
            .filter(|(_, rows)| !rows.is_empty())
            .collect(),
        test_anomalies: fed
            .tests
            .iter()
            .map(|c| (c.client_id(), anomaly_rows(c)))
            .filter(|(_, rows)| !rows.is_empty())
            .collect(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    for c in &fed.clients {
        save_csv(&c.data, dir.join(format!("client_{}.csv", c.client_id())))?;
    }
    for t in &fed.tests {
        save_csv(&t.data, dir.join(format!("test_{}.csv", t.client_id())))?;
    }
    let public = ClientData::new(manifest.num_clients, fed.public.x.clone(), fed.public.labels.clone(), 1.0)?;
    save_csv(&public, dir.join("public.csv"))?;
    Ok(())
}

fn with_meta(
    data: ClientData,
    manifest: &FederationManifest,
    anomalies: &BTreeMap<usize, Vec<usize>>,
) -> Result<ClientDataset> {
    let mut flags = vec![false; data.len()];
    for &row in anomalies.get(&data.client_id).into_iter().flatten() {
        *flags.get_mut(row).ok_or_else(|| {
            FlError::config(format!("anomaly row {row} out of range for client {}", data.client_id))
        })? = true;
    }
    let cluster = manifest.true_clusters.as_ref().and_then(|m| m.get(&data.client_id).copied());
    ClientDataset::new(data, cluster, flags)
}

pub fn load_federation_dir(dir: impl AsRef<Path>) -> Result<Federation> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(FlError::MissingArtifact(manifest_path.display().to_string()));
    }
    let manifest: FederationManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;

    let mut train = Vec::with_capacity(manifest.num_clients);
    let mut tests = Vec::with_capacity(manifest.num_clients);
    for id in 0..manifest.num_clients {
        let data = load_csv(dir.join(format!("client_{id}.csv")))?;
        if data.client_id != id || data.input_dim() != manifest.input_dim {
            return Err(FlError::config(format!("client_{id}.csv does not match the manifest")));
        }
        train.push(data);
        let test_path = dir.join(format!("test_{id}.csv"));
        let test = if test_path.exists() { load_csv(test_path)? } else { train[id].clone() };
        tests.push(test);
    }
    normalize_weights(&mut train);
    for t in tests.iter_mut() {
        t.weight = 1.0 / manifest.num_clients as f64;
    }
    let public = load_csv(dir.join("public.csv"))?;

    Ok(Federation {
        clients: train
            .into_iter()
            .map(|d| with_meta(d, &manifest, &manifest.train_anomalies))
            .collect::<Result<_>>()?,
        tests: tests
            .into_iter()
            .map(|d| with_meta(d, &manifest, &manifest.test_anomalies))
            .collect::<Result<_>>()?,
        public: PublicSet { x: public.x, labels: public.y },
        num_classes: manifest.num_classes,
    })
}
