use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::data::{ClientData, ClientDataset, Federation, FederationConfig, PublicSet, SampleCount, SkewKind};
use crate::error::{FlError, Result};
use crate::rng::{derive_seed, rng_from, tags, SimRng};

/// Class-conditional means: `separation / sqrt(2)` along axis `c`, centered
/// so that any two class means are exactly `separation` apart.
pub fn class_means(num_classes: usize, input_dim: usize, separation: f64) -> Array2<f64> {
    let scale = separation / std::f64::consts::SQRT_2;
    let mut means = Array2::zeros((num_classes, input_dim));
    for c in 0..num_classes {
        means[[c, c]] = scale;
    }
    let centroid = scale / num_classes as f64;
    for c in 0..num_classes {
        for j in 0..num_classes {
            means[[c, j]] -= centroid;
        }
    }
    means
}

struct ClusterModel {
    means: Array2<f64>,
    shifts: Vec<Array1<f64>>,
    num_classes: usize,
    skew: SkewKind,
}

impl ClusterModel {
    fn new(cfg: &FederationConfig) -> Self {
        let means = class_means(cfg.num_classes, cfg.input_dim, cfg.separation);
        let mut rng = rng_from(derive_seed(cfg.seed, &[tags::INIT]));
        let shifts = (0..cfg.num_clusters)
            .map(|k| {
                if k == 0 || cfg.skew_kind != SkewKind::FeatureShift {
                    return Array1::zeros(cfg.input_dim);
                }
                let dir = Array1::from_shape_fn(cfg.input_dim, |_| -> f64 { StandardNormal.sample(&mut rng) });
                let norm = dir.dot(&dir).sqrt().max(1e-12);
                dir * (cfg.separation / norm)
            })
            .collect();
        ClusterModel { means, shifts, num_classes: cfg.num_classes, skew: cfg.skew_kind }
    }

    /// One unit-variance sample for `label` as seen by cluster `k`.
    fn sample(&self, k: usize, label: usize, rng: &mut SimRng) -> Array1<f64> {
        let mean_row = match self.skew {
            SkewKind::LabelSwap => (label + k) % self.num_classes,
            _ => label,
        };
        let mean = self.means.row(mean_row);
        let noise = Array1::from_shape_fn(mean.len(), |_| -> f64 { StandardNormal.sample(rng) });
        &mean + &self.shifts[k] + noise
    }
}

fn dirichlet(alpha: f64, dim: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

fn draw_label(prior: Option<&[f64]>, num_classes: usize, rng: &mut SimRng) -> usize {
    match prior {
        None => rng.random_range(0..num_classes),
        Some(p) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    return c;
                }
            }
            num_classes - 1
        }
    }
}

/// Draws `n` rows for one client; the first `round(fraction * n)` row
/// positions chosen at random become off-manifold anomalies.
fn draw_rows(
    model: &ClusterModel,
    cfg: &FederationConfig,
    k: usize,
    n: usize,
    prior: Option<&[f64]>,
    rng: &mut SimRng,
) -> (Array2<f64>, Vec<usize>, Vec<bool>) {
    let mut x = Array2::zeros((n, cfg.input_dim));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = draw_label(prior, cfg.num_classes, rng);
        x.row_mut(i).assign(&model.sample(k, label, rng));
        y.push(label);
    }
    let mut anomaly = vec![false; n];
    let n_anom = (cfg.anomaly_fraction * n as f64).round() as usize;
    if n_anom > 0 {
        let rows = rand::seq::index::sample(rng, n, n_anom.min(n));
        for r in rows.iter() {
            anomaly[r] = true;
            for v in x.row_mut(r).iter_mut() {
                *v += rng.random_range(-5.0..=5.0);
            }
        }
    }
    (x, y, anomaly)
}

/// Builds a federation whose clients are assigned round-robin to
/// `num_clusters` planted distributions.
pub fn generate_federation(cfg: &FederationConfig) -> Result<Federation> {
    cfg.validate()?;
    let model = ClusterModel::new(cfg);

    let mut raw = Vec::with_capacity(cfg.num_clients);
    let mut tests = Vec::with_capacity(cfg.num_clients);
    for client in 0..cfg.num_clients {
        let k = client % cfg.num_clusters;
        let mut rng = rng_from(derive_seed(cfg.seed, &[tags::DATA, client as u64]));
        let n = match cfg.samples_per_client {
            SampleCount::Fixed(n) => n,
            SampleCount::Range { min, max } => rng.random_range(min..=max),
        };
        let prior = (cfg.skew_kind == SkewKind::LabelSkew)
            .then(|| dirichlet(cfg.dirichlet_alpha, cfg.num_classes, &mut rng));
        let train = draw_rows(&model, cfg, k, n, prior.as_deref(), &mut rng);
        let mut test_rng = rng_from(derive_seed(cfg.seed, &[tags::TEST, client as u64]));
        let test = draw_rows(&model, cfg, k, cfg.test_samples_per_client, prior.as_deref(), &mut test_rng);
        raw.push((client, k, train));
        tests.push((client, k, test));
    }

    let total: usize = raw.iter().map(|(_, _, (x, _, _))| x.nrows()).sum();
    let clients = raw
        .into_iter()
        .map(|(id, k, (x, y, anomaly))| {
            let w = x.nrows() as f64 / total as f64;
            ClientDataset::new(ClientData::new(id, x, y, w)?, Some(k), anomaly)
        })
        .collect::<Result<Vec<_>>>()?;
    let tests = tests
        .into_iter()
        .map(|(id, k, (x, y, anomaly))| {
            let w = 1.0 / cfg.num_clients as f64;
            ClientDataset::new(ClientData::new(id, x, y, w)?, Some(k), anomaly)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = rng_from(derive_seed(cfg.seed, &[tags::PUBLIC]));
    let mut px = Array2::zeros((cfg.public_size, cfg.input_dim));
    let mut labels = Vec::with_capacity(cfg.public_size);
    for i in 0..cfg.public_size {
        let k = rng.random_range(0..cfg.num_clusters);
        let label = rng.random_range(0..cfg.num_classes);
        px.row_mut(i).assign(&model.sample(k, label, &mut rng));
        labels.push(label);
    }
    if px.iter().any(|v| !v.is_finite()) {
        return Err(FlError::domain("generated non-finite public features"));
    }

    Ok(Federation { clients, tests, public: PublicSet { x: px, labels }, num_classes: cfg.num_classes })
}
