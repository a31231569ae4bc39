#![allow(dead_code)]

use std::collections::BTreeMap;

use fedsim::data::{generate_federation, ClientData, Federation, FederationConfig, SkewKind};
use fedsim::engine::{
    run_round, FederationState, LocalHyper, RoundOptions, RoundOutcome, RoundRecord, Strategy,
};
use fedsim::model::{ModelSpec, ParamVector};
use fedsim::rng::derive_seed;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Random rows on the probability simplex, every entry strictly positive.
pub fn random_simplex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0));
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + h;
            let up = f(&probe);
            probe[j] = orig - h;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// components that vanish up to rounding from dominating the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn federation(
    clients: usize,
    k: usize,
    samples: usize,
    dim: usize,
    classes: usize,
    skew: SkewKind,
    seed: u64,
) -> Federation {
    generate_federation(&FederationConfig::new(
        clients, k, samples, dim, classes, skew, seed,
    ))
    .unwrap()
}

/// Runs `rounds` engine rounds and returns every record plus the final state.
#[allow(clippy::too_many_arguments)]
pub fn run_rounds<S: Strategy>(
    strategy: &mut S,
    fed: &Federation,
    spec: &ModelSpec,
    rounds: usize,
    hyper: LocalHyper,
    seed: u64,
    max_accesses: Option<usize>,
    parallel: bool,
) -> (Vec<RoundRecord>, FederationState) {
    let clients = fed.client_views();
    let tests = fed.test_views();
    let init = spec.init_params(derive_seed(seed, &[1]));
    let mut state = FederationState::new(
        vec![init],
        clients.iter().map(|c| c.client_id),
        max_accesses,
        seed,
    );
    let opts = RoundOptions {
        sample_fraction: 1.0,
        hyper,
        parallel,
    };
    let mut records = Vec::new();
    for _ in 0..rounds {
        match run_round(&mut state, strategy, &clients, &tests, spec, &opts).unwrap() {
            RoundOutcome::Completed(rec) => records.push(rec),
            RoundOutcome::Halted { .. } => break,
        }
    }
    (records, state)
}

/// All rows of the given clients as one dataset with weight 1.
pub fn pooled(clients: &[ClientData]) -> ClientData {
    let views: Vec<_> = clients.iter().map(|c| c.x.view()).collect();
    let x = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
    let y = clients.iter().flat_map(|c| c.y.iter().copied()).collect();
    ClientData::new(0, x, y, 1.0).unwrap()
}

pub fn purity(learned: &BTreeMap<usize, usize>, fed: &Federation) -> f64 {
    fedsim::metrics::cluster_purity(learned, &fed.true_clusters().unwrap())
}

/// Initial parameters plus uniform noise, so no ReLU sits exactly on its
/// kink (zero biases make that common for dead hidden units).
pub fn jittered_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut r = rng(seed ^ 0x5eed);
    let v = spec.init_params(seed).as_slice().iter().map(|w| w + r.random_range(-0.3..0.3)).collect();
    ParamVector::new(v).unwrap()
}

pub fn params(values: &[f64]) -> ParamVector {
    ParamVector::new(values.to_vec()).unwrap()
}
