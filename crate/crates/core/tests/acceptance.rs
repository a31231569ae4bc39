//! Acceptance checks. Run with `cargo test -p fedsim --test acceptance`;
//! prints one PASS/FAIL line per criterion and exits nonzero on failure.

#![allow(clippy::type_complexity)]

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use fedsim::cluster::{hierarchical_split, Hypothesis, MultiCenter, SimilarityMatrix};
use fedsim::data::{ClientData, SkewKind};
use fedsim::distill::{
    distill_loss_and_grad, one_shot_ensemble, public_predictions, HeteroModelRegistry,
};
use fedsim::engine::{
    run_round, weighted_average, FedAvg, FederationState, LocalHyper, RoundOptions, RoundOutcome,
};
use fedsim::experiment::{run_experiment, ExperimentConfig, CONFIG_FILE, ROUNDS_FILE};
use fedsim::metrics::accuracy;
use fedsim::model::{
    forward, loss_and_grad, mean_loss, sgd_train, steps_for_epochs, Activation, Batch, LossKind,
    ModelSpec, Objective, ParamVector, SgdConfig,
};
use fedsim::personal::{
    finetune_baseline, meta_loss_grad, mixture_train, one_step_meta_loss_grad, proximal_minimize,
    proximal_personalize, Mixture, PersonalizationHyper, Proximal,
};
use fedsim::Result;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let mut rng = rng(11);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let pairs: Vec<(
        &str,
        Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> ModelSpec>,
        bool,
    )> = vec![
        (
            "logistic/ce",
            Box::new(|r| ModelSpec::logistic(r.random_range(2..6), r.random_range(2..5)).unwrap()),
            false,
        ),
        (
            "logistic/soft-kl",
            Box::new(|r| ModelSpec::logistic(r.random_range(2..6), r.random_range(2..5)).unwrap()),
            true,
        ),
        (
            "mlp-relu/ce",
            Box::new(|r| random_mlp(r, Activation::Relu)),
            false,
        ),
        (
            "mlp-tanh/ce",
            Box::new(|r| random_mlp(r, Activation::Tanh)),
            false,
        ),
        (
            "mlp-relu/soft-kl",
            Box::new(|r| random_mlp(r, Activation::Relu)),
            true,
        ),
        (
            "mlp-tanh/soft-kl",
            Box::new(|r| random_mlp(r, Activation::Tanh)),
            true,
        ),
        (
            "autoencoder-relu/mse",
            Box::new(|r| random_autoencoder(r, Activation::Relu)),
            false,
        ),
        (
            "autoencoder-tanh/mse",
            Box::new(|r| random_autoencoder(r, Activation::Tanh)),
            false,
        ),
    ];
    for (name, make, soft) in &pairs {
        for _ in 0..3 {
            let spec = make(&mut rng);
            let err = gradient_instance(&mut rng, &spec, *soft);
            ensure(err < 1e-4, || format!("{name}: relative error {err:.2e}"))?;
            worst = worst.max(err);
            instances += 1;
        }
    }
    Ok(format!(
        "{instances} instances over {} spec/loss pairs, max relative error {worst:.2e}",
        pairs.len()
    ))
}

fn random_mlp(r: &mut rand_chacha::ChaCha8Rng, act: Activation) -> ModelSpec {
    let depth = r.random_range(1..=3);
    let mut dims = vec![r.random_range(2..6)];
    dims.extend((0..depth).map(|_| r.random_range(2..7)));
    dims.push(r.random_range(2..5));
    ModelSpec::mlp(&dims, act).unwrap()
}

fn random_autoencoder(r: &mut rand_chacha::ChaCha8Rng, act: Activation) -> ModelSpec {
    let d = r.random_range(3..7);
    let h = r.random_range(1..d);
    ModelSpec::autoencoder(&[d, h, d], act).unwrap()
}

fn gradient_instance(rng: &mut rand_chacha::ChaCha8Rng, spec: &ModelSpec, soft: bool) -> f64 {
    let n = 6;
    let x = random_matrix(rng, n, spec.input_dim(), 2.0);
    let y: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..spec.output_dim()))
        .collect();
    let probs = random_simplex(rng, n, spec.output_dim());
    let temperature = rng.random_range(0.5..4.0);
    let (batch, loss) = if !spec.is_classifier() {
        (Batch::unlabeled(x.view()), LossKind::SquaredError)
    } else if soft {
        (
            Batch::soft(x.view(), probs.view()),
            LossKind::SoftKl { temperature },
        )
    } else {
        (Batch::labeled(x.view(), &y), LossKind::CrossEntropy)
    };
    let mut params = spec.init_params(rng.random());
    // push biases away from zero so the check is not special-cased
    let values: Vec<f64> = params
        .as_slice()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    params = ParamVector::new(values).unwrap();
    let (_, g) = loss_and_grad(spec, &params, &batch, loss).unwrap();
    let numeric = numeric_grad(
        |w| mean_loss(spec, &ParamVector::new(w.to_vec()).unwrap(), &batch, loss).unwrap(),
        params.as_slice(),
        1e-5,
    );
    max_rel_err(g.as_slice(), &numeric, 1e-4)
}

// 2 -------------------------------------------------------------------------

fn aggregation_oracle() -> Outcome {
    let mut rng = rng(22);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let m = rng.random_range(1..8);
        let len = rng.random_range(1..20);
        let vecs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..len).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..10.0)).collect();
        let pvs: Vec<ParamVector> = vecs.iter().map(|v| params(v)).collect();
        let entries: Vec<(&ParamVector, f64)> =
            pvs.iter().zip(&weights).map(|(p, &w)| (p, w)).collect();
        let got = weighted_average(&entries).unwrap();
        let total: f64 = weights.iter().sum();
        for (j, &g) in got.as_slice().iter().enumerate() {
            let oracle: f64 = vecs.iter().zip(&weights).map(|(v, w)| w * v[j]).sum::<f64>() / total;
            let err = (g - oracle).abs();
            worst = worst.max(err);
            ensure(err <= 1e-12, || {
                format!("case {case}: component {j} off by {err:e}")
            })?;
        }

        // power-of-two rescaling is exact for any real weights
        let k: i32 = rng.random_range(-20..20);
        let scaled: Vec<(&ParamVector, f64)> = entries
            .iter()
            .map(|&(p, w)| (p, w * 2f64.powi(k)))
            .collect();
        ensure(weighted_average(&scaled).unwrap() == got, || {
            format!("case {case}: scaling by 2^{k} changed the result")
        })?;

        // integer weights times an integer factor are exact too
        let int_w: Vec<f64> = (0..m).map(|_| rng.random_range(1..1000) as f64).collect();
        let c = rng.random_range(2..1000) as f64;
        let a: Vec<(&ParamVector, f64)> = pvs.iter().zip(&int_w).map(|(p, &w)| (p, w)).collect();
        let b: Vec<(&ParamVector, f64)> =
            pvs.iter().zip(&int_w).map(|(p, &w)| (p, c * w)).collect();
        ensure(
            weighted_average(&a).unwrap() == weighted_average(&b).unwrap(),
            || format!("case {case}: integer rescaling by {c} changed the result"),
        )?;
    }
    let u = params(&[0.1, -3.7, 12.25]);
    let v = params(&[-0.4, 2.2, 1e-3]);
    ensure(
        weighted_average(&[(&u, 1.0), (&v, 3.0)]).unwrap()
            == weighted_average(&[(&u, 2.0), (&v, 6.0)]).unwrap(),
        || "weights (1, 3) and (2, 6) disagree".into(),
    )?;
    Ok(format!(
        "100 random cases, max abs error {worst:.1e}; rescaling exact"
    ))
}

// 3 -------------------------------------------------------------------------

fn fedavg_sanity() -> Outcome {
    let mut gaps = Vec::new();
    for seed in 1..=5 {
        let fed = federation(10, 1, 200, 10, 3, SkewKind::FeatureShift, seed);
        let spec = ModelSpec::logistic(10, 3).unwrap();
        let hyper = LocalHyper::default();
        let (_, state) = run_rounds(&mut FedAvg, &fed, &spec, 30, hyper, seed, None, false);
        let test = pooled(&fed.test_views());
        let fed_acc = accuracy(
            &forward(&spec, &state.global_params[0], test.x.view()).unwrap(),
            &test.y,
        );

        let train = pooled(&fed.client_views());
        let init = spec.init_params(fedsim::rng::derive_seed(seed, &[1]));
        let steps = steps_for_epochs(train.len(), hyper.batch_size, 30);
        let central = sgd_train(
            &spec,
            &init,
            &train,
            steps,
            hyper.lr,
            hyper.batch_size,
            seed,
        )
        .unwrap();
        let central_acc = accuracy(&forward(&spec, &central, test.x.view()).unwrap(), &test.y);
        let gap = (fed_acc - central_acc).abs();
        ensure(gap <= 0.02, || {
            format!("seed {seed}: fedavg {fed_acc:.4} vs centralized {central_acc:.4}")
        })?;
        gaps.push(gap);
    }
    let max = gaps.iter().copied().fold(0.0, f64::max);
    Ok(format!(
        "5 seeds, largest accuracy gap {:.2} points",
        100.0 * max
    ))
}

// 4 -------------------------------------------------------------------------

fn clustered_recovery() -> Outcome {
    let mut purities: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 1..=5 {
        let fed = federation(20, 2, 100, 6, 3, SkewKind::LabelSwap, seed);
        let spec = ModelSpec::logistic(6, 3).unwrap();
        let hyper = LocalHyper::default();
        let (_, st) = run_rounds(
            &mut MultiCenter::new(2).unwrap(),
            &fed,
            &spec,
            30,
            hyper,
            seed,
            None,
            false,
        );
        purities
            .entry("multicenter")
            .or_default()
            .push(purity(&st.assignments, &fed));
        let (_, st) = run_rounds(
            &mut Hypothesis::new(2).unwrap(),
            &fed,
            &spec,
            30,
            hyper,
            seed,
            None,
            false,
        );
        purities
            .entry("hypothesis")
            .or_default()
            .push(purity(&st.assignments, &fed));
    }
    for (name, ps) in &purities {
        if let Some((i, p)) = ps.iter().enumerate().find(|(_, &p)| p < 0.9) {
            return Err(format!("{name} purity {p:.3} on seed {}", i + 1));
        }
    }

    let mut rng = rng(44);
    for case in 0..50 {
        let (sim, planted) = planted_similarity(&mut rng);
        let found = hierarchical_split(&sim, 0.0, 2);
        ensure(found == planted, || {
            format!("block case {case}: planted {planted:?}, found {found:?}")
        })?;
    }
    let min = |name: &str| purities[name].iter().copied().fold(1.0, f64::min);
    Ok(format!(
        "min purity multicenter {:.2}, hypothesis {:.2}; 50/50 planted block structures recovered",
        min("multicenter"),
        min("hypothesis")
    ))
}

/// Cosine similarities of noisy updates drawn around 2 to 4 block
/// directions with pairwise negative cosine, clients shuffled.
pub fn planted_similarity(
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (SimilarityMatrix, Vec<Vec<usize>>) {
    let blocks = rng.random_range(2..=4);
    let sizes: Vec<usize> = (0..blocks).map(|_| rng.random_range(2..=6)).collect();
    let n: usize = sizes.iter().sum();
    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    let dim = blocks + 3;
    let mut updates = vec![ParamVector::zeros(dim); n];
    let mut planted = Vec::new();
    let mut next = 0;
    for (b, &size) in sizes.iter().enumerate() {
        let mut members = Vec::new();
        for _ in 0..size {
            let id = ids[next];
            next += 1;
            let scale = rng.random_range(0.5..3.0);
            let v: Vec<f64> = (0..dim)
                .map(|j| {
                    let base = if j < blocks {
                        f64::from(u8::from(j == b)) - 1.0 / blocks as f64
                    } else {
                        0.0
                    };
                    scale * (base + rng.random_range(-0.03..0.03))
                })
                .collect();
            updates[id] = params(&v);
            members.push(id);
        }
        members.sort_unstable();
        planted.push(members);
    }
    planted.sort_by_key(|g| g[0]);
    (SimilarityMatrix::from_updates(&updates).unwrap(), planted)
}

// 5 -------------------------------------------------------------------------

fn reduction_identities() -> Outcome {
    let fed = federation(8, 2, 60, 5, 3, SkewKind::LabelSwap, 5);
    let spec = ModelSpec::mlp(&[5, 6, 3], Activation::Tanh).unwrap();
    let hyper = LocalHyper {
        lr: 0.1,
        local_epochs: 1,
        batch_size: 8,
    };

    let (fa, fa_state) = run_rounds(&mut FedAvg, &fed, &spec, 8, hyper, 5, None, false);
    let (mc, mc_state) = run_rounds(
        &mut MultiCenter::new(1).unwrap(),
        &fed,
        &spec,
        8,
        hyper,
        5,
        None,
        false,
    );
    ensure(
        fa == mc && fa_state.global_params == mc_state.global_params,
        || "multicenter K=1 diverged from FedAvg".into(),
    )?;

    let zero = PersonalizationHyper {
        lambda: 0.0,
        ..PersonalizationHyper::default()
    };
    let (mx, mx_state) = run_rounds(
        &mut Mixture::new(zero).unwrap(),
        &fed,
        &spec,
        8,
        hyper,
        5,
        None,
        false,
    );
    ensure(
        fa == mx && fa_state.global_params == mx_state.global_params,
        || "mixture lambda=0 diverged from FedAvg".into(),
    )?;

    let clients = fed.client_views();
    let global = &fa_state.global_params[0];
    for c in &clients {
        let cfg = SgdConfig {
            steps: 30,
            lr: 0.1,
            batch_size: 8,
            seed: 9 + c.client_id as u64,
        };
        let personal = spec.init_params(77);
        let (w, _) = mixture_train(c, &spec, global, &personal, 0.0, &cfg).unwrap();
        let plain = sgd_train(
            &spec,
            global,
            c,
            cfg.steps,
            cfg.lr,
            cfg.batch_size,
            cfg.seed,
        )
        .unwrap();
        ensure(w == plain, || {
            format!(
                "client {}: mixture lambda=0 global path differs from local SGD",
                c.client_id
            )
        })?;

        let prox = proximal_personalize(c, &spec, global, 0.0, 0.1, 40, 8, cfg.seed).unwrap();
        let tuned = finetune_baseline(c, &spec, global, 0.1, 40, 8, cfg.seed).unwrap();
        ensure(prox == tuned, || {
            format!(
                "client {}: proximal lambda=0 differs from fine-tuning",
                c.client_id
            )
        })?;
    }
    let (px, px_state) = run_rounds(
        &mut Proximal::new(zero).unwrap(),
        &fed,
        &spec,
        8,
        hyper,
        5,
        None,
        false,
    );
    ensure(px_state.global_params == fa_state.global_params, || {
        "proximal global path diverged from FedAvg".into()
    })?;
    ensure(px.len() == fa.len(), || {
        "proximal run length differs".into()
    })?;

    let public = &fed.public.x;
    for c in &clients {
        let p = spec.init_params(c.client_id as u64);
        let own = public_predictions(&spec, &p, public.view(), c.client_id, 0).unwrap();
        let (_, g) = distill_loss_and_grad(&spec, &p, public.view(), &own, c, 0.0, 1.0).unwrap();
        ensure(g.as_slice().iter().all(|&v| v == 0.0), || {
            format!("client {}: self-distillation gradient nonzero", c.client_id)
        })?;
    }
    Ok("multicenter K=1, mixture lambda=0 and proximal lambda=0 bit-identical; self-consensus gradient exactly 0".into())
}

// 6 -------------------------------------------------------------------------

/// `0.5 * ||w||^2` repeated over a few identical examples.
struct HalfNorm {
    dim: usize,
}

impl Objective for HalfNorm {
    fn num_examples(&self) -> usize {
        4
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn loss_and_grad(&self, w: &[f64], _: &[usize]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * w.iter().map(|v| v * v).sum::<f64>(), w.to_vec()))
    }
}

fn proximal_quadratic() -> Outcome {
    let mut rng = rng(66);
    let anchor: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut worst: f64 = 0.0;
    for lambda in [0.1, 1.0, 10.0, 1e6] {
        let cfg = SgdConfig {
            steps: 400,
            lr: 0.5,
            batch_size: 2,
            seed: 0,
        };
        let w = proximal_minimize(&HalfNorm { dim: 5 }, &anchor, lambda, &cfg).unwrap();
        for (wi, ai) in w.iter().zip(&anchor) {
            let err = (wi - lambda * ai / (1.0 + lambda)).abs();
            worst = worst.max(err);
            ensure(err <= 1e-6, || format!("lambda {lambda}: off by {err:e}"))?;
        }
    }
    Ok(format!(
        "lambda in {{0.1, 1, 10, 1e6}}, max error {worst:.1e}"
    ))
}

// 7 -------------------------------------------------------------------------

struct HalfSquare;

impl Objective for HalfSquare {
    fn num_examples(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        1
    }

    fn loss_and_grad(&self, w: &[f64], _: &[usize]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * w[0] * w[0], vec![w[0]]))
    }
}

fn one_step_meta() -> Outcome {
    let (loss, grad) = meta_loss_grad(&HalfSquare, &[1.0], 0.5, &[0]).unwrap();
    ensure(loss == 0.125, || format!("toy meta-loss {loss}"))?;
    ensure((grad[0] - 0.25).abs() < 1e-9, || {
        format!("toy meta-gradient {}", grad[0])
    })?;

    let mut rng = rng(77);
    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let spec = if case % 2 == 0 {
            ModelSpec::logistic(4, 3).unwrap()
        } else {
            ModelSpec::mlp(&[4, 5, 3], Activation::Tanh).unwrap()
        };
        let x = random_matrix(&mut rng, 12, 4, 2.0);
        let y = (0..12).map(|_| rng.random_range(0..3)).collect();
        let client = ClientData::new(0, x, y, 1.0).unwrap();
        let alpha = rng.random_range(0.05..0.8);
        let p = spec.init_params(rng.random());
        let (_, g) = one_step_meta_loss_grad(&client, &spec, &p, alpha).unwrap();
        let meta = |w: &[f64]| {
            let w = ParamVector::new(w.to_vec()).unwrap();
            let adapted = fedsim::personal::one_step_adapt(&client, &spec, &w, alpha).unwrap();
            mean_loss(
                &spec,
                &adapted,
                &client.batch(LossKind::CrossEntropy),
                LossKind::CrossEntropy,
            )
            .unwrap()
        };
        let numeric = numeric_grad(meta, p.as_slice(), 1e-5);
        let err = max_rel_err(g.as_slice(), &numeric, 1e-4);
        worst = worst.max(err);
        ensure(err < 1e-4, || {
            format!("case {case}: relative error {err:.2e}")
        })?;
    }
    Ok(format!(
        "toy case 0.125 exact; 10 model instances, max relative error {worst:.2e}"
    ))
}

// 8 -------------------------------------------------------------------------

fn budget_safety() -> Outcome {
    let mut rng = rng(88);
    let mut rounds_audited = 0;
    for case in 0..40 {
        let fed = federation(6, 2, 30, 4, 2, SkewKind::LabelSwap, case);
        let spec = ModelSpec::logistic(4, 2).unwrap();
        let clients = fed.client_views();
        let tests = fed.test_views();
        let max = rng.random_range(1..=4);
        let fraction = [0.2, 0.5, 0.8, 1.0][rng.random_range(0..4)];
        let opts = RoundOptions {
            sample_fraction: fraction,
            hyper: LocalHyper::default(),
            parallel: case % 2 == 1,
        };
        let mut state = FederationState::new(
            vec![spec.init_params(case)],
            clients.iter().map(|c| c.client_id),
            Some(max),
            case,
        );
        let mut charged: BTreeMap<usize, usize> = BTreeMap::new();
        let which = case % 4;
        let mut mc = MultiCenter::new(2).unwrap();
        let mut hy = Hypothesis::new(2).unwrap();
        let mut mx = Mixture::new(PersonalizationHyper::default()).unwrap();
        for _ in 0..rng.random_range(1..=12) {
            let outcome = match which {
                0 => run_round(&mut state, &mut FedAvg, &clients, &tests, &spec, &opts),
                1 => run_round(&mut state, &mut mc, &clients, &tests, &spec, &opts),
                2 => run_round(&mut state, &mut hy, &clients, &tests, &spec, &opts),
                _ => run_round(&mut state, &mut mx, &clients, &tests, &spec, &opts),
            }
            .map_err(|e| format!("case {case}: {e}"))?;
            match outcome {
                RoundOutcome::Completed(rec) => {
                    ensure(rec.accesses_charged == rec.participants.len(), || {
                        format!("case {case}: charge count")
                    })?;
                    for id in rec.participants {
                        *charged.entry(id).or_default() += 1;
                    }
                    rounds_audited += 1;
                }
                RoundOutcome::Halted { .. } => {
                    ensure(state.budgets.values().all(|b| b.used == max), || {
                        format!("case {case}: halted early")
                    })?;
                    break;
                }
            }
            for (id, b) in &state.budgets {
                let seen = charged.get(id).copied().unwrap_or(0);
                ensure(b.used == seen && seen <= max, || {
                    format!(
                        "case {case}: client {id} used {} (records say {seen}) of {max}",
                        b.used
                    )
                })?;
            }
        }
    }

    let fed = federation(8, 2, 40, 4, 2, SkewKind::LabelSwap, 3);
    let clients = fed.client_views();
    let spec = ModelSpec::logistic(4, 2).unwrap();
    let registry =
        HeteroModelRegistry::uniform(&spec, clients.iter().map(|c| c.client_id)).unwrap();
    let mut state =
        FederationState::new(Vec::new(), clients.iter().map(|c| c.client_id), Some(2), 3);
    // clients 1 and 4 have already spent their budget
    for id in [1, 4] {
        state.charge_access(id).unwrap();
        state.charge_access(id).unwrap();
    }
    let before: BTreeMap<usize, usize> = state.budgets.iter().map(|(&i, b)| (i, b.used)).collect();
    let out = one_shot_ensemble(
        &mut state,
        &registry,
        &clients,
        &LocalHyper::default(),
        3,
        false,
    )
    .unwrap();
    for (id, b) in &state.budgets {
        let expected = before[id] + usize::from(out.participants.contains(id));
        ensure(b.used == expected, || {
            format!("one-shot charged client {id} {} times", b.used - before[id])
        })?;
    }
    ensure(out.participants == vec![0, 2, 3, 5, 6, 7], || {
        format!("one-shot participants {:?}", out.participants)
    })?;
    Ok(format!("40 random simulations ({rounds_audited} rounds) audited; one-shot charged 1 per participant"))
}

// 9 -------------------------------------------------------------------------

fn one_class() -> Outcome {
    let mut lines = Vec::new();
    for seed in 1..=5 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let text = format!(
            r#"{{"federation": {{"num_clients": 10, "num_clusters": 1, "samples_per_client": 200, "input_dim": 8,
                "num_classes": 2, "skew_kind": "feature-shift", "anomaly_fraction": 0.05, "seed": {seed}}},
               "strategy": "oneclass", "model": {{"kind": "autoencoder", "hidden": [4], "activation": "tanh"}},
               "hyperparams": {{"lr": 0.05, "rounds": 30, "target_fpr": 0.05}},
               "seed": {seed}, "output_dir": {:?}}}"#,
            dir.path().display().to_string()
        );
        let cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
        let info = run_experiment(&cfg, false).map_err(|e| e.to_string())?;
        let auc = info.extras["auc"];
        let fpr = info.extras["false_positive_rate"];
        ensure(auc >= 0.8, || format!("seed {seed}: AUC {auc:.3}"))?;
        ensure((fpr - 0.05).abs() <= 0.03, || {
            format!("seed {seed}: FPR {fpr:.3} for target 0.05")
        })?;
        lines.push(format!("{auc:.3}/{fpr:.3}"));
    }
    Ok(format!("AUC/FPR per seed: {}", lines.join(", ")))
}

// 10 ------------------------------------------------------------------------

const REPLAY_STRATEGIES: [(&str, &str); 10] = [
    (
        "fedavg",
        r#""hyperparams": {"rounds": 4, "sample_fraction": 0.5}"#,
    ),
    (
        "multicenter",
        r#""hyperparams": {"rounds": 4, "k": 2, "sample_fraction": 0.7}"#,
    ),
    ("hypothesis", r#""hyperparams": {"rounds": 4, "k": 2}"#),
    ("hierarchical", r#""hyperparams": {"rounds": 4}"#),
    ("mixture", r#""hyperparams": {"rounds": 3, "lambda": 0.5}"#),
    (
        "proximal",
        r#""hyperparams": {"rounds": 3, "lambda": 0.5, "max_accesses": 2}"#,
    ),
    ("onestep", r#""hyperparams": {"rounds": 3, "alpha": 0.05}"#),
    (
        "distill",
        r#""hyperparams": {"rounds": 3, "lambda": 1.0},
           "hetero_models": [{"kind": "logistic"}, {"kind": "mlp", "hidden": [5]}]"#,
    ),
    ("oneshot", r#""hyperparams": {"k_select": 3}"#),
    (
        "oneclass",
        r#""hyperparams": {"rounds": 3, "target_fpr": 0.1}"#,
    ),
];

fn replay_determinism() -> Outcome {
    for (strategy, extra) in REPLAY_STRATEGIES {
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let first = root.path().join("first");
        let anomalies = if strategy == "oneclass" {
            r#", "anomaly_fraction": 0.1"#
        } else {
            ""
        };
        let text = format!(
            r#"{{"federation": {{"num_clients": 6, "num_clusters": 2, "samples_per_client": 40, "input_dim": 4,
                "num_classes": 2, "skew_kind": "label-swap", "seed": 3{anomalies}}},
               "strategy": "{strategy}", {extra}, "seed": 17, "output_dir": {:?}}}"#,
            first.display().to_string()
        );
        let cfg = ExperimentConfig::from_json(&text).map_err(|e| format!("{strategy}: {e}"))?;
        run_experiment(&cfg, false).map_err(|e| format!("{strategy}: {e}"))?;
        let original = fs::read(first.join(ROUNDS_FILE)).map_err(|e| e.to_string())?;
        let snapshot =
            ExperimentConfig::load(first.join(CONFIG_FILE)).map_err(|e| e.to_string())?;
        for parallel in [false, true] {
            let mut replay = snapshot.clone();
            replay.output_dir = root.path().join(format!("replay-{parallel}"));
            run_experiment(&replay, parallel).map_err(|e| format!("{strategy}: {e}"))?;
            let again = fs::read(replay.output_dir.join(ROUNDS_FILE)).map_err(|e| e.to_string())?;
            ensure(again == original, || {
                format!("{strategy}: replay (parallel={parallel}) differs")
            })?;
        }
    }
    Ok(format!(
        "{} strategies replayed byte-identically, sequential and parallel",
        REPLAY_STRATEGIES.len()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("aggregation oracle", aggregation_oracle),
        ("fedavg sanity", fedavg_sanity),
        ("clustered recovery", clustered_recovery),
        ("reduction identities", reduction_identities),
        ("proximal analytic check", proximal_quadratic),
        ("one-step meta", one_step_meta),
        ("budget safety", budget_safety),
        ("one-class detection", one_class),
        ("replay determinism", replay_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
