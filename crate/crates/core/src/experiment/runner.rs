use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{Hierarchical, HierarchicalConfig, Hypothesis, MultiCenter};
use crate::data::{generate_federation, load_federation_dir, save_federation_dir, ClientData, Federation, FederationConfig};
use crate::distill::{
    one_shot_ensemble, public_predictions, write_predictions_csv, Distill, DistillHyper, EnsembleModel,
    HeteroModelRegistry, PredictionMatrix,
};
use crate::engine::{run_round, FedAvg, FederationState, LocalHyper, RoundOptions, RoundOutcome, RoundRecord, Strategy};
use crate::error::{FlError, Result};
use crate::experiment::{
    ExperimentConfig, StrategyKind, ASSIGNMENTS_FILE, CONFIG_FILE, METRICS_FILE, PERSONAL_DIR, PREDICTIONS_FILE,
    ROUNDS_FILE, RUN_FILE, SCORES_FILE,
};
use crate::metrics::accuracy;
use crate::model::ModelSpec;
use crate::oneclass::{evaluate_one_class, train_one_class_round, write_scores_csv, AnomalyScore, OneClassData};
use crate::persist::save_params;
use crate::personal::{Mixture, OneStep, PersonalizationHyper, Proximal};
use crate::rng::{derive_seed, tags};

/// Everything about a run that is not part of the deterministic record
/// stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub strategy: String,
    pub rounds_requested: usize,
    pub rounds_completed: usize,
    pub wall_clock_seconds: f64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_clusters: Option<BTreeMap<usize, usize>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub final_assignments: BTreeMap<usize, usize>,
    pub final_per_client_loss: BTreeMap<usize, f64>,
    pub final_per_client_accuracy: BTreeMap<usize, f64>,
    pub accesses_used: BTreeMap<usize, usize>,
    /// Strategy-specific scalars (AUC, calibrated threshold, ensemble accuracy, ...).
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

struct Sink {
    rounds: BufWriter<File>,
    metrics: csv::Writer<File>,
    assignments: Option<BufWriter<File>>,
}

impl Sink {
    fn create(dir: &Path, track_assignments: bool) -> Result<Self> {
        let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE))?;
        metrics.write_record([
            "round",
            "global_loss",
            "mean_client_loss",
            "mean_accuracy",
            "participants",
            "accesses_charged",
        ])?;
        let assignments = if track_assignments {
            Some(BufWriter::new(File::create(dir.join(ASSIGNMENTS_FILE))?))
        } else {
            None
        };
        Ok(Sink { rounds: BufWriter::new(File::create(dir.join(ROUNDS_FILE))?), metrics, assignments })
    }

    fn write(&mut self, rec: &RoundRecord, state: &FederationState) -> Result<()> {
        writeln!(self.rounds, "{}", rec.to_json_line()?)?;
        let mean = |m: &BTreeMap<usize, f64>| {
            if m.is_empty() {
                String::new()
            } else {
                format!("{:?}", m.values().sum::<f64>() / m.len() as f64)
            }
        };
        self.metrics.write_record([
            rec.round.to_string(),
            format!("{:?}", rec.global_loss),
            mean(&rec.per_client_loss),
            mean(&rec.per_client_accuracy),
            rec.participants.len().to_string(),
            rec.accesses_charged.to_string(),
        ])?;
        if let Some(out) = self.assignments.as_mut() {
            for id in &rec.participants {
                if let Some(k) = state.assignments.get(id) {
                    let line = serde_json::json!({ "round": rec.round, "client_id": id, "cluster": k });
                    writeln!(out, "{line}")?;
                }
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.rounds.flush()?;
        self.metrics.flush()?;
        if let Some(mut a) = self.assignments {
            a.flush()?;
        }
        Ok(())
    }
}

/// Runs `rounds` rounds through `step`, stopping early when every budget
/// is spent.
fn drive<F>(
    rounds: usize,
    state: &mut FederationState,
    sink: &mut Sink,
    info: &mut RunInfo,
    mut step: F,
) -> Result<Option<RoundRecord>>
where
    F: FnMut(&mut FederationState) -> Result<RoundOutcome>,
{
    let mut last = None;
    for _ in 0..rounds {
        match step(state)? {
            RoundOutcome::Completed(rec) => {
                sink.write(&rec, state)?;
                info.rounds_completed += 1;
                last = Some(rec);
            }
            RoundOutcome::Halted { round } => {
                info.warnings.push(format!(
                    "every client exhausted its access budget; stopped after {round} of {rounds} rounds"
                ));
                break;
            }
        }
    }
    Ok(last)
}

#[allow(clippy::too_many_arguments)]
fn run_strategy<S: Strategy>(
    strategy: &mut S,
    state: &mut FederationState,
    fed: &Federation,
    spec: &ModelSpec,
    opts: &RoundOptions,
    rounds: usize,
    sink: &mut Sink,
    info: &mut RunInfo,
) -> Result<Option<RoundRecord>> {
    let clients = fed.client_views();
    let tests = fed.test_views();
    drive(rounds, state, sink, info, |st| run_round(st, strategy, &clients, &tests, spec, opts))
}

fn load_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    match (&cfg.federation, &cfg.data_dir) {
        (Some(f), _) => generate_federation(f),
        (None, Some(dir)) => load_federation_dir(dir),
        (None, None) => Err(FlError::config("exactly one of federation or data_dir must be given")),
    }
}

fn registry_for(cfg: &ExperimentConfig, fed: &Federation, spec: &ModelSpec) -> Result<HeteroModelRegistry> {
    let (d, c) = (fed.input_dim(), fed.num_classes);
    let ids = fed.clients.iter().map(|c| c.client_id());
    match &cfg.hetero_models {
        None => HeteroModelRegistry::uniform(spec, ids),
        Some(models) => {
            let specs = ids
                .map(|id| Ok((id, models[id % models.len()].to_spec(d, c).map_err(|e| FlError::config(e.to_string()))?)))
                .collect::<Result<_>>()?;
            HeteroModelRegistry::new(specs)
        }
    }
}

fn write_personal(dir: &Path, state: &FederationState, spec_of: impl Fn(usize) -> Result<ModelSpec>) -> Result<()> {
    if state.personal_params.is_empty() {
        return Ok(());
    }
    let pdir = dir.join(PERSONAL_DIR);
    fs::create_dir_all(&pdir)?;
    for (&id, p) in &state.personal_params {
        save_params(pdir.join(format!("client_{id}.bin")), &spec_of(id)?, id, state.round, p)?;
    }
    Ok(())
}

fn ensemble_record(
    ensemble: &EnsembleModel,
    fed: &Federation,
    participants: Vec<usize>,
    round: usize,
) -> Result<RoundRecord> {
    let mut per_client_loss = BTreeMap::new();
    let mut per_client_accuracy = BTreeMap::new();
    let mut global_loss = 0.0;
    let mut clients: Vec<ClientData> = fed.client_views();
    clients.sort_by_key(|c| c.client_id);
    for c in &clients {
        let p = ensemble.predict_proba(c.x.view())?;
        let loss = c.y.iter().enumerate().map(|(i, &y)| -p[[i, y]].max(f64::MIN_POSITIVE).ln()).sum::<f64>()
            / c.len() as f64;
        global_loss += c.weight * loss;
        per_client_loss.insert(c.client_id, loss);
    }
    for t in fed.test_views() {
        per_client_accuracy.insert(t.client_id, accuracy(&ensemble.predict_proba(t.x.view())?, &t.y));
    }
    Ok(RoundRecord {
        round,
        global_loss,
        per_client_loss,
        per_client_accuracy,
        accesses_charged: participants.len(),
        participants,
    })
}

/// Runs the experiment described by `cfg`, writing every artifact into
/// `cfg.output_dir`. `parallel` only changes how local updates are
/// scheduled; outputs are identical either way.
pub fn run_experiment(cfg: &ExperimentConfig, parallel: bool) -> Result<RunInfo> {
    cfg.validate()?;
    let started = Instant::now();
    let fed = load_federation(cfg)?;
    let spec = cfg.model_spec(fed.input_dim(), fed.num_classes)?;
    let h = &cfg.hyperparams;
    if let Some(k) = h.k_select {
        if cfg.strategy == StrategyKind::Oneshot && k > fed.clients.len() {
            return Err(FlError::config(format!(
                "hyperparams.k_select = {k} exceeds the {} clients",
                fed.clients.len()
            )));
        }
    }

    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json()?)?;

    let hyper = LocalHyper { lr: h.lr, local_epochs: h.local_epochs, batch_size: h.batch_size };
    let opts = RoundOptions { sample_fraction: h.sample_fraction, hyper, parallel };
    let ids: Vec<usize> = fed.clients.iter().map(|c| c.client_id()).collect();
    let init = spec.init_params(derive_seed(cfg.seed, &[tags::INIT]));
    let mut state = FederationState::new(vec![init], ids.iter().copied(), h.max_accesses, cfg.seed);
    let clustered = matches!(
        cfg.strategy,
        StrategyKind::Multicenter | StrategyKind::Hypothesis | StrategyKind::Hierarchical
    );
    let mut sink = Sink::create(dir, clustered)?;
    let mut info = RunInfo {
        strategy: cfg.strategy.name().to_string(),
        rounds_requested: h.rounds,
        true_clusters: fed.true_clusters(),
        ..RunInfo::default()
    };
    let personal = PersonalizationHyper {
        lambda: h.lambda.unwrap_or(0.0),
        alpha: h.alpha.unwrap_or(1.0),
        local_steps: h.personal_steps,
    };

    let rounds = h.rounds;
    let last = match cfg.strategy {
        StrategyKind::Fedavg => run_strategy(&mut FedAvg, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?,
        StrategyKind::Multicenter => {
            let mut s = MultiCenter::new(h.k.unwrap_or(1))?;
            run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?
        }
        StrategyKind::Hypothesis => {
            let mut s = Hypothesis::new(h.k.unwrap_or(1))?;
            run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?
        }
        StrategyKind::Hierarchical => {
            let mut s = Hierarchical::new(HierarchicalConfig {
                split_threshold: h.split_threshold,
                min_cluster_size: h.min_cluster_size,
                split_rounds: h.split_rounds,
            });
            run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?
        }
        StrategyKind::Mixture => {
            let mut s = Mixture::new(personal)?;
            run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?
        }
        StrategyKind::Proximal => {
            let mut s = Proximal::new(personal)?;
            run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?
        }
        StrategyKind::Onestep => {
            let mut s = OneStep::new(personal)?;
            run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?
        }
        StrategyKind::Distill => {
            let registry = registry_for(cfg, &fed, &spec)?;
            let dh = DistillHyper {
                lambda: h.lambda.unwrap_or(1.0),
                temperature: h.temperature,
                leave_one_out: h.leave_one_out,
            };
            state.global_params.clear();
            let mut s = Distill::new(registry.clone(), dh, fed.public.x.clone(), cfg.seed)?;
            let last = run_strategy(&mut s, &mut state, &fed, &spec, &opts, rounds, &mut sink, &mut info)?;
            let mut mats: Vec<PredictionMatrix> = s.latest_predictions().values().cloned().collect();
            if !mats.is_empty() {
                let refs: Vec<&PredictionMatrix> = mats.iter().collect();
                let consensus = crate::distill::average_predictions(&refs, &vec![1.0; refs.len()])?;
                info.extras.insert("consensus_public_accuracy".into(), accuracy(&consensus.rows, &fed.public.labels));
                mats.push(consensus);
            }
            write_predictions_csv(&mats, File::create(dir.join(PREDICTIONS_FILE))?)?;
            write_personal(dir, &state, |id| registry.get(id).cloned())?;
            last
        }
        StrategyKind::Oneshot => {
            let registry = registry_for(cfg, &fed, &spec)?;
            state.global_params.clear();
            let clients = fed.client_views();
            let outcome = one_shot_ensemble(&mut state, &registry, &clients, &hyper, h.k_select.unwrap_or(1), parallel)?;
            let rec = ensemble_record(&outcome.ensemble, &fed, outcome.participants.clone(), 0)?;
            sink.write(&rec, &state)?;
            info.rounds_completed = 1;
            let mut mats = Vec::new();
            for m in outcome.ensemble.members() {
                mats.push(public_predictions(&m.spec, &m.params, fed.public.x.view(), m.client_id, 0)?);
            }
            let ens = outcome.ensemble.public_predictions(fed.public.x.view(), 0)?;
            info.extras.insert("ensemble_public_accuracy".into(), accuracy(&ens.rows, &fed.public.labels));
            info.extras.insert("ensemble_size".into(), outcome.ensemble.members().len() as f64);
            mats.push(ens);
            write_predictions_csv(&mats, File::create(dir.join(PREDICTIONS_FILE))?)?;
            write_personal(dir, &state, |id| registry.get(id).cloned())?;
            Some(rec)
        }
        StrategyKind::Oneclass => {
            let data = OneClassData::prepare(&fed.clients, &fed.tests, h.calibration_share)?;
            let last = drive(rounds, &mut state, &mut sink, &mut info, |st| {
                train_one_class_round(st, &data.train, &spec, &opts)
            })?;
            let eval = evaluate_one_class(&spec, &state.global_params[0], &data, h.target_fpr.unwrap_or(0.05))?;
            let mut flat: Vec<AnomalyScore> = Vec::new();
            let mut truth = Vec::new();
            for (_, scores, flags) in &eval.scores {
                for s in scores {
                    flat.push(AnomalyScore { example_index: flat.len(), ..*s });
                }
                truth.extend_from_slice(flags);
            }
            write_scores_csv(&flat, Some(&truth), File::create(dir.join(SCORES_FILE))?)?;
            info.extras.insert("threshold".into(), eval.threshold);
            for (key, v) in [
                ("auc", eval.auc),
                ("false_positive_rate", eval.false_positive_rate),
                ("true_positive_rate", eval.true_positive_rate),
            ] {
                if let Some(v) = v {
                    info.extras.insert(key.into(), v);
                }
            }
            last
        }
    };
    sink.finish()?;

    if !matches!(cfg.strategy, StrategyKind::Distill | StrategyKind::Oneshot) {
        write_personal(dir, &state, |_| Ok(spec.clone()))?;
    }
    if let Some(rec) = last {
        info.final_per_client_loss = rec.per_client_loss;
        info.final_per_client_accuracy = rec.per_client_accuracy;
    }
    if clustered {
        info.final_assignments = state.assignments.clone();
    }
    info.accesses_used = state.budgets.iter().map(|(&id, b)| (id, b.used)).collect();
    if let Some(max) = h.max_accesses {
        let spent = info.accesses_used.values().filter(|&&u| u >= max).count();
        if spent > 0 && info.rounds_completed == rounds {
            info.warnings.push(format!("{spent} client(s) used their full budget of {max} accesses"));
        }
    }
    info.wall_clock_seconds = started.elapsed().as_secs_f64();
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&info)?)?;
    Ok(info)
}

/// Writes a federation described by `config_text` (an experiment config
/// or a bare federation config) to `dir`.
pub fn generate_data(config_text: &str, dir: impl AsRef<Path>) -> Result<Federation> {
    let fed_cfg: FederationConfig = match ExperimentConfig::from_json(config_text) {
        Ok(exp) => exp
            .federation
            .ok_or_else(|| FlError::config("experiment config has no federation section to generate from"))?,
        Err(exp_err) => serde_json::from_str(config_text)
            .map_err(|e| FlError::config(format!("not an experiment config ({exp_err}) nor a federation config ({e})")))?,
    };
    let fed = generate_federation(&fed_cfg)?;
    save_federation_dir(&fed, dir)?;
    Ok(fed)
}
