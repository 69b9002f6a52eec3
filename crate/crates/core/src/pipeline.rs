//! End-to-end orchestration: data generation, both training phases,
//! evaluation and sweeps, with provenance manifests on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{split_seed, RunConfig, Stream};
use crate::datasets::{
    collect_demos, confidence_labels, make_abstraction_pairs, sample_segments, AbstractionPairSet, RecordKind,
    TrajectorySet,
};
use crate::envs::{make_pair, quality_ladder, Agent, MdpPair};
use crate::error::{Error, Result};
use crate::eval::{
    compounding_error_curve, fmt_stat, map_recovery_error, mean_sd, misalignment_score, native_oracle_return,
    normalized_return, random_policy_return, translated_policy_return, uniform_samples, Curve, EvalReport, Maps,
    MetricRecord, Method,
};
use crate::losses::{PairDims, TranslationModel};
use crate::nn::{load_checkpoint, save_checkpoint, ForwardModel, Mlp, ModelSet, SimilarityNet};
use crate::train::{
    initial_model, similarity_metrics, train_phase1, train_phase2, Phase1Output, Phase2Output, Status, TrainConfig,
    TrainEvent, TrainLog,
};

pub const XI1: &str = "xi1.traj";
pub const XI2: &str = "xi2.traj";
pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const PHASE1_LOG: &str = "phase1_log.csv";
pub const PHASE2_LOG: &str = "phase2_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn state_pairs_file(k: usize) -> String {
    format!("ys_{k}.pairs")
}

pub fn action_pairs_file(k: usize) -> String {
    format!("ya_{k}.pairs")
}

pub fn manifest_file(command: &str) -> String {
    format!("{command}.manifest.json")
}

pub fn eval_file(metric: Metric) -> String {
    format!("eval_{}.csv", metric.name())
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub data_hash: String,
    pub phase1_hash: Option<String>,
    pub config_hash: Option<String>,
    pub method: Option<String>,
    pub status: Option<String>,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    pub errors: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed: cfg.seed,
            data_hash: cfg.data_hash()?,
            ..Self::default()
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(manifest_file(&self.command)), text)?;
        Ok(())
    }

    fn record(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(dir.join(name), bytes)?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::MissingInput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pair: MdpPair,
    pub demos1: TrajectorySet,
    pub demos2: TrajectorySet,
    pub state_sets: Vec<AbstractionPairSet>,
    pub action_sets: Vec<AbstractionPairSet>,
}

impl Dataset {
    pub fn dims(&self) -> PairDims {
        PairDims {
            s1: self.demos1.state_dim,
            a1: self.demos1.action_dim,
            s2: self.demos2.state_dim,
            a2: self.demos2.action_dim,
        }
    }
}

pub fn build_pair(cfg: &RunConfig) -> Result<MdpPair> {
    make_pair(cfg.pair_kind()?, &cfg.pair.params())
}

/// Demonstrations for both agents with min-max confidences attached, and
/// every declared paired-abstraction set.
pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let pair = build_pair(cfg)?;
    let ladder = quality_ladder(cfg.data.rungs);
    let d = &cfg.data;
    let demos = |agent, stream| -> Result<TrajectorySet> {
        let raw = collect_demos(&pair, agent, &ladder, d.trajectories_per_rung, d.horizon, split_seed(cfg.seed, stream))?;
        if raw.len() > 1 {
            confidence_labels(&raw)
        } else {
            Ok(raw)
        }
    };
    let demos1 = demos(Agent::One, Stream::Demos1)?;
    let demos2 = demos(Agent::Two, Stream::Demos2)?;
    let labels = d.labels();
    let mut state_sets = Vec::new();
    for (k, ab) in pair.state_abstractions.iter().enumerate() {
        state_sets.push(make_abstraction_pairs(
            &demos1,
            &demos2,
            RecordKind::State,
            k,
            &ab.agent1,
            &ab.agent2,
            &labels,
            split_seed(cfg.seed, Stream::StatePairs(k)),
        )?);
    }
    let mut action_sets = Vec::new();
    for (k, ab) in pair.action_abstractions.iter().enumerate() {
        action_sets.push(make_abstraction_pairs(
            &demos1,
            &demos2,
            RecordKind::StateAction,
            k,
            &ab.agent1,
            &ab.agent2,
            &labels,
            split_seed(cfg.seed, Stream::ActionPairs(k)),
        )?);
    }
    Ok(Dataset {
        pair,
        demos1,
        demos2,
        state_sets,
        action_sets,
    })
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Writes the dataset files and the `gen` manifest. A non-empty directory
/// is refused unless `force` is set.
pub fn write_dataset(dir: &Path, cfg: &RunConfig, ds: &Dataset, force: bool) -> Result<Manifest> {
    if dir_is_nonempty(dir)? && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut m = Manifest::new("gen", cfg)?;
    m.record(dir, XI1, ds.demos1.to_text().as_bytes())?;
    m.record(dir, XI2, ds.demos2.to_text().as_bytes())?;
    for (k, set) in ds.state_sets.iter().enumerate() {
        m.record(dir, &state_pairs_file(k), set.to_text().as_bytes())?;
    }
    for (k, set) in ds.action_sets.iter().enumerate() {
        m.record(dir, &action_pairs_file(k), set.to_text().as_bytes())?;
    }
    m.save(dir)?;
    Ok(m)
}

/// Loads a generated dataset, refusing one produced by a different
/// data configuration or with altered files.
pub fn read_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let manifest = Manifest::load(&dir.join(manifest_file("gen")))?;
    let expected = cfg.data_hash()?;
    if manifest.data_hash != expected {
        return Err(Error::Provenance(format!(
            "{} was generated with data hash {}, config has {expected}",
            dir.display(),
            manifest.data_hash
        )));
    }
    for (name, digest) in &manifest.files {
        let bytes = read_input(&dir.join(name))?;
        if &hex::encode(Sha256::digest(&bytes)) != digest {
            return Err(Error::Provenance(format!("{name} does not match its recorded digest")));
        }
    }
    let pair = build_pair(cfg)?;
    let demos1 = TrajectorySet::load(&dir.join(XI1))?;
    let demos2 = TrajectorySet::load(&dir.join(XI2))?;
    let state_sets = (0..pair.state_abstractions.len())
        .map(|k| AbstractionPairSet::load(&dir.join(state_pairs_file(k))))
        .collect::<Result<Vec<_>>>()?;
    let action_sets = (0..pair.action_abstractions.len())
        .map(|k| AbstractionPairSet::load(&dir.join(action_pairs_file(k))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        pair,
        demos1,
        demos2,
        state_sets,
        action_sets,
    })
}

/// Training config with the training stream seed substituted.
pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: split_seed(cfg.seed, Stream::Train),
        ..cfg.train.clone()
    }
}

pub fn run_phase1(cfg: &RunConfig, ds: &Dataset) -> Result<Phase1Output> {
    train_phase1(&ds.demos2, &ds.state_sets, &ds.action_sets, &train_config(cfg))
}

/// Phase 2 for `method`, writing periodic checkpoints into `checkpoint_dir`
/// when the cadence is set.
pub fn run_phase2(
    cfg: &RunConfig,
    ds: &Dataset,
    p1: &Phase1Output,
    method: Method,
    checkpoint_dir: Option<&Path>,
) -> Result<Phase2Output> {
    let weights = method
        .weights(&cfg.weights)
        .ok_or_else(|| Error::Config("the oracle method has no maps to train".into()))?;
    let tc = train_config(cfg);
    let mut model = initial_model(&ds.demos1, &ds.demos2, p1, &tc)?;
    if !method.uses_similarity() {
        model.sim_s.clear();
        model.sim_a.clear();
    }
    let every = tc.checkpoint_every;
    let mut save_error = None;
    let out = match checkpoint_dir {
        Some(dir) if every > 0 => {
            fs::create_dir_all(dir)?;
            let mut observer = |e: TrainEvent<'_>| {
                if let TrainEvent::CycleEnd { cycle, model } = e {
                    if (cycle + 1) % every == 0 && save_error.is_none() {
                        let path = dir.join(format!("cycle_{:04}.ckpt", cycle + 1));
                        if let Err(err) = save_checkpoint(&model_to_set(model, &BTreeMap::new()), &path) {
                            save_error = Some(err);
                        }
                    }
                }
            };
            train_phase2(&ds.demos1, &ds.demos2, model, &weights, &tc, Some(&mut observer))?
        }
        _ => train_phase2(&ds.demos1, &ds.demos2, model, &weights, &tc, None)?,
    };
    if let Some(e) = save_error {
        return Err(e);
    }
    Ok(out)
}

fn insert_sims(set: &mut ModelSet, prefix: &str, nets: &[SimilarityNet]) {
    for (k, net) in nets.iter().enumerate() {
        set.insert(format!("{prefix}{k}.encoder1"), net.encoder1.clone());
        set.insert(format!("{prefix}{k}.encoder2"), net.encoder2.clone());
        set.insert(format!("{prefix}{k}.head"), net.head.clone());
    }
}

fn take_sims(set: &ModelSet, prefix: &str) -> Result<Vec<SimilarityNet>> {
    let mut out = Vec::new();
    for k in 0.. {
        let key = format!("{prefix}{k}.head");
        if !set.networks.contains_key(&key) {
            break;
        }
        let net = SimilarityNet {
            encoder1: set.get(&format!("{prefix}{k}.encoder1"))?.clone(),
            encoder2: set.get(&format!("{prefix}{k}.encoder2"))?.clone(),
            head: set.get(&key)?.clone(),
        };
        net.validate()?;
        out.push(net);
    }
    Ok(out)
}

pub fn phase1_to_set(p1: &Phase1Output, metadata: &BTreeMap<String, String>) -> ModelSet {
    let mut set = ModelSet {
        metadata: metadata.clone(),
        ..ModelSet::default()
    };
    set.insert("forward", p1.forward.net.clone());
    insert_sims(&mut set, "sim_s", &p1.sim_s);
    insert_sims(&mut set, "sim_a", &p1.sim_a);
    set
}

/// Frozen phase-1 networks restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Phase1Networks {
    pub forward: ForwardModel,
    pub sim_s: Vec<SimilarityNet>,
    pub sim_a: Vec<SimilarityNet>,
}

pub fn phase1_from_set(set: &ModelSet) -> Result<Phase1Networks> {
    Ok(Phase1Networks {
        forward: ForwardModel {
            net: set.get("forward")?.clone(),
        },
        sim_s: take_sims(set, "sim_s")?,
        sim_a: take_sims(set, "sim_a")?,
    })
}

pub fn model_to_set(model: &TranslationModel, metadata: &BTreeMap<String, String>) -> ModelSet {
    let mut set = ModelSet {
        metadata: metadata.clone(),
        ..ModelSet::default()
    };
    let nets: [(&str, &Mlp); 8] = [
        ("phi", &model.phi),
        ("phi_bar", &model.phi_bar),
        ("h1", &model.h1),
        ("h2", &model.h2),
        ("disc_s", &model.disc_s),
        ("disc_a1", &model.disc_a1),
        ("disc_a2", &model.disc_a2),
        ("forward", &model.forward.net),
    ];
    for (k, n) in nets {
        set.insert(k, n.clone());
    }
    insert_sims(&mut set, "sim_s", &model.sim_s);
    insert_sims(&mut set, "sim_a", &model.sim_a);
    set
}

pub fn model_from_set(set: &ModelSet) -> Result<TranslationModel> {
    let p1 = phase1_from_set(set)?;
    let get = |k: &str| set.get(k).cloned();
    Ok(TranslationModel {
        phi: get("phi")?,
        phi_bar: get("phi_bar")?,
        h1: get("h1")?,
        h2: get("h2")?,
        disc_s: get("disc_s")?,
        disc_a1: get("disc_a1")?,
        disc_a2: get("disc_a2")?,
        forward: p1.forward,
        sim_s: p1.sim_s,
        sim_a: p1.sim_a,
    })
}

/// Rebuilds a phase-1 result around restored networks; metrics are not kept.
fn phase1_output(nets: Phase1Networks) -> Phase1Output {
    Phase1Output {
        forward: nets.forward,
        forward_holdout_mse: f64::NAN,
        forward_status: Status::Converged,
        sim_s: nets.sim_s,
        sim_a: nets.sim_a,
        sim_metrics: Vec::new(),
        log: TrainLog::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    One,
    Two,
    All,
}

impl std::str::FromStr for TrainPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(TrainPhase::One),
            "2" => Ok(TrainPhase::Two),
            "all" => Ok(TrainPhase::All),
            _ => Err(Error::Config(format!("unknown phase `{s}` (expected 1, 2 or all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub phase1_status: Option<Status>,
    pub phase2_status: Option<Status>,
    pub cycles: Option<usize>,
}

fn status_from_str(s: &str) -> Status {
    match s {
        "converged" => Status::Converged,
        "aborted" => Status::Aborted,
        _ => Status::MaxEpochs,
    }
}

/// `train` command: reads the generated data in `dir` and writes
/// checkpoints, logs and the `train` manifest next to it.
pub fn cmd_train(dir: &Path, cfg: &RunConfig, phase: TrainPhase) -> Result<TrainSummary> {
    cfg.validate()?;
    let method = cfg.method()?;
    if method == Method::Oracle {
        return Err(Error::Config("method `oracle` needs no training".into()));
    }
    let ds = read_dataset(dir, cfg)?;
    let mut manifest = Manifest::new("train", cfg)?;
    manifest.phase1_hash = Some(cfg.phase1_hash()?);
    let mut summary = TrainSummary {
        phase1_status: None,
        phase2_status: None,
        cycles: None,
    };

    let p1 = if phase == TrainPhase::Two {
        let path = dir.join(PHASE1_CHECKPOINT);
        let set = load_checkpoint(&path).map_err(|e| match e {
            Error::MissingInput { path, .. } => Error::MissingInput {
                path,
                reason: "phase 2 requires a phase-1 checkpoint (run --phase 1 first)".into(),
            },
            other => other,
        })?;
        let recorded = set.metadata.get("phase1_hash").cloned().unwrap_or_default();
        if recorded != cfg.phase1_hash()? {
            return Err(Error::Provenance(format!(
                "{} was trained under a different data or training config",
                path.display()
            )));
        }
        summary.phase1_status = set.metadata.get("forward_status").map(|s| status_from_str(s));
        phase1_output(phase1_from_set(&set)?)
    } else {
        log::info!("phase 1: {} similarity sets, forward model", ds.state_sets.len() + ds.action_sets.len());
        let p1 = run_phase1(cfg, &ds)?;
        let mut meta = BTreeMap::new();
        meta.insert("phase1_hash".to_string(), cfg.phase1_hash()?);
        meta.insert("data_hash".to_string(), cfg.data_hash()?);
        meta.insert("forward_status".to_string(), p1.forward_status.as_str().to_string());
        meta.insert("forward_holdout_mse".to_string(), fmt_stat(p1.forward_holdout_mse));
        for (k, m) in p1.sim_metrics.iter().enumerate() {
            meta.insert(format!("similarity{k}"), format!("bce={} accuracy={} status={}", fmt_stat(m.bce), fmt_stat(m.accuracy), m.status.as_str()));
        }
        manifest.record(dir, PHASE1_CHECKPOINT, &phase1_to_set(&p1, &meta).to_bytes()?)?;
        manifest.record(dir, PHASE1_LOG, p1.log.to_csv().as_bytes())?;
        summary.phase1_status = Some(p1.forward_status);
        p1
    };

    if phase != TrainPhase::One {
        log::info!("phase 2: method {method}");
        let out = run_phase2(cfg, &ds, &p1, method, Some(&dir.join(CHECKPOINT_DIR)))?;
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), cfg.config_hash()?);
        meta.insert("method".to_string(), method.to_string());
        meta.insert("status".to_string(), out.log.status.as_str().to_string());
        meta.insert("cycles".to_string(), out.cycles.to_string());
        manifest.record(dir, MODEL_CHECKPOINT, &model_to_set(&out.model, &meta).to_bytes()?)?;
        manifest.record(dir, PHASE2_LOG, out.log.to_csv().as_bytes())?;
        manifest.config_hash = Some(cfg.config_hash()?);
        manifest.method = Some(method.to_string());
        manifest.status = Some(out.log.status.as_str().to_string());
        summary.phase2_status = Some(out.log.status);
        summary.cycles = Some(out.cycles);
        if let Some(err) = out.error {
            manifest.errors.insert("phase2".into(), err.clone());
            manifest.save(dir)?;
            return Err(Error::NonFinite(format!("phase 2 aborted ({err}); last-good model kept")));
        }
    }
    manifest.save(dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Return,
    Compounding,
    Recovery,
    Misalignment,
    Similarity,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Return,
        Metric::Compounding,
        Metric::Recovery,
        Metric::Misalignment,
        Metric::Similarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Return => "return",
            Metric::Compounding => "compounding",
            Metric::Recovery => "recovery",
            Metric::Misalignment => "misalignment",
            Metric::Similarity => "similarity",
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m = Metric::ALL.into_iter().find(|m| m.name() == name).ok_or_else(|| {
                let valid: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown metric `{name}`; valid metrics: {}", valid.join(", ")))
            })?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("metric list is empty".into()));
        }
        Ok(out)
    }
}

/// What is being evaluated: trained maps, or the ground truth for the
/// oracle rows.
pub enum Subject<'a> {
    Trained(&'a TranslationModel),
    Oracle,
}

impl Subject<'_> {
    fn maps<'b>(&'b self, pair: &'b MdpPair) -> Result<&'b dyn Maps> {
        match self {
            Subject::Trained(m) => Ok(*m),
            Subject::Oracle => pair
                .ground_truth
                .as_ref()
                .map(|g| g as &dyn Maps)
                .ok_or_else(|| Error::InvalidArgument(format!("{} pair has no ground-truth maps for the oracle", pair.kind))),
        }
    }
}

/// Seeds for the evaluation replicates of one run.
pub fn eval_seeds(cfg: &RunConfig) -> Vec<u64> {
    let base = split_seed(cfg.seed, Stream::Eval);
    (0..cfg.eval.seeds as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Per-seed mean episode return and normalized return.
pub fn return_samples(cfg: &RunConfig, pair: &MdpPair, subject: &Subject<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let e = &cfg.eval;
    let mut raw = Vec::new();
    let mut norm = Vec::new();
    for seed in eval_seeds(cfg) {
        let oracle = mean_sd(&native_oracle_return(pair, e.episodes, e.episode_horizon, seed)?).0;
        let random = mean_sd(&random_policy_return(pair, e.episodes, e.episode_horizon, seed)?).0;
        let r = match subject {
            Subject::Trained(m) => mean_sd(&translated_policy_return(pair, *m, e.episodes, e.episode_horizon, seed)?).0,
            Subject::Oracle => oracle,
        };
        raw.push(r);
        norm.push(normalized_return(r, random, oracle));
    }
    Ok((raw, norm))
}

/// Mean compounding curve over the evaluation seeds.
pub fn compounding_curve(cfg: &RunConfig, ds: &Dataset, maps: &dyn Maps) -> Result<Vec<f64>> {
    let e = &cfg.eval;
    let seeds = eval_seeds(cfg);
    let mut total = vec![0.0; e.compounding_horizon];
    for seed in &seeds {
        let seg = sample_segments(&ds.demos1, e.compounding_horizon, e.compounding_batch, &mut ChaCha8Rng::seed_from_u64(*seed))?;
        let curve = compounding_error_curve(&ds.pair, maps, &seg, e.compounding_horizon)?;
        for (t, d) in total.iter_mut().zip(curve) {
            *t += d;
        }
    }
    Ok(total.into_iter().map(|t| t / seeds.len() as f64).collect())
}

/// Fresh held-out abstraction pairs, drawn from the evaluation stream.
pub fn holdout_pairs(cfg: &RunConfig, ds: &Dataset) -> Result<(Vec<AbstractionPairSet>, Vec<AbstractionPairSet>)> {
    let labels = cfg.data.labels();
    let base = split_seed(cfg.seed, Stream::Eval) ^ 0x5151;
    let make = |kind, k: usize, ab: &crate::envs::AbstractionPair, salt: u64| {
        make_abstraction_pairs(&ds.demos1, &ds.demos2, kind, k, &ab.agent1, &ab.agent2, &labels, base.wrapping_add(salt + k as u64))
    };
    let s = ds.pair.state_abstractions.iter().enumerate().map(|(k, ab)| make(RecordKind::State, k, ab, 0)).collect::<Result<_>>()?;
    let a = ds.pair.action_abstractions.iter().enumerate().map(|(k, ab)| make(RecordKind::StateAction, k, ab, 100)).collect::<Result<_>>()?;
    Ok((s, a))
}

pub enum MetricOutput {
    Table(EvalReport),
    Curve(Curve),
}

impl MetricOutput {
    pub fn to_csv(&self) -> String {
        match self {
            MetricOutput::Table(r) => r.to_csv(),
            MetricOutput::Curve(c) => EvalReport::curve_csv(c),
        }
    }
}

pub fn evaluate_metric(
    cfg: &RunConfig,
    ds: &Dataset,
    method: Method,
    subject: &Subject<'_>,
    sims: Option<&Phase1Networks>,
    metric: Metric,
) -> Result<MetricOutput> {
    let pair = &ds.pair;
    let mut report = EvalReport::new(&pair.kind.to_string(), &method.to_string());
    match metric {
        Metric::Return => {
            let (raw, norm) = return_samples(cfg, pair, subject)?;
            report.metrics.push(MetricRecord::from_samples("return", &raw));
            report.metrics.push(MetricRecord::from_samples("normalized_return", &norm));
        }
        Metric::Compounding => {
            let distances = compounding_curve(cfg, ds, subject.maps(pair)?)?;
            return Ok(MetricOutput::Curve(Curve {
                method: method.to_string(),
                distances,
            }));
        }
        Metric::Recovery => {
            let maps = subject.maps(pair)?;
            let mut cols: [Vec<f64>; 4] = Default::default();
            for seed in eval_seeds(cfg) {
                let r = map_recovery_error(pair, maps, cfg.eval.recovery_samples, seed)?;
                for (c, v) in cols.iter_mut().zip([r.state, r.action, r.state_normalized, r.action_normalized]) {
                    c.push(v);
                }
            }
            for (name, c) in ["state_error", "action_error", "state_error_normalized", "action_error_normalized"].iter().zip(&cols) {
                report.metrics.push(MetricRecord::from_samples(name, c));
            }
        }
        Metric::Misalignment => {
            let maps = subject.maps(pair)?;
            let mut scores = Vec::new();
            for seed in eval_seeds(cfg) {
                let (s, _) = uniform_samples(&pair.m1, cfg.eval.recovery_samples, seed)?;
                scores.push(misalignment_score(pair, maps, &s)?);
            }
            report.metrics.push(MetricRecord::from_samples("alignment", &scores));
        }
        Metric::Similarity => {
            let nets = sims.ok_or_else(|| Error::MissingInput {
                path: PathBuf::from(PHASE1_CHECKPOINT),
                reason: "similarity metrics need trained phase-1 networks".into(),
            })?;
            let (hs, ha) = holdout_pairs(cfg, ds)?;
            let all: Vec<(String, &SimilarityNet, &AbstractionPairSet)> = nets
                .sim_s
                .iter()
                .zip(&hs)
                .enumerate()
                .map(|(k, (n, s))| (format!("sim_s{k}"), n, s))
                .chain(nets.sim_a.iter().zip(&ha).enumerate().map(|(k, (n, s))| (format!("sim_a{k}"), n, s)))
                .collect();
            if all.is_empty() {
                return Err(Error::InvalidArgument(format!("{} pair declares no paired abstractions", pair.kind)));
            }
            for (name, net, set) in all {
                let idx: Vec<usize> = (0..set.len()).collect();
                let (bce, acc) = similarity_metrics(net, set, &idx)?;
                report.metrics.push(MetricRecord::from_samples(&format!("{name}_bce"), &[bce]));
                report.metrics.push(MetricRecord::from_samples(&format!("{name}_accuracy"), &[acc]));
            }
        }
    }
    Ok(MetricOutput::Table(report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub written: Vec<String>,
    pub errors: BTreeMap<String, String>,
}

/// `eval` command. A failing metric is recorded and the rest still run.
pub fn cmd_eval(dir: &Path, cfg: &RunConfig, metrics: &[Metric]) -> Result<EvalSummary> {
    cfg.validate()?;
    let method = cfg.method()?;
    let ds = read_dataset(dir, cfg)?;
    let (model, phase1) = if method == Method::Oracle {
        let p1 = match load_checkpoint(&dir.join(PHASE1_CHECKPOINT)) {
            Ok(set) => Some(phase1_from_set(&set)?),
            Err(Error::MissingInput { .. }) => None,
            Err(e) => return Err(e),
        };
        (None, p1)
    } else {
        let path = dir.join(MODEL_CHECKPOINT);
        let set = load_checkpoint(&path)?;
        let recorded = set.metadata.get("config_hash").cloned().unwrap_or_default();
        if recorded != cfg.config_hash()? {
            return Err(Error::Provenance(format!(
                "{} was trained under config hash {recorded}, current config has {}",
                path.display(),
                cfg.config_hash()?
            )));
        }
        let model = model_from_set(&set)?;
        let dims = model.dims();
        if dims != ds.dims() {
            return Err(Error::InvalidArgument(format!("checkpoint dims {dims:?} do not match the pair {:?}", ds.dims())));
        }
        let p1 = phase1_from_set(&set)?;
        let p1 = if p1.sim_s.is_empty() && p1.sim_a.is_empty() {
            match load_checkpoint(&dir.join(PHASE1_CHECKPOINT)) {
                Ok(s) => phase1_from_set(&s)?,
                Err(_) => p1,
            }
        } else {
            p1
        };
        (Some(model), Some(p1))
    };
    let subject = match &model {
        Some(m) => Subject::Trained(m),
        None => Subject::Oracle,
    };
    let mut manifest = Manifest::new("eval", cfg)?;
    manifest.config_hash = Some(cfg.config_hash()?);
    manifest.method = Some(method.to_string());
    let mut summary = EvalSummary {
        written: Vec::new(),
        errors: BTreeMap::new(),
    };
    for &metric in metrics {
        match evaluate_metric(cfg, &ds, method, &subject, phase1.as_ref(), metric) {
            Ok(out) => {
                let name = eval_file(metric);
                manifest.record(dir, &name, out.to_csv().as_bytes())?;
                summary.written.push(name);
            }
            Err(e) => {
                log::error!("metric {}: {e}", metric.name());
                summary.errors.insert(metric.name().to_string(), e.to_string());
            }
        }
    }
    manifest.errors = summary.errors.clone();
    manifest.save(dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizon,
    Seed,
    Method,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizon" => Ok(Axis::Horizon),
            "seed" => Ok(Axis::Seed),
            "method" => Ok(Axis::Method),
            _ => Err(Error::Config(format!("unknown axis `{s}` (expected horizon, seed or method)"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Horizon => "horizon",
            Axis::Seed => "seed",
            Axis::Method => "method",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub value: String,
    pub seed: u64,
    pub method: Method,
    pub returns: Option<(f64, f64)>,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str = "axis,value,method,metric,mean,sd,seeds,error";
pub const SWEEP_RAW_HEADER: &str = "axis,value,method,seed,return,normalized_return,error";

fn sweep_cells(cfg: &RunConfig, axis: Axis) -> Result<Vec<(String, Method)>> {
    let base = cfg.method()?;
    match axis {
        Axis::Horizon => {
            if cfg.sweep.horizons.is_empty() {
                return Err(Error::Config("sweep.horizons is empty".into()));
            }
            let family = |t| match base {
                Method::Dcc(_) => Ok(Method::Dcc(t)),
                Method::Weascl(_) => Ok(Method::Weascl(t)),
                other => Err(Error::Config(format!("horizon sweep needs a dcc-T or weascl-T method, got {other}"))),
            };
            cfg.sweep.horizons.iter().map(|&t| Ok((t.to_string(), family(t)?))).collect()
        }
        Axis::Seed => Ok(vec![(base.to_string(), base)]),
        Axis::Method => {
            let methods = cfg.sweep_methods()?;
            if methods.is_empty() {
                return Err(Error::Config("sweep.methods is empty".into()));
            }
            Ok(methods.into_iter().map(|m| (m.to_string(), m)).collect())
        }
    }
}

/// Runs every (cell, replicate) pair in memory. Replicate `r` regenerates
/// data and phase 1 under master seed `seed + r`; phase 1 is shared by all
/// cells of a replicate.
pub fn run_sweep(cfg: &RunConfig, axis: Axis) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let cells = sweep_cells(cfg, axis)?;
    let mut results = Vec::new();
    for r in 0..cfg.sweep.seeds as u64 {
        let rep = RunConfig {
            seed: cfg.seed.wrapping_add(r),
            ..cfg.clone()
        };
        let prepared = generate(&rep).and_then(|ds| {
            let needs_p1 = cells.iter().any(|(_, m)| *m != Method::Oracle);
            let p1 = if needs_p1 { Some(run_phase1(&rep, &ds)?) } else { None };
            Ok((ds, p1))
        });
        for (value, method) in &cells {
            let outcome = match &prepared {
                Err(e) => Err(Error::InvalidArgument(format!("data or phase 1 failed: {e}"))),
                Ok((ds, p1)) => sweep_cell(&rep, ds, p1.as_ref(), *method),
            };
            log::info!("sweep {}={value} seed {}: {outcome:?}", axis.name(), rep.seed);
            results.push(CellResult {
                value: value.clone(),
                seed: rep.seed,
                method: *method,
                returns: outcome.as_ref().ok().copied(),
                error: outcome.err().map(|e| e.to_string()),
            });
        }
    }
    Ok(results)
}

fn sweep_cell(cfg: &RunConfig, ds: &Dataset, p1: Option<&Phase1Output>, method: Method) -> Result<(f64, f64)> {
    let (raw, norm) = if method == Method::Oracle {
        return_samples(cfg, &ds.pair, &Subject::Oracle)?
    } else {
        let p1 = p1.ok_or_else(|| Error::InvalidArgument("phase 1 missing".into()))?;
        let out = run_phase2(cfg, ds, p1, method, None)?;
        if let Some(e) = out.error {
            return Err(Error::NonFinite(e));
        }
        return_samples(cfg, &ds.pair, &Subject::Trained(&out.model))?
    };
    Ok((mean_sd(&raw).0, mean_sd(&norm).0))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aggregated table (one row per cell and metric) and raw per-seed rows.
pub fn sweep_tables(axis: Axis, results: &[CellResult]) -> (String, String) {
    let mut agg = format!("{SWEEP_HEADER}\n");
    let mut raw = format!("{SWEEP_RAW_HEADER}\n");
    let mut order: Vec<(&str, Method)> = Vec::new();
    for c in results {
        if !order.contains(&(c.value.as_str(), c.method)) {
            order.push((&c.value, c.method));
        }
        let (r, n) = c.returns.map_or((String::new(), String::new()), |(r, n)| (fmt_stat(r), fmt_stat(n)));
        let _ = writeln!(
            raw,
            "{},{},{},{},{r},{n},{}",
            axis.name(),
            c.value,
            c.method,
            c.seed,
            csv_field(c.error.as_deref().unwrap_or(""))
        );
    }
    for (value, method) in order {
        let cell: Vec<&CellResult> = results.iter().filter(|c| c.value == value && c.method == method).collect();
        let errors: Vec<String> = cell.iter().filter_map(|c| c.error.as_ref().map(|e| format!("seed {}: {e}", c.seed))).collect();
        let ok: Vec<(f64, f64)> = cell.iter().filter_map(|c| c.returns).collect();
        for (metric, pick) in [("return", 0), ("normalized_return", 1)] {
            let xs: Vec<f64> = ok.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
            let (mean, sd) = mean_sd(&xs);
            let _ = writeln!(
                agg,
                "{},{value},{method},{metric},{},{},{},{}",
                axis.name(),
                fmt_stat(mean),
                fmt_stat(sd),
                xs.len(),
                csv_field(&errors.join("; "))
            );
        }
    }
    (agg, raw)
}

/// `sweep` command: writes `sweep_<axis>.csv` and `sweep_<axis>_raw.csv`.
pub fn cmd_sweep(dir: &Path, cfg: &RunConfig, axis: Axis) -> Result<Vec<CellResult>> {
    let results = run_sweep(cfg, axis)?;
    fs::create_dir_all(dir)?;
    let (agg, raw) = sweep_tables(axis, &results);
    let mut manifest = Manifest::new(&format!("sweep_{}", axis.name()), cfg)?;
    manifest.config_hash = Some(cfg.config_hash()?);
    manifest.record(dir, &format!("sweep_{}.csv", axis.name()), agg.as_bytes())?;
    manifest.record(dir, &format!("sweep_{}_raw.csv", axis.name()), raw.as_bytes())?;
    for c in &results {
        if let Some(e) = &c.error {
            manifest.errors.insert(format!("{}={} seed {}", axis.name(), c.value, c.seed), e.clone());
        }
    }
    manifest.save(dir)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.pair.kind = kind.into();
        cfg.data.rungs = 3;
        cfg.data.trajectories_per_rung = 2;
        cfg.data.horizon = 12;
        cfg.data.n_pairs = 60;
        cfg.train.batch = 16;
        cfg.train.phase1_max_epochs = 2;
        cfg.train.forward_max_epochs = 2;
        cfg.train.phase2_max_cycles = 1;
        cfg.train.inner_state = 1;
        cfg.train.inner_action = 1;
        cfg.train.architecture.map_hidden = vec![8];
        cfg.train.architecture.disc_hidden = vec![8];
        cfg.train.architecture.forward_hidden = vec![8];
        cfg.train.architecture.sim_encoder = 4;
        cfg.train.architecture.sim_head = 4;
        cfg.eval.episodes = 2;
        cfg.eval.episode_horizon = 5;
        cfg.eval.seeds = 2;
        cfg.eval.compounding_horizon = 3;
        cfg.eval.compounding_batch = 8;
        cfg.eval.recovery_samples = 10;
        cfg.sweep.horizons = vec![1, 2];
        cfg.sweep.seeds = 1;
        cfg
    }

    #[test]
    fn dataset_round_trips_and_checks_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("scaled");
        let ds = generate(&cfg).unwrap();
        write_dataset(dir.path(), &cfg, &ds, false).unwrap();
        let back = read_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(back.demos1, ds.demos1);
        assert_eq!(back.state_sets, ds.state_sets);
        assert!(matches!(write_dataset(dir.path(), &cfg, &ds, false), Err(Error::Config(_))));
        write_dataset(dir.path(), &cfg, &ds, true).unwrap();

        let mut other = cfg.clone();
        other.seed = 9;
        assert!(matches!(read_dataset(dir.path(), &other), Err(Error::Provenance(_))));
        fs::write(dir.path().join(XI1), "tampered").unwrap();
        assert!(matches!(read_dataset(dir.path(), &cfg), Err(Error::Provenance(_))));
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let cfg = tiny("gain");
        let ds = generate(&cfg).unwrap();
        let p1 = run_phase1(&cfg, &ds).unwrap();
        assert_eq!(p1.sim_a.len(), 1);
        let out = run_phase2(&cfg, &ds, &p1, Method::Weascl(2), None).unwrap();
        let set = model_to_set(&out.model, &BTreeMap::new());
        let back = model_from_set(&ModelSet::from_bytes(&set.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, out.model);
        let p1_back = phase1_from_set(&phase1_to_set(&p1, &BTreeMap::new())).unwrap();
        assert_eq!(p1_back.sim_a, p1.sim_a);
        assert_eq!(p1_back.forward, p1.forward);
    }

    #[test]
    fn dcc_runs_drop_similarity_nets() {
        let cfg = tiny("scaled");
        let ds = generate(&cfg).unwrap();
        let p1 = run_phase1(&cfg, &ds).unwrap();
        let out = run_phase2(&cfg, &ds, &p1, Method::Dcc(1), None).unwrap();
        assert!(out.model.sim_s.is_empty() && out.model.sim_a.is_empty());
        assert!(run_phase2(&cfg, &ds, &p1, Method::Oracle, None).is_err());
    }

    #[test]
    fn metric_lists() {
        assert_eq!(Metric::parse_list("return,compounding").unwrap(), vec![Metric::Return, Metric::Compounding]);
        let err = Metric::parse_list("return,speed").unwrap_err().to_string();
        assert!(err.contains("valid metrics: return, compounding"), "{err}");
        assert!(Metric::parse_list("").is_err());
    }

    #[test]
    fn oracle_metrics_are_exact() {
        let cfg = tiny("scaled");
        let ds = generate(&cfg).unwrap();
        let out = evaluate_metric(&cfg, &ds, Method::Oracle, &Subject::Oracle, None, Metric::Return).unwrap();
        let MetricOutput::Table(r) = out else { panic!() };
        assert_eq!(r.metrics[1].mean, 1.0);
        let out = evaluate_metric(&cfg, &ds, Method::Oracle, &Subject::Oracle, None, Metric::Recovery).unwrap();
        let MetricOutput::Table(r) = out else { panic!() };
        assert!(r.metrics.iter().all(|m| m.mean == 0.0));
        let arm = generate(&tiny("arm")).unwrap();
        assert!(evaluate_metric(&cfg, &arm, Method::Oracle, &Subject::Oracle, None, Metric::Recovery).is_err());
    }

    #[test]
    fn sweep_tables_record_failures_in_row() {
        let results = vec![
            CellResult {
                value: "1".into(),
                seed: 0,
                method: Method::Dcc(1),
                returns: Some((-5.0, 0.8)),
                error: None,
            },
            CellResult {
                value: "1".into(),
                seed: 1,
                method: Method::Dcc(1),
                returns: None,
                error: Some("non-finite value: x, y".into()),
            },
        ];
        let (agg, raw) = sweep_tables(Axis::Horizon, &results);
        assert_eq!(agg.lines().count(), 3);
        assert!(agg.lines().nth(1).unwrap().ends_with(",1,\"seed 1: non-finite value: x, y\""));
        assert_eq!(raw.lines().count(), 3);
    }

    #[test]
    fn sweep_axis_validation() {
        let mut cfg = tiny("scaled");
        cfg.method = "cc".into();
        assert!(matches!(run_sweep(&cfg, Axis::Horizon), Err(Error::Config(_))));
        cfg.method = "dcc-1".into();
        cfg.sweep.horizons.clear();
        assert!(matches!(run_sweep(&cfg, Axis::Horizon), Err(Error::Config(_))));
        cfg.sweep.methods.clear();
        assert!(matches!(run_sweep(&cfg, Axis::Method), Err(Error::Config(_))));
        assert!("speed".parse::<Axis>().is_err());
    }

    #[test]
    fn sweep_horizon_axis_runs() {
        let mut cfg = tiny("scaled");
        cfg.method = "dcc-1".into();
        let rows = run_sweep(&cfg, Axis::Horizon).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.error.is_none()), "{rows:?}");
        assert_eq!(rows[1].method, Method::Dcc(2));
    }
}
