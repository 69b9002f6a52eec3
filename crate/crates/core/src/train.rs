//! Two-phase training: similarity nets and the forward model first, then
//! alternating state-phase and action-phase updates of the maps.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datasets::{sample_segments, AbstractionPairSet, TrajectorySet};
use crate::error::{Error, Result};
use crate::losses::{
    disc_action_objective, disc_state_objective, forward_model_loss, similarity_loss, total_map_loss, Architecture,
    LossWeights, MapBatch, Phase, TermValues, Trainable, TranslationModel,
};
use crate::nn::{Adam, AdamConfig, ForwardModel, SimilarityNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub phase1_max_epochs: usize,
    /// Forward-model epochs are capped separately; one epoch is a full pass.
    pub forward_max_epochs: usize,
    pub holdout_fraction: f64,
    pub phase2_max_cycles: usize,
    pub inner_state: usize,
    pub inner_action: usize,
    pub tolerance: f64,
    pub patience: usize,
    /// Moving-average length used by the convergence check.
    pub window: usize,
    pub map_optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
    pub phase1_optimizer: AdamConfig,
    pub architecture: Architecture,
    pub seed: u64,
    /// Write a checkpoint every this many outer cycles (0 disables).
    pub checkpoint_every: usize,
    /// Record real elapsed time in the log (breaks byte-identical logs).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            phase1_max_epochs: 200,
            forward_max_epochs: 200,
            holdout_fraction: 0.2,
            phase2_max_cycles: 300,
            inner_state: 25,
            inner_action: 25,
            tolerance: 1e-4,
            patience: 20,
            window: 5,
            map_optimizer: AdamConfig::default(),
            disc_optimizer: AdamConfig::discriminator(),
            phase1_optimizer: AdamConfig::default(),
            architecture: Architecture::default(),
            seed: 0,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.inner_state == 0 || self.inner_action == 0 {
            return bad("inner_state and inner_action must be at least 1");
        }
        if self.phase2_max_cycles == 0 || self.phase1_max_epochs == 0 || self.forward_max_epochs == 0 {
            return bad("epoch and cycle caps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if !(self.tolerance >= 0.0) || self.patience == 0 || self.window == 0 {
            return bad("tolerance must be >= 0 and patience, window >= 1");
        }
        for (name, o) in [
            ("map_optimizer", &self.map_optimizer),
            ("disc_optimizer", &self.disc_optimizer),
            ("phase1_optimizer", &self.phase1_optimizer),
        ] {
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
                return Err(Error::Config(format!("{name}: invalid Adam settings {o:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    /// Stopped by the epoch or cycle cap; the result is usable.
    MaxEpochs,
    /// A loss went non-finite; the last good parameters were kept.
    Aborted,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxEpochs => "max-epochs",
            Status::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub phase: String,
    pub step: usize,
    pub terms: TermValues,
    pub total: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub status: Status,
}

pub const LOG_HEADER: &str = "phase,step,loss_adv_s,loss_adv_a,loss_dom,loss_mdyn,loss_weak,loss_total,wall_ms";

impl Default for TrainLog {
    fn default() -> Self {
        Self::new()
    }
}

impl TrainLog {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            status: Status::MaxEpochs,
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.16e}"));
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let t = &r.terms;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.phase,
                r.step,
                cell(t.adv_s),
                cell(t.adv_a),
                cell(t.dom),
                cell(t.mdyn),
                cell(t.weak),
                cell(Some(r.total)),
                r.wall_ms
            );
        }
        out
    }

    pub fn append(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.status = other.status;
    }
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn ms(&self) -> u128 {
        if self.enabled {
            self.start.elapsed().as_millis()
        } else {
            0
        }
    }
}

/// Moving-average plateau detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub window: usize,
    pub tolerance: f64,
    pub patience: usize,
}

impl Convergence {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            window: c.window,
            tolerance: c.tolerance,
            patience: c.patience,
        }
    }

    /// True when each of the last `patience` moving-average updates improved
    /// the average by less than `tolerance` (relative).
    pub fn check(&self, history: &[f64]) -> bool {
        let w = self.window.max(1);
        if history.len() < w + self.patience {
            return false;
        }
        let avg = |end: usize| history[end - w..end].iter().sum::<f64>() / w as f64;
        (history.len() - self.patience + 1..=history.len()).all(|end| {
            let (prev, cur) = (avg(end - 1), avg(end));
            (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < self.tolerance
        })
    }
}

/// Held-out quality of one similarity net.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityMetrics {
    pub bce: f64,
    /// Fraction of held-out pairs where `p > 0.5` agrees with `label > 0.5`.
    pub accuracy: f64,
    pub holdout: usize,
    pub status: Status,
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub forward: ForwardModel,
    pub forward_holdout_mse: f64,
    pub forward_status: Status,
    pub sim_s: Vec<SimilarityNet>,
    pub sim_a: Vec<SimilarityNet>,
    pub sim_metrics: Vec<SimilarityMetrics>,
    pub log: TrainLog,
}

fn split(n: usize, holdout: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let held = ((n as f64) * holdout).round() as usize;
    let held = held.min(n.saturating_sub(1));
    let train = idx.split_off(held);
    (train, idx)
}

fn non_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss is {v}")))
    }
}

/// Evaluates a similarity net on the given records.
pub fn similarity_metrics(net: &SimilarityNet, set: &AbstractionPairSet, idx: &[usize]) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (x1, x2, v) = set.tensors(idx)?;
    let mut g = Graph::new();
    let b = net.bind(&mut g, false);
    let (a, c, l) = (g.constant(x1), g.constant(x2), g.constant(v.clone()));
    let p = crate::nn::PairModule::forward_pair(&b, &mut g, a, c)?;
    let loss = crate::losses::bce(&mut g, p, l)?;
    let correct = g
        .value(p)
        .data()
        .iter()
        .zip(v.data())
        .filter(|(p, v)| (**p > 0.5) == (**v > 0.5))
        .count();
    Ok((g.value(loss).item(), correct as f64 / idx.len() as f64))
}

fn train_similarity(
    net: &mut SimilarityNet,
    set: &AbstractionPairSet,
    config: &TrainConfig,
    tag: &str,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
    clock: &Clock,
) -> Result<SimilarityMetrics> {
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("{tag}: empty abstraction-pair set")));
    }
    let (mut train, held) = split(set.len(), config.holdout_fraction, rng);
    let mut opts: Vec<Adam> = (0..3).map(|_| Adam::new(config.phase1_optimizer)).collect();
    let conv = Convergence::from_config(config);
    let mut history = Vec::new();
    let mut status = Status::MaxEpochs;
    let mut step = 0;
    for _ in 0..config.phase1_max_epochs {
        train.shuffle(rng);
        let mut epoch_loss = 0.0;
        let chunks: Vec<&[usize]> = train.chunks(config.batch).collect();
        for idx in &chunks {
            let (x1, x2, v) = set.tensors(idx)?;
            let mut g = Graph::new();
            let b = net.bind(&mut g, true);
            let (a, c, l) = (g.constant(x1), g.constant(x2), g.constant(v));
            let loss = similarity_loss(&mut g, &b, a, c, l)?;
            let value = g.value(loss).item();
            non_finite(tag, value)?;
            g.backward(loss)?;
            let grads = [b.encoder1.grads(&g), b.encoder2.grads(&g), b.head.grads(&g)];
            for ((opt, m), gr) in opts.iter_mut().zip(net.nets_mut()).zip(&grads) {
                opt.step_mlp(m, gr)?;
            }
            epoch_loss += value;
            step += 1;
        }
        let mean = epoch_loss / chunks.len() as f64;
        log.records.push(LogRecord {
            phase: tag.to_string(),
            step,
            terms: TermValues::default(),
            total: mean,
            wall_ms: clock.ms(),
        });
        history.push(mean);
        if conv.check(&history) {
            status = Status::Converged;
            break;
        }
    }
    let (bce, accuracy) = similarity_metrics(net, set, &held)?;
    Ok(SimilarityMetrics {
        bce,
        accuracy,
        holdout: held.len(),
        status,
    })
}

/// `(s, a, s')` rows from every transition of a trajectory set.
pub fn transition_tensors(set: &TrajectorySet, idx: &[(usize, usize)]) -> Result<(Tensor, Tensor, Tensor)> {
    let tr = &set.trajectories;
    let rows = idx.len();
    let mut s = Vec::with_capacity(rows * set.state_dim);
    let mut a = Vec::with_capacity(rows * set.action_dim);
    let mut n = Vec::with_capacity(rows * set.state_dim);
    for &(i, t) in idx {
        s.extend_from_slice(&tr[i].states[t]);
        a.extend_from_slice(&tr[i].actions[t]);
        n.extend_from_slice(&tr[i].states[t + 1]);
    }
    Ok((
        Tensor::new(vec![rows, set.state_dim], s)?,
        Tensor::new(vec![rows, set.action_dim], a)?,
        Tensor::new(vec![rows, set.state_dim], n)?,
    ))
}

pub fn forward_mse(model: &ForwardModel, set: &TrajectorySet, idx: &[(usize, usize)]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let (s, a, n) = transition_tensors(set, idx)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let (s, a, n) = (g.constant(s), g.constant(a), g.constant(n));
    let l = forward_model_loss(&mut g, &b, s, a, n)?;
    Ok(g.value(l).item())
}

fn train_forward(
    model: &mut ForwardModel,
    set: &TrajectorySet,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
    clock: &Clock,
) -> Result<(f64, Status)> {
    let all: Vec<(usize, usize)> = set
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("forward model needs agent-2 transitions".into()));
    }
    let (train_idx, held_idx) = split(all.len(), config.holdout_fraction, rng);
    let mut train: Vec<(usize, usize)> = train_idx.iter().map(|&i| all[i]).collect();
    let held: Vec<(usize, usize)> = held_idx.iter().map(|&i| all[i]).collect();
    let mut opt = Adam::new(config.phase1_optimizer);
    let conv = Convergence::from_config(config);
    let mut history = Vec::new();
    let mut status = Status::MaxEpochs;
    let mut step = 0;
    for _ in 0..config.forward_max_epochs {
        train.shuffle(rng);
        let mut epoch_loss = 0.0;
        let chunks: Vec<&[(usize, usize)]> = train.chunks(config.batch).collect();
        for idx in &chunks {
            let (s, a, n) = transition_tensors(set, idx)?;
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let (s, a, n) = (g.constant(s), g.constant(a), g.constant(n));
            let loss = forward_model_loss(&mut g, &b, s, a, n)?;
            let value = g.value(loss).item();
            non_finite("forward model", value)?;
            g.backward(loss)?;
            opt.step_mlp(&mut model.net, &b.net.grads(&g))?;
            epoch_loss += value;
            step += 1;
        }
        let mean = epoch_loss / chunks.len() as f64;
        log.records.push(LogRecord {
            phase: "forward".into(),
            step,
            terms: TermValues::default(),
            total: mean,
            wall_ms: clock.ms(),
        });
        history.push(mean);
        if conv.check(&history) {
            status = Status::Converged;
            break;
        }
    }
    Ok((forward_mse(model, set, &held)?, status))
}

/// Trains one similarity net per abstraction-pair set, then the forward
/// model on agent-2 transitions. Empty `state_sets` and `action_sets` give
/// the pure dynamics-cycle mode.
pub fn train_phase1(
    demos2: &TrajectorySet,
    state_sets: &[AbstractionPairSet],
    action_sets: &[AbstractionPairSet],
    config: &TrainConfig,
) -> Result<Phase1Output> {
    config.validate()?;
    let clock = Clock::new(config.log_wall_time);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut log = TrainLog::new();
    let arch = &config.architecture;
    let mut sim_metrics = Vec::new();
    let mut train_sets = |sets: &[AbstractionPairSet], prefix: &str, role, salt: u64, log: &mut TrainLog| -> Result<Vec<SimilarityNet>> {
        let mut nets = Vec::new();
        for (k, set) in sets.iter().enumerate() {
            let mut net = SimilarityNet::new(role, set.dim1, set.dim2, arch.sim_encoder, arch.sim_head, config.seed.wrapping_add(salt + 17 * k as u64))?;
            let tag = format!("{prefix}{k}");
            let m = train_similarity(&mut net, set, config, &tag, &mut rng, log, &clock)?;
            log::info!("{tag}: held-out bce {:.4} accuracy {:.3} ({})", m.bce, m.accuracy, m.status.as_str());
            sim_metrics.push(m);
            nets.push(net);
        }
        Ok(nets)
    };
    let sim_s = train_sets(state_sets, "sim-s", crate::nn::Role::SimState, 1000, &mut log)?;
    let sim_a = train_sets(action_sets, "sim-a", crate::nn::Role::SimAction, 2000, &mut log)?;
    let mut forward = ForwardModel::new(demos2.state_dim, demos2.action_dim, &arch.forward_hidden, config.seed.wrapping_add(3000))?;
    let mut frng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let (mse, forward_status) = train_forward(&mut forward, demos2, config, &mut frng, &mut log, &clock)?;
    log::info!("forward model: held-out mse {mse:.3e} ({})", forward_status.as_str());
    log.status = if forward_status == Status::Converged && sim_metrics.iter().all(|m| m.status == Status::Converged) {
        Status::Converged
    } else {
        Status::MaxEpochs
    };
    Ok(Phase1Output {
        forward,
        forward_holdout_mse: mse,
        forward_status,
        sim_s,
        sim_a,
        sim_metrics,
        log,
    })
}

/// What phase 2 reports to an observer.
pub enum TrainEvent<'a> {
    /// One inner iteration (generator step then discriminator step).
    Inner {
        cycle: usize,
        phase: Phase,
        before: &'a TranslationModel,
        after: &'a TranslationModel,
    },
    CycleEnd {
        cycle: usize,
        model: &'a TranslationModel,
    },
}

pub struct Phase2Output {
    pub model: TranslationModel,
    pub log: TrainLog,
    pub cycles: usize,
    pub error: Option<String>,
}

struct Optimizers {
    phi: Adam,
    phi_bar: Adam,
    h1: Adam,
    h2: Adam,
    disc_s: Adam,
    disc_a1: Adam,
    disc_a2: Adam,
}

/// Assembles a translation model around frozen phase-1 outputs.
pub fn initial_model(demos1: &TrajectorySet, demos2: &TrajectorySet, p1: &Phase1Output, config: &TrainConfig) -> Result<TranslationModel> {
    let dims = crate::losses::PairDims {
        s1: demos1.state_dim,
        a1: demos1.action_dim,
        s2: demos2.state_dim,
        a2: demos2.action_dim,
    };
    let mut model = TranslationModel::new(dims, &config.architecture, 0, 0, config.seed)?;
    model.forward = p1.forward.clone();
    model.sim_s = p1.sim_s.clone();
    model.sim_a = p1.sim_a.clone();
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn step_phase(
    model: &mut TranslationModel,
    opts: &mut Optimizers,
    demos1: &TrajectorySet,
    demos2: &TrajectorySet,
    weights: &LossWeights,
    config: &TrainConfig,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<(TermValues, f64)> {
    let seg = sample_segments(demos1, weights.horizon, config.batch, rng)?;
    let other = sample_segments(demos2, 1, config.batch, rng)?;
    let (s2, a2) = (&other.states[0], &other.actions[0]);

    let trainable = match phase {
        Phase::State => Trainable {
            state_maps: true,
            ..Trainable::default()
        },
        _ => Trainable {
            action_maps: true,
            ..Trainable::default()
        },
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable);
    let refs = bound.refs();
    let batch = MapBatch::from_tensors(&mut g, &seg.states, &seg.actions, s2, a2);
    let loss = total_map_loss(&mut g, &refs.nets(), &batch, weights, phase)?;
    let total = g.value(loss.total).item();
    non_finite("map", total)?;
    g.backward(loss.total)?;
    match phase {
        Phase::State => {
            let (gp, gb) = (bound.phi.grads(&g), bound.phi_bar.grads(&g));
            opts.phi.step_mlp(&mut model.phi, &gp)?;
            opts.phi_bar.step_mlp(&mut model.phi_bar, &gb)?;
        }
        _ => {
            let (g1, g2) = (bound.h1.grads(&g), bound.h2.grads(&g));
            opts.h1.step_mlp(&mut model.h1, &g1)?;
            opts.h2.step_mlp(&mut model.h2, &g2)?;
        }
    }
    drop(refs);

    // Discriminators see the maps after the generator update.
    let trainable = match phase {
        Phase::State => Trainable {
            disc_state: true,
            ..Trainable::default()
        },
        _ => Trainable {
            disc_action: true,
            ..Trainable::default()
        },
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable);
    let refs = bound.refs();
    let s1 = g.constant(seg.states[0].clone());
    let a1 = g.constant(seg.actions[0].clone());
    let (s2v, a2v) = (g.constant(s2.clone()), g.constant(a2.clone()));
    let d = match phase {
        Phase::State => disc_state_objective(&mut g, &refs.nets(), s1, s2v)?,
        _ => disc_action_objective(&mut g, &refs.nets(), s1, a1, s2v, a2v)?,
    };
    non_finite("discriminator", g.value(d).item())?;
    g.backward(d)?;
    match phase {
        Phase::State => {
            let gs = bound.disc_s.grads(&g);
            opts.disc_s.step_mlp(&mut model.disc_s, &gs)?;
        }
        _ => {
            let (g1, g2) = (bound.disc_a1.grads(&g), bound.disc_a2.grads(&g));
            opts.disc_a1.step_mlp(&mut model.disc_a1, &g1)?;
            opts.disc_a2.step_mlp(&mut model.disc_a2, &g2)?;
        }
    }
    Ok((loss.terms, total))
}

/// Alternating map training on top of a model whose forward model and
/// similarity nets are already trained. Those are never updated here.
pub fn train_phase2(
    demos1: &TrajectorySet,
    demos2: &TrajectorySet,
    mut model: TranslationModel,
    weights: &LossWeights,
    config: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(TrainEvent<'_>)>,
) -> Result<Phase2Output> {
    config.validate()?;
    weights.validate()?;
    if weights.weak > 0.0 && model.sim_s.is_empty() && model.sim_a.is_empty() {
        return Err(Error::InvalidArgument("weak constraints enabled but no similarity nets were trained".into()));
    }
    let clock = Clock::new(config.log_wall_time);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0003);
    let (m, d) = (config.map_optimizer, config.disc_optimizer);
    let mut opts = Optimizers {
        phi: Adam::new(m),
        phi_bar: Adam::new(m),
        h1: Adam::new(m),
        h2: Adam::new(m),
        disc_s: Adam::new(d),
        disc_a1: Adam::new(d),
        disc_a2: Adam::new(d),
    };
    let conv = Convergence::from_config(config);
    let mut log = TrainLog::new();
    let mut history = Vec::new();
    let mut last_good = model.clone();
    let mut step = 0;
    let mut cycles = 0;
    for cycle in 0..config.phase2_max_cycles {
        let mut cycle_total = 0.0;
        for (phase, inner, tag) in [
            (Phase::State, config.inner_state, "state"),
            (Phase::Action, config.inner_action, "action"),
        ] {
            let mut phase_total = 0.0;
            for _ in 0..inner {
                let before = observer.as_ref().map(|_| model.clone());
                let result = step_phase(&mut model, &mut opts, demos1, demos2, weights, config, phase, &mut rng);
                let (terms, total) = match result {
                    Ok(v) => v,
                    Err(Error::NonFinite(msg)) => {
                        log::error!("phase 2 aborted at cycle {cycle}: {msg}");
                        log.status = Status::Aborted;
                        return Ok(Phase2Output {
                            model: last_good,
                            log,
                            cycles,
                            error: Some(msg),
                        });
                    }
                    Err(e) => return Err(e),
                };
                step += 1;
                log.records.push(LogRecord {
                    phase: tag.into(),
                    step,
                    terms,
                    total,
                    wall_ms: clock.ms(),
                });
                phase_total += total;
                if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                    obs(TrainEvent::Inner {
                        cycle,
                        phase,
                        before,
                        after: &model,
                    });
                }
            }
            cycle_total += phase_total / inner as f64;
        }
        cycles = cycle + 1;
        last_good = model.clone();
        if let Some(obs) = observer.as_mut() {
            obs(TrainEvent::CycleEnd { cycle, model: &model });
        }
        history.push(cycle_total);
        if conv.check(&history) {
            log.status = Status::Converged;
            break;
        }
    }
    log::info!("phase 2 finished after {cycles} cycles ({})", log.status.as_str());
    Ok(Phase2Output {
        model,
        log,
        cycles,
        error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{collect_demos, make_abstraction_pairs, LabelConfig, RecordKind};
    use crate::envs::{make_pair, quality_ladder, Agent, MdpPair, PairKind, PairParams};

    fn conv() -> Convergence {
        Convergence {
            window: 1,
            tolerance: 1e-4,
            patience: 3,
        }
    }

    #[test]
    fn plateau_converges() {
        let h: Vec<f64> = (0..10).map(|i| 1.0 - 1e-6 * i as f64).collect();
        assert!(conv().check(&h));
    }

    #[test]
    fn steady_improvement_does_not_converge() {
        let mut h = vec![1.0];
        for _ in 0..10 {
            let last = *h.last().unwrap();
            h.push(last * (1.0 - 1e-3));
        }
        assert!(!conv().check(&h));
        assert!(!conv().check(&h[..2]));
    }

    #[test]
    fn oscillation_in_band_converges_only_with_wide_window() {
        let h: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { 1.2 }).collect();
        // Every other step improves by far more than the tolerance, so only
        // the cycle cap can stop this run.
        assert!(!conv().check(&h));
        let c = Convergence { window: 2, ..conv() };
        assert!(c.check(&h));
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch: 16,
            phase1_max_epochs: 3,
            forward_max_epochs: 3,
            phase2_max_cycles: 3,
            inner_state: 2,
            inner_action: 2,
            architecture: Architecture {
                map_hidden: vec![8],
                disc_hidden: vec![8],
                forward_hidden: vec![8],
                sim_encoder: 4,
                sim_head: 4,
            },
            ..TrainConfig::default()
        }
    }

    struct Fixture {
        pair: MdpPair,
        d1: TrajectorySet,
        d2: TrajectorySet,
        ys: Vec<AbstractionPairSet>,
        ya: Vec<AbstractionPairSet>,
    }

    fn fixture() -> Fixture {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let d1 = collect_demos(&pair, Agent::One, &quality_ladder(3), 3, 10, 1).unwrap();
        let d2 = collect_demos(&pair, Agent::Two, &quality_ladder(3), 3, 10, 2).unwrap();
        let cfg = LabelConfig { n: 100, ..LabelConfig::default() };
        let sa = &pair.state_abstractions[0];
        let aa = &pair.action_abstractions[0];
        let ys = vec![make_abstraction_pairs(&d1, &d2, RecordKind::State, 0, &sa.agent1, &sa.agent2, &cfg, 3).unwrap()];
        let ya = vec![make_abstraction_pairs(&d1, &d2, RecordKind::StateAction, 0, &aa.agent1, &aa.agent2, &cfg, 4).unwrap()];
        Fixture { pair, d1, d2, ys, ya }
    }

    #[test]
    fn phase1_without_pairs_trains_only_forward_model() {
        let f = fixture();
        let out = train_phase1(&f.d2, &[], &[], &small_config()).unwrap();
        assert!(out.sim_s.is_empty() && out.sim_a.is_empty());
        assert!(out.log.records.iter().all(|r| r.phase == "forward"));
        assert!(out.forward_holdout_mse.is_finite());
        let _ = f.pair;
    }

    #[test]
    fn log_is_deterministic_and_well_formed() {
        let f = fixture();
        let run = || {
            let cfg = small_config();
            let p1 = train_phase1(&f.d2, &f.ys, &f.ya, &cfg).unwrap();
            let model = initial_model(&f.d1, &f.d2, &p1, &cfg).unwrap();
            let w = LossWeights { horizon: 2, ..LossWeights::default() };
            let p2 = train_phase2(&f.d1, &f.d2, model, &w, &cfg, None).unwrap();
            let mut log = p1.log;
            log.append(p2.log);
            log.to_csv()
        };
        let a = run();
        assert_eq!(a, run());
        let mut lines = a.lines();
        assert_eq!(lines.next(), Some(LOG_HEADER));
        assert!(a.lines().skip(1).all(|l| l.split(',').count() == 9));
        assert!(a.contains("\nstate,") && a.contains("\naction,") && a.contains("\nsim-s0,"));
    }

    #[test]
    fn freeze_contract_holds_every_inner_iteration() {
        let f = fixture();
        let cfg = small_config();
        let p1 = train_phase1(&f.d2, &f.ys, &f.ya, &cfg).unwrap();
        let model = initial_model(&f.d1, &f.d2, &p1, &cfg).unwrap();
        let frozen_before = (model.forward.clone(), model.sim_s.clone(), model.sim_a.clone());
        let mut checked = 0;
        let mut obs = |e: TrainEvent<'_>| {
            if let TrainEvent::Inner { phase, before, after, .. } = e {
                let same = |a: &crate::nn::Mlp, b: &crate::nn::Mlp| a.flat_params() == b.flat_params();
                match phase {
                    Phase::State => {
                        assert!(same(&before.h1, &after.h1) && same(&before.h2, &after.h2));
                        assert!(same(&before.disc_a1, &after.disc_a1) && same(&before.disc_a2, &after.disc_a2));
                        assert!(!same(&before.phi, &after.phi));
                    }
                    _ => {
                        assert!(same(&before.phi, &after.phi) && same(&before.phi_bar, &after.phi_bar));
                        assert!(same(&before.disc_s, &after.disc_s));
                        assert!(!same(&before.h1, &after.h1));
                    }
                }
                checked += 1;
            }
        };
        let out = train_phase2(&f.d1, &f.d2, model, &LossWeights { horizon: 2, ..LossWeights::default() }, &cfg, Some(&mut obs)).unwrap();
        assert_eq!(checked, 3 * 4);
        assert_eq!(out.model.forward, frozen_before.0);
        assert_eq!(out.model.sim_s, frozen_before.1);
        assert_eq!(out.model.sim_a, frozen_before.2);
    }

    #[test]
    fn weak_weight_without_nets_is_rejected() {
        let f = fixture();
        let cfg = small_config();
        let p1 = train_phase1(&f.d2, &[], &[], &cfg).unwrap();
        let model = initial_model(&f.d1, &f.d2, &p1, &cfg).unwrap();
        assert!(train_phase2(&f.d1, &f.d2, model.clone(), &LossWeights::default(), &cfg, None).is_err());
        let w = LossWeights { weak: 0.0, horizon: 1, ..LossWeights::default() };
        assert!(train_phase2(&f.d1, &f.d2, model, &w, &cfg, None).is_ok());
    }

    #[test]
    fn non_finite_data_aborts_with_last_good_model() {
        let mut f = fixture();
        let cfg = small_config();
        let p1 = train_phase1(&f.d2, &[], &[], &cfg).unwrap();
        let model = initial_model(&f.d1, &f.d2, &p1, &cfg).unwrap();
        for t in &mut f.d1.trajectories {
            for s in &mut t.states {
                s[0] = f64::NAN;
            }
        }
        let w = LossWeights { weak: 0.0, horizon: 1, ..LossWeights::default() };
        let out = train_phase2(&f.d1, &f.d2, model.clone(), &w, &cfg, None).unwrap();
        assert_eq!(out.log.status, Status::Aborted);
        assert!(out.error.is_some());
        assert_eq!(out.model, model);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig { inner_state: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
