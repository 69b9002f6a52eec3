//! Diagnostics: translated-policy return, compounding error, horizon
//! sweeps, misalignment and map-recovery scores.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::datasets::Segments;
use crate::envs::{GroundTruth, Linear, MdpPair, MdpSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TranslationModel};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Adversarial and domain-cycle terms only.
    Cc,
    /// Dynamics cycle consistency over horizon `T`, no weak supervision.
    Dcc(usize),
    /// Dynamics cycle consistency over `T` plus weak constraints.
    Weascl(usize),
    /// Native controller; no maps.
    Oracle,
}

impl Method {
    pub const TABLE: [Method; 6] = [
        Method::Cc,
        Method::Dcc(1),
        Method::Dcc(5),
        Method::Weascl(1),
        Method::Weascl(5),
        Method::Oracle,
    ];

    /// Loss weights for this method derived from `base`; `None` for the oracle.
    pub fn weights(self, base: &LossWeights) -> Option<LossWeights> {
        match self {
            Method::Cc => Some(LossWeights {
                dynamics: 0.0,
                weak: 0.0,
                horizon: 1,
                ..*base
            }),
            Method::Dcc(t) => Some(LossWeights {
                weak: 0.0,
                horizon: t,
                ..*base
            }),
            Method::Weascl(t) => Some(LossWeights { horizon: t, ..*base }),
            Method::Oracle => None,
        }
    }

    pub fn uses_similarity(self) -> bool {
        matches!(self, Method::Weascl(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Cc => f.write_str("cc"),
            Method::Dcc(t) => write!(f, "dcc-{t}"),
            Method::Weascl(t) => write!(f, "weascl-{t}"),
            Method::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let horizon = |t: &str| -> Result<usize> {
            t.parse::<usize>()
                .ok()
                .filter(|t| *t >= 1)
                .ok_or_else(|| Error::Config(format!("method `{s}`: horizon must be a positive integer")))
        };
        match s {
            "cc" => Ok(Method::Cc),
            "oracle" => Ok(Method::Oracle),
            _ => {
                if let Some(t) = s.strip_prefix("dcc-") {
                    Ok(Method::Dcc(horizon(t)?))
                } else if let Some(t) = s.strip_prefix("weascl-") {
                    Ok(Method::Weascl(horizon(t)?))
                } else {
                    Err(Error::Config(format!(
                        "unknown method `{s}` (expected cc, dcc-T, weascl-T or oracle)"
                    )))
                }
            }
        }
    }
}

/// Batched access to the three maps used for evaluation.
pub trait Maps {
    fn phi(&self, s: &Tensor) -> Result<Tensor>;
    fn h1(&self, s: &Tensor, a: &Tensor) -> Result<Tensor>;
    fn h2(&self, t: &Tensor, b: &Tensor) -> Result<Tensor>;
}

fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "hcat",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![a.rows(), a.cols() + b.cols()], data)
}

impl Maps for TranslationModel {
    fn phi(&self, s: &Tensor) -> Result<Tensor> {
        self.phi.predict(s)
    }

    fn h1(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        self.h1.predict(&hcat(s, a)?)
    }

    fn h2(&self, t: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.h2.predict(&hcat(t, b)?)
    }
}

pub(crate) fn apply_rows(m: &Linear, x: &Tensor) -> Result<Tensor> {
    if x.cols() != m.cols {
        return Err(Error::ShapeMismatch {
            op: "linear map",
            left: vec![m.rows, m.cols],
            right: x.shape().to_vec(),
        });
    }
    let data = (0..x.rows()).flat_map(|i| m.apply(x.row(i))).collect();
    Tensor::new(vec![x.rows(), m.rows], data)
}

impl Maps for GroundTruth {
    fn phi(&self, s: &Tensor) -> Result<Tensor> {
        apply_rows(&self.phi, s)
    }

    fn h1(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        apply_rows(&self.h1, &hcat(s, a)?)
    }

    fn h2(&self, t: &Tensor, b: &Tensor) -> Result<Tensor> {
        apply_rows(&self.h2, &hcat(t, b)?)
    }
}

fn check_dims(pair: &MdpPair, maps: &dyn Maps) -> Result<()> {
    let s = Tensor::zeros(vec![1, pair.m1.state_dim]);
    let a = Tensor::zeros(vec![1, pair.m1.action_dim]);
    let t = maps.phi(&s)?;
    let b = maps.h1(&s, &a)?;
    let back = maps.h2(&t, &b)?;
    if t.cols() != pair.m2.state_dim || b.cols() != pair.m2.action_dim || back.cols() != pair.m1.action_dim {
        return Err(Error::InvalidArgument(format!(
            "maps produce dims {}/{}/{} but the pair needs {}/{}/{}",
            t.cols(),
            b.cols(),
            back.cols(),
            pair.m2.state_dim,
            pair.m2.action_dim,
            pair.m1.action_dim
        )));
    }
    Ok(())
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn initial_states(spec: &MdpSpec, episodes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| spec.sample_initial(&mut rng)).collect()
}

fn episode_returns(
    spec: &MdpSpec,
    starts: Vec<Vec<f64>>,
    horizon: usize,
    mut act: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    let mut states = starts;
    let mut returns = vec![0.0; states.len()];
    for t in 0..horizon {
        let batch = Tensor::from_rows(&states)?;
        let actions = act(&batch)?;
        if actions.rows() != states.len() || actions.cols() != spec.action_dim {
            return Err(Error::InvalidArgument(format!("policy produced {:?} actions", actions.shape())));
        }
        if !actions.all_finite() {
            return Err(Error::NonFinite(format!("translated action at step {t}")));
        }
        for (i, s) in states.iter_mut().enumerate() {
            let (a, _) = spec.clamp_action(actions.row(i));
            returns[i] += spec.reward(s, &a);
            *s = spec.step(s, &a)?;
        }
    }
    Ok(returns)
}

/// Episode returns in agent 1's MDP when acting through the maps:
/// `a¹ = H²(Φ(s¹), π²*(Φ(s¹)))`.
pub fn translated_policy_return(pair: &MdpPair, maps: &dyn Maps, episodes: usize, horizon: usize, seed: u64) -> Result<Vec<f64>> {
    check_dims(pair, maps)?;
    let oracle = &pair.m2;
    episode_returns(&pair.m1, initial_states(&pair.m1, episodes, seed), horizon, |s| {
        let t = maps.phi(s)?;
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| oracle.controller(t.row(i))).collect();
        let b = Tensor::from_rows(&rows)?;
        maps.h2(&t, &b)
    })
}

/// Returns of agent 1's own noise-free controller from the same starts.
pub fn native_oracle_return(pair: &MdpPair, episodes: usize, horizon: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = &pair.m1;
    episode_returns(spec, initial_states(spec, episodes, seed), horizon, |s| {
        let rows: Vec<Vec<f64>> = (0..s.rows()).map(|i| spec.controller(s.row(i))).collect();
        Tensor::from_rows(&rows)
    })
}

/// Returns of uniformly random bounded actions from the same starts.
pub fn random_policy_return(pair: &MdpPair, episodes: usize, horizon: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = &pair.m1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    episode_returns(spec, initial_states(spec, episodes, seed), horizon, |s| {
        let rows: Vec<Vec<f64>> = (0..s.rows())
            .map(|_| {
                spec.action_low
                    .iter()
                    .zip(&spec.action_high)
                    .map(|(l, h)| rng.gen_range(*l..=*h))
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    })
}

/// `(R - R_random) / (R_oracle - R_random)`, so 1 matches the native oracle.
pub fn normalized_return(ret: f64, random: f64, oracle: f64) -> f64 {
    (ret - random) / (oracle - random)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    L1,
    L2,
}

fn row_distance(a: &[f64], b: &[f64], d: Distance) -> f64 {
    match d {
        Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
    }
}

fn mean_row_distance(a: &Tensor, b: &Tensor, d: Distance) -> f64 {
    (0..a.rows()).map(|i| row_distance(a.row(i), b.row(i), d)).sum::<f64>() / a.rows() as f64
}

/// `d_τ = mean ‖Φ(s_τ) - ŝ_τ‖₂`, where `ŝ` rolls the true agent-2 dynamics
/// forward from `Φ(s_0)` with translated actions.
pub fn compounding_error_curve(pair: &MdpPair, maps: &dyn Maps, segments: &Segments, t_max: usize) -> Result<Vec<f64>> {
    compounding_error_curve_with(pair, maps, segments, t_max, Distance::L2)
}

pub fn compounding_error_curve_with(
    pair: &MdpPair,
    maps: &dyn Maps,
    segments: &Segments,
    t_max: usize,
    distance: Distance,
) -> Result<Vec<f64>> {
    check_dims(pair, maps)?;
    if t_max == 0 || segments.horizon() < t_max {
        return Err(Error::InvalidArgument(format!(
            "compounding curve to {t_max} needs segments of at least that horizon, got {}",
            segments.horizon()
        )));
    }
    let dynamics = pair.m2.transition_linear();
    let mut rolled = maps.phi(&segments.states[0])?;
    let mut curve = Vec::with_capacity(t_max);
    for tau in 1..=t_max {
        let b = maps.h1(&segments.states[tau - 1], &segments.actions[tau - 1])?;
        rolled = apply_rows(&dynamics, &hcat(&rolled, &b)?)?;
        let target = maps.phi(&segments.states[tau])?;
        curve.push(mean_row_distance(&target, &rolled, distance));
    }
    Ok(curve)
}

/// Fraction of states where `Φ(s)` is closer to `Φ*(s)` than to the
/// mirrored branch `Φ*(-s)`. Ties within 1e-12 count as wrong.
pub fn misalignment_score(pair: &MdpPair, maps: &dyn Maps, states: &Tensor) -> Result<f64> {
    let gt = pair
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} pair has no ground-truth map", pair.kind)))?;
    if states.rows() == 0 {
        return Err(Error::InvalidArgument("misalignment needs at least one state".into()));
    }
    let phi = maps.phi(states)?;
    let mut correct = 0;
    for i in 0..states.rows() {
        let s = states.row(i);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let right = row_distance(phi.row(i), &gt.phi.apply(s), Distance::L2);
        let mirrored = row_distance(phi.row(i), &gt.phi.apply(&neg), Distance::L2);
        if right < mirrored - 1e-12 {
            correct += 1;
        }
    }
    Ok(correct as f64 / states.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub state: f64,
    pub action: f64,
    /// `state` divided by the diagonal of agent 2's state box.
    pub state_normalized: f64,
    /// `action` divided by the diagonal of agent 2's action box.
    pub action_normalized: f64,
}

/// Uniform samples from agent 1's state and action boxes.
pub fn uniform_samples(spec: &MdpSpec, n: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<Vec<f64>> = (0..n).map(|_| spec.sample_initial(&mut rng)).collect();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            spec.action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(l, h)| rng.gen_range(*l..=*h))
                .collect()
        })
        .collect();
    Ok((Tensor::from_rows(&s)?, Tensor::from_rows(&a)?))
}

pub fn map_recovery_error(pair: &MdpPair, maps: &dyn Maps, n: usize, seed: u64) -> Result<Recovery> {
    let gt = pair
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} pair has no ground-truth map", pair.kind)))?;
    check_dims(pair, maps)?;
    if n == 0 {
        return Err(Error::InvalidArgument("map recovery needs at least one sample".into()));
    }
    let (s, a) = uniform_samples(&pair.m1, n, seed)?;
    let state = mean_row_distance(&maps.phi(&s)?, &gt.phi(&s)?, Distance::L2);
    let action = mean_row_distance(&maps.h1(&s, &a)?, &gt.h1(&s, &a)?, Distance::L2);
    Ok(Recovery {
        state,
        action,
        state_normalized: state / pair.m2.state_diameter(),
        action_normalized: action / pair.m2.action_diameter(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
    /// Set when the statistic is degenerate (one seed) or a cell failed.
    pub note: Option<String>,
}

impl MetricRecord {
    pub fn from_samples(metric: &str, xs: &[f64]) -> Self {
        let (mean, sd) = mean_sd(xs);
        Self {
            metric: metric.to_string(),
            mean,
            sd,
            seeds: xs.len(),
            note: (xs.len() == 1).then(|| "single-seed".to_string()),
        }
    }

    pub fn failed(metric: &str, why: impl Into<String>) -> Self {
        Self {
            metric: metric.to_string(),
            mean: f64::NAN,
            sd: f64::NAN,
            seeds: 0,
            note: Some(why.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub method: String,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pair: String,
    pub method: String,
    pub metrics: Vec<MetricRecord>,
    pub curves: Vec<Curve>,
}

pub const REPORT_HEADER: &str = "pair,method,metric,mean,sd,seeds";
pub const CURVE_HEADER: &str = "tau,distance";

pub(crate) fn fmt_stat(v: f64) -> String {
    format!("{v:.16e}")
}

impl EvalReport {
    pub fn new(pair: &str, method: &str) -> Self {
        Self {
            pair: pair.to_string(),
            method: method.to_string(),
            metrics: Vec::new(),
            curves: Vec::new(),
        }
    }

    /// Rows for the metric table, without the header.
    pub fn rows(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.pair,
                self.method,
                m.metric,
                fmt_stat(m.mean),
                fmt_stat(m.sd),
                m.seeds
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}", self.rows())
    }

    pub fn curve_csv(curve: &Curve) -> String {
        let mut out = format!("{CURVE_HEADER}\n");
        for (i, d) in curve.distances.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, fmt_stat(*d));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub horizon: usize,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub failures: Vec<String>,
    pub single_seed: bool,
}

/// Runs `cell(T, seed)` for every horizon and seed and aggregates returns.
/// Failed cells are recorded and the sweep continues.
pub fn horizon_sweep(
    horizons: &[usize],
    seeds: &[u64],
    mut cell: impl FnMut(usize, u64) -> Result<f64>,
) -> Result<Vec<SweepRow>> {
    if horizons.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("horizon sweep needs at least one horizon and one seed".into()));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("horizons must be strictly ascending, got {horizons:?}")));
    }
    if seeds.len() == 1 {
        log::warn!("horizon sweep with one seed: sd reported as 0");
    }
    let mut rows = Vec::new();
    for &t in horizons {
        let mut returns = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            match cell(t, seed) {
                Ok(r) => returns.push(r),
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        let (mean, sd) = mean_sd(&returns);
        rows.push(SweepRow {
            horizon: t,
            single_seed: returns.len() == 1,
            returns,
            mean,
            sd,
            failures,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{collect_demos, sample_segments};
    use crate::envs::{make_pair, quality_ladder, Agent, PairKind, PairParams};
    use crate::losses::{dyn_cycle_loss_1, Architecture, Nets, Norm, PairDims};
    use crate::nn::{ConstantMap, LinearMap};

    fn pair(kind: PairKind, gain: f64) -> MdpPair {
        make_pair(kind, &PairParams { gain }).unwrap()
    }

    /// Ground truth with an additive bias on the translated action.
    struct Biased {
        gt: GroundTruth,
        delta: Vec<f64>,
        negate_phi: bool,
    }

    impl Maps for Biased {
        fn phi(&self, s: &Tensor) -> Result<Tensor> {
            let t = self.gt.phi(s)?;
            if self.negate_phi {
                return Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect());
            }
            Ok(t)
        }
        fn h1(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
            let b = self.gt.h1(s, a)?;
            let k = self.delta.len();
            Tensor::new(b.shape().to_vec(), b.data().iter().enumerate().map(|(i, v)| v + self.delta[i % k]).collect())
        }
        fn h2(&self, t: &Tensor, b: &Tensor) -> Result<Tensor> {
            self.gt.h2(t, b)
        }
    }

    struct Zero;
    impl Maps for Zero {
        fn phi(&self, s: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![s.rows(), 2]))
        }
        fn h1(&self, s: &Tensor, _a: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![s.rows(), 2]))
        }
        fn h2(&self, t: &Tensor, _b: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![t.rows(), 2]))
        }
    }

    fn segments(p: &MdpPair, horizon: usize) -> Segments {
        let demos = collect_demos(p, Agent::One, &quality_ladder(4), 5, 20, 0).unwrap();
        sample_segments(&demos, horizon, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::TABLE {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("dcc-0".parse::<Method>().is_err());
        assert!("gail".parse::<Method>().is_err());
        let w = Method::Dcc(1).weights(&LossWeights::default()).unwrap();
        assert_eq!((w.weak, w.horizon), (0.0, 1));
        let w = Method::Weascl(5).weights(&LossWeights::default()).unwrap();
        assert_eq!((w.weak, w.horizon), (LossWeights::default().weak, 5));
        assert!(Method::Oracle.weights(&LossWeights::default()).is_none());
    }

    #[test]
    fn identity_maps_reproduce_native_oracle_exactly() {
        let p = pair(PairKind::Gain, 1.0);
        let gt = p.ground_truth.clone().unwrap();
        let translated = translated_policy_return(&p, &gt, 10, 50, 3).unwrap();
        let native = native_oracle_return(&p, 10, 50, 3).unwrap();
        assert_eq!(translated, native);
    }

    #[test]
    fn ground_truth_on_scaled_pair_matches_native_controller() {
        let p = pair(PairKind::Scaled, 4.0);
        let gt = p.ground_truth.clone().unwrap();
        let translated = translated_policy_return(&p, &gt, 20, 50, 4).unwrap();
        let native = native_oracle_return(&p, 20, 50, 4).unwrap();
        for (a, b) in translated.iter().zip(&native) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn untrained_maps_fall_well_below_oracle() {
        let p = pair(PairKind::Scaled, 4.0);
        let dims = PairDims { s1: 2, a1: 2, s2: 2, a2: 2 };
        let model = TranslationModel::new(dims, &Architecture::default(), 0, 0, 5).unwrap();
        let (r, _) = mean_sd(&translated_policy_return(&p, &model, 20, 50, 5).unwrap());
        let (o, _) = mean_sd(&native_oracle_return(&p, 20, 50, 5).unwrap());
        let (z, _) = mean_sd(&random_policy_return(&p, 20, 50, 5).unwrap());
        assert!(normalized_return(r, z, o) < 0.5, "{r} {z} {o}");
        assert_eq!(normalized_return(o, z, o), 1.0);
    }

    #[test]
    fn wrong_dims_rejected() {
        let p = pair(PairKind::Arm, 4.0);
        let dims = PairDims { s1: 2, a1: 2, s2: 2, a2: 2 };
        let model = TranslationModel::new(dims, &Architecture::default(), 0, 0, 5).unwrap();
        assert!(translated_policy_return(&p, &model, 2, 5, 0).is_err());
    }

    #[test]
    fn curve_is_zero_at_ground_truth() {
        let p = pair(PairKind::Scaled, 4.0);
        let gt = p.ground_truth.clone().unwrap();
        let curve = compounding_error_curve(&p, &gt, &segments(&p, 10), 10).unwrap();
        assert!(curve.iter().all(|d| *d <= 1e-12), "{curve:?}");
    }

    #[test]
    fn biased_action_map_curve_matches_recurrence() {
        let p = pair(PairKind::Scaled, 4.0);
        let delta = vec![0.1, 0.0];
        let maps = Biased {
            gt: p.ground_truth.clone().unwrap(),
            delta: delta.clone(),
            negate_phi: false,
        };
        let curve = compounding_error_curve(&p, &maps, &segments(&p, 10), 10).unwrap();
        let g = [4.0, 1.0];
        let step = ((0.1 * g[0] * delta[0]).powi(2) + (0.1 * g[1] * delta[1]).powi(2)).sqrt();
        for (tau, d) in curve.iter().enumerate() {
            let expected = (tau + 1) as f64 * step;
            assert!((d - expected).abs() <= 1e-9, "tau {}: {d} vs {expected}", tau + 1);
        }
    }

    #[test]
    fn first_curve_point_matches_single_step_loss() {
        let p = pair(PairKind::Scaled, 4.0);
        let gt = p.ground_truth.clone().unwrap();
        let maps = Biased {
            gt: gt.clone(),
            delta: vec![0.03, -0.07],
            negate_phi: false,
        };
        let seg = segments(&p, 1);
        let curve = compounding_error_curve_with(&p, &maps, &seg, 1, Distance::L1).unwrap();
        let lin = |l: &Linear| LinearMap::from_matrix(l.rows, l.cols, &l.m).unwrap();
        let h1 = lin(&gt.h1).with_bias(&[0.03, -0.07]).unwrap();
        let (phi, h2, t2) = (lin(&gt.phi), lin(&gt.h2), lin(&p.m2.transition_linear()));
        let d = ConstantMap { row: vec![0.5] };
        let nets = Nets {
            phi: &phi,
            phi_bar: &phi,
            h1: &h1,
            h2: &h2,
            disc_s: &d,
            disc_a1: &d,
            disc_a2: &d,
            forward: &t2,
            sim_s: &[],
            sim_a: &[],
        };
        let mut g = crate::autodiff::Graph::new();
        let s = g.constant(seg.states[0].clone());
        let a = g.constant(seg.actions[0].clone());
        let n = g.constant(seg.states[1].clone());
        let l = dyn_cycle_loss_1(&mut g, &nets, s, a, n, Norm::L1).unwrap();
        assert!((g.value(l).item() - curve[0]).abs() <= 1e-12);
    }

    #[test]
    fn misalignment_examples() {
        let p = pair(PairKind::Mirror, 4.0);
        let gt = p.ground_truth.clone().unwrap();
        let (s, _) = uniform_samples(&p.m1, 200, 0).unwrap();
        assert_eq!(misalignment_score(&p, &gt, &s).unwrap(), 1.0);
        let flipped = Biased {
            gt,
            delta: vec![0.0, 0.0],
            negate_phi: true,
        };
        assert_eq!(misalignment_score(&p, &flipped, &s).unwrap(), 0.0);
        assert_eq!(misalignment_score(&p, &Zero, &s).unwrap(), 0.0);
        assert!(misalignment_score(&pair(PairKind::Arm, 4.0), &Zero, &s).is_err());
    }

    #[test]
    fn recovery_examples() {
        let p = pair(PairKind::Scaled, 4.0);
        let gt = p.ground_truth.clone().unwrap();
        let r = map_recovery_error(&p, &gt, 500, 0).unwrap();
        assert_eq!((r.state, r.action), (0.0, 0.0));

        struct Shifted(GroundTruth);
        impl Maps for Shifted {
            fn phi(&self, s: &Tensor) -> Result<Tensor> {
                let t = self.0.phi(s)?;
                Tensor::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, v)| v + [0.3, -0.4][i % 2]).collect())
            }
            fn h1(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
                self.0.h1(s, a)
            }
            fn h2(&self, t: &Tensor, b: &Tensor) -> Result<Tensor> {
                self.0.h2(t, b)
            }
        }
        let r = map_recovery_error(&p, &Shifted(gt), 500, 0).unwrap();
        assert!((r.state - 0.5).abs() < 1e-12);
        assert!((r.state_normalized - 0.5 / 17f64.sqrt()).abs() < 1e-12);
        assert!(map_recovery_error(&pair(PairKind::Arm, 4.0), &Zero, 10, 0).is_err());
    }

    #[test]
    fn stats_and_sweep_shapes() {
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        let rows = horizon_sweep(&[3], &[7], |t, _| Ok(t as f64)).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].single_seed && rows[0].sd == 0.0);
        let rows = horizon_sweep(&[1, 2], &[0, 1], |t, s| {
            if t == 2 && s == 1 {
                Err(Error::NonFinite("boom".into()))
            } else {
                Ok(1.0)
            }
        })
        .unwrap();
        assert_eq!(rows[1].failures.len(), 1);
        assert_eq!(rows[1].returns.len(), 1);
        assert!(horizon_sweep(&[5, 1], &[0], |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let mut r = EvalReport::new("scaled", "weascl-5");
        r.metrics.push(MetricRecord::from_samples("return", &[1.0, 2.0]));
        let csv = r.to_csv();
        assert!(csv.starts_with("pair,method,metric,mean,sd,seeds\nscaled,weascl-5,return,"));
        assert!(csv.trim_end().ends_with(",2"));
        let c = Curve {
            method: "dcc-1".into(),
            distances: vec![0.1, 0.2],
        };
        assert_eq!(EvalReport::curve_csv(&c).lines().count(), 3);
    }
}
