//! Demonstration sets, confidence labels, paired-abstraction datasets and
//! segment batches, plus their text file formats.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::envs::{rollout, Abstraction, AbstractionInput, Agent, MdpPair, ScriptedPolicy, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub agent: Agent,
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    /// Min-max normalized returns, one per trajectory.
    pub confidences: Option<Vec<f64>>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn confidence(&self, traj: usize) -> Option<f64> {
        self.confidences.as_ref().map(|c| c[traj])
    }
}

/// Rolls out every rung of the quality ladder `per_rung` times.
pub fn collect_demos(
    pair: &MdpPair,
    agent: Agent,
    qualities: &[f64],
    per_rung: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    if qualities.is_empty() || per_rung == 0 {
        return Err(Error::InvalidArgument("demo collection needs at least one rung and one trajectory".into()));
    }
    let spec = pair.spec(agent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(qualities.len() * per_rung);
    for &q in qualities {
        let policy = ScriptedPolicy::new(spec, q)?;
        for _ in 0..per_rung {
            let s0 = spec.sample_initial(&mut rng);
            trajectories.push(rollout(spec, &policy, q, s0, horizon, &mut rng)?);
        }
    }
    Ok(TrajectorySet {
        agent,
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        trajectories,
        confidences: None,
    })
}

/// `(r - min) / (max - min)` for each return.
pub fn min_max_normalize(returns: &[f64]) -> Result<Vec<f64>> {
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("returns for confidence labeling".into()));
    }
    if hi == lo {
        return Err(Error::InvalidArgument(
            "confidence labeling needs at least two distinct returns".into(),
        ));
    }
    Ok(returns.iter().map(|r| (r - lo) / (hi - lo)).collect())
}

pub fn confidence_labels(set: &TrajectorySet) -> Result<TrajectorySet> {
    let returns: Vec<f64> = set.trajectories.iter().map(|t| t.ret).collect();
    let mut out = set.clone();
    out.confidences = Some(min_max_normalize(&returns)?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    State,
    StateAction,
}

impl RecordKind {
    pub fn tag(self) -> &'static str {
        match self {
            RecordKind::State => "s",
            RecordKind::StateAction => "a",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    /// `s¹` or `[s¹, a¹]`.
    pub x1: Vec<f64>,
    /// `s²` or `[s², a²]`.
    pub x2: Vec<f64>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionPairSet {
    pub kind: RecordKind,
    pub k: usize,
    pub name: String,
    pub sigma: f64,
    pub binary: bool,
    pub threshold: f64,
    /// Set when more records were requested than distinct combinations exist.
    pub replacement: bool,
    pub dim1: usize,
    pub dim2: usize,
    pub records: Vec<PairRecord>,
}

impl AbstractionPairSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Splits records into `(x1, x2, labels)` tensors.
    pub fn tensors(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let pick = |f: &dyn Fn(&PairRecord) -> Vec<f64>, width: usize| {
            let data: Vec<f64> = idx.iter().flat_map(|&i| f(&self.records[i])).collect();
            Tensor::new(vec![idx.len(), width], data)
        };
        Ok((
            pick(&|r| r.x1.clone(), self.dim1)?,
            pick(&|r| r.x2.clone(), self.dim2)?,
            pick(&|r| vec![r.label], 1)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub n: usize,
    /// Kernel bandwidth; `None` means 10% of the abstraction-space diameter.
    pub sigma: Option<f64>,
    pub binary: bool,
    /// Binary cut-off; `None` means 5% of the abstraction-space diameter.
    pub threshold: Option<f64>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            sigma: None,
            binary: false,
            threshold: None,
        }
    }
}

/// Soft label `exp(-d² / 2σ²)` or binary label `[d ≤ threshold]`.
pub fn similarity_label(distance: f64, sigma: f64, binary: bool, threshold: f64) -> f64 {
    if binary {
        if distance <= threshold {
            1.0
        } else {
            0.0
        }
    } else {
        (-distance * distance / (2.0 * sigma * sigma)).exp()
    }
}

struct Item {
    x: Vec<f64>,
    z: Vec<f64>,
}

fn items(set: &TrajectorySet, kind: RecordKind, abstraction: &Abstraction) -> Result<Vec<Item>> {
    let mut out = Vec::new();
    for (i, traj) in set.trajectories.iter().enumerate() {
        let confidence = set.confidence(i);
        let steps = match kind {
            RecordKind::State => traj.states.len(),
            RecordKind::StateAction => traj.actions.len(),
        };
        for t in 0..steps {
            let state = &traj.states[t];
            let action = traj.actions.get(t).map(Vec::as_slice);
            let input = AbstractionInput {
                state,
                action: if kind == RecordKind::StateAction { action } else { None },
                confidence,
            };
            let mut x = state.clone();
            if kind == RecordKind::StateAction {
                x.extend_from_slice(&traj.actions[t]);
            }
            out.push(Item {
                x,
                z: abstraction.value(&input)?,
            });
        }
    }
    Ok(out)
}

fn bounding_diameter(a: &[Item], b: &[Item]) -> f64 {
    let d = a.first().or(b.first()).map_or(0, |i| i.z.len());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for it in a.iter().chain(b) {
        for (j, v) in it.z.iter().enumerate() {
            lo[j] = lo[j].min(*v);
            hi[j] = hi[j].max(*v);
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2)).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Samples `n` labeled pairs across `set1 × set2`: half "near" pairs whose
/// abstraction distance is below σ, half uniform.
#[allow(clippy::too_many_arguments)]
pub fn make_abstraction_pairs(
    set1: &TrajectorySet,
    set2: &TrajectorySet,
    kind: RecordKind,
    k: usize,
    abstraction1: &Abstraction,
    abstraction2: &Abstraction,
    config: &LabelConfig,
    seed: u64,
) -> Result<AbstractionPairSet> {
    let items1 = items(set1, kind, abstraction1)?;
    let items2 = items(set2, kind, abstraction2)?;
    if items1.is_empty() || items2.is_empty() {
        return Err(Error::InvalidArgument("abstraction pairs need non-empty trajectory sets".into()));
    }
    if items1[0].z.len() != items2[0].z.len() {
        return Err(Error::InvalidArgument(format!(
            "abstractions map to different spaces ({} vs {})",
            items1[0].z.len(),
            items2[0].z.len()
        )));
    }
    let diameter = match abstraction1 {
        Abstraction::Confidence => 1.0,
        _ => bounding_diameter(&items1, &items2),
    };
    let sigma = config.sigma.unwrap_or(0.1 * diameter);
    let threshold = config.threshold.unwrap_or(0.05 * diameter);
    if !(sigma > 0.0) || !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "label bandwidth must be positive (sigma {sigma}, threshold {threshold})"
        )));
    }

    let total = items1.len() as u128 * items2.len() as u128;
    let replacement = config.n as u128 > total;
    if replacement {
        log::warn!(
            "requested {} pairs but only {total} combinations exist; sampling with replacement",
            config.n
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut records = Vec::with_capacity(config.n);
    while records.len() < config.n {
        let i = rng.gen_range(0..items1.len());
        let near = rng.gen_bool(0.5);
        let mut j = rng.gen_range(0..items2.len());
        if near {
            let candidates: Vec<usize> = (0..items2.len())
                .filter(|&c| distance(&items1[i].z, &items2[c].z) < sigma)
                .filter(|&c| replacement || !used.contains(&(i, c)))
                .collect();
            if let Some(&c) = candidates.choose(&mut rng) {
                j = c;
            }
        }
        if !replacement && !used.insert((i, j)) {
            continue;
        }
        let d = distance(&items1[i].z, &items2[j].z);
        records.push(PairRecord {
            x1: items1[i].x.clone(),
            x2: items2[j].x.clone(),
            label: similarity_label(d, sigma, config.binary, threshold),
        });
    }
    Ok(AbstractionPairSet {
        kind,
        k,
        name: abstraction1.name().to_string(),
        sigma,
        binary: config.binary,
        threshold,
        replacement,
        dim1: items1[0].x.len(),
        dim2: items2[0].x.len(),
        records,
    })
}

/// A batch of length-`T` segments stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    /// `T + 1` tensors of shape `[batch, state_dim]`.
    pub states: Vec<Tensor>,
    /// `T` tensors of shape `[batch, action_dim]`.
    pub actions: Vec<Tensor>,
    /// `(trajectory, offset)` of each batch row.
    pub index: Vec<(usize, usize)>,
}

impl Segments {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Uniform draws (with replacement) over every valid `(trajectory, offset)`.
pub fn sample_segments(set: &TrajectorySet, horizon: usize, batch: usize, rng: &mut impl Rng) -> Result<Segments> {
    if horizon == 0 || batch == 0 {
        return Err(Error::InvalidArgument("segments need horizon and batch of at least 1".into()));
    }
    let mut starts = Vec::new();
    for (i, t) in set.trajectories.iter().enumerate() {
        if t.len() < horizon {
            return Err(Error::InvalidArgument(format!(
                "segment horizon {horizon} exceeds trajectory {i} of length {}",
                t.len()
            )));
        }
        starts.extend((0..=t.len() - horizon).map(|o| (i, o)));
    }
    if starts.is_empty() {
        return Err(Error::InvalidArgument("no trajectories to sample segments from".into()));
    }
    let index: Vec<(usize, usize)> = (0..batch).map(|_| starts[rng.gen_range(0..starts.len())]).collect();
    let gather = |dim: usize, f: &dyn Fn(&Trajectory, usize) -> &[f64], step: usize| {
        let data: Vec<f64> = index
            .iter()
            .flat_map(|&(i, o)| f(&set.trajectories[i], o + step).iter().copied())
            .collect();
        Tensor::new(vec![batch, dim], data)
    };
    let states = (0..=horizon)
        .map(|s| gather(set.state_dim, &|t, k| &t.states[k], s))
        .collect::<Result<Vec<_>>>()?;
    let actions = (0..horizon)
        .map(|s| gather(set.action_dim, &|t, k| &t.actions[k], s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Segments { states, actions, index })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: `{s}` is not a number")))
}

fn header_fields<'a>(line: &'a str, magic: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let mut parts = line.split_whitespace();
    let got = [parts.next(), parts.next()];
    if got != [Some(magic), Some("v1")] {
        return Err(Error::Format(format!("expected `{magic} v1` header, got `{line}`")));
    }
    parts
        .map(|p| {
            p.split_once('=')
                .ok_or_else(|| Error::Format(format!("header token `{p}` is not key=value")))
        })
        .collect()
}

fn field<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))
}

fn parse_usize(v: &str, key: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Format(format!("`{key}={v}` is not a count")))
}

impl TrajectorySet {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "wscl-traj v1 agent={} state_dim={} action_dim={}\n",
            self.agent.tag(),
            self.state_dim,
            self.action_dim
        );
        for (i, traj) in self.trajectories.iter().enumerate() {
            for (t, (s, a)) in traj.states.iter().zip(&traj.actions).enumerate() {
                let _ = writeln!(out, "{t},{},{}", csv(s), csv(a));
            }
            let _ = writeln!(out, "{},{}", traj.len(), csv(traj.states.last().expect("non-empty")));
            let confidence = self.confidence(i).map_or_else(|| "na".to_string(), fmt_f64);
            let _ = writeln!(
                out,
                "return={} confidence={confidence} quality={}",
                fmt_f64(traj.ret),
                fmt_f64(traj.quality)
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty trajectory file".into()))?;
        let fields = header_fields(header, "wscl-traj")?;
        let agent = match field(&fields, "agent")? {
            "1" => Agent::One,
            "2" => Agent::Two,
            other => return Err(Error::Format(format!("unknown agent `{other}`"))),
        };
        let d = parse_usize(field(&fields, "state_dim")?, "state_dim")?;
        let k = parse_usize(field(&fields, "action_dim")?, "action_dim")?;
        let mut trajectories = Vec::new();
        let mut confidences = Vec::new();
        let (mut states, mut actions) = (Vec::new(), Vec::new());
        let mut closed = false;
        for (n, line) in lines {
            let n = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with("return=") {
                if !closed {
                    return Err(Error::Format(format!("line {n}: trajectory has no final state")));
                }
                let mut ret = None;
                let mut confidence = None;
                let mut quality = 0.0;
                for tok in line.split_whitespace() {
                    let (key, v) = tok
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("line {n}: bad token `{tok}`")))?;
                    match key {
                        "return" => ret = Some(parse_f64(v, n)?),
                        "confidence" if v == "na" => confidence = Some(None),
                        "confidence" => confidence = Some(Some(parse_f64(v, n)?)),
                        "quality" => quality = parse_f64(v, n)?,
                        _ => return Err(Error::Format(format!("line {n}: unknown key `{key}`"))),
                    }
                }
                let ret = ret.ok_or_else(|| Error::Format(format!("line {n}: missing return")))?;
                let confidence = confidence.ok_or_else(|| Error::Format(format!("line {n}: missing confidence")))?;
                trajectories.push(Trajectory {
                    states: std::mem::take(&mut states),
                    actions: std::mem::take(&mut actions),
                    ret,
                    quality,
                });
                confidences.push(confidence);
                closed = false;
                continue;
            }
            if closed {
                return Err(Error::Format(format!("line {n}: step after final state")));
            }
            let cells: Vec<&str> = line.split(',').collect();
            let t = parse_usize(cells[0], "t")?;
            if t != actions.len() {
                return Err(Error::Format(format!("line {n}: expected step {}, got {t}", actions.len())));
            }
            let values = cells[1..].iter().map(|c| parse_f64(c, n)).collect::<Result<Vec<_>>>()?;
            if values.len() == d + k {
                states.push(values[..d].to_vec());
                actions.push(values[d..].to_vec());
            } else if values.len() == d {
                states.push(values);
                closed = true;
            } else {
                return Err(Error::Format(format!(
                    "line {n}: expected {} or {d} values, got {}",
                    d + k,
                    values.len()
                )));
            }
        }
        if !states.is_empty() {
            return Err(Error::Format("file ends inside a trajectory".into()));
        }
        let confidences = if confidences.iter().all(Option::is_some) && !confidences.is_empty() {
            Some(confidences.into_iter().map(Option::unwrap).collect())
        } else if confidences.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Format("confidence must be given for all trajectories or none".into()));
        };
        Ok(TrajectorySet {
            agent,
            state_dim: d,
            action_dim: k,
            trajectories,
            confidences,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text)
    }
}

impl AbstractionPairSet {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "wscl-pairs v1 kind={} k={} dim1={} dim2={} name={} sigma={} binary={} threshold={} replacement={}\n",
            self.kind.tag(),
            self.k,
            self.dim1,
            self.dim2,
            self.name,
            fmt_f64(self.sigma),
            self.binary,
            fmt_f64(self.threshold),
            self.replacement
        );
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", csv(&r.x1), csv(&r.x2), fmt_f64(r.label));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty pairs file".into()))?;
        let fields = header_fields(header, "wscl-pairs")?;
        let kind = match field(&fields, "kind")? {
            "s" => RecordKind::State,
            "a" => RecordKind::StateAction,
            other => return Err(Error::Format(format!("unknown pair kind `{other}`"))),
        };
        let flag = |key: &str| -> Result<bool> {
            field(&fields, key)?
                .parse()
                .map_err(|_| Error::Format(format!("`{key}` must be true or false")))
        };
        let dim1 = parse_usize(field(&fields, "dim1")?, "dim1")?;
        let dim2 = parse_usize(field(&fields, "dim2")?, "dim2")?;
        let mut set = AbstractionPairSet {
            kind,
            k: parse_usize(field(&fields, "k")?, "k")?,
            name: field(&fields, "name")?.to_string(),
            sigma: parse_f64(field(&fields, "sigma")?, 1)?,
            binary: flag("binary")?,
            threshold: parse_f64(field(&fields, "threshold")?, 1)?,
            replacement: flag("replacement")?,
            dim1,
            dim2,
            records: Vec::new(),
        };
        for (n, line) in lines {
            let n = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let values = line.split(',').map(|c| parse_f64(c, n)).collect::<Result<Vec<_>>>()?;
            if values.len() != dim1 + dim2 + 1 {
                return Err(Error::Format(format!(
                    "line {n}: expected {} values, got {}",
                    dim1 + dim2 + 1,
                    values.len()
                )));
            }
            let label = values[dim1 + dim2];
            if !(0.0..=1.0).contains(&label) {
                return Err(Error::Format(format!("line {n}: label {label} outside [0, 1]")));
            }
            set.records.push(PairRecord {
                x1: values[..dim1].to_vec(),
                x2: values[dim1..dim1 + dim2].to_vec(),
                label,
            });
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_pair, quality_ladder, PairKind, PairParams};
    use proptest::prelude::*;

    fn scaled() -> MdpPair {
        make_pair(PairKind::Scaled, &PairParams::default()).unwrap()
    }

    fn demos(agent: Agent, seed: u64) -> TrajectorySet {
        collect_demos(&scaled(), agent, &quality_ladder(7), 10, 20, seed).unwrap()
    }

    #[test]
    fn ladder_times_per_rung() {
        assert_eq!(demos(Agent::One, 0).len(), 70);
        let one = collect_demos(&scaled(), Agent::Two, &[0.5], 1, 5, 0).unwrap();
        assert_eq!(one.trajectories[0].states.len(), 6);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        assert_eq!(demos(Agent::One, 4).to_text(), demos(Agent::One, 4).to_text());
        assert_ne!(demos(Agent::One, 4).to_text(), demos(Agent::One, 5).to_text());
    }

    #[test]
    fn table_returns_normalize() {
        let r = [2.76, 294.93, 796.69, 1360.38, 1831.08, 2344.46, 3826.94];
        let c = min_max_normalize(&r).unwrap();
        assert_eq!(c[0], 0.0);
        assert_eq!(c[6], 1.0);
        assert!((c[4] - 0.4780).abs() < 1e-4, "{}", c[4]);
        assert!((c[4] - 1828.32 / 3824.18).abs() < 1e-12);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn two_returns_and_degenerate_case() {
        assert_eq!(min_max_normalize(&[5.0, 5.5]).unwrap(), vec![0.0, 1.0]);
        assert!(min_max_normalize(&[3.0, 3.0]).is_err());
        let mut set = demos(Agent::One, 0);
        set.trajectories.truncate(1);
        assert!(confidence_labels(&set).is_err());
    }

    #[test]
    fn confidences_span_unit_interval() {
        let set = confidence_labels(&demos(Agent::Two, 1)).unwrap();
        let c = set.confidences.unwrap();
        assert_eq!(c.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(c.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn label_closed_forms() {
        assert_eq!(similarity_label(0.0, 0.3, false, 0.0), 1.0);
        assert!((similarity_label(0.3, 0.3, false, 0.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((similarity_label(0.3, 0.3, false, 0.0) - 0.6065).abs() < 1e-4);
        assert_eq!(similarity_label(0.05, 1.0, true, 0.05), 1.0);
        assert_eq!(similarity_label(0.0500001, 1.0, true, 0.05), 0.0);
    }

    fn pairs(binary: bool, kind: RecordKind, n: usize) -> AbstractionPairSet {
        let pair = scaled();
        let abs = match kind {
            RecordKind::State => &pair.state_abstractions[0],
            RecordKind::StateAction => &pair.action_abstractions[0],
        };
        let cfg = LabelConfig {
            n,
            binary,
            ..LabelConfig::default()
        };
        make_abstraction_pairs(
            &demos(Agent::One, 0),
            &demos(Agent::Two, 1),
            kind,
            0,
            &abs.agent1,
            &abs.agent2,
            &cfg,
            9,
        )
        .unwrap()
    }

    #[test]
    fn labels_recompute_from_abstraction_distance() {
        let pair = scaled();
        let set = pairs(false, RecordKind::StateAction, 1000);
        assert_eq!(set.len(), 1000);
        assert_eq!((set.dim1, set.dim2), (4, 4));
        assert!(!set.replacement);
        let abs = &pair.action_abstractions[0];
        for r in &set.records {
            let z1 = abs
                .agent1
                .value(&AbstractionInput { state: &r.x1[..2], action: Some(&r.x1[2..]), confidence: None })
                .unwrap();
            let z2 = abs
                .agent2
                .value(&AbstractionInput { state: &r.x2[..2], action: Some(&r.x2[2..]), confidence: None })
                .unwrap();
            let d = distance(&z1, &z2);
            let expected = (-d * d / (2.0 * set.sigma * set.sigma)).exp();
            assert!((r.label - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn both_label_classes_present() {
        let set = pairs(true, RecordKind::State, 1000);
        let pos = set.records.iter().filter(|r| r.label == 1.0).count();
        assert!(pos > 100 && pos < 900, "{pos} positives");
        let soft = pairs(false, RecordKind::State, 1000);
        let high = soft.records.iter().filter(|r| r.label > 0.5).count();
        assert!(high > 100, "{high}");
    }

    #[test]
    fn oversampling_switches_to_replacement() {
        let pair = scaled();
        let s1 = collect_demos(&pair, Agent::One, &[1.0], 1, 2, 0).unwrap();
        let s2 = collect_demos(&pair, Agent::Two, &[1.0], 1, 2, 0).unwrap();
        let abs = &pair.state_abstractions[0];
        let cfg = LabelConfig {
            n: 20,
            ..LabelConfig::default()
        };
        let set = make_abstraction_pairs(&s1, &s2, RecordKind::State, 0, &abs.agent1, &abs.agent2, &cfg, 0).unwrap();
        assert!(set.replacement);
        assert_eq!(set.len(), 20);
    }

    #[test]
    fn confidence_abstraction_requires_labels() {
        let pair = make_pair(PairKind::Gain, &PairParams::default()).unwrap();
        let s1 = collect_demos(&pair, Agent::One, &quality_ladder(7), 2, 10, 0).unwrap();
        let s2 = collect_demos(&pair, Agent::Two, &quality_ladder(7), 2, 10, 1).unwrap();
        let abs = &pair.action_abstractions[0];
        let cfg = LabelConfig::default();
        assert!(make_abstraction_pairs(&s1, &s2, RecordKind::StateAction, 0, &abs.agent1, &abs.agent2, &cfg, 0).is_err());
        let (c1, c2) = (confidence_labels(&s1).unwrap(), confidence_labels(&s2).unwrap());
        let set = make_abstraction_pairs(&c1, &c2, RecordKind::StateAction, 0, &abs.agent1, &abs.agent2, &cfg, 0).unwrap();
        assert_eq!(set.name, "confidence");
        assert!((set.sigma - 0.1).abs() < 1e-15);
    }

    #[test]
    fn segments_are_consistent_with_dynamics() {
        let pair = scaled();
        let set = demos(Agent::Two, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = sample_segments(&set, 5, 64, &mut rng).unwrap();
        assert_eq!((seg.states.len(), seg.actions.len()), (6, 5));
        assert_eq!(seg.states[0].shape(), &[64, 2]);
        for t in 0..5 {
            for b in 0..64 {
                let next = pair.m2.step(seg.states[t].row(b), seg.actions[t].row(b)).unwrap();
                assert_eq!(next.as_slice(), seg.states[t + 1].row(b));
            }
        }
        let again = sample_segments(&set, 5, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(again.index, seg.index);
    }

    #[test]
    fn full_horizon_segments_start_at_zero() {
        let set = demos(Agent::One, 0);
        let seg = sample_segments(&set, 20, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(seg.index.iter().all(|&(_, o)| o == 0));
        assert!(sample_segments(&set, 21, 4, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn trajectory_file_round_trip() {
        let set = confidence_labels(&demos(Agent::One, 2)).unwrap();
        let text = set.to_text();
        assert!(text.starts_with("wscl-traj v1 agent=1 state_dim=2 action_dim=2\n"));
        assert_eq!(TrajectorySet::from_text(&text).unwrap(), set);
        let bare = demos(Agent::Two, 2);
        assert_eq!(TrajectorySet::from_text(&bare.to_text()).unwrap(), bare);
    }

    #[test]
    fn pairs_file_round_trip_and_rejects_garbage() {
        let set = pairs(false, RecordKind::StateAction, 50);
        let text = set.to_text();
        assert!(text.starts_with("wscl-pairs v1 kind=a k=0 "));
        assert_eq!(AbstractionPairSet::from_text(&text).unwrap(), set);
        assert!(AbstractionPairSet::from_text("wscl-pairs v2 kind=a").is_err());
        let truncated: String = text.lines().take(2).map(|l| format!("{}\n", &l[..l.len() / 2])).collect();
        assert!(AbstractionPairSet::from_text(&truncated).is_err());
        assert!(TrajectorySet::from_text("wscl-traj v1 agent=3 state_dim=2 action_dim=2").is_err());
    }

    proptest! {
        #[test]
        fn confidences_invariant_to_affine_rescaling(
            returns in proptest::collection::vec(-1e3f64..1e3, 2..20),
            a in 0.01f64..100.0,
            b in -1e3f64..1e3,
        ) {
            let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi - lo > 1.0);
            let base = min_max_normalize(&returns).unwrap();
            let scaled: Vec<f64> = returns.iter().map(|r| a * r + b).collect();
            let other = min_max_normalize(&scaled).unwrap();
            for (x, y) in base.iter().zip(&other) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }

        #[test]
        fn soft_labels_depend_only_on_distance(d in 0.0f64..5.0, sigma in 0.01f64..2.0) {
            let v = similarity_label(d, sigma, false, 0.0);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, similarity_label(-d, sigma, false, 0.0));
        }

        #[test]
        fn float_format_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
