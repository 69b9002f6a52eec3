//! Deterministic toy MDP pairs with closed-form dynamics and, where one
//! exists, closed-form ground-truth correspondence.
//!
//! * `scaled`: two planar integrators; agent 2 measures position in scaled
//!   units and has anisotropic actuator gain.
//! * `mirror`: two copies of the same integrator. Every unsupervised loss is
//!   symmetric under `s -> -s`, so the mirrored map is as good as the true one.
//! * `arm`: a 3-link planar arm paired with a 2-link arm; no closed form.
//! * `gain`: identical integrators with different actuator gain.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix acting on flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub m: Vec<f64>,
}

impl Linear {
    pub fn new(rows: usize, cols: usize, m: Vec<f64>) -> Self {
        assert_eq!(m.len(), rows * cols, "linear map {rows}x{cols}");
        Self { rows, cols, m }
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            m[i * n + i] = *v;
        }
        Self::new(n, n, m)
    }

    /// `[0 | D]`: ignores the first `skip` inputs and scales the rest.
    fn skip_then_diag(skip: usize, d: &[f64]) -> Self {
        let n = d.len();
        let cols = skip + n;
        let mut m = vec![0.0; n * cols];
        for (i, v) in d.iter().enumerate() {
            m[i * cols + skip + i] = *v;
        }
        Self::new(n, cols, m)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.m
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// `s' = s + dt * diag(gain) * a`.
    Integrator { dt: f64, gain: Vec<f64> },
    /// State `(angles, goal)`; `angles' = angles + dt * a`, goal unchanged.
    Arm { dt: f64, links: Vec<f64> },
}

/// Axis-aligned box `center ± half_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl BoxRegion {
    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.half_width)
            .map(|(c, h)| c + h * rng.gen_range(-1.0..=1.0))
            .collect()
    }

    pub fn diameter(&self) -> f64 {
        self.half_width.iter().map(|h| (2.0 * h).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dynamics: Dynamics,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub init: BoxRegion,
    /// Target position for integrators; arms carry their goal in the state.
    pub goal: Vec<f64>,
    /// Recorded only; no loss uses it.
    pub gamma: f64,
    /// Proportional-controller gain of the scripted policies.
    pub controller_gain: f64,
    /// Half-width of the uniform noise mixed into scripted actions.
    pub noise_scale: Vec<f64>,
}

impl MdpSpec {
    pub fn clamp_action(&self, a: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = a
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(v, (lo, hi))| {
                let c = v.clamp(*lo, *hi);
                clamped |= c != *v;
                c
            })
            .collect();
        (out, clamped)
    }

    /// Deterministic next state; actions outside the bounds are clamped.
    pub fn step(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(s, a)?;
        let (a, clamped) = self.clamp_action(a);
        if clamped {
            log::debug!("{}: action clamped to bounds", self.name);
        }
        Ok(self.step_unclamped(s, &a))
    }

    fn check_inputs(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim || a.len() != self.action_dim {
            return Err(Error::InvalidArgument(format!(
                "{}: expected state/action dims {}/{}, got {}/{}",
                self.name,
                self.state_dim,
                self.action_dim,
                s.len(),
                a.len()
            )));
        }
        if !s.iter().chain(a).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: step input", self.name)));
        }
        Ok(())
    }

    pub(crate) fn step_unclamped(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Integrator { dt, gain } => s
                .iter()
                .zip(a.iter().zip(gain))
                .map(|(x, (u, g))| x + dt * g * u)
                .collect(),
            Dynamics::Arm { dt, .. } => {
                let mut next = s.to_vec();
                for (x, u) in next.iter_mut().zip(a) {
                    *x += dt * u;
                }
                next
            }
        }
    }

    /// The transition as a linear map on `[s, a]` (ignoring clamping).
    pub fn transition_linear(&self) -> Linear {
        let (n, k) = (self.state_dim, self.action_dim);
        let cols = n + k;
        let mut m = vec![0.0; n * cols];
        for i in 0..n {
            m[i * cols + i] = 1.0;
        }
        match &self.dynamics {
            Dynamics::Integrator { dt, gain } => {
                for i in 0..k {
                    m[i * cols + n + i] = dt * gain[i];
                }
            }
            Dynamics::Arm { dt, .. } => {
                for i in 0..k {
                    m[i * cols + n + i] = *dt;
                }
            }
        }
        Linear::new(n, cols, m)
    }

    /// Position whose distance to the goal defines the reward.
    pub fn position(&self, s: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Integrator { .. } => s.to_vec(),
            Dynamics::Arm { links, .. } => forward_kinematics(links, &s[..links.len()]).to_vec(),
        }
    }

    pub fn goal_of(&self, s: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Integrator { .. } => self.goal.clone(),
            Dynamics::Arm { links, .. } => s[links.len()..].to_vec(),
        }
    }

    /// `R(s, a) = -‖position(s) - goal‖`.
    pub fn reward(&self, s: &[f64], _a: &[f64]) -> f64 {
        -dist(&self.position(s), &self.goal_of(s))
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.init.sample(rng)
    }

    /// Noise-free proportional controller toward the goal.
    pub fn controller(&self, s: &[f64]) -> Vec<f64> {
        let k = self.controller_gain;
        match &self.dynamics {
            Dynamics::Integrator { gain, .. } => s
                .iter()
                .zip(self.goal.iter().zip(gain))
                .map(|(x, (g, act))| -k * (x - g) / act)
                .collect(),
            Dynamics::Arm { links, .. } => {
                let n = links.len();
                let angles = &s[..n];
                let ee = forward_kinematics(links, angles);
                let e = [s[n] - ee[0], s[n + 1] - ee[1]];
                // Damped least squares: Jᵀ (J Jᵀ + λ² I)⁻¹ e.
                let j = jacobian(links, angles);
                let lambda2 = 0.05 * 0.05;
                let mut jjt = [[0.0; 2]; 2];
                for r in 0..2 {
                    for c in 0..2 {
                        jjt[r][c] = (0..n).map(|i| j[r][i] * j[c][i]).sum::<f64>();
                    }
                    jjt[r][r] += lambda2;
                }
                let det = jjt[0][0] * jjt[1][1] - jjt[0][1] * jjt[1][0];
                let y = [
                    (jjt[1][1] * e[0] - jjt[0][1] * e[1]) / det,
                    (-jjt[1][0] * e[0] + jjt[0][0] * e[1]) / det,
                ];
                (0..n).map(|i| k * (j[0][i] * y[0] + j[1][i] * y[1])).collect()
            }
        }
    }

    /// Diagonal of the state box visited by demonstrations, used to
    /// normalize map errors.
    pub fn state_diameter(&self) -> f64 {
        self.init.diameter()
    }

    pub fn action_diameter(&self) -> f64 {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| (h - l).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn forward_kinematics(links: &[f64], angles: &[f64]) -> [f64; 2] {
    let mut theta = 0.0;
    let mut p = [0.0, 0.0];
    for (l, a) in links.iter().zip(angles) {
        theta += a;
        p[0] += l * theta.cos();
        p[1] += l * theta.sin();
    }
    p
}

fn jacobian(links: &[f64], angles: &[f64]) -> [Vec<f64>; 2] {
    let n = links.len();
    let mut cum = Vec::with_capacity(n);
    let mut theta = 0.0;
    for a in angles {
        theta += a;
        cum.push(theta);
    }
    let mut jx = vec![0.0; n];
    let mut jy = vec![0.0; n];
    for i in 0..n {
        for k in i..n {
            jx[i] -= links[k] * cum[k].sin();
            jy[i] += links[k] * cum[k].cos();
        }
    }
    [jx, jy]
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Closed-form correspondence `Φ*`, `H¹*`, `H²*`; action maps act on `[s, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub phi: Linear,
    pub h1: Linear,
    pub h2: Linear,
}

/// What a paired-abstraction labeler looks at.
#[derive(Debug, Clone, Copy)]
pub struct AbstractionInput<'a> {
    pub state: &'a [f64],
    pub action: Option<&'a [f64]>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Abstraction {
    /// `scale ⊙ s`.
    Position { scale: Vec<f64> },
    /// `scale ⊙ (s + dt·gain ⊙ a)`: where the action takes the agent.
    NextPosition { scale: Vec<f64>, dt: f64, gain: Vec<f64> },
    /// End-effector position of a planar arm.
    EndEffector { links: Vec<f64> },
    /// End-effector position after applying the joint-velocity action.
    NextEndEffector { links: Vec<f64>, dt: f64 },
    /// Trajectory confidence inherited by every state-action pair.
    Confidence,
}

impl Abstraction {
    pub fn name(&self) -> &'static str {
        match self {
            Abstraction::Position { .. } => "position",
            Abstraction::NextPosition { .. } => "next-position",
            Abstraction::EndEffector { .. } => "end-effector",
            Abstraction::NextEndEffector { .. } => "next-end-effector",
            Abstraction::Confidence => "confidence",
        }
    }

    pub fn needs_action(&self) -> bool {
        matches!(
            self,
            Abstraction::NextPosition { .. } | Abstraction::NextEndEffector { .. } | Abstraction::Confidence
        )
    }

    pub fn value(&self, x: &AbstractionInput<'_>) -> Result<Vec<f64>> {
        let action = || {
            x.action
                .ok_or_else(|| Error::InvalidArgument(format!("{} abstraction needs an action", self.name())))
        };
        Ok(match self {
            Abstraction::Position { scale } => x.state.iter().zip(scale).map(|(s, c)| s * c).collect(),
            Abstraction::NextPosition { scale, dt, gain } => {
                let a = action()?;
                x.state
                    .iter()
                    .zip(a.iter().zip(gain))
                    .zip(scale)
                    .map(|((s, (u, g)), c)| c * (s + dt * g * u))
                    .collect()
            }
            Abstraction::EndEffector { links } => forward_kinematics(links, &x.state[..links.len()]).to_vec(),
            Abstraction::NextEndEffector { links, dt } => {
                let a = action()?;
                let next: Vec<f64> = x.state[..links.len()].iter().zip(a).map(|(t, u)| t + dt * u).collect();
                forward_kinematics(links, &next).to_vec()
            }
            Abstraction::Confidence => vec![x
                .confidence
                .ok_or_else(|| Error::InvalidArgument("confidence abstraction needs labeled trajectories".into()))?],
        })
    }
}

/// `α₁` for agent 1 and `α₂` for agent 2, mapping into a common space.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionPair {
    pub agent1: Abstraction,
    pub agent2: Abstraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Scaled,
    Mirror,
    Arm,
    Gain,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [PairKind::Scaled, PairKind::Mirror, PairKind::Arm, PairKind::Gain];
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::Scaled => "scaled",
            PairKind::Mirror => "mirror",
            PairKind::Arm => "arm",
            PairKind::Gain => "gain",
        })
    }
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(PairKind::Scaled),
            "mirror" => Ok(PairKind::Mirror),
            "arm" => Ok(PairKind::Arm),
            "gain" => Ok(PairKind::Gain),
            other => Err(Error::InvalidArgument(format!(
                "unknown pair `{other}` (expected scaled, mirror, arm or gain)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairParams {
    /// Actuator gain of agent 1 on the `gain` pair.
    pub gain: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self { gain: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpPair {
    pub kind: PairKind,
    pub m1: MdpSpec,
    pub m2: MdpSpec,
    pub ground_truth: Option<GroundTruth>,
    /// One entry per state-level paired-abstraction set (`K^s` entries).
    pub state_abstractions: Vec<AbstractionPair>,
    /// One entry per state-action paired-abstraction set (`K^a` entries).
    pub action_abstractions: Vec<AbstractionPair>,
}

const DT: f64 = 0.1;
const SCALED_STATE: [f64; 2] = [2.0, 0.5];
const SCALED_GAIN: [f64; 2] = [4.0, 1.0];

fn integrator(name: &str, gain: &[f64], init_half: &[f64], action_half: &[f64], noise: &[f64]) -> MdpSpec {
    let n = gain.len();
    MdpSpec {
        name: name.to_string(),
        state_dim: n,
        action_dim: n,
        dynamics: Dynamics::Integrator {
            dt: DT,
            gain: gain.to_vec(),
        },
        action_low: action_half.iter().map(|h| -h).collect(),
        action_high: action_half.to_vec(),
        init: BoxRegion {
            center: vec![0.0; n],
            half_width: init_half.to_vec(),
        },
        goal: vec![0.0; n],
        gamma: 0.99,
        controller_gain: 2.0,
        noise_scale: noise.to_vec(),
    }
}

fn arm(name: &str, links: &[f64], angle_center: &[f64], angle_half: &[f64]) -> MdpSpec {
    let n = links.len();
    let mut center = angle_center.to_vec();
    center.extend_from_slice(&[0.0, 0.55]);
    let mut half = angle_half.to_vec();
    half.extend_from_slice(&[0.45, 0.25]);
    MdpSpec {
        name: name.to_string(),
        state_dim: n + 2,
        action_dim: n,
        dynamics: Dynamics::Arm {
            dt: DT,
            links: links.to_vec(),
        },
        action_low: vec![-2.0; n],
        action_high: vec![2.0; n],
        init: BoxRegion {
            center,
            half_width: half,
        },
        goal: Vec::new(),
        gamma: 0.99,
        controller_gain: 2.0,
        noise_scale: vec![1.0; n],
    }
}

/// Builds one of the toy pairs.
pub fn make_pair(kind: PairKind, params: &PairParams) -> Result<MdpPair> {
    let pair = match kind {
        PairKind::Scaled => {
            // Φ*(s) = C s, H¹*(s, a) = G⁻¹ C a, H²*(t, b) = C⁻¹ G b.
            let c = SCALED_STATE;
            let g = SCALED_GAIN;
            let h1: Vec<f64> = (0..2).map(|i| c[i] / g[i]).collect();
            let h2: Vec<f64> = (0..2).map(|i| g[i] / c[i]).collect();
            let m1 = integrator("scaled-1", &[1.0, 1.0], &[1.0, 1.0], &[3.0, 3.0], &[1.0, 1.0]);
            let m2 = integrator(
                "scaled-2",
                &g,
                &[c[0], c[1]],
                &[3.0 * h1[0], 3.0 * h1[1]],
                &[h1[0], h1[1]],
            );
            let inv_c: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
            MdpPair {
                kind,
                ground_truth: Some(GroundTruth {
                    phi: Linear::diag(&c),
                    h1: Linear::skip_then_diag(2, &h1),
                    h2: Linear::skip_then_diag(2, &h2),
                }),
                state_abstractions: vec![AbstractionPair {
                    agent1: Abstraction::Position { scale: vec![1.0, 1.0] },
                    agent2: Abstraction::Position { scale: inv_c.clone() },
                }],
                action_abstractions: vec![AbstractionPair {
                    agent1: Abstraction::NextPosition {
                        scale: vec![1.0, 1.0],
                        dt: DT,
                        gain: vec![1.0, 1.0],
                    },
                    agent2: Abstraction::NextPosition {
                        scale: inv_c,
                        dt: DT,
                        gain: g.to_vec(),
                    },
                }],
                m1,
                m2,
            }
        }
        PairKind::Mirror => {
            let m = integrator("mirror", &[1.0, 1.0], &[1.0, 1.0], &[3.0, 3.0], &[1.0, 1.0]);
            let mut m1 = m.clone();
            m1.name = "mirror-1".into();
            let mut m2 = m;
            m2.name = "mirror-2".into();
            let pos = Abstraction::Position { scale: vec![1.0, 1.0] };
            let next = Abstraction::NextPosition {
                scale: vec![1.0, 1.0],
                dt: DT,
                gain: vec![1.0, 1.0],
            };
            MdpPair {
                kind,
                ground_truth: Some(GroundTruth {
                    phi: Linear::diag(&[1.0, 1.0]),
                    h1: Linear::skip_then_diag(2, &[1.0, 1.0]),
                    h2: Linear::skip_then_diag(2, &[1.0, 1.0]),
                }),
                state_abstractions: vec![AbstractionPair {
                    agent1: pos.clone(),
                    agent2: pos,
                }],
                action_abstractions: vec![AbstractionPair {
                    agent1: next.clone(),
                    agent2: next,
                }],
                m1,
                m2,
            }
        }
        PairKind::Arm => {
            let l1 = vec![0.4, 0.3, 0.3];
            let l2 = vec![0.5, 0.5];
            let m1 = arm("arm-3link", &l1, &[FRAC_PI_2 - 0.6, 0.6, 0.6], &[0.5, 0.4, 0.4]);
            let m2 = arm("arm-2link", &l2, &[FRAC_PI_2 - 0.7, 1.4], &[0.5, 0.4]);
            MdpPair {
                kind,
                ground_truth: None,
                state_abstractions: vec![AbstractionPair {
                    agent1: Abstraction::EndEffector { links: l1.clone() },
                    agent2: Abstraction::EndEffector { links: l2.clone() },
                }],
                action_abstractions: vec![AbstractionPair {
                    agent1: Abstraction::NextEndEffector { links: l1, dt: DT },
                    agent2: Abstraction::NextEndEffector { links: l2, dt: DT },
                }],
                m1,
                m2,
            }
        }
        PairKind::Gain => {
            let g = params.gain;
            if !(0.25..=4.0).contains(&g) {
                return Err(Error::InvalidArgument(format!("gain must lie in [0.25, 4], got {g}")));
            }
            // T¹(s, a) = s + dt·g·a and T²(t, b) = t + dt·b, so H¹* = g·a.
            let m1 = integrator("gain-1", &[g, g], &[1.0, 1.0], &[3.0 / g, 3.0 / g], &[1.0 / g, 1.0 / g]);
            let m2 = integrator("gain-2", &[1.0, 1.0], &[1.0, 1.0], &[3.0, 3.0], &[1.0, 1.0]);
            MdpPair {
                kind,
                ground_truth: Some(GroundTruth {
                    phi: Linear::diag(&[1.0, 1.0]),
                    h1: Linear::skip_then_diag(2, &[g, g]),
                    h2: Linear::skip_then_diag(2, &[1.0 / g, 1.0 / g]),
                }),
                state_abstractions: Vec::new(),
                action_abstractions: vec![AbstractionPair {
                    agent1: Abstraction::Confidence,
                    agent2: Abstraction::Confidence,
                }],
                m1,
                m2,
            }
        }
    };
    Ok(pair)
}

/// Which side of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agent {
    One,
    Two,
}

impl Agent {
    pub fn tag(self) -> u8 {
        match self {
            Agent::One => 1,
            Agent::Two => 2,
        }
    }
}

impl MdpPair {
    pub fn spec(&self, agent: Agent) -> &MdpSpec {
        match agent {
            Agent::One => &self.m1,
            Agent::Two => &self.m2,
        }
    }

    /// `π²*`: the noise-free controller of agent 2.
    pub fn oracle_policy(&self) -> ScriptedPolicy {
        ScriptedPolicy::new(&self.m2, 1.0).expect("q = 1 is in range")
    }
}

pub trait Policy {
    fn act(&self, s: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// `q · controller(s) + (1 - q) · uniform noise`.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    spec: MdpSpec,
    pub quality: f64,
}

impl ScriptedPolicy {
    pub fn new(spec: &MdpSpec, quality: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::InvalidArgument(format!("policy quality must lie in [0, 1], got {quality}")));
        }
        Ok(Self {
            spec: spec.clone(),
            quality,
        })
    }
}

impl Policy for ScriptedPolicy {
    fn act(&self, s: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let q = self.quality;
        let ctrl = self.spec.controller(s);
        ctrl.iter()
            .zip(&self.spec.noise_scale)
            .map(|(c, n)| {
                // Always draw so the noise stream does not depend on q.
                let noise = n * rng.gen_range(-1.0..=1.0);
                q * c + (1.0 - q) * noise
            })
            .collect()
    }
}

pub fn scripted_policy(pair: &MdpPair, agent: Agent, quality: f64) -> Result<ScriptedPolicy> {
    ScriptedPolicy::new(pair.spec(agent), quality)
}

/// Evenly spaced qualities `0, 1/(n-1), ..., 1`.
pub fn quality_ladder(rungs: usize) -> Vec<f64> {
    match rungs {
        0 => Vec::new(),
        1 => vec![1.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Undiscounted sum of rewards.
    pub ret: f64,
    pub quality: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Runs `policy` for `horizon` steps from `s0`. Stored actions are the
/// clamped ones, so every stored triple satisfies the transition exactly.
pub fn rollout(
    spec: &MdpSpec,
    policy: &dyn Policy,
    quality: f64,
    s0: Vec<f64>,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("rollout horizon must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut ret = 0.0;
    let mut s = s0;
    for t in 0..horizon {
        let raw = policy.act(&s, rng);
        if raw.len() != spec.action_dim || !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: policy action at step {t}: {raw:?}", spec.name)));
        }
        let (a, clamped) = spec.clamp_action(&raw);
        if clamped {
            log::debug!("{}: action clamped at step {t}", spec.name);
        }
        ret += spec.reward(&s, &a);
        let next = spec.step(&s, &a)?;
        states.push(s);
        actions.push(a);
        s = next;
    }
    states.push(s);
    Ok(Trajectory {
        states,
        actions,
        ret,
        quality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_sa(spec: &MdpSpec, r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let s = spec.sample_initial(r);
        let a: Vec<f64> = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(l, h)| r.gen_range(*l..*h))
            .collect();
        (s, a)
    }

    fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().chain(b).copied().collect()
    }

    fn correspondence_residual(pair: &MdpPair, phi: &Linear, h1: &Linear, n: usize) -> f64 {
        let mut r = rng(3);
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let (s, a) = random_sa(&pair.m1, &mut r);
            let lhs = phi.apply(&pair.m1.step(&s, &a).unwrap());
            let rhs = pair.m2.step_unclamped(&phi.apply(&s), &h1.apply(&cat(&s, &a)));
            worst = worst.max(dist(&lhs, &rhs));
        }
        worst
    }

    #[test]
    fn correspondence_identity_holds_for_closed_form_pairs() {
        for kind in [PairKind::Scaled, PairKind::Mirror, PairKind::Gain] {
            for gain in [0.25, 1.0, 4.0] {
                let pair = make_pair(kind, &PairParams { gain }).unwrap();
                let gt = pair.ground_truth.as_ref().unwrap();
                let r = correspondence_residual(&pair, &gt.phi, &gt.h1, 10_000);
                assert!(r <= 1e-9, "{kind} gain {gain}: {r}");
            }
        }
    }

    #[test]
    fn domain_cycle_identity_is_exact() {
        for kind in [PairKind::Scaled, PairKind::Mirror, PairKind::Gain] {
            let pair = make_pair(kind, &PairParams::default()).unwrap();
            let gt = pair.ground_truth.as_ref().unwrap();
            let mut r = rng(5);
            for _ in 0..1000 {
                let (s, a) = random_sa(&pair.m1, &mut r);
                let b = gt.h1.apply(&cat(&s, &a));
                let back = gt.h2.apply(&cat(&gt.phi.apply(&s), &b));
                assert_eq!(back, a, "{kind}");
            }
        }
    }

    #[test]
    fn mirror_map_is_equally_consistent() {
        let pair = make_pair(PairKind::Mirror, &PairParams::default()).unwrap();
        let neg = Linear::diag(&[-1.0, -1.0]);
        let neg_h = Linear::skip_then_diag(2, &[-1.0, -1.0]);
        assert!(correspondence_residual(&pair, &neg, &neg_h, 1000) <= 1e-12);
    }

    #[test]
    fn gain_one_ground_truth_is_identity() {
        let pair = make_pair(PairKind::Gain, &PairParams { gain: 1.0 }).unwrap();
        let gt = pair.ground_truth.unwrap();
        assert_eq!(gt.phi, Linear::diag(&[1.0, 1.0]));
        assert_eq!(gt.h1.apply(&[0.3, 0.4, 0.5, -0.6]), vec![0.5, -0.6]);
        assert_eq!(pair.m1.dynamics, pair.m2.dynamics);
    }

    #[test]
    fn rejects_out_of_range_params_and_unknown_names() {
        assert!(make_pair(PairKind::Gain, &PairParams { gain: 8.0 }).is_err());
        assert!("walker".parse::<PairKind>().is_err());
        assert_eq!("arm".parse::<PairKind>().unwrap(), PairKind::Arm);
    }

    #[test]
    fn step_examples() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let s = pair.m1.step(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(dist(&s, &[0.1, 0.1]) < 1e-15);
        let t = pair.m2.step(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(dist(&t, &[0.4, 0.1]) < 1e-15);
        let arm = make_pair(PairKind::Arm, &PairParams::default()).unwrap();
        let s0 = vec![0.0, 0.0, 0.3, 0.4];
        assert_eq!(arm.m2.step(&s0, &[0.0, 0.0]).unwrap(), s0);
        assert!(pair.m1.step(&[f64::NAN, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn step_clamps_out_of_bound_actions() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let s = pair.m1.step(&[0.0, 0.0], &[10.0, -10.0]).unwrap();
        assert!(dist(&s, &[0.3, -0.3]) < 1e-15);
    }

    #[test]
    fn transition_linear_matches_step() {
        for kind in PairKind::ALL {
            let pair = make_pair(kind, &PairParams::default()).unwrap();
            for spec in [&pair.m1, &pair.m2] {
                let lin = spec.transition_linear();
                let mut r = rng(9);
                for _ in 0..100 {
                    let (s, a) = random_sa(spec, &mut r);
                    assert!(dist(&lin.apply(&cat(&s, &a)), &spec.step(&s, &a).unwrap()) < 1e-12);
                }
            }
        }
    }

    fn mean_return(spec: &MdpSpec, q: f64, s0: &[f64], seeds: u64) -> f64 {
        let p = ScriptedPolicy::new(spec, q).unwrap();
        (0..seeds)
            .map(|seed| rollout(spec, &p, q, s0.to_vec(), 50, &mut rng(seed)).unwrap().ret)
            .sum::<f64>()
            / seeds as f64
    }

    #[test]
    fn oracle_beats_random_from_fixed_start() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let good = mean_return(&pair.m2, 1.0, &[1.0, 0.0], 20);
        let bad = mean_return(&pair.m2, 0.0, &[1.0, 0.0], 20);
        assert!(good > bad, "{good} vs {bad}");
    }

    #[test]
    fn zero_quality_policy_is_seed_deterministic() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let p = scripted_policy(&pair, Agent::One, 0.0).unwrap();
        let a = rollout(&pair.m1, &p, 0.0, vec![0.5, 0.5], 20, &mut rng(4)).unwrap();
        let b = rollout(&pair.m1, &p, 0.0, vec![0.5, 0.5], 20, &mut rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ladder_returns_are_distinct_and_ascending() {
        for kind in PairKind::ALL {
            let pair = make_pair(kind, &PairParams::default()).unwrap();
            for spec in [&pair.m1, &pair.m2] {
                let ladder = quality_ladder(7);
                assert_eq!(ladder.len(), 7);
                let means: Vec<f64> = ladder
                    .iter()
                    .map(|&q| {
                        let p = ScriptedPolicy::new(spec, q).unwrap();
                        let mut r = rng(100);
                        (0..20)
                            .map(|_| {
                                let s0 = spec.sample_initial(&mut r);
                                rollout(spec, &p, q, s0, 50, &mut r).unwrap().ret
                            })
                            .sum::<f64>()
                            / 20.0
                    })
                    .collect();
                assert!(means.windows(2).all(|w| w[0] < w[1]), "{}: {means:?}", spec.name);
            }
        }
    }

    #[test]
    fn rollout_shapes_and_invariant() {
        let pair = make_pair(PairKind::Arm, &PairParams::default()).unwrap();
        let p = pair.oracle_policy();
        let mut r = rng(1);
        let s0 = pair.m2.sample_initial(&mut r);
        let t = rollout(&pair.m2, &p, 1.0, s0, 1, &mut r).unwrap();
        assert_eq!((t.states.len(), t.actions.len()), (2, 1));
        let t = rollout(&pair.m2, &p, 1.0, t.states[0].clone(), 30, &mut r).unwrap();
        for i in 0..t.len() {
            assert_eq!(pair.m2.step(&t.states[i], &t.actions[i]).unwrap(), t.states[i + 1]);
        }
        assert!(rollout(&pair.m2, &p, 1.0, t.states[0].clone(), 0, &mut r).is_err());
    }

    struct Zero(usize);
    impl Policy for Zero {
        fn act(&self, _s: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
            vec![0.0; self.0]
        }
    }

    struct Broken;
    impl Policy for Broken {
        fn act(&self, _s: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
            vec![f64::NAN, 0.0]
        }
    }

    #[test]
    fn zero_policy_stays_put() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let s0 = vec![0.3, -0.2];
        let t = rollout(&pair.m1, &Zero(2), 0.0, s0.clone(), 10, &mut rng(0)).unwrap();
        assert!(t.states.iter().all(|s| *s == s0));
        assert!((t.ret - 10.0 * pair.m1.reward(&s0, &[0.0, 0.0])).abs() < 1e-12);
        assert!(rollout(&pair.m1, &Broken, 0.0, s0, 10, &mut rng(0)).is_err());
    }

    #[test]
    fn oracle_reaches_goal() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let t = rollout(&pair.m2, &pair.oracle_policy(), 1.0, vec![1.0, 1.0], 50, &mut rng(0)).unwrap();
        assert!(dist(t.states.last().unwrap(), &[0.0, 0.0]) < 0.05);
        let arm = make_pair(PairKind::Arm, &PairParams::default()).unwrap();
        let mut r = rng(2);
        for spec in [&arm.m1, &arm.m2] {
            let p = ScriptedPolicy::new(spec, 1.0).unwrap();
            for _ in 0..20 {
                let s0 = spec.sample_initial(&mut r);
                let t = rollout(spec, &p, 1.0, s0, 50, &mut r).unwrap();
                let last = t.states.last().unwrap();
                assert!(-spec.reward(last, &[0.0; 3][..spec.action_dim]) < 0.05, "{}", spec.name);
            }
        }
    }

    #[test]
    fn abstractions_agree_at_ground_truth() {
        let pair = make_pair(PairKind::Scaled, &PairParams::default()).unwrap();
        let gt = pair.ground_truth.as_ref().unwrap();
        let mut r = rng(6);
        for _ in 0..100 {
            let (s, a) = random_sa(&pair.m1, &mut r);
            let t = gt.phi.apply(&s);
            let b = gt.h1.apply(&cat(&s, &a));
            let sa = &pair.state_abstractions[0];
            let x1 = AbstractionInput { state: &s, action: Some(&a), confidence: None };
            let x2 = AbstractionInput { state: &t, action: Some(&b), confidence: None };
            assert!(dist(&sa.agent1.value(&x1).unwrap(), &sa.agent2.value(&x2).unwrap()) < 1e-12);
            let aa = &pair.action_abstractions[0];
            assert!(dist(&aa.agent1.value(&x1).unwrap(), &aa.agent2.value(&x2).unwrap()) < 1e-12);
        }
    }
}
