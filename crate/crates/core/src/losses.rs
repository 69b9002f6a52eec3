//! Training objectives over a computation graph.
//!
//! Loss functions take networks as [`Module`] / [`PairModule`] trait objects
//! so closed-form maps and constant stubs can stand in for learned ones.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, BoundForwardModel, BoundMlp, BoundSimilarity, ForwardModel, Mlp, Module, PairModule, Role,
    SimilarityNet,
};

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    L1,
    L2Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ₀, multi-step dynamics consistency.
    pub dynamics: f64,
    /// λ₁, domain cycle consistency (and inverse-context reconstruction).
    pub domain_cycle: f64,
    /// λ₂, action adversarial.
    pub adversarial_action: f64,
    /// λ₃, state adversarial.
    pub adversarial_state: f64,
    /// λ₄, weak constraints.
    pub weak: f64,
    /// Dynamics-consistency horizon T.
    pub horizon: usize,
    /// Norm of the cycle and dynamics residuals.
    pub norm: Norm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dynamics: 10.0,
            domain_cycle: 10.0,
            adversarial_action: 1.0,
            adversarial_state: 1.0,
            weak: 50.0,
            horizon: 5,
            norm: Norm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("dynamics", self.dynamics),
            ("domain_cycle", self.domain_cycle),
            ("adversarial_action", self.adversarial_action),
            ("adversarial_state", self.adversarial_state),
            ("weak", self.weak),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("dynamics horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            dynamics: 0.0,
            domain_cycle: 0.0,
            adversarial_action: 0.0,
            adversarial_state: 0.0,
            weak: 0.0,
            horizon: 1,
            norm: Norm::L1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Trains Φ and Φ̄; action maps are held fixed.
    State,
    /// Trains H¹ and H²; Φ and Φ̄ are held fixed.
    Action,
    /// The unsplit objective, with every map live.
    All,
}

/// Every network the map objectives touch, by reference.
#[derive(Clone, Copy)]
pub struct Nets<'a> {
    pub phi: &'a dyn Module,
    pub phi_bar: &'a dyn Module,
    pub h1: &'a dyn PairModule,
    pub h2: &'a dyn PairModule,
    pub disc_s: &'a dyn Module,
    pub disc_a1: &'a dyn Module,
    pub disc_a2: &'a dyn Module,
    pub forward: &'a dyn PairModule,
    pub sim_s: &'a [&'a dyn PairModule],
    pub sim_a: &'a [&'a dyn PairModule],
}

/// Evaluates the wrapped module and cuts its output out of the gradient path.
pub struct Frozen<'a, M: ?Sized>(pub &'a M);

impl<M: Module + ?Sized> Module for Frozen<'_, M> {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.0.forward(g, x)?;
        Ok(g.detach(y))
    }
}

impl<M: PairModule + ?Sized> PairModule for Frozen<'_, M> {
    fn forward_pair(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let y = self.0.forward_pair(g, a, b)?;
        Ok(g.detach(y))
    }
}

fn check_rows(g: &Graph, what: &str, vars: &[Var]) -> Result<()> {
    let shapes: Vec<&[usize]> = vars.iter().map(|v| g.value(*v).shape()).collect();
    if shapes.iter().any(|s| s.len() != 2 || s[0] == 0) {
        return Err(Error::InvalidArgument(format!("{what}: batches must be non-empty matrices, got {shapes:?}")));
    }
    if shapes.iter().any(|s| s[0] != shapes[0][0]) {
        return Err(Error::InvalidArgument(format!("{what}: batch sizes differ: {shapes:?}")));
    }
    Ok(())
}

/// Mean over rows of the per-row norm of `diff`.
pub fn row_norm_mean(g: &mut Graph, diff: Var, norm: Norm) -> Var {
    let rows = g.value(diff).rows().max(1);
    let per = match norm {
        Norm::L1 => g.abs(diff),
        Norm::L2Squared => g.square(diff),
    };
    let total = g.sum(per);
    g.scale(total, 1.0 / rows as f64)
}

fn residual(g: &mut Graph, a: Var, b: Var, norm: Norm) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(row_norm_mean(g, d, norm))
}

fn mean_sq_shifted(g: &mut Graph, x: Var, target: f64) -> Result<Var> {
    let d = if target == 0.0 {
        x
    } else {
        let t = g.constant(Tensor::full(g.value(x).shape().to_vec(), target));
        g.sub(x, t)?
    };
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Least-squares adversarial pair: `real` should score 1, `fake` 0.
fn lsgan(g: &mut Graph, disc: &dyn Module, real: Var, fake: Var, side: Side) -> Result<Var> {
    match side {
        Side::Discriminator => {
            let fake = g.detach(fake);
            let dr = disc.forward(g, real)?;
            let df = disc.forward(g, fake)?;
            let lr = mean_sq_shifted(g, dr, 1.0)?;
            let lf = mean_sq_shifted(g, df, 0.0)?;
            g.add(lr, lf)
        }
        Side::Generator => {
            let df = disc.forward(g, fake)?;
            mean_sq_shifted(g, df, 1.0)
        }
    }
}

/// `D^s` judges real agent-2 states against `Φ(s¹)`.
pub fn adv_state_loss(g: &mut Graph, nets: &Nets<'_>, s1: Var, s2: Var, side: Side) -> Result<Var> {
    check_rows(g, "adv_state_loss", &[s1])?;
    check_rows(g, "adv_state_loss", &[s2])?;
    let fake = nets.phi.forward(g, s1)?;
    lsgan(g, nets.disc_s, s2, fake, side)
}

/// `D^{a²}` judges real `a²` against `H¹(s¹, a¹)`; `D^{a¹}` judges real
/// `a¹` against `H²(s², a²)`.
pub fn adv_action_loss(g: &mut Graph, nets: &Nets<'_>, s1: Var, a1: Var, s2: Var, a2: Var, side: Side) -> Result<Var> {
    check_rows(g, "adv_action_loss", &[s1, a1])?;
    check_rows(g, "adv_action_loss", &[s2, a2])?;
    let fake2 = nets.h1.forward_pair(g, s1, a1)?;
    let fake1 = nets.h2.forward_pair(g, s2, a2)?;
    let l2 = lsgan(g, nets.disc_a2, a2, fake2, side)?;
    let l1 = lsgan(g, nets.disc_a1, a1, fake1, side)?;
    g.add(l2, l1)
}

/// Action round trips through both maps, with `Φ̄(s²)` as the agent-1
/// context on the way back from agent 2.
pub fn domain_cycle_loss(g: &mut Graph, nets: &Nets<'_>, s1: Var, a1: Var, s2: Var, a2: Var, norm: Norm) -> Result<Var> {
    check_rows(g, "domain_cycle_loss", &[s1, a1])?;
    check_rows(g, "domain_cycle_loss", &[s2, a2])?;
    let t = nets.phi.forward(g, s1)?;
    let b = nets.h1.forward_pair(g, s1, a1)?;
    let a1_back = nets.h2.forward_pair(g, t, b)?;
    let term1 = residual(g, a1_back, a1, norm)?;
    let ctx = nets.phi_bar.forward(g, s2)?;
    let a = nets.h2.forward_pair(g, s2, a2)?;
    let a2_back = nets.h1.forward_pair(g, ctx, a)?;
    let term2 = residual(g, a2_back, a2, norm)?;
    g.add(term1, term2)
}

/// `Φ̄(Φ(s¹))` should reconstruct `s¹`.
pub fn inverse_context_loss(g: &mut Graph, nets: &Nets<'_>, s1: Var, norm: Norm) -> Result<Var> {
    check_rows(g, "inverse_context_loss", &[s1])?;
    let t = nets.phi.forward(g, s1)?;
    let back = nets.phi_bar.forward(g, t)?;
    residual(g, back, s1, norm)
}

/// Mean squared one-step prediction error.
pub fn forward_model_loss(g: &mut Graph, model: &dyn PairModule, s: Var, a: Var, s_next: Var) -> Result<Var> {
    check_rows(g, "forward_model_loss", &[s, a, s_next])?;
    let pred = model.forward_pair(g, s, a)?;
    residual(g, pred, s_next, Norm::L2Squared)
}

/// Single-step dynamics cycle consistency.
pub fn dyn_cycle_loss_1(g: &mut Graph, nets: &Nets<'_>, s: Var, a: Var, s_next: Var, norm: Norm) -> Result<Var> {
    check_rows(g, "dyn_cycle_loss_1", &[s, a, s_next])?;
    let t = nets.phi.forward(g, s)?;
    let b = nets.h1.forward_pair(g, s, a)?;
    let pred = nets.forward.forward_pair(g, t, b)?;
    let target = nets.phi.forward(g, s_next)?;
    residual(g, target, pred, norm)
}

/// Rolls the learned agent-2 dynamics forward from `Φ(s_t)` with translated
/// actions and sums the per-step gaps to `Φ(s_{t+τ})` for `τ = 1..=horizon`.
pub fn multi_step_dyn_loss(
    g: &mut Graph,
    nets: &Nets<'_>,
    states: &[Var],
    actions: &[Var],
    horizon: usize,
    norm: Norm,
) -> Result<Var> {
    if horizon == 0 || actions.len() < horizon || states.len() < horizon + 1 {
        return Err(Error::InvalidArgument(format!(
            "multi-step loss needs {} states and {horizon} actions, got {} and {}",
            horizon + 1,
            states.len(),
            actions.len()
        )));
    }
    let mut all = states[..=horizon].to_vec();
    all.extend_from_slice(&actions[..horizon]);
    check_rows(g, "multi_step_dyn_loss", &all)?;
    let mut rolled = nets.phi.forward(g, states[0])?;
    let mut total: Option<Var> = None;
    for tau in 1..=horizon {
        let b = nets.h1.forward_pair(g, states[tau - 1], actions[tau - 1])?;
        rolled = nets.forward.forward_pair(g, rolled, b)?;
        let target = nets.phi.forward(g, states[tau])?;
        let term = residual(g, target, rolled, norm)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("horizon >= 1"))
}

/// Mean binary cross-entropy of probabilities `p` against labels `v`.
pub fn bce(g: &mut Graph, p: Var, v: Var) -> Result<Var> {
    let shape = g.value(p).shape().to_vec();
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let ones = g.constant(Tensor::full(shape, 1.0));
    let lp = g.ln(p)?;
    let q = g.sub(ones, p)?;
    let lq = g.ln(q)?;
    let not_v = g.sub(ones, v)?;
    let pos = g.mul(v, lp)?;
    let neg = g.mul(not_v, lq)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    Ok(g.scale(m, -1.0))
}

pub fn similarity_loss(g: &mut Graph, net: &dyn PairModule, x1: Var, x2: Var, labels: Var) -> Result<Var> {
    check_rows(g, "similarity_loss", &[x1, x2, labels])?;
    if g.value(labels).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("similarity labels must lie in [0, 1]".into()));
    }
    let p = net.forward_pair(g, x1, x2)?;
    bce(g, p, labels)
}

/// `-Σ_k E[sim_k(s¹, Φ(s¹))] - Σ_k E[sim_k((s¹, a¹), (Φ(s¹), H¹(s¹, a¹)))]`.
pub fn weak_constraint_loss(g: &mut Graph, nets: &Nets<'_>, s1: Var, a1: Var) -> Result<Var> {
    if nets.sim_s.is_empty() && nets.sim_a.is_empty() {
        return Err(Error::InvalidArgument("weak constraints need at least one similarity net".into()));
    }
    check_rows(g, "weak_constraint_loss", &[s1, a1])?;
    let t = nets.phi.forward(g, s1)?;
    let mut scores = Vec::new();
    for sim in nets.sim_s {
        let p = sim.forward_pair(g, s1, t)?;
        scores.push(g.mean(p));
    }
    if !nets.sim_a.is_empty() {
        let b = nets.h1.forward_pair(g, s1, a1)?;
        let x1 = g.concat(&[s1, a1])?;
        let x2 = g.concat(&[t, b])?;
        for sim in nets.sim_a {
            let p = sim.forward_pair(g, x1, x2)?;
            scores.push(g.mean(p));
        }
    }
    let mut total = scores[0];
    for s in &scores[1..] {
        total = g.add(total, *s)?;
    }
    Ok(g.scale(total, -1.0))
}

/// Inputs to the map objectives, already in the graph.
#[derive(Debug, Clone)]
pub struct MapBatch {
    /// Agent-1 segment, `horizon + 1` state batches and `horizon` action batches.
    pub states1: Vec<Var>,
    pub actions1: Vec<Var>,
    /// Unpaired agent-2 states and actions.
    pub s2: Var,
    pub a2: Var,
}

impl MapBatch {
    pub fn s1(&self) -> Var {
        self.states1[0]
    }

    pub fn a1(&self) -> Var {
        self.actions1[0]
    }

    /// Agent-2 states of the same batch size as `s1` in `[batch, dim]` form.
    pub fn from_tensors(g: &mut Graph, states1: &[Tensor], actions1: &[Tensor], s2: &Tensor, a2: &Tensor) -> Self {
        Self {
            states1: states1.iter().map(|t| g.constant(t.clone())).collect(),
            actions1: actions1.iter().map(|t| g.constant(t.clone())).collect(),
            s2: g.constant(s2.clone()),
            a2: g.constant(a2.clone()),
        }
    }
}

/// Unweighted term values of one map-objective evaluation; `None` when the
/// phase does not include the term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermValues {
    pub adv_s: Option<f64>,
    pub adv_a: Option<f64>,
    pub dom: Option<f64>,
    pub mdyn: Option<f64>,
    pub weak: Option<f64>,
    pub recon: Option<f64>,
}

pub struct MapLoss {
    pub total: Var,
    pub terms: TermValues,
}

/// Weighted map objective for one phase of the alternating schedule.
pub fn total_map_loss(g: &mut Graph, nets: &Nets<'_>, batch: &MapBatch, weights: &LossWeights, phase: Phase) -> Result<MapLoss> {
    weights.validate()?;
    let frozen_phi = Frozen(nets.phi);
    let frozen_phi_bar = Frozen(nets.phi_bar);
    let frozen_h1 = Frozen(nets.h1);
    let frozen_h2 = Frozen(nets.h2);
    let mut live = *nets;
    match phase {
        Phase::State => {
            live.h1 = &frozen_h1;
            live.h2 = &frozen_h2;
        }
        Phase::Action => {
            live.phi = &frozen_phi;
            live.phi_bar = &frozen_phi_bar;
        }
        Phase::All => {}
    }
    let nets = &live;
    let (s1, a1) = (batch.s1(), batch.a1());
    let mut terms = TermValues::default();
    let mut parts: Vec<(f64, Var)> = Vec::new();
    let record = |g: &Graph, slot: &mut Option<f64>, w: f64, v: Var, parts: &mut Vec<(f64, Var)>| {
        *slot = Some(g.value(v).item());
        parts.push((w, v));
    };

    if matches!(phase, Phase::State | Phase::All) {
        let v = adv_state_loss(g, nets, s1, batch.s2, Side::Generator)?;
        record(g, &mut terms.adv_s, weights.adversarial_state, v, &mut parts);
    }
    if matches!(phase, Phase::Action | Phase::All) {
        let v = adv_action_loss(g, nets, s1, a1, batch.s2, batch.a2, Side::Generator)?;
        record(g, &mut terms.adv_a, weights.adversarial_action, v, &mut parts);
        let v = domain_cycle_loss(g, nets, s1, a1, batch.s2, batch.a2, weights.norm)?;
        record(g, &mut terms.dom, weights.domain_cycle, v, &mut parts);
    }
    let v = multi_step_dyn_loss(g, nets, &batch.states1, &batch.actions1, weights.horizon, weights.norm)?;
    record(g, &mut terms.mdyn, weights.dynamics, v, &mut parts);
    if weights.weak > 0.0 {
        let v = weak_constraint_loss(g, nets, s1, a1)?;
        record(g, &mut terms.weak, weights.weak, v, &mut parts);
    }
    if phase == Phase::State {
        let v = inverse_context_loss(g, nets, s1, weights.norm)?;
        record(g, &mut terms.recon, weights.domain_cycle, v, &mut parts);
    }

    let mut total: Option<Var> = None;
    for (w, v) in parts {
        let scaled = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(MapLoss {
        total: total.expect("multi-step term is always present"),
        terms,
    })
}

/// The dynamics-cycle-consistency composite without weak supervision,
/// built from the single-step loss.
pub fn dcc_objective(g: &mut Graph, nets: &Nets<'_>, batch: &MapBatch, weights: &LossWeights) -> Result<Var> {
    let (s1, a1) = (batch.s1(), batch.a1());
    let adv_s = adv_state_loss(g, nets, s1, batch.s2, Side::Generator)?;
    let adv_a = adv_action_loss(g, nets, s1, a1, batch.s2, batch.a2, Side::Generator)?;
    let dom = domain_cycle_loss(g, nets, s1, a1, batch.s2, batch.a2, weights.norm)?;
    let dynamics = dyn_cycle_loss_1(g, nets, s1, a1, batch.states1[1], weights.norm)?;
    let parts = [
        g.scale(adv_s, weights.adversarial_state),
        g.scale(adv_a, weights.adversarial_action),
        g.scale(dom, weights.domain_cycle),
        g.scale(dynamics, weights.dynamics),
    ];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = g.add(total, *p)?;
    }
    Ok(total)
}

/// Discriminator-side objective for the state phase.
pub fn disc_state_objective(g: &mut Graph, nets: &Nets<'_>, s1: Var, s2: Var) -> Result<Var> {
    adv_state_loss(g, nets, s1, s2, Side::Discriminator)
}

/// Discriminator-side objective for the action phase.
pub fn disc_action_objective(g: &mut Graph, nets: &Nets<'_>, s1: Var, a1: Var, s2: Var, a2: Var) -> Result<Var> {
    adv_action_loss(g, nets, s1, a1, s2, a2, Side::Discriminator)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDims {
    pub s1: usize,
    pub a1: usize,
    pub s2: usize,
    pub a2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub map_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub forward_hidden: Vec<usize>,
    pub sim_encoder: usize,
    pub sim_head: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            map_hidden: vec![64, 64],
            disc_hidden: vec![32, 32],
            forward_hidden: vec![64, 64],
            sim_encoder: 32,
            sim_head: 32,
        }
    }
}

/// All learned networks of one correspondence model.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationModel {
    pub phi: Mlp,
    pub phi_bar: Mlp,
    pub h1: Mlp,
    pub h2: Mlp,
    pub disc_s: Mlp,
    pub disc_a1: Mlp,
    pub disc_a2: Mlp,
    pub forward: ForwardModel,
    pub sim_s: Vec<SimilarityNet>,
    pub sim_a: Vec<SimilarityNet>,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl TranslationModel {
    pub fn new(dims: PairDims, arch: &Architecture, state_sets: usize, action_sets: usize, seed: u64) -> Result<Self> {
        let sub = |i: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i * 7919);
        let map = |role, input, output, i| Mlp::new(role, &sizes(input, &arch.map_hidden, output), Activation::Tanh, Activation::Identity, sub(i));
        let disc = |role, input, i| Mlp::new(role, &sizes(input, &arch.disc_hidden, 1), Activation::Relu, Activation::Sigmoid, sub(i));
        let sim = |role, in1, in2, i| SimilarityNet::new(role, in1, in2, arch.sim_encoder, arch.sim_head, sub(i));
        Ok(Self {
            phi: map(Role::StateMap, dims.s1, dims.s2, 1)?,
            phi_bar: map(Role::InverseMap, dims.s2, dims.s1, 2)?,
            h1: map(Role::ActionMap1, dims.s1 + dims.a1, dims.a2, 3)?,
            h2: map(Role::ActionMap2, dims.s2 + dims.a2, dims.a1, 4)?,
            disc_s: disc(Role::DiscState, dims.s2, 5)?,
            disc_a1: disc(Role::DiscAction1, dims.a1, 6)?,
            disc_a2: disc(Role::DiscAction2, dims.a2, 7)?,
            forward: ForwardModel::new(dims.s2, dims.a2, &arch.forward_hidden, sub(8))?,
            sim_s: (0..state_sets)
                .map(|k| sim(Role::SimState, dims.s1, dims.s2, 100 + 10 * k as u64))
                .collect::<Result<_>>()?,
            sim_a: (0..action_sets)
                .map(|k| sim(Role::SimAction, dims.s1 + dims.a1, dims.s2 + dims.a2, 200 + 10 * k as u64))
                .collect::<Result<_>>()?,
        })
    }

    pub fn dims(&self) -> PairDims {
        PairDims {
            s1: self.phi.input_dim(),
            a1: self.h2.output_dim(),
            s2: self.phi.output_dim(),
            a2: self.h1.output_dim(),
        }
    }

    pub fn bind(&self, g: &mut Graph, t: Trainable) -> BoundModel {
        BoundModel {
            phi: self.phi.bind(g, t.state_maps),
            phi_bar: self.phi_bar.bind(g, t.state_maps),
            h1: self.h1.bind(g, t.action_maps),
            h2: self.h2.bind(g, t.action_maps),
            disc_s: self.disc_s.bind(g, t.disc_state),
            disc_a1: self.disc_a1.bind(g, t.disc_action),
            disc_a2: self.disc_a2.bind(g, t.disc_action),
            forward: self.forward.bind(g, t.forward),
            sim_s: self.sim_s.iter().map(|s| s.bind(g, t.similarity)).collect(),
            sim_a: self.sim_a.iter().map(|s| s.bind(g, t.similarity)).collect(),
        }
    }
}

/// Which network groups get gradient-tracked parameters when bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub state_maps: bool,
    pub action_maps: bool,
    pub disc_state: bool,
    pub disc_action: bool,
    pub forward: bool,
    pub similarity: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Self {
            state_maps: true,
            action_maps: true,
            disc_state: true,
            disc_action: true,
            forward: true,
            similarity: true,
        }
    }
}

pub struct BoundModel {
    pub phi: BoundMlp,
    pub phi_bar: BoundMlp,
    pub h1: BoundMlp,
    pub h2: BoundMlp,
    pub disc_s: BoundMlp,
    pub disc_a1: BoundMlp,
    pub disc_a2: BoundMlp,
    pub forward: BoundForwardModel,
    pub sim_s: Vec<BoundSimilarity>,
    pub sim_a: Vec<BoundSimilarity>,
}

/// Keeps the trait-object slices for similarity nets alive.
pub struct NetRefs<'a> {
    bound: &'a BoundModel,
    sim_s: Vec<&'a dyn PairModule>,
    sim_a: Vec<&'a dyn PairModule>,
}

impl<'a> NetRefs<'a> {
    pub fn nets(&self) -> Nets<'_> {
        let b = self.bound;
        Nets {
            phi: &b.phi,
            phi_bar: &b.phi_bar,
            h1: &b.h1,
            h2: &b.h2,
            disc_s: &b.disc_s,
            disc_a1: &b.disc_a1,
            disc_a2: &b.disc_a2,
            forward: &b.forward,
            sim_s: &self.sim_s,
            sim_a: &self.sim_a,
        }
    }
}

impl BoundModel {
    pub fn refs(&self) -> NetRefs<'_> {
        NetRefs {
            bound: self,
            sim_s: self.sim_s.iter().map(|s| s as &dyn PairModule).collect(),
            sim_a: self.sim_a.iter().map(|s| s as &dyn PairModule).collect(),
        }
    }

    /// Bound networks in a fixed order with their names, for grad inspection.
    pub fn named(&self) -> Vec<(&'static str, &BoundMlp)> {
        let mut v = vec![
            ("phi", &self.phi),
            ("phi_bar", &self.phi_bar),
            ("h1", &self.h1),
            ("h2", &self.h2),
            ("disc_s", &self.disc_s),
            ("disc_a1", &self.disc_a1),
            ("disc_a2", &self.disc_a2),
            ("forward", &self.forward.net),
        ];
        for s in self.sim_s.iter().chain(&self.sim_a) {
            v.push(("sim", &s.encoder1));
            v.push(("sim", &s.encoder2));
            v.push(("sim", &s.head));
        }
        v
    }
}
