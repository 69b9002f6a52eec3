//! Multilayer perceptrons, twin-encoder similarity networks, Adam and the
//! binary checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    /// Lipschitz constant of the activation.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }
}

/// Role tag of a network inside a translation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    StateMap,
    ActionMap1,
    ActionMap2,
    InverseMap,
    DiscState,
    DiscAction1,
    DiscAction2,
    ForwardModel,
    SimState,
    SimAction,
}

/// Something that maps one batch to another inside a graph.
pub trait Module {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// Something that maps a pair of batches (state and action, or agent-1 and
/// agent-2 inputs) to one batch.
pub trait PairModule {
    fn forward_pair(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var>;
}

/// Fully connected network `x W_0 + b_0 -> act -> ... -> x W_L + b_L -> out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub role: Role,
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. The same seed always yields the
    /// same parameters.
    pub fn new(
        role: Role,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least 2 layer sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-sized layer in {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(Self {
            role,
            sizes: sizes.to_vec(),
            hidden,
            output,
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in layer-major order: `W_0, b_0, W_1, b_1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// All parameters flattened in layer-major order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records the parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let params = self.params().into_iter().map(|p| g.leaf(p.clone(), trainable)).collect();
        self.bind_vars(params)
    }

    /// Uses caller-provided leaves (in [`Mlp::params`] order) as parameters.
    pub fn bind_vars(&self, params: Vec<Var>) -> BoundMlp {
        BoundMlp {
            params,
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Evaluates the network on a `[batch, input_dim]` matrix.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = bound.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// An [`Mlp`] whose parameters live in a particular graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    params: Vec<Var>,
    hidden: Activation,
    output: Activation,
}

impl BoundMlp {
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Gradients in parameter order (zeros for frozen parameters).
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.params.iter().map(|p| g.grad_tensor(*p)).collect()
    }
}

impl Module for BoundMlp {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let layers = self.params.len() / 2;
        let mut h = x;
        for l in 0..layers {
            let z = g.matmul(h, self.params[2 * l])?;
            let z = g.add_bias(z, self.params[2 * l + 1])?;
            let act = if l + 1 == layers { self.output } else { self.hidden };
            h = act.apply(g, z);
        }
        Ok(h)
    }
}

impl PairModule for BoundMlp {
    fn forward_pair(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let x = g.concat(&[a, b])?;
        self.forward(g, x)
    }
}

/// Affine map `y = a W_a + b W_b + c` with fixed coefficients. Used for
/// closed-form ground-truth maps and exact linear dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `[in, out]` weight.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearMap {
    /// From a row-major `out x in` matrix, as used by the environment module.
    pub fn from_matrix(out_dim: usize, in_dim: usize, m: &[f64]) -> Result<Self> {
        if m.len() != out_dim * in_dim {
            return Err(Error::InvalidArgument(format!(
                "matrix {out_dim}x{in_dim} needs {} entries, got {}",
                out_dim * in_dim,
                m.len()
            )));
        }
        let mut w = vec![0.0; in_dim * out_dim];
        for r in 0..out_dim {
            for c in 0..in_dim {
                w[c * out_dim + r] = m[r * in_dim + c];
            }
        }
        Ok(Self {
            weight: Tensor::new(vec![in_dim, out_dim], w)?,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: &[f64]) -> Result<Self> {
        self.bias = Some(Tensor::new(vec![bias.len()], bias.to_vec())?);
        Ok(self)
    }
}

impl Module for LinearMap {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.constant(self.weight.clone());
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.constant(b.clone());
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl PairModule for LinearMap {
    fn forward_pair(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let x = g.concat(&[a, b])?;
        self.forward(g, x)
    }
}

/// Emits the same row for every input row, whatever the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantMap {
    pub row: Vec<f64>,
}

impl ConstantMap {
    fn emit(&self, g: &mut Graph, rows: usize) -> Result<Var> {
        let data = self.row.iter().copied().cycle().take(rows * self.row.len()).collect();
        Ok(g.constant(Tensor::new(vec![rows, self.row.len()], data)?))
    }
}

impl Module for ConstantMap {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let rows = g.value(x).rows();
        self.emit(g, rows)
    }
}

impl PairModule for ConstantMap {
    fn forward_pair(&self, g: &mut Graph, a: Var, _b: Var) -> Result<Var> {
        let rows = g.value(a).rows();
        self.emit(g, rows)
    }
}

/// Learned forward dynamics `T(s, a) = s + f(s, a)` where `f` is an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub net: Mlp,
}

impl ForwardModel {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(state_dim);
        Ok(Self {
            net: Mlp::new(Role::ForwardModel, &sizes, Activation::Tanh, Activation::Identity, seed)?,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundForwardModel {
        BoundForwardModel {
            net: self.net.bind(g, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundForwardModel {
    pub net: BoundMlp,
}

impl PairModule for BoundForwardModel {
    fn forward_pair(&self, g: &mut Graph, s: Var, a: Var) -> Result<Var> {
        let delta = self.net.forward_pair(g, s, a)?;
        g.add(s, delta)
    }
}

/// Twin-encoder similarity function: each agent's input goes through its
/// own encoder into a shared hidden width, the features are concatenated
/// and a sigmoid head scores them in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityNet {
    pub encoder1: Mlp,
    pub encoder2: Mlp,
    pub head: Mlp,
}

impl SimilarityNet {
    pub fn new(
        role: Role,
        input1: usize,
        input2: usize,
        encoder_width: usize,
        head_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let enc = |input: usize, s: u64| {
            Mlp::new(
                role,
                &[input, encoder_width, encoder_width],
                Activation::Tanh,
                Activation::Tanh,
                s,
            )
        };
        let net = Self {
            encoder1: enc(input1, seed)?,
            encoder2: enc(input2, seed.wrapping_add(1))?,
            head: Mlp::new(
                role,
                &[2 * encoder_width, head_width, 1],
                Activation::Tanh,
                Activation::Sigmoid,
                seed.wrapping_add(2),
            )?,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let (w1, w2) = (self.encoder1.output_dim(), self.encoder2.output_dim());
        if w1 != w2 || self.head.input_dim() != 2 * w1 || self.head.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "similarity net widths do not conform: encoders {w1}/{w2}, head {:?}",
                self.head.sizes()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundSimilarity {
        BoundSimilarity {
            encoder1: self.encoder1.bind(g, trainable),
            encoder2: self.encoder2.bind(g, trainable),
            head: self.head.bind(g, trainable),
        }
    }

    pub fn nets(&self) -> [&Mlp; 3] {
        [&self.encoder1, &self.encoder2, &self.head]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.encoder1, &mut self.encoder2, &mut self.head]
    }

    /// Scores rows of `x1` against the matching rows of `x2`.
    pub fn predict(&self, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (a, c) = (g.constant(x1.clone()), g.constant(x2.clone()));
        let y = b.forward_pair(&mut g, a, c)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct BoundSimilarity {
    pub encoder1: BoundMlp,
    pub encoder2: BoundMlp,
    pub head: BoundMlp,
}

impl PairModule for BoundSimilarity {
    fn forward_pair(&self, g: &mut Graph, x1: Var, x2: Var) -> Result<Var> {
        let h1 = self.encoder1.forward(g, x1)?;
        let h2 = self.encoder2.forward(g, x2)?;
        let h = g.concat(&[h1, h2])?;
        self.head.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Settings used for discriminators.
    pub fn discriminator() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.5,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for one set of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update. Returns `Ok(false)` without touching anything
    /// when a gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            log::warn!("non-finite gradient, adam step skipped");
            return Ok(false);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::InvalidArgument("parameter layout changed between adam steps".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(true)
    }

    /// Convenience wrapper for a whole network.
    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &[Tensor]) -> Result<bool> {
        let mut params = net.params_mut();
        self.step(&mut params, grads)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSCL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named collection of networks written to and read from one checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelSet {
    pub networks: BTreeMap<String, Mlp>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    metadata: BTreeMap<String, String>,
    networks: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    key: String,
    role: Role,
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    param_count: usize,
}

impl ModelSet {
    pub fn insert(&mut self, key: impl Into<String>, net: Mlp) {
        self.networks.insert(key.into(), net);
    }

    pub fn get(&self, key: &str) -> Result<&Mlp> {
        self.networks
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint has no network `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            metadata: self.metadata.clone(),
            networks: self
                .networks
                .iter()
                .map(|(k, n)| ManifestEntry {
                    key: k.clone(),
                    role: n.role,
                    sizes: n.sizes.clone(),
                    hidden: n.hidden,
                    output: n.output,
                    param_count: n.param_count(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for net in self.networks.values() {
            for v in net.flat_params() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::Format(m);
        if bytes.len() < 16 {
            return Err(fail("checkpoint truncated in header".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(fail("checkpoint truncated in manifest".into()));
        }
        let text = std::str::from_utf8(&body[..len]).map_err(|e| fail(format!("manifest not UTF-8: {e}")))?;
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| fail(format!("bad manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(fail(format!(
                "manifest version {} disagrees with header {version}",
                manifest.format_version
            )));
        }
        let payload = &body[len..];
        let mut offset = 0;
        let mut networks = BTreeMap::new();
        for e in manifest.networks {
            let mut net = Mlp::new(e.role, &e.sizes, e.hidden, e.output, 0)
                .map_err(|err| fail(format!("network `{}`: {err}", e.key)))?;
            if net.param_count() != e.param_count {
                return Err(fail(format!(
                    "network `{}`: layer sizes {:?} imply {} parameters, manifest says {}",
                    e.key,
                    e.sizes,
                    net.param_count(),
                    e.param_count
                )));
            }
            let need = e.param_count * 8;
            if offset + need > payload.len() {
                return Err(fail(format!("checkpoint truncated in payload of `{}`", e.key)));
            }
            let flat: Vec<f64> = payload[offset..offset + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += need;
            net.set_flat_params(&flat)?;
            networks.insert(e.key, net);
        }
        if offset != payload.len() {
            return Err(fail(format!(
                "checkpoint payload has {} trailing bytes; manifest does not match payload",
                payload.len() - offset
            )));
        }
        Ok(Self {
            networks,
            metadata: manifest.metadata,
        })
    }
}

pub fn save_checkpoint(set: &ModelSet, path: &Path) -> Result<()> {
    fs::write(path, set.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelSet> {
    let bytes = fs::read(path).map_err(|e| Error::MissingInput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    ModelSet::from_bytes(&bytes)
}
