//! Run configuration: one TOML document covering data, training and
//! evaluation, plus the seed fan-out and the provenance hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::LabelConfig;
use crate::envs::{PairKind, PairParams};
use crate::error::{Error, Result};
use crate::eval::Method;
use crate::losses::LossWeights;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub kind: String,
    pub gain: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            kind: "scaled".into(),
            gain: PairParams::default().gain,
        }
    }
}

impl PairConfig {
    pub fn kind(&self) -> Result<PairKind> {
        self.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn params(&self) -> PairParams {
        PairParams { gain: self.gain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Quality-ladder rungs per agent.
    pub rungs: usize,
    pub trajectories_per_rung: usize,
    pub horizon: usize,
    pub n_pairs: usize,
    pub sigma: Option<f64>,
    pub binary: bool,
    pub threshold: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rungs: 7,
            trajectories_per_rung: 10,
            horizon: 50,
            n_pairs: 1000,
            sigma: None,
            binary: false,
            threshold: None,
        }
    }
}

impl DataConfig {
    pub fn labels(&self) -> LabelConfig {
        LabelConfig {
            n: self.n_pairs,
            sigma: self.sigma,
            binary: self.binary,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub episode_horizon: usize,
    /// Evaluation seeds per statistic.
    pub seeds: usize,
    pub compounding_horizon: usize,
    pub compounding_batch: usize,
    pub recovery_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            episode_horizon: 50,
            seeds: 5,
            compounding_horizon: 10,
            compounding_batch: 256,
            recovery_samples: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub horizons: Vec<usize>,
    pub methods: Vec<String>,
    /// Number of training replicates; replicate `r` uses master seed `seed + r`.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1, 2, 3, 5, 10],
            methods: Method::TABLE.iter().map(|m| m.to_string()).collect(),
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub out: Option<PathBuf>,
    pub pair: PairConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Weascl(5).to_string(),
            out: None,
            pair: PairConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Generator streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Demos1,
    Demos2,
    StatePairs(usize),
    ActionPairs(usize),
    Train,
    Eval,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Demos1 => 1,
            Stream::Demos2 => 2,
            Stream::Train => 3,
            Stream::Eval => 4,
            Stream::StatePairs(k) => 100 + k as u64,
            Stream::ActionPairs(k) => 200 + k as u64,
        }
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(master + stream id)`.
pub fn split_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master.wrapping_add(stream.id()))
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn toml_text<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml_text(self)
    }

    pub fn method(&self) -> Result<Method> {
        self.method.parse()
    }

    pub fn pair_kind(&self) -> Result<PairKind> {
        self.pair.kind()
    }

    /// Weights after applying the method tag; `None` for the oracle.
    pub fn method_weights(&self) -> Result<Option<LossWeights>> {
        Ok(self.method()?.weights(&self.weights))
    }

    pub fn sweep_methods(&self) -> Result<Vec<Method>> {
        self.sweep.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let kind = self.pair_kind()?;
        if kind == PairKind::Gain && !(0.25..=4.0).contains(&self.pair.gain) {
            return bad(format!("pair.gain {} outside [0.25, 4]", self.pair.gain));
        }
        let method = self.method()?;
        self.train.validate()?;
        self.weights.validate()?;
        let d = &self.data;
        if d.rungs == 0 || d.trajectories_per_rung == 0 || d.horizon == 0 || d.n_pairs == 0 {
            return bad("data.rungs, trajectories_per_rung, horizon and n_pairs must be positive".into());
        }
        if d.sigma.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return bad("data.sigma must be positive".into());
        }
        if d.threshold.is_some_and(|t| !(t.is_finite() && t >= 0.0)) {
            return bad("data.threshold must be non-negative".into());
        }
        let e = &self.eval;
        if e.episodes == 0 || e.episode_horizon == 0 || e.seeds == 0 || e.compounding_horizon == 0 || e.compounding_batch == 0 || e.recovery_samples == 0 {
            return bad("eval counts must be positive".into());
        }
        let methods = self.sweep_methods()?;
        if self.sweep.seeds == 0 {
            return bad("sweep.seeds must be positive".into());
        }
        let mut needed = self.weights.horizon.max(e.compounding_horizon);
        if let Some(w) = method.weights(&self.weights) {
            needed = needed.max(w.horizon);
        }
        for m in &methods {
            if let Some(w) = m.weights(&self.weights) {
                needed = needed.max(w.horizon);
            }
        }
        needed = needed.max(self.sweep.horizons.iter().copied().max().unwrap_or(0));
        if d.horizon < needed {
            return bad(format!(
                "data.horizon {} is shorter than the largest planned horizon {needed}",
                d.horizon
            ));
        }
        if self.sweep.horizons.contains(&0) {
            return bad("sweep.horizons must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything that determines the generated data.
    pub fn data_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            seed: u64,
            pair: &'a PairConfig,
            data: &'a DataConfig,
        }
        Ok(sha256_hex(&toml_text(&View {
            seed: self.seed,
            pair: &self.pair,
            data: &self.data,
        })?))
    }

    /// Hash of everything that determines phase 1: data plus training setup.
    pub fn phase1_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            data: String,
            train: &'a TrainConfig,
        }
        Ok(sha256_hex(&toml_text(&View {
            data: self.data_hash()?,
            train: &self.train,
        })?))
    }

    /// Hash of the whole run except the output directory and the eval and
    /// sweep tables.
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            phase1: String,
            method: &'a str,
            weights: &'a LossWeights,
        }
        Ok(sha256_hex(&toml_text(&View {
            phase1: self.phase1_hash()?,
            method: &self.method,
            weights: &self.weights,
        })?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.method().unwrap(), Method::Weascl(5));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.pair.kind = "gain".into();
        cfg.pair.gain = 2.0;
        cfg.data.sigma = Some(0.3);
        cfg.train.phase2_max_cycles = 7;
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["sed = 1", "[data]\nrung = 3", "[train]\nbatchsize = 3", "[weights]\nlambda = 1"] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "method = \"gail\"",
            "[pair]\nkind = \"tank\"",
            "[pair]\nkind = \"gain\"\ngain = 9.0",
            "[data]\nhorizon = 3",
            "[sweep]\nhorizons = [1, 60]",
            "[train]\ninner_state = 0",
            "[sweep]\nseeds = 0",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn method_tags_map_to_weights() {
        let mut cfg = RunConfig {
            method: "dcc-1".into(),
            ..RunConfig::default()
        };
        let w = cfg.method_weights().unwrap().unwrap();
        assert_eq!((w.weak, w.horizon), (0.0, 1));
        cfg.method = "weascl-5".into();
        let w = cfg.method_weights().unwrap().unwrap();
        assert_eq!((w.weak, w.horizon), (cfg.weights.weak, 5));
        cfg.method = "oracle".into();
        assert!(cfg.method_weights().unwrap().is_none());
    }

    #[test]
    fn hashes_track_their_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        b.eval.episodes = 3;
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.method = "dcc-1".into();
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.phase1_hash().unwrap(), b.phase1_hash().unwrap());
        b.seed = 1;
        assert_ne!(a.data_hash().unwrap(), b.data_hash().unwrap());
        assert_eq!(a.data_hash().unwrap().len(), 64);
    }

    #[test]
    fn seed_split_separates_streams() {
        let seeds: Vec<u64> = [Stream::Demos1, Stream::Demos2, Stream::Train, Stream::Eval, Stream::StatePairs(0), Stream::ActionPairs(0)]
            .iter()
            .map(|s| split_seed(7, *s))
            .collect();
        let mut uniq = seeds.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
