//! Run configuration, read from TOML.
//!
//! Every seed must be written out explicitly; everything else has a default.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackSettings, ForestParams, NshArch};
use crate::defense::DefenseArch;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_BINS, DEFAULT_EPSILONS};
use crate::memguard::{NoiseMethod, PhaseOneParams};
use crate::nn::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "d_n_samples")]
    pub n_samples: usize,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_flip_prob")]
    pub flip_prob: f64,
    pub split_size: usize,
    pub seed: u64,
}

fn d_n_samples() -> usize {
    2000
}
fn d_feature_dim() -> usize {
    128
}
fn d_k() -> usize {
    8
}
fn d_flip_prob() -> f64 {
    0.4
}

/// Architecture plus SGD schedule for one trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub decay_epoch: Option<usize>,
    #[serde(default)]
    pub decay_factor: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub l2_lambda: f64,
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
}

impl TrainSection {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            hidden: None,
            epochs: None,
            learning_rate: None,
            decay_epoch: None,
            decay_factor: None,
            batch_size: None,
            l2_lambda: 0.0,
            dropout: 0.0,
            seed,
        }
    }

    /// Fills unset fields from `base`.
    pub fn train_config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            decay_epoch: self.decay_epoch.or(if self.epochs.is_some() { None } else { base.decay_epoch }),
            decay_factor: self.decay_factor.unwrap_or(base.decay_factor),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hidden_or<'a>(&'a self, default: &'a [usize]) -> &'a [usize] {
        self.hidden.as_deref().unwrap_or(default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonmemberSource {
    /// The held-out split D₃.
    D3,
    /// Perturbed copies of D₁.
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    /// `shallow`, `medium` or `deep`; exclusive with `hidden`.
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub decay_epoch: Option<usize>,
    #[serde(default)]
    pub l2_lambda: f64,
    #[serde(default = "d_nonmembers")]
    pub nonmembers: NonmemberSource,
    #[serde(default = "d_keep_prob")]
    pub keep_prob: f64,
    pub seed: u64,
}

fn d_nonmembers() -> NonmemberSource {
    NonmemberSource::D3
}
fn d_keep_prob() -> f64 {
    0.9
}

impl DefenseSection {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            arch: None,
            hidden: None,
            epochs: None,
            learning_rate: None,
            decay_epoch: None,
            l2_lambda: 0.0,
            nonmembers: d_nonmembers(),
            keep_prob: d_keep_prob(),
            seed,
        }
    }

    pub fn hidden(&self) -> Result<Vec<usize>> {
        match (&self.hidden, &self.arch) {
            (Some(_), Some(_)) => Err(Error::config("defense: set either `arch` or `hidden`, not both")),
            (Some(h), None) => Ok(h.clone()),
            (None, Some(a)) => DefenseArch::parse(a)
                .map(|a| a.hidden().to_vec())
                .ok_or_else(|| Error::config(format!("unknown defense arch `{a}`"))),
            (None, None) => Ok(DefenseArch::default().hidden().to_vec()),
        }
    }

    pub fn train_section(&self) -> TrainSection {
        TrainSection {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            decay_epoch: self.decay_epoch,
            l2_lambda: self.l2_lambda,
            ..TrainSection::with_seed(self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "d_nn_hidden")]
    pub nn_hidden: Vec<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub decay_epoch: Option<usize>,
    #[serde(default = "d_n_trees")]
    pub n_trees: usize,
    #[serde(default = "d_max_depth")]
    pub max_depth: usize,
    #[serde(default = "d_known_fraction")]
    pub nsh_known_fraction: f64,
    pub seed: u64,
}

fn d_nn_hidden() -> Vec<usize> {
    vec![64, 32, 16]
}
fn d_n_trees() -> usize {
    32
}
fn d_max_depth() -> usize {
    8
}
fn d_known_fraction() -> f64 {
    0.3
}

impl AttackSection {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nn_hidden: d_nn_hidden(),
            epochs: None,
            learning_rate: None,
            decay_epoch: None,
            n_trees: d_n_trees(),
            max_depth: d_max_depth(),
            nsh_known_fraction: d_known_fraction(),
            seed,
        }
    }

    pub fn settings(&self) -> Result<AttackSettings> {
        let mut s = AttackSettings::new(self.seed);
        s.nn_hidden = self.nn_hidden.clone();
        for cfg in [&mut s.nn_train, &mut s.nsh_train] {
            if let Some(e) = self.epochs {
                cfg.epochs = e;
                cfg.decay_epoch = None;
            }
            if let Some(lr) = self.learning_rate {
                cfg.learning_rate = lr;
            }
            if self.decay_epoch.is_some() {
                cfg.decay_epoch = self.decay_epoch;
            }
            cfg.validate()?;
        }
        s.forest = ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            ..s.forest
        };
        s.nsh_arch = NshArch::default();
        s.nsh_known_fraction = self.nsh_known_fraction;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemGuardSection {
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_c2")]
    pub c2: f64,
    #[serde(default = "d_c3_init")]
    pub c3_init: f64,
    #[serde(default = "d_c3_growth")]
    pub c3_growth: f64,
    #[serde(default = "d_h_zero_tol")]
    pub h_zero_tol: f64,
    #[serde(default = "d_max_c3_rounds")]
    pub max_c3_rounds: usize,
    #[serde(default = "d_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "d_quant")]
    pub quant_decimals: u32,
    #[serde(default = "d_method")]
    pub method: String,
    pub mechanism_seed: u64,
}

fn d_max_iter() -> usize {
    PhaseOneParams::default().max_iter
}
fn d_beta() -> f64 {
    PhaseOneParams::default().beta
}
fn d_c2() -> f64 {
    PhaseOneParams::default().c2
}
fn d_c3_init() -> f64 {
    PhaseOneParams::default().c3_init
}
fn d_c3_growth() -> f64 {
    PhaseOneParams::default().c3_growth
}
fn d_h_zero_tol() -> f64 {
    PhaseOneParams::default().h_zero_tol
}
fn d_max_c3_rounds() -> usize {
    PhaseOneParams::default().max_c3_rounds
}
fn d_epsilons() -> Vec<f64> {
    DEFAULT_EPSILONS.to_vec()
}
fn d_quant() -> u32 {
    3
}
fn d_method() -> String {
    "memguard".to_string()
}

impl MemGuardSection {
    pub fn with_seed(mechanism_seed: u64) -> Self {
        Self {
            max_iter: d_max_iter(),
            beta: d_beta(),
            c2: d_c2(),
            c3_init: d_c3_init(),
            c3_growth: d_c3_growth(),
            h_zero_tol: d_h_zero_tol(),
            max_c3_rounds: d_max_c3_rounds(),
            epsilons: d_epsilons(),
            quant_decimals: d_quant(),
            method: d_method(),
            mechanism_seed,
        }
    }

    pub fn params(&self) -> Result<PhaseOneParams> {
        let p = PhaseOneParams {
            max_iter: self.max_iter,
            beta: self.beta,
            c2: self.c2,
            c3_init: self.c3_init,
            c3_growth: self.c3_growth,
            h_zero_tol: self.h_zero_tol,
            max_c3_rounds: self.max_c3_rounds,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn method(&self) -> Result<NoiseMethod> {
        match self.method.as_str() {
            "memguard" => Ok(NoiseMethod::MemGuard),
            "random" => Ok(NoiseMethod::Random),
            other => Err(Error::config(format!("unknown noise method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_attacks")]
    pub attacks: Vec<String>,
    #[serde(default = "d_bins")]
    pub bins: usize,
}

fn d_attacks() -> Vec<String> {
    AttackKind::ALL.iter().map(|k| k.name().to_string()).collect()
}
fn d_bins() -> usize {
    DEFAULT_BINS
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            attacks: d_attacks(),
            bins: d_bins(),
        }
    }
}

impl EvalSection {
    pub fn attack_kinds(&self) -> Result<Vec<AttackKind>> {
        let kinds = self
            .attacks
            .iter()
            .map(|a| a.parse::<AttackKind>())
            .collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() {
            return Err(Error::config("eval.attacks is empty"));
        }
        Ok(kinds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub target: TrainSection,
    pub defense: DefenseSection,
    pub shadow: TrainSection,
    pub attack: AttackSection,
    pub memguard: MemGuardSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

impl RunConfig {
    /// Synthetic eight-class setup that trains in well under a minute.
    ///
    /// The defense learning rate is 0.01 rather than 0.001: with plain
    /// mini-batch SGD the smaller rate leaves the defense close to constant.
    pub fn desk_scale() -> Self {
        Self {
            data: DataSection {
                source: DataSource::Synthetic,
                csv_path: None,
                n_samples: d_n_samples(),
                feature_dim: d_feature_dim(),
                k: d_k(),
                flip_prob: d_flip_prob(),
                split_size: 500,
                seed: 1,
            },
            target: TrainSection::with_seed(2),
            defense: DefenseSection {
                learning_rate: Some(0.01),
                ..DefenseSection::with_seed(3)
            },
            shadow: TrainSection::with_seed(4),
            attack: AttackSection::with_seed(5),
            memguard: MemGuardSection::with_seed(6),
            eval: EvalSection::default(),
            output: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source == DataSource::Csv && d.csv_path.is_none() {
            return Err(Error::config("data.source = \"csv\" needs data.csv_path"));
        }
        if d.split_size < 2 {
            return Err(Error::config("data.split_size must be at least 2"));
        }
        if d.source == DataSource::Synthetic && d.n_samples < 4 * d.split_size {
            return Err(Error::config("data.n_samples must be at least 4 × split_size"));
        }
        self.defense.hidden()?;
        self.attack.settings()?;
        self.memguard.params()?;
        self.memguard.method()?;
        if self.memguard.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::config("memguard.epsilons must be finite and non-negative"));
        }
        if self.eval.bins < 2 {
            return Err(Error::config("eval.bins must be at least 2"));
        }
        self.eval.attack_kinds()?;
        Ok(())
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.data.seed = rng.gen();
        self.target.seed = rng.gen();
        self.defense.seed = rng.gen();
        self.shadow.seed = rng.gen();
        self.attack.seed = rng.gen();
        self.memguard.mechanism_seed = rng.gen();
    }
}
