//! Membership-inference attacks used to evaluate the defense.
//!
//! | kind    | classifier                  | trained on                                  |
//! |---------|-----------------------------|---------------------------------------------|
//! | `rg`    | fair coin per query         | nothing                                     |
//! | `nn`    | sigmoid MLP on ranked `s`   | shadow members D₂′ vs non-members D₂″       |
//! | `rf`    | random forest on ranked `s` | same as `nn`                                |
//! | `nsh`   | two-branch net on `(s, y)`  | 30% of D₁ and 30% of D₄, via the target     |
//! | `nn_at` | as `nn`                     | shadow vectors plus their noised versions   |
//! | `nn_r`  | as `nn`, `s` rounded to 0.1 | rounded shadow vectors                      |

pub mod forest;
pub mod nsh;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{rank_confidence, LabeledDataset};
use crate::defense::{DefenseClassifier, MembershipSet, MEMBER, NON_MEMBER};
use crate::error::{Error, Result};
use crate::memguard::{noise_from_e, phase1_find_noise, PhaseOneParams};
use crate::nn::{train_sgd, MlpModel, MlpSpec, OutputHead, TrainConfig};
use crate::target::{train_target, ConfidenceSource, ConfidenceVector, TargetClassifier, TrainedTarget};

pub use forest::{DecisionTree, ForestParams, Node, RandomForest};
pub use nsh::{NshArch, NshModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    Rg,
    Nn,
    Rf,
    Nsh,
    NnAt,
    NnR,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Rg,
        AttackKind::Nn,
        AttackKind::Rf,
        AttackKind::Nsh,
        AttackKind::NnAt,
        AttackKind::NnR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Rg => "rg",
            AttackKind::Nn => "nn",
            AttackKind::Rf => "rf",
            AttackKind::Nsh => "nsh",
            AttackKind::NnAt => "nn_at",
            AttackKind::NnR => "nn_r",
        }
    }

    /// Kinds whose classifier is an MLP over ranked confidence vectors.
    pub fn is_network(self) -> bool {
        matches!(self, AttackKind::Nn | AttackKind::NnAt | AttackKind::NnR)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attack kind `{s}`")))
    }
}

/// Round half away from zero to one decimal.
pub fn round_one_decimal(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// The vector an attack classifier actually sees for confidence vector `s`.
pub fn attack_features(kind: AttackKind, s: &[f64]) -> Vec<f64> {
    match kind {
        AttackKind::NnR => {
            let rounded: Vec<f64> = s.iter().map(|&v| round_one_decimal(v)).collect();
            rank_confidence(&rounded)
        }
        _ => rank_confidence(s),
    }
}

/// The attacker's replica of the target, trained on D₂′ with the target's architecture.
pub fn train_shadow(d2a: &LabeledDataset, target_spec: &MlpSpec, cfg: &TrainConfig) -> Result<TrainedTarget> {
    train_target(d2a, target_spec, cfg)
}

/// Phase I as run by an adaptive attacker against its own defense classifier.
#[derive(Debug, Clone, Copy)]
pub struct ShadowDefense<'a> {
    pub defense: &'a DefenseClassifier,
    pub params: &'a PhaseOneParams,
}

/// Shadow confidences of D₂′ (members) and D₂″ (non-members).
///
/// With `defended_by`, every sample appears twice: once as is and once with
/// the representative noise found against the attacker's defense classifier.
pub fn build_attack_training_set(
    shadow: &TargetClassifier,
    d2a: &LabeledDataset,
    d2b: &LabeledDataset,
    ranked: bool,
    defended_by: Option<ShadowDefense<'_>>,
) -> Result<MembershipSet> {
    let finish = |v: Vec<f64>| if ranked { rank_confidence(&v) } else { v };
    let mut set = MembershipSet::default();
    for (ds, label) in [(d2a, MEMBER), (d2b, NON_MEMBER)] {
        for x in &ds.features {
            let (z, s) = shadow.predict(x)?;
            if let Some(sd) = defended_by {
                let outcome = phase1_find_noise(&z, sd.defense, sd.params)?;
                let noisy = if outcome.converged {
                    noise_from_e(&z, &outcome.e)?.apply(&s)
                } else {
                    s.to_vec()
                };
                set.push(finish(s.to_vec()), label);
                set.push(finish(noisy), label);
            } else {
                set.push(finish(s.into_inner()), label);
            }
        }
    }
    Ok(set)
}

/// Training hyperparameters for every attack family.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSettings {
    pub nn_hidden: Vec<usize>,
    pub nn_train: TrainConfig,
    pub forest: ForestParams,
    pub nsh_arch: NshArch,
    pub nsh_train: TrainConfig,
    /// Fraction of D₁ and D₄ known to the NSH attacker.
    pub nsh_known_fraction: f64,
    pub rg_seed: u64,
}

impl AttackSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            nn_hidden: vec![64, 32, 16],
            nn_train: default_attack_train_config(seed),
            forest: ForestParams::new(seed.wrapping_add(1)),
            nsh_arch: NshArch::default(),
            nsh_train: default_attack_train_config(seed.wrapping_add(2)),
            nsh_known_fraction: 0.3,
            rg_seed: seed.wrapping_add(3),
        }
    }
}

/// 400 epochs at 0.01, decayed ×0.1 from epoch 300.
pub fn default_attack_train_config(seed: u64) -> TrainConfig {
    TrainConfig::new(400, 0.01, seed).decay_at(300, 0.1)
}

/// What a given attack is trained from.
#[derive(Debug, Clone, Copy)]
pub enum AttackData<'a> {
    /// Labelled shadow confidence vectors (`nn`, `rf`, `nn_at`, `nn_r`).
    Shadow(&'a MembershipSet),
    /// Query access to the target plus known members and non-members (`nsh`).
    Known {
        target: &'a TargetClassifier,
        members: &'a LabeledDataset,
        nonmembers: &'a LabeledDataset,
    },
    /// No data (`rg`).
    Nothing,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackModel {
    RandomGuess { decision_seed: u64 },
    Network { kind: AttackKind, model: MlpModel },
    Forest(RandomForest),
    Nsh(NshModel),
}

pub fn train_attack(kind: AttackKind, data: AttackData<'_>, settings: &AttackSettings) -> Result<AttackModel> {
    match (kind, data) {
        (AttackKind::Rg, _) => Ok(AttackModel::RandomGuess {
            decision_seed: settings.rg_seed,
        }),
        (k, AttackData::Shadow(set)) if k.is_network() => {
            let xs: Vec<Vec<f64>> = set.vectors.iter().map(|v| attack_features(k, v)).collect();
            let dim = xs.first().map_or(0, Vec::len);
            if dim == 0 {
                return Err(Error::input("attack training set is empty"));
            }
            let spec = MlpSpec::with_hidden(dim, &settings.nn_hidden, 1, OutputHead::SigmoidScalar);
            let init = MlpModel::init(spec, settings.nn_train.seed)?;
            let model = train_sgd(&init, &xs, &set.labels, &settings.nn_train)?;
            Ok(AttackModel::Network { kind: k, model })
        }
        (AttackKind::Rf, AttackData::Shadow(set)) => {
            let xs: Vec<Vec<f64>> = set.vectors.iter().map(|v| attack_features(AttackKind::Rf, v)).collect();
            Ok(AttackModel::Forest(RandomForest::fit(&xs, &set.labels, &settings.forest)?))
        }
        (
            AttackKind::Nsh,
            AttackData::Known {
                target,
                members,
                nonmembers,
            },
        ) => {
            let frac = settings.nsh_known_fraction;
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::config("nsh_known_fraction must be in (0, 1)"));
            }
            let n_m = (members.len() as f64 * frac).floor() as usize;
            let n_n = (nonmembers.len() as f64 * frac).floor() as usize;
            if n_m == 0 || n_n == 0 {
                return Err(Error::input("NSH needs at least one known member and non-member"));
            }
            let mut vectors = Vec::with_capacity(n_m + n_n);
            let mut labels = Vec::with_capacity(n_m + n_n);
            let mut membership = Vec::with_capacity(n_m + n_n);
            for (ds, n, m) in [(members, n_m, MEMBER), (nonmembers, n_n, NON_MEMBER)] {
                for i in 0..n {
                    vectors.push(target.confidences(&ds.features[i])?.into_inner());
                    labels.push(ds.labels[i]);
                    membership.push(m);
                }
            }
            let mut model = NshModel::init(target.k, &settings.nsh_arch, settings.nsh_train.seed)?;
            model.train(&vectors, &labels, &membership, &settings.nsh_train)?;
            model.known_members = n_m;
            model.known_nonmembers = n_n;
            Ok(AttackModel::Nsh(model))
        }
        (k, _) => Err(Error::config(format!("attack `{k}` cannot be trained from the supplied data"))),
    }
}

impl AttackModel {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackModel::RandomGuess { .. } => AttackKind::Rg,
            AttackModel::Network { kind, .. } => *kind,
            AttackModel::Forest(_) => AttackKind::Rf,
            AttackModel::Nsh(_) => AttackKind::Nsh,
        }
    }

    /// Member (`true`) / non-member decision for one released vector.
    pub fn infer(&self, s: &[f64], predicted_label: usize, query_id: u64) -> Result<bool> {
        match self {
            AttackModel::RandomGuess { decision_seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*decision_seed);
                rng.set_stream(query_id);
                Ok(rng.gen::<bool>())
            }
            AttackModel::Network { kind, model } => {
                Ok(model.predict(&attack_features(*kind, s))?.probability() > 0.5)
            }
            AttackModel::Forest(forest) => forest.predict(&attack_features(AttackKind::Rf, s)),
            AttackModel::Nsh(m) => Ok(m.p_member(s, predicted_label)? > 0.5),
        }
    }

    /// Number of leading members and non-members excluded from evaluation.
    pub fn known_counts(&self) -> (usize, usize) {
        match self {
            AttackModel::Nsh(m) => (m.known_members, m.known_nonmembers),
            _ => (0, 0),
        }
    }

    pub fn to_text(&self) -> String {
        let body = match self {
            AttackModel::RandomGuess { decision_seed } => format!("seed {decision_seed}\n"),
            AttackModel::Network { model, .. } => model.to_text(),
            AttackModel::Forest(f) => f.to_text(),
            AttackModel::Nsh(m) => m.to_text(),
        };
        format!("attack {}\n{body}", self.kind())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let kind: AttackKind = header
            .strip_prefix("attack ")
            .ok_or(Error::Parse {
                line: 1,
                msg: "expected `attack <kind>`".into(),
            })?
            .trim()
            .parse()?;
        match kind {
            AttackKind::Rg => {
                let seed = body
                    .trim()
                    .strip_prefix("seed ")
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or(Error::Parse {
                        line: 2,
                        msg: "expected `seed <u64>`".into(),
                    })?;
                Ok(AttackModel::RandomGuess { decision_seed: seed })
            }
            AttackKind::Rf => Ok(AttackModel::Forest(RandomForest::from_text(body)?)),
            AttackKind::Nsh => Ok(AttackModel::Nsh(NshModel::from_text(body)?)),
            k => Ok(AttackModel::Network {
                kind: k,
                model: MlpModel::from_text(body)?,
            }),
        }
    }
}

/// Accuracy over released member and non-member vectors. Query ids run
/// `0..members.len()` for members, then continue for non-members. NSH skips
/// the samples it was trained on.
pub fn inference_accuracy_on(
    attack: &AttackModel,
    members: &[ConfidenceVector],
    nonmembers: &[ConfidenceVector],
) -> Result<f64> {
    let (skip_m, skip_n) = attack.known_counts();
    let mut correct = 0usize;
    let mut total = 0usize;
    let offset = members.len() as u64;
    let groups = [(members, skip_m, true, 0u64), (nonmembers, skip_n, false, offset)];
    for (vectors, skip, truth, base) in groups {
        for (i, s) in vectors.iter().enumerate().skip(skip) {
            if attack.infer(s, s.label(), base + i as u64)? == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::input("evaluation set is empty"));
    }
    Ok(correct as f64 / total as f64)
}

/// Fraction of D₁ ∪ D₄ classified correctly, using vectors released by `source`.
pub fn inference_accuracy(
    attack: &AttackModel,
    source: &dyn ConfidenceSource,
    d1: &LabeledDataset,
    d4: &LabeledDataset,
) -> Result<f64> {
    let members = d1
        .features
        .iter()
        .map(|x| source.release(x))
        .collect::<Result<Vec<_>>>()?;
    let nonmembers = d4
        .features
        .iter()
        .map(|x| source.release(x))
        .collect::<Result<Vec<_>>>()?;
    inference_accuracy_on(attack, &members, &nonmembers)
}
