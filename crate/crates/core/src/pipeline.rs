//! End-to-end plumbing: datasets and models from a [`RunConfig`], and their
//! on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    build_attack_training_set, train_attack, train_shadow, AttackData, AttackKind, AttackModel, ShadowDefense,
};
use crate::config::{DataSource, NonmemberSource, RunConfig};
use crate::data::{generate_synthetic, load_csv, parse_csv, split_dataset, synthesize_nonmembers, LabeledDataset, SplitSet};
use crate::defense::{
    build_defense_training_set, default_defense_train_config, train_defense, DefenseClassifier, TrainedDefense,
};
use crate::error::{Error, Result};
use crate::eval::{sweep_prepared, EvalReport, PreparedEvalSet};
use crate::memguard::{MemGuard, NoiseMethod, PhaseOneParams};
use crate::nn::{MlpModel, MlpSpec, OutputHead, TrainConfig};
use crate::target::{default_target_train_config, TargetClassifier, TrainedTarget};

pub const SPLIT_NAMES: [&str; 5] = ["d1", "d2a", "d2b", "d3", "d4"];

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.csv"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.toml")
    }

    pub fn target(&self) -> PathBuf {
        self.dir.join("target.mlp")
    }

    pub fn defense(&self) -> PathBuf {
        self.dir.join("defense.mlp")
    }

    pub fn shadow(&self) -> PathBuf {
        self.dir.join("shadow.mlp")
    }

    pub fn attack(&self, kind: AttackKind) -> PathBuf {
        self.dir.join(format!("attack_{}.txt", kind.name()))
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }

    /// Fails with a dependency error naming `what` if `path` is absent.
    pub fn require(path: &Path, what: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                what: what.to_string(),
                path: path.to_path_buf(),
            })
        }
    }
}

/// Sizes, seed and source indices of a generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub source: String,
    pub k: usize,
    pub feature_dim: usize,
    pub sizes: Vec<usize>,
    pub d1: Vec<usize>,
    pub d2a: Vec<usize>,
    pub d2b: Vec<usize>,
    pub d3: Vec<usize>,
    pub d4: Vec<usize>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => generate_synthetic(d.n_samples, d.feature_dim, d.k, d.flip_prob, d.seed),
        DataSource::Csv => {
            let path = d.csv_path.as_ref().ok_or_else(|| Error::config("data.csv_path is not set"))?;
            ArtifactPaths::require(path, "input dataset")?;
            load_csv(path)
        }
    }
}

pub fn make_splits(cfg: &RunConfig) -> Result<SplitSet> {
    split_dataset(&load_dataset(cfg)?, cfg.data.split_size, cfg.data.seed)
}

/// Writes the five split CSVs and the manifest.
pub fn write_splits(splits: &SplitSet, cfg: &RunConfig, paths: &ArtifactPaths) -> Result<SplitManifest> {
    fs::create_dir_all(&paths.dir)?;
    let sets = split_list(splits);
    for (name, ds) in SPLIT_NAMES.iter().zip(sets) {
        ds.write_csv(paths.split(name))?;
    }
    let [d1, d2a, d2b, d3, d4] = splits.indices.clone();
    let manifest = SplitManifest {
        seed: cfg.data.seed,
        source: match cfg.data.source {
            DataSource::Synthetic => "synthetic".into(),
            DataSource::Csv => cfg.data.csv_path.as_ref().map_or(String::new(), |p| p.display().to_string()),
        },
        k: splits.d1.k,
        feature_dim: splits.d1.feature_dim,
        sizes: sets.iter().map(|d| d.len()).collect(),
        d1,
        d2a,
        d2b,
        d3,
        d4,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
    fs::write(paths.manifest(), text)?;
    Ok(manifest)
}

fn split_list(s: &SplitSet) -> [&LabeledDataset; 5] {
    [&s.d1, &s.d2a, &s.d2b, &s.d3, &s.d4]
}

/// Reads the splits written by [`write_splits`].
pub fn read_splits(paths: &ArtifactPaths) -> Result<SplitSet> {
    ArtifactPaths::require(&paths.manifest(), "split manifest (run gen-data first)")?;
    let manifest: SplitManifest = toml::from_str(&fs::read_to_string(paths.manifest())?)
        .map_err(|e| Error::config(format!("manifest: {e}")))?;
    let mut sets = Vec::with_capacity(5);
    for name in SPLIT_NAMES {
        let path = paths.split(name);
        ArtifactPaths::require(&path, &format!("split {name} (run gen-data first)"))?;
        let ds = parse_csv(&fs::read_to_string(&path)?)?;
        // The label maximum of one split can undershoot the class count.
        sets.push(LabeledDataset::new(ds.features, ds.labels, manifest.k)?);
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("five splits");
    Ok(SplitSet {
        d1: next(),
        d2a: next(),
        d2b: next(),
        d3: next(),
        d4: next(),
        indices: [manifest.d1, manifest.d2a, manifest.d2b, manifest.d3, manifest.d4],
    })
}

pub fn target_spec(cfg: &RunConfig, feature_dim: usize, k: usize) -> MlpSpec {
    let hidden = cfg.target.hidden_or(&[64, 32]);
    MlpSpec::with_hidden(feature_dim, hidden, k, OutputHead::Softmax)
        .l2(cfg.target.l2_lambda)
        .dropout(cfg.target.dropout)
}

pub fn target_train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    cfg.target.train_config(&default_target_train_config(cfg.target.seed))
}

/// Target trained on D₁, with its accuracy on D₁ and on D₄.
pub fn fit_target(cfg: &RunConfig, splits: &SplitSet) -> Result<(TrainedTarget, f64)> {
    let spec = target_spec(cfg, splits.d1.feature_dim, splits.d1.k);
    let trained = crate::target::train_target(&splits.d1, &spec, &target_train_config(cfg)?)?;
    let test = trained.classifier.accuracy(&splits.d4)?;
    Ok((trained, test))
}

/// Shadow trained on D₂′ with the target's architecture, with its accuracy on
/// D₂′ and on D₂″.
pub fn fit_shadow(cfg: &RunConfig, splits: &SplitSet) -> Result<(TrainedTarget, f64)> {
    let spec = target_spec(cfg, splits.d2a.feature_dim, splits.d2a.k);
    let base = target_train_config(cfg)?;
    let train_cfg = cfg.shadow.train_config(&base)?;
    let trained = train_shadow(&splits.d2a, &spec, &train_cfg)?;
    let test = trained.classifier.accuracy(&splits.d2b)?;
    Ok((trained, test))
}

pub fn defense_spec(cfg: &RunConfig, k: usize) -> Result<MlpSpec> {
    Ok(MlpSpec::with_hidden(k, &cfg.defense.hidden()?, 1, OutputHead::SigmoidScalar).l2(cfg.defense.l2_lambda))
}

pub fn defense_train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    cfg.defense
        .train_section()
        .train_config(&default_defense_train_config(cfg.defense.seed))
}

pub fn defense_nonmembers(cfg: &RunConfig, splits: &SplitSet) -> Result<LabeledDataset> {
    match cfg.defense.nonmembers {
        NonmemberSource::D3 => Ok(splits.d3.clone()),
        NonmemberSource::Synthesized => {
            synthesize_nonmembers(&splits.d1, cfg.defense.keep_prob, cfg.defense.seed ^ 0x5eed)
        }
    }
}

/// Defense classifier trained on target outputs for D₁ against the configured
/// non-members, with the training-set size.
pub fn fit_defense(cfg: &RunConfig, splits: &SplitSet, target: &TargetClassifier) -> Result<(TrainedDefense, usize)> {
    let nonmembers = defense_nonmembers(cfg, splits)?;
    let pairs = build_defense_training_set(target, &splits.d1, &nonmembers)?;
    let trained = train_defense(&pairs, &defense_spec(cfg, target.k)?, &defense_train_config(cfg)?)?;
    Ok((trained, pairs.len()))
}

/// Trains one attack. `shadow` is required by every shadow-based kind.
pub fn fit_attack(
    cfg: &RunConfig,
    kind: AttackKind,
    splits: &SplitSet,
    target: Option<&TargetClassifier>,
    shadow: Option<&TargetClassifier>,
) -> Result<AttackModel> {
    let settings = cfg.attack.settings()?;
    let need_shadow = || {
        shadow.ok_or_else(|| Error::MissingArtifact {
            what: format!("shadow model required by attack {kind}"),
            path: PathBuf::from("shadow.mlp"),
        })
    };
    match kind {
        AttackKind::Rg => train_attack(kind, AttackData::Nothing, &settings),
        AttackKind::Nsh => {
            let target = target.ok_or_else(|| Error::MissingArtifact {
                what: "target model required by attack nsh".into(),
                path: PathBuf::from("target.mlp"),
            })?;
            let data = AttackData::Known {
                target,
                members: &splits.d1,
                nonmembers: &splits.d4,
            };
            train_attack(kind, data, &settings)
        }
        AttackKind::NnAt => {
            let shadow = need_shadow()?;
            // The attacker mirrors the defender on its own data.
            let pairs = build_defense_training_set(shadow, &splits.d2a, &splits.d2b)?;
            let mut def_cfg = defense_train_config(cfg)?;
            def_cfg.seed = cfg.attack.seed.wrapping_add(17);
            let own = train_defense(&pairs, &defense_spec(cfg, shadow.k)?, &def_cfg)?;
            let params = cfg.memguard.params()?;
            let sd = ShadowDefense {
                defense: &own.classifier,
                params: &params,
            };
            let set = build_attack_training_set(shadow, &splits.d2a, &splits.d2b, false, Some(sd))?;
            train_attack(kind, AttackData::Shadow(&set), &settings)
        }
        AttackKind::Nn | AttackKind::Rf | AttackKind::NnR => {
            let set = build_attack_training_set(need_shadow()?, &splits.d2a, &splits.d2b, false, None)?;
            train_attack(kind, AttackData::Shadow(&set), &settings)
        }
    }
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_text())?;
    Ok(())
}

pub fn read_model(path: &Path, what: &str) -> Result<MlpModel> {
    ArtifactPaths::require(path, what)?;
    MlpModel::from_text(&fs::read_to_string(path)?)
}

pub fn read_target(paths: &ArtifactPaths) -> Result<TargetClassifier> {
    TargetClassifier::from_model(read_model(&paths.target(), "target model (run train target first)")?)
}

pub fn read_defense(paths: &ArtifactPaths) -> Result<DefenseClassifier> {
    DefenseClassifier::from_model(read_model(&paths.defense(), "defense model (run train defense first)")?)
}

pub fn read_shadow(paths: &ArtifactPaths) -> Result<TargetClassifier> {
    TargetClassifier::from_model(read_model(&paths.shadow(), "shadow model (run train shadow first)")?)
}

pub fn save_attack(attack: &AttackModel, paths: &ArtifactPaths) -> Result<()> {
    fs::write(paths.attack(attack.kind()), attack.to_text())?;
    Ok(())
}

pub fn read_attack(paths: &ArtifactPaths, kind: AttackKind) -> Result<AttackModel> {
    let path = paths.attack(kind);
    ArtifactPaths::require(&path, &format!("attack model {kind} (run train attack:{kind} first)"))?;
    let model = AttackModel::from_text(&fs::read_to_string(&path)?)?;
    if model.kind() != kind {
        return Err(Error::input(format!("{} holds a {} attack", path.display(), model.kind())));
    }
    Ok(model)
}

/// All trained artifacts of one run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub splits: SplitSet,
    pub target: TargetClassifier,
    pub defense: DefenseClassifier,
    pub shadow: TargetClassifier,
    pub attacks: Vec<AttackModel>,
    pub params: PhaseOneParams,
}

impl Pipeline {
    /// Generates data and trains every model the config asks for.
    pub fn train(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let splits = make_splits(cfg)?;
        Self::train_on(cfg, splits)
    }

    pub fn train_on(cfg: &RunConfig, splits: SplitSet) -> Result<Self> {
        let (target, shadow) = rayon::join(|| fit_target(cfg, &splits), || fit_shadow(cfg, &splits));
        let target = target?.0.classifier;
        let shadow = shadow?.0.classifier;
        let kinds = cfg.eval.attack_kinds()?;
        let (defense, attacks) = rayon::join(
            || fit_defense(cfg, &splits, &target),
            || {
                kinds
                    .par_iter()
                    .map(|&k| fit_attack(cfg, k, &splits, Some(&target), Some(&shadow)))
                    .collect::<Result<Vec<_>>>()
            },
        );
        Ok(Self {
            params: cfg.memguard.params()?,
            cfg: cfg.clone(),
            splits,
            target,
            defense: defense?.0.classifier,
            shadow,
            attacks: attacks?,
        })
    }

    /// Reads every artifact from `paths`; fails on the first missing one.
    pub fn load(cfg: &RunConfig, paths: &ArtifactPaths) -> Result<Self> {
        cfg.validate()?;
        let splits = read_splits(paths)?;
        let target = read_target(paths)?;
        let defense = read_defense(paths)?;
        let shadow = read_shadow(paths)?;
        let attacks = cfg
            .eval
            .attack_kinds()?
            .into_iter()
            .map(|k| read_attack(paths, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: cfg.memguard.params()?,
            cfg: cfg.clone(),
            splits,
            target,
            defense,
            shadow,
            attacks,
        })
    }

    pub fn save(&self, paths: &ArtifactPaths) -> Result<()> {
        write_splits(&self.splits, &self.cfg, paths)?;
        save_model(&self.target.model, &paths.target())?;
        save_model(&self.defense.model, &paths.defense())?;
        save_model(&self.shadow.model, &paths.shadow())?;
        for a in &self.attacks {
            save_attack(a, paths)?;
        }
        Ok(())
    }

    pub fn guard(&self, method: NoiseMethod) -> MemGuard<'_> {
        MemGuard::new(&self.target, &self.defense, &self.params, self.cfg.memguard.mechanism_seed)
            .with_quant_decimals(self.cfg.memguard.quant_decimals)
            .with_method(method)
    }

    /// The configured noise method.
    pub fn default_guard(&self) -> Result<MemGuard<'_>> {
        Ok(self.guard(self.cfg.memguard.method()?))
    }

    pub fn prepare(&self, method: NoiseMethod) -> Result<PreparedEvalSet> {
        PreparedEvalSet::new(&self.guard(method), &self.splits.d1, &self.splits.d4)
    }

    /// Every configured attack at every configured budget.
    pub fn sweep(&self) -> Result<Vec<EvalReport>> {
        let prepared = self.prepare(self.cfg.memguard.method()?)?;
        sweep_prepared(&prepared, &self.attacks, &self.cfg.memguard.epsilons, self.cfg.eval.bins)
    }
}

/// Reads query rows: `dim` features, optionally followed by a label column
/// that is ignored. Errors name the 1-based row.
pub fn parse_queries(text: &str, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != dim && record.len() != dim + 1 {
            return Err(Error::Input(format!(
                "row {line}: {} columns, model expects {dim} features",
                record.len()
            )));
        }
        let row = (0..dim)
            .map(|j| {
                let cell = record[j].trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("non-numeric cell `{cell}` in column {}", j + 1),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no query rows".into(),
        });
    }
    Ok(rows)
}
