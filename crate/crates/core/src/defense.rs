//! The defender's own membership classifier `g = sigmoid ∘ h` over
//! confidence vectors.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{binary_accuracy, train_sgd, HeadSelector, MlpModel, MlpSpec, OutputHead, TrainConfig};
use crate::target::{ConfidenceVector, TargetClassifier};

pub const MEMBER: usize = 1;
pub const NON_MEMBER: usize = 0;

/// Hidden-layer presets for the defense network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DefenseArch {
    Shallow,
    #[default]
    Medium,
    Deep,
}

impl DefenseArch {
    pub fn hidden(self) -> &'static [usize] {
        match self {
            DefenseArch::Shallow => &[32, 16],
            DefenseArch::Medium => &[32, 16, 8],
            DefenseArch::Deep => &[64, 32, 16, 8],
        }
    }

    pub fn spec(self, k: usize) -> MlpSpec {
        MlpSpec::with_hidden(k, self.hidden(), 1, OutputHead::SigmoidScalar)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shallow" => Some(DefenseArch::Shallow),
            "medium" => Some(DefenseArch::Medium),
            "deep" => Some(DefenseArch::Deep),
            _ => None,
        }
    }
}

/// 400 epochs at 0.001.
pub fn default_defense_train_config(seed: u64) -> TrainConfig {
    TrainConfig::new(400, 0.001, seed)
}

/// Confidence vectors with member (1) / non-member (0) labels.
#[derive(Debug, Clone, Default)]
pub struct MembershipSet {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl MembershipSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, v: Vec<f64>, label: usize) {
        self.vectors.push(v);
        self.labels.push(label);
    }
}

/// Target confidences of `members` labelled 1 followed by `nonmembers` labelled 0.
pub fn build_defense_training_set(
    target: &TargetClassifier,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
) -> Result<MembershipSet> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::input("defense training needs non-empty member and non-member sets"));
    }
    let mut set = MembershipSet::default();
    for (ds, label) in [(members, MEMBER), (nonmembers, NON_MEMBER)] {
        for x in &ds.features {
            set.push(target.confidences(x)?.into_inner(), label);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseClassifier {
    pub model: MlpModel,
}

impl DefenseClassifier {
    pub fn from_model(model: MlpModel) -> Result<Self> {
        if model.spec.output_head != OutputHead::SigmoidScalar {
            return Err(Error::config("defense classifier needs a sigmoid_scalar head"));
        }
        model.validate()?;
        Ok(Self { model })
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    /// `(g(s), h(s))` from a single forward pass.
    pub fn g_and_h(&self, s: &[f64]) -> Result<(f64, f64)> {
        let trace = self.model.predict(s)?;
        Ok((trace.probability(), trace.logit()))
    }

    pub fn h(&self, s: &[f64]) -> Result<f64> {
        Ok(self.g_and_h(s)?.1)
    }

    pub fn g(&self, s: &[f64]) -> Result<f64> {
        Ok(self.g_and_h(s)?.0)
    }

    /// `∂h/∂s`.
    pub fn h_gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.model.input_gradient(s, HeadSelector::ScalarLogit)
    }

    /// `h(s)` and `∂h/∂s` from one forward and one backward pass.
    pub fn h_with_gradient(&self, s: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.model.predict(s)?;
        let grad = self.model.backward(&trace, &[1.0]).d_input;
        Ok((trace.logit(), grad))
    }

    /// Member prediction, `g(s) > 0.5`.
    pub fn is_member(&self, s: &ConfidenceVector) -> Result<bool> {
        Ok(self.h(s)? > 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDefense {
    pub classifier: DefenseClassifier,
    pub train_accuracy: f64,
}

pub fn train_defense(pairs: &MembershipSet, spec: &MlpSpec, cfg: &TrainConfig) -> Result<TrainedDefense> {
    if spec.output_head != OutputHead::SigmoidScalar {
        return Err(Error::config("defense spec needs a sigmoid_scalar head"));
    }
    if pairs.is_empty() {
        return Err(Error::input("defense training set is empty"));
    }
    let init = MlpModel::init(spec.clone(), cfg.seed)?;
    let model = train_sgd(&init, &pairs.vectors, &pairs.labels, cfg)?;
    let train_accuracy = binary_accuracy(&model, &pairs.vectors, &pairs.labels)?;
    Ok(TrainedDefense {
        classifier: DefenseClassifier::from_model(model)?,
        train_accuracy,
    })
}
