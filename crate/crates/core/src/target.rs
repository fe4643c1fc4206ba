//! The target classifier under attack, and the vector types it emits.

use std::ops::Deref;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::nn::{accuracy, train_sgd, MlpModel, MlpSpec, OutputHead, TrainConfig};

/// Tolerance on `Σ s = 1` accepted by [`ConfidenceVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A probability distribution over `k` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector(Vec<f64>);

impl ConfidenceVector {
    /// Accepts entries `≥ -1e-9` that sum to 1 within [`SIMPLEX_TOL`].
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::input("confidence vector is empty"));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < -1e-9) {
            return Err(Error::input(format!("confidence vector has a negative or non-finite entry: {entries:?}")));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::input(format!("confidence vector sums to {sum}")));
        }
        Ok(Self(entries))
    }

    /// Predicted label; ties go to the lowest index.
    pub fn label(&self) -> usize {
        argmax(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ConfidenceVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Pre-softmax scores of the target classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() || entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("logit vector must be non-empty and finite"));
        }
        Ok(Self(entries))
    }

    pub fn label(&self) -> usize {
        argmax(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for LogitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetClassifier {
    pub model: MlpModel,
    pub k: usize,
}

impl TargetClassifier {
    pub fn from_model(model: MlpModel) -> Result<Self> {
        if model.spec.output_head != OutputHead::Softmax {
            return Err(Error::config("target classifier needs a softmax head"));
        }
        model.validate()?;
        let k = model.output_dim();
        Ok(Self { model, k })
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    /// Logits and their softmax.
    pub fn predict(&self, x: &[f64]) -> Result<(LogitVector, ConfidenceVector)> {
        let trace = self.model.predict(x)?;
        let logits = LogitVector::new(trace.logits().to_vec())?;
        let conf = ConfidenceVector::new(trace.output().to_vec())?;
        Ok((logits, conf))
    }

    pub fn confidences(&self, x: &[f64]) -> Result<ConfidenceVector> {
        Ok(self.predict(x)?.1)
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        accuracy(&self.model, &ds.features, &ds.labels)
    }
}

/// Anything that answers a query with a confidence vector: the bare target,
/// or the target behind the defense.
pub trait ConfidenceSource {
    fn release(&self, x: &[f64]) -> Result<ConfidenceVector>;
}

impl ConfidenceSource for TargetClassifier {
    fn release(&self, x: &[f64]) -> Result<ConfidenceVector> {
        self.confidences(x)
    }
}

/// A trained classifier with its accuracy on the training set.
#[derive(Debug, Clone)]
pub struct TrainedTarget {
    pub classifier: TargetClassifier,
    pub train_accuracy: f64,
}

/// Desk-scale target architecture: hidden layers `(64, 32)`.
pub fn default_target_spec(feature_dim: usize, k: usize) -> MlpSpec {
    MlpSpec::with_hidden(feature_dim, &[64, 32], k, OutputHead::Softmax)
}

/// 200 epochs at 0.01, decayed ×0.1 from epoch 150.
pub fn default_target_train_config(seed: u64) -> TrainConfig {
    TrainConfig::new(200, 0.01, seed).decay_at(150, 0.1)
}

pub fn train_target(d1: &LabeledDataset, spec: &MlpSpec, cfg: &TrainConfig) -> Result<TrainedTarget> {
    if spec.output_head != OutputHead::Softmax {
        return Err(Error::config("target spec needs a softmax head"));
    }
    if spec.output_dim() != d1.k {
        return Err(Error::shape("target output", d1.k, spec.output_dim()));
    }
    if spec.input_dim() != d1.feature_dim {
        return Err(Error::shape("target input", d1.feature_dim, spec.input_dim()));
    }
    let init = MlpModel::init(spec.clone(), cfg.seed)?;
    let model = train_sgd(&init, &d1.features, &d1.labels, cfg)?;
    let classifier = TargetClassifier::from_model(model)?;
    let train_accuracy = classifier.accuracy(d1)?;
    Ok(TrainedTarget {
        classifier,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::softmax;

    #[test]
    fn confidence_vector_validation() {
        assert!(ConfidenceVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ConfidenceVector::new(vec![0.6, 0.5]).is_err());
        assert!(ConfidenceVector::new(vec![1.1, -0.1]).is_err());
        assert!(ConfidenceVector::new(vec![]).is_err());
        assert_eq!(ConfidenceVector::new(vec![0.2, 0.4, 0.4]).unwrap().label(), 1);
    }

    #[test]
    fn zero_target_is_uniform() {
        let m = MlpModel::zeros(default_target_spec(6, 4)).unwrap();
        let t = TargetClassifier::from_model(m).unwrap();
        let (z, s) = t.predict(&[1.0; 6]).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
        assert_eq!(s.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn predict_consistency() {
        let m = MlpModel::init(default_target_spec(6, 5), 8).unwrap();
        let t = TargetClassifier::from_model(m).unwrap();
        for i in 0..20 {
            let x: Vec<f64> = (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect();
            let (z, s) = t.predict(&x).unwrap();
            let again = softmax(&z);
            assert!(again.iter().zip(s.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
            assert_eq!(z.label(), s.label());
        }
        assert!(t.predict(&[0.0; 5]).is_err());
    }

    #[test]
    fn train_target_rejects_mismatched_spec() {
        let ds = crate::data::generate_synthetic(20, 6, 4, 0.1, 0).unwrap();
        let cfg = TrainConfig::new(1, 0.01, 0);
        assert!(train_target(&ds, &default_target_spec(6, 3), &cfg).is_err());
        assert!(train_target(&ds, &default_target_spec(5, 4), &cfg).is_err());
    }
}
