//! Two-branch attack network over a confidence vector and a one-hot label.
//!
//! Both branches end in a ReLU'd feature layer; their concatenation feeds a
//! sigmoid head. The three networks are trained jointly by SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::one_hot;
use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, Gradients, MlpModel, MlpSpec, OutputHead, TrainConfig};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NshArch {
    pub confidence_branch: Vec<usize>,
    pub label_branch: Vec<usize>,
    pub joint_hidden: Vec<usize>,
}

impl Default for NshArch {
    fn default() -> Self {
        Self {
            confidence_branch: vec![64, 32],
            label_branch: vec![32, 16],
            joint_hidden: vec![32],
        }
    }
}

/// Branch spec: all listed sizes are ReLU feature layers; the last one is the
/// branch output.
fn branch_spec(k: usize, sizes: &[usize]) -> Result<MlpSpec> {
    if sizes.is_empty() {
        return Err(Error::config("NSH branches need at least one layer"));
    }
    let mut layers = vec![k];
    layers.extend_from_slice(sizes);
    Ok(MlpSpec::new(layers, OutputHead::Identity))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NshModel {
    pub confidence_branch: MlpModel,
    pub label_branch: MlpModel,
    pub head: MlpModel,
    /// Members and non-members the attacker already knew; they are excluded
    /// from evaluation.
    pub known_members: usize,
    pub known_nonmembers: usize,
}

struct NshTrace {
    conf: ForwardTrace,
    label: ForwardTrace,
    head: ForwardTrace,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

impl NshModel {
    pub fn init(k: usize, arch: &NshArch, seed: u64) -> Result<Self> {
        let confidence_branch = MlpModel::init(branch_spec(k, &arch.confidence_branch)?, seed)?;
        let label_branch = MlpModel::init(branch_spec(k, &arch.label_branch)?, seed.wrapping_add(1))?;
        let joint_in = arch.confidence_branch.last().unwrap() + arch.label_branch.last().unwrap();
        let head_spec = MlpSpec::with_hidden(joint_in, &arch.joint_hidden, 1, OutputHead::SigmoidScalar);
        let head = MlpModel::init(head_spec, seed.wrapping_add(2))?;
        Ok(Self {
            confidence_branch,
            label_branch,
            head,
            known_members: 0,
            known_nonmembers: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.confidence_branch.input_dim()
    }

    fn trace(&self, s: &[f64], label: usize) -> Result<NshTrace> {
        let conf = self.confidence_branch.predict(s)?;
        let label = self.label_branch.predict(&one_hot(label, self.k())?)?;
        let mut joint = relu(conf.output());
        joint.extend(relu(label.output()));
        let head = self.head.predict(&joint)?;
        Ok(NshTrace { conf, label, head })
    }

    pub fn p_member(&self, s: &[f64], label: usize) -> Result<f64> {
        Ok(self.trace(s, label)?.head.probability())
    }

    /// Mini-batch SGD over `(s, label, member)` triples.
    pub fn train(&mut self, vectors: &[Vec<f64>], labels: &[usize], membership: &[usize], cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if vectors.is_empty() || vectors.len() != labels.len() || labels.len() != membership.len() {
            return Err(Error::input("NSH training needs equally long, non-empty inputs"));
        }
        let conf_width = self.confidence_branch.output_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..vectors.len()).collect();
        for epoch in 0..cfg.epochs {
            let lr = cfg.rate_at(epoch);
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut g_conf = Gradients::zeros_like(&self.confidence_branch);
                let mut g_label = Gradients::zeros_like(&self.label_branch);
                let mut g_head = Gradients::zeros_like(&self.head);
                for &i in batch {
                    let t = self.trace(&vectors[i], labels[i])?;
                    let p = t.head.probability();
                    let y = membership[i] as f64;
                    epoch_loss -= y * p.clamp(LOG_FLOOR, 1.0).ln() + (1.0 - y) * (1.0 - p).clamp(LOG_FLOOR, 1.0).ln();
                    let gh = self.head.backward(&t.head, &[p - y]);
                    let (d_conf, d_label) = gh.d_input.split_at(conf_width);
                    let mask = |d: &[f64], pre: &[f64]| -> Vec<f64> {
                        d.iter().zip(pre).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect()
                    };
                    g_conf.accumulate(&self.confidence_branch.backward(&t.conf, &mask(d_conf, t.conf.output())));
                    g_label.accumulate(&self.label_branch.backward(&t.label, &mask(d_label, t.label.output())));
                    g_head.accumulate(&gh);
                }
                self.confidence_branch.apply_gradients(&g_conf, lr, batch.len());
                self.label_branch.apply_gradients(&g_label, lr, batch.len());
                self.head.apply_gradients(&g_head, lr, batch.len());
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "nsh v1 {} {}\n{}---\n{}---\n{}",
            self.known_members,
            self.known_nonmembers,
            self.confidence_branch.to_text(),
            self.label_branch.to_text(),
            self.head.to_text()
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, rest) = text.split_once('\n').unwrap_or((text, ""));
        let h: Vec<&str> = header.split_whitespace().collect();
        let perr = |msg: &str| Error::Parse {
            line: 1,
            msg: msg.to_string(),
        };
        if h.len() != 4 || h[0] != "nsh" || h[1] != "v1" {
            return Err(perr("bad NSH header"));
        }
        let known_members = h[2].parse().map_err(|_| perr("bad member count"))?;
        let known_nonmembers = h[3].parse().map_err(|_| perr("bad non-member count"))?;
        let parts: Vec<&str> = rest.split("---\n").collect();
        if parts.len() != 3 {
            return Err(perr("NSH model needs three networks"));
        }
        Ok(Self {
            confidence_branch: MlpModel::from_text(parts[0])?,
            label_branch: MlpModel::from_text(parts[1])?,
            head: MlpModel::from_text(parts[2])?,
            known_members,
            known_nonmembers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let m = NshModel::init(3, &NshArch::default(), 4).unwrap();
        let s = [0.7, 0.2, 0.1];
        // Loss slope w.r.t. first-layer weights of the confidence branch.
        let loss = |m: &NshModel| -> f64 {
            let p = m.p_member(&s, 0).unwrap();
            -p.ln()
        };
        let t = m.trace(&s, 0).unwrap();
        let p = t.head.probability();
        let gh = m.head.backward(&t.head, &[p - 1.0]);
        let width = m.confidence_branch.output_dim();
        let d_conf: Vec<f64> = gh.d_input[..width]
            .iter()
            .zip(t.conf.output())
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let gc = m.confidence_branch.backward(&t.conf, &d_conf);

        let step = 1e-6;
        for w in [0usize, 5, 17] {
            let mut plus = m.clone();
            plus.confidence_branch.weights[0][w] += step;
            let mut minus = m.clone();
            minus.confidence_branch.weights[0][w] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!((fd - gc.d_weights[0][w]).abs() < 1e-6, "w{w}: {fd} vs {}", gc.d_weights[0][w]);
        }
    }

    #[test]
    fn learns_label_dependent_membership() {
        let mut m = NshModel::init(2, &NshArch::default(), 1).unwrap();
        let vectors = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.9, 0.1], vec![0.6, 0.4]];
        let labels = vec![0, 0, 0, 0];
        let membership = vec![1, 0, 1, 0];
        m.train(&vectors, &labels, &membership, &TrainConfig::new(300, 0.1, 3).batch_size(2)).unwrap();
        assert!(m.p_member(&[0.9, 0.1], 0).unwrap() > 0.5);
        assert!(m.p_member(&[0.6, 0.4], 0).unwrap() < 0.5);
    }

    #[test]
    fn text_round_trip() {
        let mut m = NshModel::init(4, &NshArch::default(), 2).unwrap();
        m.known_members = 3;
        m.known_nonmembers = 5;
        assert_eq!(NshModel::from_text(&m.to_text()).unwrap(), m);
    }
}
