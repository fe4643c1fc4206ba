//! Dense feed-forward networks: initialization, inference, backpropagation,
//! plain mini-batch SGD and a line-oriented text format.
//!
//! Every classifier in the crate (target, shadow, defense, attack) is an
//! [`MlpModel`]. Hidden layers use ReLU; the final layer is a linear map whose
//! output (the logits) is passed through the configured [`OutputHead`].
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, sigmoid, softmax};

/// Probabilities are clamped to this floor inside `log`.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// How the final linear layer is turned into an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Class distribution over `k` outputs.
    Softmax,
    /// A single logit squashed into `(0, 1)`.
    SigmoidScalar,
    /// Raw final-layer values. Used for feature branches that feed another network.
    Identity,
}

impl OutputHead {
    fn name(self) -> &'static str {
        match self {
            OutputHead::Softmax => "softmax",
            OutputHead::SigmoidScalar => "sigmoid_scalar",
            OutputHead::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(OutputHead::Softmax),
            "sigmoid_scalar" => Some(OutputHead::SigmoidScalar),
            "identity" => Some(OutputHead::Identity),
            _ => None,
        }
    }
}

/// Architecture and regularization hyperparameters of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input dim, hidden dims..., output dim.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
    /// Coefficient of the `‖W‖²` weight-decay term (biases excluded).
    pub l2_lambda: f64,
    /// Fraction of hidden units dropped during training.
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_head: OutputHead) -> Self {
        Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
            output_head,
            l2_lambda: 0.0,
            dropout_rate: 0.0,
        }
    }

    /// `input`, then `hidden...`, then `output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, head: OutputHead) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, head)
    }

    pub fn l2(mut self, lambda: f64) -> Self {
        self.l2_lambda = lambda;
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec is non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes needs at least input and output"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        if self.output_head == OutputHead::SigmoidScalar && self.output_dim() != 1 {
            return Err(Error::config("sigmoid_scalar head requires output size 1"));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::config(format!("l2_lambda must be >= 0, got {}", self.l2_lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Zero-based epoch from which the learning rate is multiplied by `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate,
            decay_epoch: None,
            decay_factor: 0.1,
            batch_size: 32,
            seed,
        }
    }

    pub fn decay_at(mut self, epoch: usize, factor: f64) -> Self {
        self.decay_epoch = Some(epoch);
        self.decay_factor = factor;
        self
    }

    pub fn batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::config("decay_factor must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Some(d) = self.decay_epoch {
            if d == 0 || d >= self.epochs.max(1) {
                return Err(Error::config(format!(
                    "decay_epoch {d} must be in [1, epochs={})",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn rate_at(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(d) if epoch >= d => self.learning_rate * self.decay_factor,
            _ => self.learning_rate,
        }
    }
}

/// Which scalar of the network output to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelector {
    /// The single pre-sigmoid logit (any model with output size 1).
    ScalarLogit,
    /// Softmax probability of class `j`, or the sigmoid probability when `j == 0`.
    ProbabilityOf(usize),
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `W·a + b` for every layer; the last entry holds the logits.
    pub pre_activations: Vec<Vec<f64>>,
    /// Activated (and dropout-masked) values; the last entry is the head output.
    pub post_activations: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().expect("trace has at least one layer")
    }

    pub fn output(&self) -> &[f64] {
        self.post_activations.last().expect("trace has at least one layer")
    }

    /// Logit of a scalar-output network.
    pub fn logit(&self) -> f64 {
        self.logits()[0]
    }

    /// Probability of a sigmoid-head network.
    pub fn probability(&self) -> f64 {
        self.output()[0]
    }
}

/// Parameter gradients, plus the gradient with respect to the network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            d_weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            d_input: vec![0.0; model.input_dim()],
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.d_input.iter_mut().zip(&other.d_input).for_each(|(x, y)| *x += y);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for pair in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    /// A model with every parameter equal to zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let weights = spec.layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect();
        let biases = spec.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Checks parameter shapes against the spec and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.spec.num_layers();
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::shape("layer count", n, self.weights.len()));
        }
        for (l, pair) in self.spec.layer_sizes.windows(2).enumerate() {
            if self.weights[l].len() != pair[0] * pair[1] {
                return Err(Error::shape("weight matrix", pair[0] * pair[1], self.weights[l].len()));
            }
            if self.biases[l].len() != pair[1] {
                return Err(Error::shape("bias vector", pair[1], self.biases[l].len()));
            }
        }
        let all_finite = self
            .weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::input("model has non-finite parameters"));
        }
        Ok(())
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward(x, false, None)
    }

    /// Forward pass. Dropout is applied to hidden units only when `train_mode`
    /// is set, with masks drawn from `dropout_seed` (0 when absent).
    pub fn forward(&self, x: &[f64], train_mode: bool, dropout_seed: Option<u64>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("forward input", self.input_dim(), x.len()));
        }
        if train_mode && self.spec.dropout_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
            Ok(self.forward_with(x, Some(&mut rng)))
        } else {
            Ok(self.forward_with(x, None))
        }
    }

    fn forward_with(&self, x: &[f64], mut dropout: Option<&mut ChaCha8Rng>) -> ForwardTrace {
        let n = self.spec.num_layers();
        let rate = self.spec.dropout_rate;
        let mut pre = Vec::with_capacity(n);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for l in 0..n {
            let input: &[f64] = if l == 0 { x } else { &post[l - 1] };
            let in_dim = self.spec.layer_sizes[l];
            let z: Vec<f64> = self.weights[l]
                .chunks_exact(in_dim)
                .zip(&self.biases[l])
                .map(|(row, b)| dot(row, input) + b)
                .collect();
            let (a, mask) = if l + 1 == n {
                let a = match self.spec.output_head {
                    OutputHead::Softmax => softmax(&z),
                    OutputHead::SigmoidScalar => vec![sigmoid(z[0])],
                    OutputHead::Identity => z.clone(),
                };
                (a, None)
            } else {
                let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                let mask = dropout.as_deref_mut().map(|rng| {
                    let keep = 1.0 / (1.0 - rate);
                    let m: Vec<f64> = (0..a.len())
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    a.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    m
                });
                (a, mask)
            };
            pre.push(z);
            post.push(a);
            masks.push(mask);
        }
        ForwardTrace {
            input: x.to_vec(),
            pre_activations: pre,
            post_activations: post,
            masks,
        }
    }

    /// Backpropagates `d_logits` (gradient w.r.t. the final pre-activation)
    /// through the network recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64]) -> Gradients {
        let n = self.spec.num_layers();
        assert_eq!(d_logits.len(), self.output_dim(), "d_logits length");
        let mut d_weights = vec![Vec::new(); n];
        let mut d_biases = vec![Vec::new(); n];
        let mut delta = d_logits.to_vec();
        for l in (0..n).rev() {
            let in_dim = self.spec.layer_sizes[l];
            let input: &[f64] = if l == 0 { &trace.input } else { &trace.post_activations[l - 1] };
            let mut dw = vec![0.0; self.weights[l].len()];
            for (row, &d) in dw.chunks_exact_mut(in_dim).zip(&delta) {
                if d != 0.0 {
                    row.iter_mut().zip(input).for_each(|(g, a)| *g = d * a);
                }
            }
            let mut d_in = vec![0.0; in_dim];
            for (row, &d) in self.weights[l].chunks_exact(in_dim).zip(&delta) {
                if d != 0.0 {
                    d_in.iter_mut().zip(row).for_each(|(g, w)| *g += d * w);
                }
            }
            d_weights[l] = dw;
            d_biases[l] = delta;
            if l > 0 {
                // ReLU'(0) = 0, then the dropout scale.
                let z = &trace.pre_activations[l - 1];
                for (i, g) in d_in.iter_mut().enumerate() {
                    if z[i] <= 0.0 {
                        *g = 0.0;
                    } else if let Some(mask) = &trace.masks[l - 1] {
                        *g *= mask[i];
                    }
                }
            }
            delta = d_in;
        }
        Gradients {
            d_weights,
            d_biases,
            d_input: delta,
        }
    }

    /// Gradient of the selected output scalar with respect to the input `x`.
    pub fn input_gradient(&self, x: &[f64], selector: HeadSelector) -> Result<Vec<f64>> {
        let trace = self.predict(x)?;
        let k = self.output_dim();
        let d_logits = match selector {
            HeadSelector::ScalarLogit => {
                if k != 1 {
                    return Err(Error::input("scalar logit requires an output of size 1"));
                }
                vec![1.0]
            }
            HeadSelector::ProbabilityOf(j) => {
                if j >= k {
                    return Err(Error::input(format!("class index {j} out of range for {k} outputs")));
                }
                let out = trace.output();
                match self.spec.output_head {
                    OutputHead::Softmax => {
                        let pj = out[j];
                        (0..k)
                            .map(|i| if i == j { pj * (1.0 - pj) } else { -pj * out[i] })
                            .collect()
                    }
                    OutputHead::SigmoidScalar => vec![out[0] * (1.0 - out[0])],
                    OutputHead::Identity => {
                        let mut d = vec![0.0; k];
                        d[j] = 1.0;
                        d
                    }
                }
            }
        };
        Ok(self.backward(&trace, &d_logits).d_input)
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum()
    }

    /// One SGD step using gradients summed over `batch_len` samples, plus the
    /// derivative of `l2_lambda·‖W‖²`.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64, batch_len: usize) {
        let scale = 1.0 / batch_len.max(1) as f64;
        let decay = 2.0 * self.spec.l2_lambda;
        for (w, dw) in self.weights.iter_mut().zip(&grads.d_weights) {
            for (wi, gi) in w.iter_mut().zip(dw) {
                *wi -= learning_rate * (gi * scale + decay * *wi);
            }
        }
        for (b, db) in self.biases.iter_mut().zip(&grads.d_biases) {
            for (bi, gi) in b.iter_mut().zip(db) {
                *bi -= learning_rate * gi * scale;
            }
        }
    }

    /// Loss and `∂loss/∂logits` for a single sample.
    fn sample_loss(&self, trace: &ForwardTrace, y: usize) -> (f64, Vec<f64>) {
        let out = trace.output();
        match self.spec.output_head {
            OutputHead::Softmax | OutputHead::Identity => {
                let p = if self.spec.output_head == OutputHead::Softmax {
                    out.to_vec()
                } else {
                    softmax(out)
                };
                let loss = -p[y].clamp(LOG_FLOOR, 1.0).ln();
                let mut d = p;
                d[y] -= 1.0;
                (loss, d)
            }
            OutputHead::SigmoidScalar => {
                let p = out[0];
                let t = y as f64;
                let loss = -(t * p.clamp(LOG_FLOOR, 1.0).ln()
                    + (1.0 - t) * (1.0 - p).clamp(LOG_FLOOR, 1.0).ln());
                (loss, vec![p - t])
            }
        }
    }
}

/// Trains a copy of `model` with mini-batch SGD and returns it.
///
/// Softmax heads use cross-entropy over class labels; sigmoid heads use binary
/// cross-entropy over 0/1 targets. Each epoch shuffles the sample order once
/// with a generator seeded from `cfg.seed`, then walks it in batches.
pub fn train_sgd(model: &MlpModel, xs: &[Vec<f64>], ys: &[usize], cfg: &TrainConfig) -> Result<MlpModel> {
    cfg.validate()?;
    model.validate()?;
    if xs.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if xs.len() != ys.len() {
        return Err(Error::shape("training labels", xs.len(), ys.len()));
    }
    let classes = match model.spec.output_head {
        OutputHead::SigmoidScalar => 2,
        _ => model.output_dim(),
    };
    if let Some(bad) = ys.iter().find(|&&y| y >= classes) {
        return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != model.input_dim()) {
        return Err(Error::shape("training sample", model.input_dim(), x.len()));
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let use_dropout = model.spec.dropout_rate > 0.0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in batch {
                let trace = if use_dropout {
                    model.forward_with(&xs[i], Some(&mut rng))
                } else {
                    model.forward_with(&xs[i], None)
                };
                let (loss, d_logits) = model.sample_loss(&trace, ys[i]);
                epoch_loss += loss;
                grads.accumulate(&model.backward(&trace, &d_logits));
            }
            model.apply_gradients(&grads, lr, batch.len());
        }
        let total = epoch_loss / xs.len() as f64 + model.spec.l2_lambda * model.weight_norm_sq();
        if !total.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(model)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &MlpModel, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    if model.spec.output_head != OutputHead::Softmax {
        return Err(Error::input("accuracy requires a softmax head"));
    }
    if xs.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    if xs.len() != ys.len() {
        return Err(Error::shape("evaluation labels", xs.len(), ys.len()));
    }
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        if argmax(model.predict(x)?.output()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}

/// Fraction of samples whose sigmoid output lands on the right side of 0.5.
pub fn binary_accuracy(model: &MlpModel, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    if model.spec.output_head != OutputHead::SigmoidScalar {
        return Err(Error::input("binary accuracy requires a sigmoid head"));
    }
    if xs.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let predicted = usize::from(model.predict(x)?.probability() > 0.5);
        if predicted == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

impl MlpModel {
    /// Header line, then one line per tensor: `name shape values...`.
    pub fn to_text(&self) -> String {
        let spec = &self.spec;
        let sizes: Vec<String> = spec.layer_sizes.iter().map(|n| n.to_string()).collect();
        let mut out = format!(
            "mlp v1 {} {} {} {:.16e} {:.16e}\n",
            sizes.join(","),
            spec.hidden_activation.name(),
            spec.output_head.name(),
            spec.l2_lambda,
            spec.dropout_rate
        );
        for (l, pair) in spec.layer_sizes.windows(2).enumerate() {
            write_tensor(&mut out, &format!("w{l}"), &format!("{}x{}", pair[1], pair[0]), &self.weights[l]);
            write_tensor(&mut out, &format!("b{l}"), &pair[1].to_string(), &self.biases[l]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty model file".into(),
        })?;
        let spec = parse_header(header)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in spec.layer_sizes.windows(2).enumerate() {
            let (out_dim, in_dim) = (pair[1], pair[0]);
            weights.push(parse_tensor(lines.next(), &format!("w{l}"), &format!("{out_dim}x{in_dim}"), out_dim * in_dim)?);
            biases.push(parse_tensor(lines.next(), &format!("b{l}"), &out_dim.to_string(), out_dim)?);
        }
        if let Some((i, _)) = lines.next() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "unexpected trailing content".into(),
            });
        }
        let model = Self {
            spec,
            weights,
            biases,
        };
        model.validate()?;
        Ok(model)
    }
}

fn write_tensor(out: &mut String, name: &str, shape: &str, values: &[f64]) {
    out.push_str(name);
    out.push(' ');
    out.push_str(shape);
    for v in values {
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

fn parse_header(line: &str) -> Result<MlpSpec> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != "mlp" || fields[1] != "v1" {
        return Err(err(format!("bad header `{line}`")));
    }
    let layer_sizes = fields[2]
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| err(format!("bad layer sizes: {e}")))?;
    let hidden_activation =
        Activation::parse(fields[3]).ok_or_else(|| err(format!("unknown activation `{}`", fields[3])))?;
    let output_head = OutputHead::parse(fields[4]).ok_or_else(|| err(format!("unknown head `{}`", fields[4])))?;
    let l2_lambda = fields[5].parse().map_err(|_| err(format!("bad l2_lambda `{}`", fields[5])))?;
    let dropout_rate = fields[6].parse().map_err(|_| err(format!("bad dropout `{}`", fields[6])))?;
    let spec = MlpSpec {
        layer_sizes,
        hidden_activation,
        output_head,
        l2_lambda,
        dropout_rate,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_tensor(line: Option<(usize, &str)>, name: &str, shape: &str, len: usize) -> Result<Vec<f64>> {
    let (idx, line) = line.ok_or_else(|| Error::Parse {
        line: 0,
        msg: format!("missing tensor {name}"),
    })?;
    let err = |msg: String| Error::Parse { line: idx + 1, msg };
    let mut fields = line.split_whitespace();
    if fields.next() != Some(name) {
        return Err(err(format!("expected tensor {name}")));
    }
    if fields.next() != Some(shape) {
        return Err(err(format!("expected shape {shape} for {name}")));
    }
    let values = fields
        .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad value `{s}` in {name}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != len {
        return Err(err(format!("{name} has {} values, expected {len}", values.len())));
    }
    Ok(values)
}
