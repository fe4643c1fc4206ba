//! The noise mechanism.
//!
//! For a query with logits `z` and confidences `s = softmax(z)` the defense:
//!
//! 1. searches a logit-space perturbation `e` that flips the sign of the
//!    defense logit `h` while keeping the predicted label, escalating the
//!    distortion weight `c3` for as long as the search still succeeds;
//! 2. turns it into the representative noise `r = softmax(z+e) − softmax(z)`;
//! 3. picks the probability `p` of adding `r` (otherwise nothing is added)
//!    so that the expected L₁ distortion stays within the budget `ε`;
//! 4. draws the coin for this query from a digest of the quantized query, so
//!    repeating a query always yields the same answer.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::defense::DefenseClassifier;
use crate::error::{Error, Result};
use crate::linalg::{argmax, l1_distance, l1_norm, sign, softmax};
use crate::target::{ConfidenceSource, ConfidenceVector, LogitVector, TargetClassifier};

/// Parameters of the noise search.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOneParams {
    pub max_iter: usize,
    /// Step length of the normalized gradient update.
    pub beta: f64,
    /// Weight of the label-preservation loss.
    pub c2: f64,
    /// First weight of the distortion loss.
    pub c3_init: f64,
    /// Factor applied to `c3` after every successful search.
    pub c3_growth: f64,
    /// `|h(s)|` at or below this counts as already indifferent.
    pub h_zero_tol: f64,
    /// Upper bound on the number of `c3` values tried.
    pub max_c3_rounds: usize,
}

impl Default for PhaseOneParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            beta: 0.1,
            c2: 10.0,
            c3_init: 0.1,
            c3_growth: 10.0,
            h_zero_tol: 1e-6,
            max_c3_rounds: 12,
        }
    }
}

impl PhaseOneParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iter == 0 || self.max_c3_rounds == 0 {
            return Err(Error::config("max_iter and max_c3_rounds must be positive"));
        }
        if !positive(self.beta) || !positive(self.c2) || !positive(self.c3_init) {
            return Err(Error::config("beta, c2 and c3_init must be positive"));
        }
        if !(self.c3_growth > 1.0 && self.c3_growth.is_finite()) {
            return Err(Error::config("c3_growth must be greater than 1"));
        }
        if !(self.h_zero_tol >= 0.0) {
            return Err(Error::config("h_zero_tol must be non-negative"));
        }
        Ok(())
    }
}

/// A perturbation of a confidence vector; entries sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(Vec<f64>);

impl NoiseVector {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn new(entries: Vec<f64>) -> Result<Self> {
        let sum: f64 = entries.iter().sum();
        if entries.iter().any(|v| !v.is_finite()) || sum.abs() > 1e-6 {
            return Err(Error::input(format!("noise vector must be finite and sum to 0, sums to {sum}")));
        }
        Ok(Self(entries))
    }

    pub fn l1_norm(&self) -> f64 {
        l1_norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// `s + r`, entry-wise.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.0).map(|(a, b)| a + b).collect()
    }
}

impl Deref for NoiseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Loss terms of the noise search at one point `e`.
#[derive(Debug, Clone)]
pub struct PhaseOneLoss {
    /// `|h(softmax(z+e))|`.
    pub l1: f64,
    /// `ReLU(max_{j≠l}(z_j+e_j) − z_l − e_l)`.
    pub l2: f64,
    /// `‖softmax(z+e) − softmax(z)‖₁`.
    pub l3: f64,
    pub total: f64,
    pub gradient: Vec<f64>,
    /// `h(softmax(z+e))`.
    pub h_noisy: f64,
    /// Label of `z + e`.
    pub noisy_label: usize,
}

/// Evaluates `L = L1 + c2·L2 + c3·L3` and `∂L/∂e`.
///
/// Subgradients: `sign(0) = 0`, `ReLU'(0) = 0`, and a tie in the max over
/// `j ≠ l` routes the gradient to the lowest index.
pub fn phase1_loss_and_grad(
    z: &[f64],
    e: &[f64],
    defense: &DefenseClassifier,
    label: usize,
    c2: f64,
    c3: f64,
) -> Result<PhaseOneLoss> {
    let k = z.len();
    if e.len() != k {
        return Err(Error::shape("perturbation", k, e.len()));
    }
    if defense.input_dim() != k {
        return Err(Error::shape("defense input", defense.input_dim(), k));
    }
    if label >= k {
        return Err(Error::input(format!("label {label} out of range for {k} classes")));
    }
    let s = softmax(z);
    let shifted: Vec<f64> = z.iter().zip(e).map(|(a, b)| a + b).collect();
    let s_noisy = softmax(&shifted);
    let (h, grad_h) = defense.h_with_gradient(&s_noisy)?;

    let l1 = h.abs();
    let l3 = l1_distance(&s_noisy, &s);

    // ∂(L1 + c3·L3)/∂s', then through the softmax Jacobian diag(s') − s's'ᵀ.
    let upstream: Vec<f64> = grad_h
        .iter()
        .zip(s_noisy.iter().zip(&s))
        .map(|(gh, (a, b))| sign(h) * gh + c3 * sign(a - b))
        .collect();
    let mean: f64 = s_noisy.iter().zip(&upstream).map(|(p, u)| p * u).sum();
    let mut gradient: Vec<f64> = s_noisy.iter().zip(&upstream).map(|(p, u)| p * (u - mean)).collect();

    let mut l2 = 0.0;
    if let Some(rival) = (0..k).filter(|&j| j != label).reduce(|best, j| if shifted[j] > shifted[best] { j } else { best }) {
        let margin = shifted[rival] - shifted[label];
        if margin > 0.0 {
            l2 = margin;
            gradient[rival] += c2;
            gradient[label] -= c2;
        }
    }

    Ok(PhaseOneLoss {
        l1,
        l2,
        l3,
        total: l1 + c2 * l2 + c3 * l3,
        gradient,
        h_noisy: h,
        noisy_label: argmax(&shifted),
    })
}

/// One successful round of the `c3` search.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderStep {
    pub c3: f64,
    /// Distortion `‖r‖₁` reached in this round.
    pub l3: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOneOutcome {
    pub e: Vec<f64>,
    pub converged: bool,
    /// `|h(s)|` was already within tolerance, so no noise is needed.
    pub indifferent: bool,
    /// Successful rounds, in order of increasing `c3`.
    pub ladder: Vec<LadderStep>,
}

impl PhaseOneOutcome {
    /// The `c3` of the accepted perturbation.
    pub fn accepted_c3(&self) -> Option<f64> {
        self.ladder.last().map(|s| s.c3)
    }
}

/// Normalized-gradient search for `e`, escalating `c3` until a round fails
/// and returning the result of the last successful round.
///
/// A round succeeds when `argmax(z+e) = argmax(z)` and `h(s)·h(softmax(z+e)) ≤ 0`.
/// If the first round fails the zero vector is returned with `converged = false`.
pub fn phase1_find_noise(z: &[f64], defense: &DefenseClassifier, params: &PhaseOneParams) -> Result<PhaseOneOutcome> {
    params.validate()?;
    let k = z.len();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("logits must be finite"));
    }
    let label = argmax(z);
    let h_true = defense.h(&softmax(z))?;
    if h_true.abs() <= params.h_zero_tol {
        return Ok(PhaseOneOutcome {
            e: vec![0.0; k],
            converged: true,
            indifferent: true,
            ladder: Vec::new(),
        });
    }
    let satisfied = |loss: &PhaseOneLoss| loss.noisy_label == label && h_true * loss.h_noisy <= 0.0;

    let mut accepted: Option<Vec<f64>> = None;
    let mut ladder = Vec::new();
    let mut c3 = params.c3_init;
    for _ in 0..params.max_c3_rounds {
        let mut e = vec![0.0; k];
        let mut loss = phase1_loss_and_grad(z, &e, defense, label, params.c2, c3)?;
        let mut i = 1;
        while i < params.max_iter && !satisfied(&loss) {
            let norm = loss.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                break;
            }
            for (ej, gj) in e.iter_mut().zip(&loss.gradient) {
                *ej -= params.beta * gj / norm;
            }
            loss = phase1_loss_and_grad(z, &e, defense, label, params.c2, c3)?;
            i += 1;
        }
        if !satisfied(&loss) {
            break;
        }
        ladder.push(LadderStep {
            c3,
            l3: loss.l3,
            iterations: i - 1,
        });
        accepted = Some(e);
        c3 *= params.c3_growth;
        if !c3.is_finite() {
            break;
        }
    }

    Ok(match accepted {
        Some(e) => PhaseOneOutcome {
            e,
            converged: true,
            indifferent: false,
            ladder,
        },
        None => PhaseOneOutcome {
            e: vec![0.0; k],
            converged: false,
            indifferent: false,
            ladder,
        },
    })
}

/// `r = softmax(z+e) − softmax(z)`.
pub fn noise_from_e(z: &[f64], e: &[f64]) -> Result<NoiseVector> {
    if z.len() != e.len() {
        return Err(Error::shape("perturbation", z.len(), e.len()));
    }
    let shifted: Vec<f64> = z.iter().zip(e).map(|(a, b)| a + b).collect();
    let noisy = softmax(&shifted);
    let s = softmax(z);
    Ok(NoiseVector(noisy.iter().zip(&s).map(|(a, b)| a - b).collect()))
}

/// Probability of releasing the noisy vector, given `g(s)`, `g(s+r)`,
/// `d = ‖r‖₁` and the budget:
/// zero unless the noise moves `g` closer to 0.5, else `min(ε/d, 1)`.
pub fn mixing_probability(g_true: f64, g_noisy: f64, distortion: f64, epsilon: f64) -> f64 {
    if distortion <= 0.0 || (g_true - 0.5).abs() <= (g_noisy - 0.5).abs() {
        0.0
    } else {
        (epsilon / distortion).min(1.0)
    }
}

pub fn phase2_probability(s: &[f64], r: &NoiseVector, defense: &DefenseClassifier, epsilon: f64) -> Result<f64> {
    if epsilon < 0.0 || epsilon.is_nan() {
        return Err(Error::input(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if s.len() != r.len() {
        return Err(Error::shape("noise vector", s.len(), r.len()));
    }
    let g_true = defense.g(s)?;
    let g_noisy = defense.g(&r.apply(s))?;
    Ok(mixing_probability(g_true, g_noisy, r.l1_norm(), epsilon))
}

/// Canonical text of `x` quantized to `decimals` places (half away from zero),
/// comma-separated.
pub fn quantized_text(x: &[f64], decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let cells: Vec<String> = x
        .iter()
        .map(|&v| {
            let q = (v * scale).round();
            let sign = if q < 0.0 { "-" } else { "" };
            let digits = format!("{:.0}", q.abs());
            if decimals == 0 {
                return format!("{sign}{digits}");
            }
            let width = decimals as usize + 1;
            let padded = format!("{digits:0>width$}");
            let (int, frac) = padded.split_at(padded.len() - decimals as usize);
            format!("{sign}{int}.{frac}")
        })
        .collect();
    cells.join(",")
}

fn query_digest(x: &[f64], decimals: u32, mechanism_seed: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(mechanism_seed.to_be_bytes());
    hasher.update(quantized_text(x, decimals).as_bytes());
    hasher.finalize().into()
}

fn unit_from_bytes(bytes: &[u8]) -> f64 {
    let u = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
    (u >> 11) as f64 / (1u64 << 53) as f64
}

/// Per-query uniform draw in `[0, 1)` from a SHA-256 digest of the seed and
/// the quantized query. Queries that quantize identically share the draw.
pub fn deterministic_draw(x: &[f64], quant_decimals: u32, mechanism_seed: u64) -> f64 {
    unit_from_bytes(&query_digest(x, quant_decimals, mechanism_seed))
}

/// Random label-preserving noise: a stick-breaking probability vector with its
/// largest entry swapped into position `label`, minus `s`.
pub fn random_baseline_noise(s: &[f64], label: usize, seed: u64) -> Result<NoiseVector> {
    let k = s.len();
    if label >= k {
        return Err(Error::input(format!("label {label} out of range for {k} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = Vec::with_capacity(k);
    let mut remaining = 1.0;
    for _ in 0..k - 1 {
        let v = rng.gen::<f64>() * remaining;
        target.push(v);
        remaining -= v;
    }
    target.push(remaining.max(0.0));
    let largest = argmax(&target);
    target.swap(largest, label);
    Ok(NoiseVector(target.iter().zip(s).map(|(a, b)| a - b).collect()))
}

/// Where the representative noise vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMethod {
    /// Adversarial search against the defense classifier.
    #[default]
    MemGuard,
    /// Random label-preserving noise.
    Random,
}

/// Outcome of sanitizing one query at one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SanitizationPolicy {
    /// Logit-space perturbation.
    pub e: Vec<f64>,
    /// Representative noise.
    pub r: NoiseVector,
    /// Probability of adding `r`.
    pub p: f64,
    pub epsilon: f64,
    pub phase1_converged: bool,
    pub g_true: f64,
    pub g_noisy: f64,
    /// The per-query draw compared against `p`.
    pub draw: f64,
    pub applied: bool,
}

impl SanitizationPolicy {
    pub fn expected_distortion(&self) -> f64 {
        self.p * self.r.l1_norm()
    }

    /// `p·g(s+r) + (1−p)·g(s)`.
    pub fn expected_g(&self) -> f64 {
        self.p * self.g_noisy + (1.0 - self.p) * self.g_true
    }
}

/// Budget-independent state for one query. [`PreparedQuery::release`] turns
/// it into the answer for a given `ε`.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub logits: LogitVector,
    pub confidences: ConfidenceVector,
    pub e: Vec<f64>,
    pub r: NoiseVector,
    pub converged: bool,
    pub indifferent: bool,
    pub g_true: f64,
    pub g_noisy: f64,
    pub draw: f64,
}

impl PreparedQuery {
    pub fn release(&self, epsilon: f64) -> Result<(ConfidenceVector, SanitizationPolicy)> {
        if epsilon < 0.0 || epsilon.is_nan() {
            return Err(Error::input(format!("epsilon must be non-negative, got {epsilon}")));
        }
        let p = if self.converged {
            mixing_probability(self.g_true, self.g_noisy, self.r.l1_norm(), epsilon)
        } else {
            0.0
        };
        let applied = self.draw < p;
        let released = if applied {
            ConfidenceVector::new(self.r.apply(&self.confidences))?
        } else {
            self.confidences.clone()
        };
        let policy = SanitizationPolicy {
            e: self.e.clone(),
            r: self.r.clone(),
            p,
            epsilon,
            phase1_converged: self.converged,
            g_true: self.g_true,
            g_noisy: self.g_noisy,
            draw: self.draw,
            applied,
        };
        Ok((released, policy))
    }
}

/// The deployed defense: target, defense classifier and mechanism settings.
#[derive(Debug, Clone, Copy)]
pub struct MemGuard<'a> {
    pub target: &'a TargetClassifier,
    pub defense: &'a DefenseClassifier,
    pub params: &'a PhaseOneParams,
    pub quant_decimals: u32,
    pub mechanism_seed: u64,
    pub method: NoiseMethod,
}

impl<'a> MemGuard<'a> {
    pub fn new(
        target: &'a TargetClassifier,
        defense: &'a DefenseClassifier,
        params: &'a PhaseOneParams,
        mechanism_seed: u64,
    ) -> Self {
        Self {
            target,
            defense,
            params,
            quant_decimals: 3,
            mechanism_seed,
            method: NoiseMethod::MemGuard,
        }
    }

    pub fn with_method(mut self, method: NoiseMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_quant_decimals(mut self, decimals: u32) -> Self {
        self.quant_decimals = decimals;
        self
    }

    /// Runs everything that does not depend on the budget.
    pub fn prepare(&self, x: &[f64]) -> Result<PreparedQuery> {
        if self.defense.input_dim() != self.target.k {
            return Err(Error::shape("defense input", self.target.k, self.defense.input_dim()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("query has non-finite features"));
        }
        let (logits, confidences) = self.target.predict(x)?;
        let digest = query_digest(x, self.quant_decimals, self.mechanism_seed);
        let draw = unit_from_bytes(&digest[..8]);
        let label = confidences.label();
        let k = self.target.k;

        let (e, mut r, mut converged, indifferent) = match self.method {
            NoiseMethod::MemGuard => {
                let outcome = phase1_find_noise(&logits, self.defense, self.params)?;
                let r = if outcome.converged && !outcome.indifferent {
                    noise_from_e(&logits, &outcome.e)?
                } else {
                    NoiseVector::zeros(k)
                };
                (outcome.e, r, outcome.converged, outcome.indifferent)
            }
            NoiseMethod::Random => {
                let seed = u64::from_be_bytes(digest[8..16].try_into().expect("8 bytes"));
                let r = random_baseline_noise(&confidences, label, seed)?;
                (vec![0.0; k], r, true, false)
            }
        };

        // Rounding in s + r must not break a near-tie in favour of another class.
        let noisy = r.apply(&confidences);
        if argmax(&noisy) != label || ConfidenceVector::new(noisy.clone()).is_err() {
            r = NoiseVector::zeros(k);
            converged = false;
        }
        let (g_true, _) = self.defense.g_and_h(&confidences)?;
        let g_noisy = if r.is_zero() { g_true } else { self.defense.g(&r.apply(&confidences))? };

        Ok(PreparedQuery {
            logits,
            confidences,
            e,
            r,
            converged,
            indifferent,
            g_true,
            g_noisy,
            draw,
        })
    }

    /// Noisy confidence vector returned for `x` at budget `epsilon`.
    pub fn sanitize(&self, x: &[f64], epsilon: f64) -> Result<(ConfidenceVector, SanitizationPolicy)> {
        self.prepare(x)?.release(epsilon)
    }
}

/// The defended target at a fixed budget.
#[derive(Debug, Clone, Copy)]
pub struct Sanitizer<'a> {
    pub guard: MemGuard<'a>,
    pub epsilon: f64,
}

impl ConfidenceSource for Sanitizer<'_> {
    fn release(&self, x: &[f64]) -> Result<ConfidenceVector> {
        Ok(self.guard.sanitize(x, self.epsilon)?.0)
    }
}
