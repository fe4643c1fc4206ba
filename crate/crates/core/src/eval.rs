//! Privacy and utility metrics, and the budget sweep that produces the report.

use rayon::prelude::*;

use crate::attack::{inference_accuracy_on, AttackKind, AttackModel};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{argmax, l1_distance};
use crate::memguard::{MemGuard, PreparedQuery, SanitizationPolicy};
use crate::target::ConfidenceVector;

pub const DEFAULT_EPSILONS: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0];
pub const DEFAULT_BINS: usize = 20;

pub const REPORT_HEADER: &str =
    "attack,epsilon,inference_accuracy,avg_distortion,label_loss,entropy_max_gap,entropy_avg_gap";

/// One (attack, budget) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub attack_kind: AttackKind,
    pub epsilon: f64,
    pub inference_accuracy: f64,
    pub avg_distortion: f64,
    pub label_loss: f64,
    pub entropy_max_gap: f64,
    pub entropy_avg_gap: f64,
}

fn check_paired(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape("paired confidence lists", a, b));
    }
    if a == 0 {
        return Err(Error::input("confidence lists are empty"));
    }
    Ok(())
}

/// Fraction of pairs whose predicted label differs.
pub fn label_loss(true_confidences: &[ConfidenceVector], noisy: &[ConfidenceVector]) -> Result<f64> {
    check_paired(true_confidences.len(), noisy.len())?;
    let changed = true_confidences
        .iter()
        .zip(noisy)
        .filter(|(a, b)| argmax(a) != argmax(b))
        .count();
    Ok(changed as f64 / noisy.len() as f64)
}

/// Mean `‖s′ − s‖₁` over pairs.
pub fn avg_distortion(true_confidences: &[ConfidenceVector], noisy: &[ConfidenceVector]) -> Result<f64> {
    check_paired(true_confidences.len(), noisy.len())?;
    let total: f64 = true_confidences.iter().zip(noisy).map(|(a, b)| l1_distance(a, b)).sum();
    Ok(total / noisy.len() as f64)
}

/// `−(1/log k)·Σ s_j log s_j`, with `0·log 0 = 0`.
pub fn normalized_entropy(s: &[f64], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::input(format!("normalized entropy needs k >= 2, got {k}")));
    }
    let h: f64 = s.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((h / (k as f64).ln()).clamp(0.0, 1.0))
}

fn histogram(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * n_bins as f64).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    counts.into_iter().map(|c| c as f64 / values.len() as f64).collect()
}

/// Largest and mean per-bin gap between the normalized entropy histograms of
/// members and non-members over `[0, 1]`.
pub fn entropy_gap(member_entropies: &[f64], nonmember_entropies: &[f64], n_bins: usize) -> Result<(f64, f64)> {
    if member_entropies.is_empty() || nonmember_entropies.is_empty() {
        return Err(Error::input("entropy lists must be non-empty"));
    }
    if n_bins < 2 {
        return Err(Error::input("entropy gap needs at least two bins"));
    }
    let a = histogram(member_entropies, n_bins);
    let b = histogram(nonmember_entropies, n_bins);
    let gaps: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
    let max = gaps.iter().copied().fold(0.0, f64::max);
    let avg = gaps.iter().sum::<f64>() / n_bins as f64;
    Ok((max, avg))
}

/// Budget-independent work for every query, in order, on worker threads.
pub fn prepare_all(guard: &MemGuard<'_>, xs: &[Vec<f64>]) -> Result<Vec<PreparedQuery>> {
    xs.par_iter().map(|x| guard.prepare(x)).collect()
}

/// The prepared evaluation set D₁ ∪ D₄.
#[derive(Debug, Clone)]
pub struct PreparedEvalSet {
    pub members: Vec<PreparedQuery>,
    pub nonmembers: Vec<PreparedQuery>,
}

impl PreparedEvalSet {
    pub fn new(guard: &MemGuard<'_>, d1: &LabeledDataset, d4: &LabeledDataset) -> Result<Self> {
        Ok(Self {
            members: prepare_all(guard, &d1.features)?,
            nonmembers: prepare_all(guard, &d4.features)?,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &PreparedQuery> {
        self.members.iter().chain(&self.nonmembers)
    }

    /// Released vectors and policies for members and non-members at `epsilon`.
    pub fn release(&self, epsilon: f64) -> Result<Released> {
        let run = |qs: &[PreparedQuery]| -> Result<(Vec<ConfidenceVector>, Vec<SanitizationPolicy>)> {
            let pairs = qs.iter().map(|q| q.release(epsilon)).collect::<Result<Vec<_>>>()?;
            Ok(pairs.into_iter().unzip())
        };
        let (members, member_policies) = run(&self.members)?;
        let (nonmembers, nonmember_policies) = run(&self.nonmembers)?;
        Ok(Released {
            members,
            nonmembers,
            member_policies,
            nonmember_policies,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Released {
    pub members: Vec<ConfidenceVector>,
    pub nonmembers: Vec<ConfidenceVector>,
    pub member_policies: Vec<SanitizationPolicy>,
    pub nonmember_policies: Vec<SanitizationPolicy>,
}

/// Metrics of every attack at every budget. Models are not retrained between
/// budgets; only the released vectors change.
pub fn sweep_prepared(
    prepared: &PreparedEvalSet,
    attacks: &[AttackModel],
    epsilons: &[f64],
    n_bins: usize,
) -> Result<Vec<EvalReport>> {
    let truth: Vec<ConfidenceVector> = prepared.all().map(|q| q.confidences.clone()).collect();
    let k = truth.first().map_or(0, |s| s.len());
    let mut reports = Vec::with_capacity(epsilons.len() * attacks.len());
    for &epsilon in epsilons {
        let released = prepared.release(epsilon)?;
        let noisy: Vec<ConfidenceVector> = released.members.iter().chain(&released.nonmembers).cloned().collect();
        let distortion = avg_distortion(&truth, &noisy)?;
        let loss = label_loss(&truth, &noisy)?;
        let entropies = |vs: &[ConfidenceVector]| vs.iter().map(|s| normalized_entropy(s, k)).collect::<Result<Vec<_>>>();
        let (max_gap, avg_gap) = entropy_gap(&entropies(&released.members)?, &entropies(&released.nonmembers)?, n_bins)?;
        let accuracies = attacks
            .par_iter()
            .map(|a| inference_accuracy_on(a, &released.members, &released.nonmembers))
            .collect::<Result<Vec<_>>>()?;
        for (attack, acc) in attacks.iter().zip(accuracies) {
            reports.push(EvalReport {
                attack_kind: attack.kind(),
                epsilon,
                inference_accuracy: acc,
                avg_distortion: distortion,
                label_loss: loss,
                entropy_max_gap: max_gap,
                entropy_avg_gap: avg_gap,
            });
        }
    }
    Ok(reports)
}

pub fn sweep_epsilon(
    guard: &MemGuard<'_>,
    d1: &LabeledDataset,
    d4: &LabeledDataset,
    attacks: &[AttackModel],
    epsilons: &[f64],
    n_bins: usize,
) -> Result<Vec<EvalReport>> {
    if epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::config("epsilon values must be non-negative"));
    }
    let prepared = PreparedEvalSet::new(guard, d1, d4)?;
    sweep_prepared(&prepared, attacks, epsilons, n_bins)
}

/// Plain decimal with six significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0.00000".to_string() } else { v.to_string() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let cells = [
            r.attack_kind.name().to_string(),
            fmt_sig6(r.epsilon),
            fmt_sig6(r.inference_accuracy),
            fmt_sig6(r.avg_distortion),
            fmt_sig6(r.label_loss),
            fmt_sig6(r.entropy_max_gap),
            fmt_sig6(r.entropy_avg_gap),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
