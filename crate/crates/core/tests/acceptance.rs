//! Acceptance suite. Trains the desk-scale pipeline once, then checks every
//! criterion and prints one PASS/FAIL line for each.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memguard::attack::{inference_accuracy_on, AttackKind, AttackModel};
use memguard::config::RunConfig;
use memguard::defense::DefenseClassifier;
use memguard::eval::{reports_to_csv, sweep_prepared, EvalReport, PreparedEvalSet, DEFAULT_EPSILONS};
use memguard::linalg::{argmax, softmax};
use memguard::memguard::{mixing_probability, phase1_loss_and_grad, phase2_probability, NoiseMethod};
use memguard::nn::{MlpModel, MlpSpec, OutputHead};
use memguard::pipeline::{ArtifactPaths, Pipeline};
use memguard::target::ConfidenceVector;

type Outcome = Result<String, String>;

struct Shared {
    pipeline: Pipeline,
    prepared: PreparedEvalSet,
    reports: Vec<EvalReport>,
    setup: Duration,
}

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn row(reports: &[EvalReport], kind: AttackKind, eps: f64) -> &EvalReport {
    reports
        .iter()
        .find(|r| r.attack_kind == kind && r.epsilon == eps)
        .expect("report row")
}

fn zero_label_loss(sh: &Shared) -> Outcome {
    let start = Instant::now();
    let n = sh.prepared.all().count();
    let mut worst = 0.0f64;
    for &eps in &DEFAULT_EPSILONS {
        let released = sh.prepared.release(eps).map_err(|e| e.to_string())?;
        let changed = sh
            .prepared
            .all()
            .zip(released.members.iter().chain(&released.nonmembers))
            .filter(|(q, s)| argmax(&q.confidences) != argmax(s))
            .count();
        worst = worst.max(changed as f64 / n as f64);
    }
    let elapsed = sh.setup + start.elapsed();
    check(
        n >= 1000 && worst == 0.0 && elapsed < Duration::from_secs(120),
        format!("{n} queries x 6 budgets, label loss 0, {:.1}s", elapsed.as_secs_f64()),
        format!("n={n} worst label loss {worst} in {:.1}s", elapsed.as_secs_f64()),
    )
}

fn simplex_and_budget(sh: &Shared) -> Outcome {
    let mut checked = 0usize;
    for &eps in &DEFAULT_EPSILONS {
        let released = sh.prepared.release(eps).map_err(|e| e.to_string())?;
        let vectors = released.members.iter().chain(&released.nonmembers);
        let policies = released.member_policies.iter().chain(&released.nonmember_policies);
        for (s, pol) in vectors.zip(policies) {
            let sum: f64 = s.iter().sum();
            if s.iter().any(|&v| v < -1e-9) || (sum - 1.0).abs() > 1e-6 {
                return Err(format!("eps {eps}: invalid vector {:?}", s.as_slice()));
            }
            let spend = pol.p * pol.r.l1_norm();
            if spend > eps + 1e-9 {
                return Err(format!("eps {eps}: p*|r|_1 = {spend}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} released vectors on the simplex and within budget"))
}

/// Written from the case analysis directly, independent of the library.
fn phase2_reference(g_s: f64, g_sr: f64, d: f64, eps: f64) -> f64 {
    let stays = (g_s - 0.5).abs() <= (g_sr - 0.5).abs();
    if stays || d == 0.0 {
        0.0
    } else if eps >= d {
        1.0
    } else {
        eps / d
    }
}

fn phase2_formula(sh: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let mut worst = 0.0f64;
    for i in 0..100_000 {
        let g_s: f64 = rng.gen();
        // Every tenth tuple shares g to exercise the tie branch.
        let g_sr: f64 = if i % 10 == 0 { g_s } else { rng.gen() };
        let d: f64 = if i % 97 == 0 { 0.0 } else { rng.gen_range(0.0..=2.0) };
        let eps: f64 = rng.gen_range(0.0..2.5);
        let got = mixing_probability(g_s, g_sr, d, eps);
        worst = worst.max((got - phase2_reference(g_s, g_sr, d, eps)).abs());
    }
    // The composed operation on real vectors and the trained defense.
    let defense = &sh.pipeline.defense;
    for q in sh.prepared.all().take(1000) {
        let eps = rng.gen_range(0.0..1.0);
        let got = phase2_probability(&q.confidences, &q.r, defense, eps).map_err(|e| e.to_string())?;
        let g_s = defense.g(&q.confidences).map_err(|e| e.to_string())?;
        let g_sr = defense.g(&q.r.apply(&q.confidences)).map_err(|e| e.to_string())?;
        worst = worst.max((got - phase2_reference(g_s, g_sr, q.r.l1_norm(), eps)).abs());
    }
    check(
        worst <= 1e-12,
        format!("101000 tuples, max deviation {worst:.1e}"),
        format!("max deviation {worst:e}"),
    )
}

/// Pre-activations of every hidden layer are far enough from zero that a
/// step of `h` cannot cross a ReLU kink.
fn clear_of_relu_kinks(defense: &DefenseClassifier, s: &[f64]) -> bool {
    let trace = defense.model.predict(s).expect("forward");
    let hidden = &trace.pre_activations[..trace.pre_activations.len() - 1];
    hidden.iter().flatten().all(|a| a.abs() > 1e-4)
}

fn gradient_oracle(_: &Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let step = 1e-5;
    let (mut accepted, mut tried) = (0usize, 0usize);
    let mut worst = 0.0f64;
    while accepted < 150 && tried < 20_000 {
        tried += 1;
        let k = rng.gen_range(3..=8);
        let spec = MlpSpec::with_hidden(k, &[12, 8], 1, OutputHead::SigmoidScalar);
        let defense = DefenseClassifier::from_model(MlpModel::init(spec, rng.gen()).unwrap()).unwrap();
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let e: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let label = argmax(&z);
        let c2 = 10.0;
        let c3 = rng.gen_range(0.1..10.0);

        let shifted: Vec<f64> = z.iter().zip(&e).map(|(a, b)| a + b).collect();
        let s = softmax(&z);
        let s_noisy = softmax(&shifted);
        let mut rivals: Vec<f64> = (0..k).filter(|&j| j != label).map(|j| shifted[j]).collect();
        rivals.sort_by(|a, b| b.total_cmp(a));
        let margin = rivals[0] - shifted[label];
        let rival_gap = if rivals.len() > 1 { rivals[0] - rivals[1] } else { f64::INFINITY };
        let h = defense.h(&s_noisy).unwrap();
        let away = h.abs() > 1e-3
            && margin.abs() > 1e-3
            && rival_gap > 1e-3
            && s_noisy.iter().zip(&s).all(|(a, b)| (a - b).abs() > 1e-3)
            && clear_of_relu_kinks(&defense, &s_noisy);
        if !away {
            continue;
        }
        let analytic = phase1_loss_and_grad(&z, &e, &defense, label, c2, c3).unwrap().gradient;
        for j in 0..k {
            let mut plus = e.clone();
            let mut minus = e.clone();
            plus[j] += step;
            minus[j] -= step;
            let lp = phase1_loss_and_grad(&z, &plus, &defense, label, c2, c3).unwrap().total;
            let lm = phase1_loss_and_grad(&z, &minus, &defense, label, c2, c3).unwrap().total;
            let numeric = (lp - lm) / (2.0 * step);
            let err = (analytic[j] - numeric).abs();
            let tol = (1e-4 * numeric.abs()).max(1e-7);
            worst = worst.max(err / tol);
            if err > tol {
                return Err(format!("coord {j}: analytic {} numeric {numeric}", analytic[j]));
            }
        }
        accepted += 1;
    }
    let elapsed = start.elapsed();
    check(
        accepted >= 100 && elapsed < Duration::from_secs(60),
        format!("{accepted} triples, worst error/tolerance {worst:.3}, {:.1}s", elapsed.as_secs_f64()),
        format!("only {accepted} triples accepted in {:.1}s", elapsed.as_secs_f64()),
    )
}

fn phase1_contract(sh: &Shared) -> Outcome {
    let defense = &sh.pipeline.defense;
    let total = sh.prepared.all().count();
    let mut converged = 0usize;
    for q in sh.prepared.all() {
        if !q.converged {
            continue;
        }
        converged += 1;
        if q.indifferent {
            continue;
        }
        let s = &q.confidences;
        let noisy = q.r.apply(s);
        let product = defense.h(s).unwrap() * defense.h(&noisy).unwrap();
        if product > 0.0 {
            return Err(format!("h(s)*h(s+r) = {product} > 0"));
        }
        if argmax(&noisy) != argmax(s) {
            return Err("converged noise changed the label".into());
        }
    }
    let rate = converged as f64 / total as f64;
    check(
        rate >= 0.9,
        format!("{converged}/{total} converged; every converged query crosses the boundary and keeps its label"),
        format!("convergence rate {rate:.3}"),
    )
}

fn defense_steering(sh: &Shared) -> Outcome {
    let released = sh.prepared.release(1.0).map_err(|e| e.to_string())?;
    let policies: Vec<_> = released.member_policies.iter().chain(&released.nonmember_policies).collect();
    let n = policies.len() as f64;
    let defended = policies.iter().map(|p| (p.expected_g() - 0.5).abs()).sum::<f64>() / n;
    let undefended = policies.iter().map(|p| (p.g_true - 0.5).abs()).sum::<f64>() / n;
    check(
        defended < 0.15 && defended < undefended,
        format!("mean |E[g(s')]-0.5| = {defended:.4} vs undefended {undefended:.4}"),
        format!("defended {defended:.4} undefended {undefended:.4}"),
    )
}

fn attack_degradation(sh: &Shared) -> Outcome {
    let r = &sh.reports;
    let nn0 = row(r, AttackKind::Nn, 0.0).inference_accuracy;
    let nn1 = row(r, AttackKind::Nn, 1.0).inference_accuracy;
    if nn0 < 0.58 {
        return Err(format!("target not overfitted enough: undefended NN accuracy {nn0:.3}"));
    }
    let mut parts = Vec::new();
    for kind in [AttackKind::Nn, AttackKind::NnAt, AttackKind::NnR, AttackKind::Nsh] {
        let a0 = row(r, kind, 0.0).inference_accuracy;
        let a1 = row(r, kind, 1.0).inference_accuracy;
        if a1 > a0 + 0.02 {
            return Err(format!("{kind}: {a0:.3} -> {a1:.3}"));
        }
        parts.push(format!("{kind} {a0:.3}->{a1:.3}"));
    }
    check(
        nn0 - nn1 >= 0.04,
        parts.join(", "),
        format!("NN drops only {:.3}", nn0 - nn1),
    )
}

fn one_time_randomness(sh: &Shared) -> Outcome {
    let guard = sh.pipeline.guard(NoiseMethod::MemGuard);
    let queries: Vec<&Vec<f64>> = sh.pipeline.splits.d1.features.iter().take(50).chain(sh.pipeline.splits.d4.features.iter().take(50)).collect();
    let mut per_query: Vec<HashSet<Vec<u64>>> = vec![HashSet::new(); queries.len()];
    let mut all = HashSet::new();
    let mut applied = 0usize;
    for _ in 0..100 {
        for (i, x) in queries.iter().enumerate() {
            let (s, pol) = guard.sanitize(x, 0.3).map_err(|e| e.to_string())?;
            applied += usize::from(pol.applied);
            let bits: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
            per_query[i].insert(bits.clone());
            all.insert(bits);
        }
    }
    let stable = per_query.iter().all(|set| set.len() == 1);
    check(
        stable && all.len() == queries.len(),
        format!("10000 calls, {} distinct outputs, noise applied in {} calls", all.len(), applied),
        format!("stable per query: {stable}, distinct outputs {}", all.len()),
    )
}

fn rg_baseline(sh: &Shared) -> Outcome {
    let rg = sh
        .pipeline
        .attacks
        .iter()
        .find(|a| a.kind() == AttackKind::Rg)
        .cloned()
        .unwrap_or(AttackModel::RandomGuess { decision_seed: 0 });
    let s = ConfidenceVector::new(vec![0.25; 4]).unwrap();
    let members = vec![s.clone(); 10_000];
    let nonmembers = vec![s; 10_000];
    let acc = inference_accuracy_on(&rg, &members, &nonmembers).map_err(|e| e.to_string())?;
    check(
        (0.48..=0.52).contains(&acc),
        format!("accuracy {acc:.4} over 20000 balanced samples"),
        format!("accuracy {acc:.4}"),
    )
}

/// Linear interpolation of `(x, y)` points sorted by `x`.
fn interpolate(points: &[(f64, f64)], x: f64) -> Option<f64> {
    points.windows(2).find(|w| w[0].0 <= x && x <= w[1].0).map(|w| {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x1 == x0 {
            y0.min(y1)
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    })
}

fn random_baseline(sh: &Shared) -> Outcome {
    let nn: Vec<AttackModel> = sh.pipeline.attacks.iter().filter(|a| a.kind() == AttackKind::Nn).cloned().collect();
    let guard_eps = [0.02, 0.05, 0.1, 0.15, 0.2, 0.3];
    let random_eps: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
    let ours = sweep_prepared(&sh.prepared, &nn, &guard_eps, 20).map_err(|e| e.to_string())?;
    let random_prep = sh.pipeline.prepare(NoiseMethod::Random).map_err(|e| e.to_string())?;
    let theirs = sweep_prepared(&random_prep, &nn, &random_eps, 20).map_err(|e| e.to_string())?;
    let mut curve: Vec<(f64, f64)> = theirs.iter().map(|r| (r.avg_distortion, r.inference_accuracy)).collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut compared = Vec::new();
    for r in &ours {
        if let Some(acc_random) = interpolate(&curve, r.avg_distortion) {
            if acc_random < r.inference_accuracy {
                return Err(format!(
                    "distortion {:.3}: Random {acc_random:.3} < MemGuard {:.3}",
                    r.avg_distortion, r.inference_accuracy
                ));
            }
            compared.push(format!("{:.3}: {acc_random:.3}>={:.3}", r.avg_distortion, r.inference_accuracy));
        }
    }
    check(
        compared.len() >= 2,
        format!("NN accuracy at matched distortion [{}]", compared.join(", ")),
        format!("only {} matched distortion points", compared.len()),
    )
}

fn entropy_gaps(sh: &Shared) -> Outcome {
    let r0 = row(&sh.reports, AttackKind::Nn, 0.0);
    let r1 = row(&sh.reports, AttackKind::Nn, 1.0);
    check(
        r1.entropy_max_gap <= r0.entropy_max_gap && r1.entropy_avg_gap <= r0.entropy_avg_gap,
        format!(
            "max gap {:.3}->{:.3}, avg gap {:.4}->{:.4}",
            r0.entropy_max_gap, r1.entropy_max_gap, r0.entropy_avg_gap, r1.entropy_avg_gap
        ),
        format!("gaps at eps 1: {:.3} {:.4}", r1.entropy_max_gap, r1.entropy_avg_gap),
    )
}

fn determinism(_: &Shared) -> Outcome {
    let cfg = RunConfig::desk_scale();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let paths = ArtifactPaths::new(dir.path());
        Pipeline::train(&cfg).and_then(|p| p.save(&paths)).map_err(|e| e.to_string())?;
        let loaded = Pipeline::load(&cfg, &paths).map_err(|e| e.to_string())?;
        let csv = reports_to_csv(&loaded.sweep().map_err(|e| e.to_string())?);
        std::fs::write(paths.report(), &csv).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(paths.report()).map_err(|e| e.to_string())?);
    }
    check(
        reports[0] == reports[1],
        format!("two runs, {} identical report bytes", reports[0].len()),
        "report CSVs differ".into(),
    )
}

fn main() {
    let start = Instant::now();
    let cfg = RunConfig::desk_scale();
    let pipeline = Pipeline::train(&cfg).expect("desk-scale pipeline trains");
    let prepared = pipeline.prepare(NoiseMethod::MemGuard).expect("prepare");
    let reports = sweep_prepared(&prepared, &pipeline.attacks, &DEFAULT_EPSILONS, cfg.eval.bins).expect("sweep");
    let shared = Shared {
        pipeline,
        prepared,
        reports,
        setup: start.elapsed(),
    };

    let criteria: [(&str, fn(&Shared) -> Outcome); 12] = [
        ("zero label loss", zero_label_loss),
        ("simplex and budget invariants", simplex_and_budget),
        ("phase II formula", phase2_formula),
        ("phase I gradient oracle", gradient_oracle),
        ("phase I contract", phase1_contract),
        ("defense steering", defense_steering),
        ("attack degradation", attack_degradation),
        ("one-time randomness", one_time_randomness),
        ("random-guess baseline", rg_baseline),
        ("random-noise comparison", random_baseline),
        ("entropy-gap shrinkage", entropy_gaps),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = HashMap::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f(&shared) {
            Ok(msg) => println!("criterion {:>2} PASS {name}: {msg}", i + 1),
            Err(msg) => {
                println!("criterion {:>2} FAIL {name}: {msg}", i + 1);
                failed.insert(i + 1, msg);
            }
        }
    }
    println!("acceptance: {}/12 passed in {:.1}s", 12 - failed.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
