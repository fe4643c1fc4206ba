//! Independent reference computations for derived quantities.

use memguard::config::RunConfig;
use memguard::data::{generate_synthetic, synthesize_nonmembers};
use memguard::linalg::softmax;
use memguard::memguard::{deterministic_draw, phase1_loss_and_grad};
use memguard::nn::{train_sgd, HeadSelector, MlpModel, MlpSpec, OutputHead, TrainConfig};
use memguard::pipeline::{fit_defense, fit_target, make_splits, Pipeline};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + floor
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let heads = [OutputHead::Softmax, OutputHead::SigmoidScalar, OutputHead::Identity];
    let mut checked = 0;
    for pair in 0..120 {
        let head = heads[pair % 3];
        let dim = rng.gen_range(2..7);
        let out = if head == OutputHead::SigmoidScalar { 1 } else { rng.gen_range(2..5) };
        let spec = MlpSpec::with_hidden(dim, &[6, 5], out, head);
        let model = MlpModel::init(spec, pair as u64).unwrap();
        let x = random_vec(&mut rng, dim, 1.0);
        let trace = model.predict(&x).unwrap();
        let hidden = &trace.pre_activations[..trace.pre_activations.len() - 1];
        if hidden.iter().flatten().any(|v| v.abs() < 1e-4) {
            continue;
        }
        let j = rng.gen_range(0..out);
        let grad = model.input_gradient(&x, HeadSelector::ProbabilityOf(j)).unwrap();
        let step = 1e-6;
        for i in 0..dim {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += step;
            lo[i] -= step;
            let f = |v: &[f64]| model.predict(v).unwrap().output()[j];
            let fd = (f(&hi) - f(&lo)) / (2.0 * step);
            assert!(close(grad[i], fd, 1e-4, 1e-7), "pair {pair} coord {i}: {} vs {fd}", grad[i]);
        }
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} pairs away from ReLU kinks");
}

#[test]
fn phase_one_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = MlpSpec::with_hidden(5, &[8], 1, OutputHead::SigmoidScalar);
    let defense = memguard::defense::DefenseClassifier::from_model(MlpModel::init(spec, 3).unwrap()).unwrap();
    let mut checked = 0;
    for _ in 0..60 {
        let z = random_vec(&mut rng, 5, 2.0);
        let e = random_vec(&mut rng, 5, 0.5);
        let label = memguard::linalg::argmax(&z);
        let loss = phase1_loss_and_grad(&z, &e, &defense, label, 10.0, 0.5).unwrap();
        let step = 1e-6;
        let mut ok = true;
        let mut fds = Vec::new();
        for i in 0..5 {
            let mut hi = e.clone();
            let mut lo = e.clone();
            hi[i] += step;
            lo[i] -= step;
            let lh = phase1_loss_and_grad(&z, &hi, &defense, label, 10.0, 0.5).unwrap();
            let ll = phase1_loss_and_grad(&z, &lo, &defense, label, 10.0, 0.5).unwrap();
            // Skip points where a piecewise term changes branch inside the stencil.
            let branch = |l: &memguard::memguard::PhaseOneLoss| (l.h_noisy > 0.0, l.l2 > 0.0);
            if branch(&lh) != branch(&ll) || branch(&lh) != branch(&loss) {
                ok = false;
                break;
            }
            let noisy = |ee: &[f64]| {
                let zz: Vec<f64> = z.iter().zip(ee).map(|(a, b)| a + b).collect();
                softmax(&zz)
            };
            let s = softmax(&z);
            let (sh, sl) = (noisy(&hi), noisy(&lo));
            if sh.iter().zip(&s).zip(&sl).any(|((a, b), c)| (a > b) != (c > b)) {
                ok = false;
                break;
            }
            fds.push((lh.total - ll.total) / (2.0 * step));
        }
        if !ok {
            continue;
        }
        for (i, fd) in fds.iter().enumerate() {
            assert!(close(loss.gradient[i], *fd, 1e-4, 1e-7), "coord {i}: {} vs {fd}", loss.gradient[i]);
        }
        checked += 1;
    }
    assert!(checked >= 30, "only {checked} smooth points");
}

#[test]
fn nearest_centroid_recovers_low_noise_clusters() {
    let ds = generate_synthetic(400, 64, 8, 0.05, 11).unwrap();
    let mut centroids = vec![vec![0.0; 64]; 8];
    let mut counts = [0usize; 8];
    for (x, &y) in ds.features.iter().zip(&ds.labels) {
        counts[y] += 1;
        for (c, v) in centroids[y].iter_mut().zip(x) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v = (*v / n as f64).round());
    }
    let correct = ds
        .features
        .iter()
        .zip(&ds.labels)
        .filter(|(x, &y)| {
            let hamming = |c: &Vec<f64>| c.iter().zip(x.iter()).filter(|(a, b)| a != b).count();
            (0..8).min_by_key(|&k| hamming(&centroids[k])) == Some(y)
        })
        .count();
    assert!(correct as f64 / 400.0 >= 0.99, "{correct}/400");
}

#[test]
fn synthesized_nonmembers_change_expected_bit_fraction() {
    let d1 = generate_synthetic(250, 446, 4, 0.2, 12).unwrap();
    let d3 = synthesize_nonmembers(&d1, 0.9, 13).unwrap();
    let mut changed = 0usize;
    let mut total = 0usize;
    for (a, b) in d1.features.iter().zip(&d3.features) {
        changed += a.iter().zip(b).filter(|(x, y)| x != y).count();
        total += a.len();
    }
    assert!(total >= 100_000);
    let frac = changed as f64 / total as f64;
    assert!((frac - 0.05).abs() <= 0.01, "changed fraction {frac}");
    assert_eq!(d3.labels, d1.labels);
}

#[test]
fn draws_are_uniform_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| deterministic_draw(&random_vec(&mut rng, 6, 1.0), 3, 99)).collect();
    assert!(draws.iter().all(|d| (0.0..1.0).contains(d)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    let below_tenth = draws.iter().filter(|&&d| d < 0.1).count() as f64 / n as f64;
    assert!((0.08..=0.12).contains(&below_tenth), "P(draw < 0.1) = {below_tenth}");
}

#[test]
fn weight_decay_shrinks_weights() {
    let ds = generate_synthetic(64, 10, 2, 0.1, 15).unwrap();
    let run = |lambda: f64| {
        let spec = MlpSpec::with_hidden(10, &[8], 2, OutputHead::Softmax).l2(lambda);
        let model = MlpModel::init(spec, 16).unwrap();
        let before = model.weight_norm_sq();
        let cfg = TrainConfig::new(5, 1e-4, 17);
        (before, train_sgd(&model, &ds.features, &ds.labels, &cfg).unwrap().weight_norm_sq())
    };
    let (before, plain) = run(0.0);
    let (_, decayed) = run(50.0);
    assert!(decayed < plain, "{decayed} >= {plain}");
    assert!(decayed <= before);
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    cfg.data.n_samples = 200;
    cfg.data.feature_dim = 16;
    cfg.data.k = 4;
    cfg.data.split_size = 50;
    cfg.target.epochs = Some(20);
    cfg.shadow.epochs = Some(20);
    cfg.defense.epochs = Some(20);
    cfg.attack.epochs = Some(10);
    cfg.attack.n_trees = 4;
    cfg.memguard.max_iter = 50;
    cfg
}

#[test]
fn defense_training_set_has_members_and_nonmembers() {
    let cfg = tiny_config();
    let splits = make_splits(&cfg).unwrap();
    let (target, _) = fit_target(&cfg, &splits).unwrap();
    let (_, n) = fit_defense(&cfg, &splits, &target.classifier).unwrap();
    assert_eq!(n, splits.d1.len() + splits.d3.len());
}

#[test]
fn zero_budget_releases_true_confidences() {
    let cfg = tiny_config();
    let pipeline = Pipeline::train(&cfg).unwrap();
    let guard = pipeline.default_guard().unwrap();
    for x in pipeline.splits.d1.features.iter().chain(&pipeline.splits.d4.features) {
        let (noisy, policy) = guard.sanitize(x, 0.0).unwrap();
        let truth = pipeline.target.confidences(x).unwrap();
        assert_eq!(noisy, truth);
        assert!(!policy.applied);
        assert_eq!(policy.p, 0.0);
    }
}
