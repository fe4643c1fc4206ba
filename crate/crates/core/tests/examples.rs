//! Behaviour of the desk-scale configuration end to end.

use memguard::attack::{inference_accuracy, AttackKind};
use memguard::config::RunConfig;
use memguard::eval::{PreparedEvalSet, DEFAULT_EPSILONS};
use memguard::memguard::MemGuard;
use memguard::pipeline::{fit_attack, fit_defense, fit_shadow, fit_target, make_splits};

#[test]
fn desk_scale_behaviour() {
    let cfg = RunConfig::desk_scale();
    let splits = make_splits(&cfg).unwrap();
    let ((target, test_acc), (shadow, shadow_test)) =
        rayon::join(|| fit_target(&cfg, &splits).unwrap(), || fit_shadow(&cfg, &splits).unwrap());
    println!("target train {:.3} test {test_acc:.3}", target.train_accuracy);

    let shadow_gap = shadow.train_accuracy - shadow_test;
    assert!(shadow_gap >= 0.05, "shadow overfitting gap {shadow_gap}");

    let (defense, _) = fit_defense(&cfg, &splits, &target.classifier).unwrap();
    assert!(defense.train_accuracy > 0.55, "defense accuracy {}", defense.train_accuracy);

    for kind in [AttackKind::Nn, AttackKind::Nsh] {
        let attack = fit_attack(&cfg, kind, &splits, Some(&target.classifier), Some(&shadow.classifier)).unwrap();
        let acc = inference_accuracy(&attack, &target.classifier, &splits.d1, &splits.d4).unwrap();
        assert!(acc > 0.55, "{kind} undefended accuracy {acc}");
    }

    let params = cfg.memguard.params().unwrap();
    let guard = MemGuard::new(&target.classifier, &defense.classifier, &params, cfg.memguard.mechanism_seed);
    let prepared = PreparedEvalSet::new(&guard, &splits.d1, &splits.d4).unwrap();
    assert!(prepared.all().count() >= 500);
    for eps in DEFAULT_EPSILONS {
        let released = prepared.release(eps).unwrap();
        let policies: Vec<_> = released.member_policies.iter().chain(&released.nonmember_policies).collect();
        let expected = policies.iter().map(|p| p.expected_distortion()).sum::<f64>() / policies.len() as f64;
        assert!(expected <= eps + 0.05, "expected distortion {expected} at epsilon {eps}");
    }
}
