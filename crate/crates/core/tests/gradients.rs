mod common;

use common::*;
use distillmatch::losses::{consistency_loss, local_distillation_loss, objective, ObjectiveConfig};
use distillmatch::model::Augmentation;
use distillmatch::rng::derive_rng;

#[test]
fn every_term_matches_central_differences() {
    for (name, n_params, err, term) in gradient_suite() {
        assert!(n_params <= 500, "{n_params}");
        assert!(term > 0.0, "{name} is inactive in its own check");
        assert!(err <= 1e-3, "{name}: relative error {err}");
    }
}

#[test]
fn toggled_off_terms_contribute_nothing() {
    let (model, snap) = toy_model(7);
    for case in grad_cases() {
        let (batch, targets) = build_step(&model, &snap, &case, 3);
        let (loss, _) = objective(&model, &batch, &targets, &case.config);
        let c = &case.config;
        if !c.pseudo_labels {
            assert_eq!((loss.l_pl, loss.b_pl), (0.0, 0), "{}", case.name);
        }
        if !c.consistency {
            assert_eq!(loss.l_ul, 0.0, "{}", case.name);
        }
        if !c.distillation {
            assert_eq!(loss.l_dst, 0.0, "{}", case.name);
        }
    }
}

#[test]
fn objective_terms_agree_with_standalone_losses() {
    let (model, snap) = toy_model(11);
    let config = ObjectiveConfig {
        tau_fm: 0.0,
        ..ObjectiveConfig::default()
    };
    let case = grad_cases().pop().unwrap();
    let case = common::GradCase { config, ..case };
    let (batch, targets) = build_step(&model, &snap, &case, 5);
    let (loss, _) = objective(&model, &batch, &targets, &config);

    let ul = consistency_loss(&model, &batch.unlabeled_weak, &batch.unlabeled_strong, 0.0);
    assert!((loss.l_ul - ul).abs() < 1e-12);

    // identity augmentation: the distillation inputs are exactly the views
    let mut inputs = batch.labeled_weak.clone();
    inputs.extend_from_slice(&batch.unlabeled_weak);
    let identity = Augmentation {
        sigma_weak: 0.0,
        sigma_strong: 0.0,
        drop_fraction: 0.0,
    };
    let dst = local_distillation_loss(&model, Some(&snap), &inputs, &identity, &mut derive_rng(0, &[]), 2.0)
        .unwrap();
    assert!((loss.l_dst - dst).abs() < 1e-12, "{} vs {dst}", loss.l_dst);
}
