#![allow(dead_code)]

use distillmatch::losses::{objective, prepare_targets, ObjectiveConfig, StepBatch, StepTargets};
use distillmatch::model::{IncrementalClassifier, Snapshot};
use distillmatch::rng::{derive_rng, Rng};
use rand::Rng as _;

/// Two-task toy: 3 inputs, 8 tanh hidden units, 3 + 3 outputs (86 parameters).
pub fn toy_model(seed: u64) -> (IncrementalClassifier, Snapshot) {
    let mut rng = derive_rng(seed, &[]);
    let mut m = IncrementalClassifier::new(3, &[8], &mut rng);
    m.expand_head(&[0, 1, 2], &mut rng).unwrap();
    m.mark_trained(1);
    let snap = m.snapshot().unwrap();
    m.expand_head(&[3, 4, 5], &mut rng).unwrap();
    // move the live model away from the snapshot
    for p in m.net_mut().params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    (m, snap)
}

pub fn random_rows(rows: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..rows * dim).map(|_| rng.random_range(-1.5..1.5)).collect()
}

pub struct GradCase {
    pub name: &'static str,
    pub config: ObjectiveConfig,
    pub labeled: usize,
}

/// One configuration per loss term, each with every other term switched
/// off, plus the full objective.
pub fn grad_cases() -> Vec<GradCase> {
    let off = ObjectiveConfig {
        pseudo_labels: false,
        class_balance: true,
        consistency: false,
        distillation: false,
        tau_fm: 0.0,
        ..ObjectiveConfig::default()
    };
    vec![
        GradCase { name: "l_s", config: off, labeled: 6 },
        GradCase { name: "l_pl", config: ObjectiveConfig { pseudo_labels: true, ..off }, labeled: 0 },
        GradCase { name: "l_ul", config: ObjectiveConfig { consistency: true, ..off }, labeled: 0 },
        GradCase { name: "l_dst", config: ObjectiveConfig { distillation: true, ..off }, labeled: 0 },
        GradCase {
            name: "l_total",
            config: ObjectiveConfig {
                pseudo_labels: true,
                consistency: true,
                distillation: true,
                tau_fm: 0.3,
                lambda_ucl: 0.7,
                lambda_dst: 1.3,
                ..off
            },
            labeled: 6,
        },
    ]
}

pub fn build_step(
    model: &IncrementalClassifier,
    snap: &Snapshot,
    case: &GradCase,
    seed: u64,
) -> (StepBatch, StepTargets) {
    let mut rng = derive_rng(seed, &[1]);
    let n_u = 8;
    let labels: Vec<usize> = (0..case.labeled).map(|i| (i * 5 + 1) % 6).collect();
    let batch = StepBatch {
        dim: 3,
        labeled_weak: random_rows(case.labeled, 3, &mut rng),
        labels,
        unlabeled_weak: random_rows(n_u, 3, &mut rng),
        unlabeled_strong: random_rows(n_u, 3, &mut rng),
    };
    let gate: Vec<bool> = (0..n_u).map(|i| i % 3 != 1).collect();
    let targets = prepare_targets(model, Some(snap), Some(&gate), &batch, &case.config).unwrap();
    (batch, targets)
}

/// Largest per-coordinate relative error `|a - n| / max(|a|, |n|, 1e-4)`
/// between the analytic gradient and central differences.
pub fn max_relative_error(
    model: &IncrementalClassifier,
    batch: &StepBatch,
    targets: &StepTargets,
    config: &ObjectiveConfig,
) -> f64 {
    let (_, grad) = objective(model, batch, targets, config);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for k in 0..grad.len() {
        let orig = probe.net().params()[k];
        probe.net_mut().params_mut()[k] = orig + h;
        let up = objective(&probe, batch, targets, config).0.l_total;
        probe.net_mut().params_mut()[k] = orig - h;
        let down = objective(&probe, batch, targets, config).0.l_total;
        probe.net_mut().params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

/// `(case, parameters, worst relative error, term value)` for every case.
pub fn gradient_suite() -> Vec<(&'static str, usize, f64, f64)> {
    let (model, snap) = toy_model(7);
    grad_cases()
        .into_iter()
        .map(|case| {
            let (batch, targets) = build_step(&model, &snap, &case, 3);
            let (loss, _) = objective(&model, &batch, &targets, &case.config);
            let term = match case.name {
                "l_s" => loss.l_s,
                "l_pl" => loss.l_pl,
                "l_ul" => loss.l_ul,
                "l_dst" => loss.l_dst,
                _ => loss.l_total,
            };
            let err = max_relative_error(&model, &batch, &targets, &case.config);
            (case.name, model.net().n_params(), err, term)
        })
        .collect()
}

use distillmatch::harness::ExperimentConfig;
use std::path::Path;

/// A config small enough for tests yet exercising every code path
/// (coreset, fine-tuning, gating, consistency, distillation).
pub fn small_config(out: &Path) -> ExperimentConfig {
    let text = "train_per_class: 24\ntest_per_class: 6\ndim: 8\nn_tasks: 4\nbatch_size: 16\nmu: 2\n\
                epochs: 4\ndecay_epochs: 2,3\nfinetune_epochs: 1\nfinetune_decays: 0.5\nhidden: 16\n\
                coreset: 60\ntau_fm: 0.5\nseeds: 0\n";
    let mut cfg = ExperimentConfig::parse(text).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}
