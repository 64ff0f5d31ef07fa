//! The continual training loop: per-task SGD over labeled and unlabeled
//! streams, coreset rehearsal, final-layer fine-tuning, snapshots, OoD
//! detector retraining, and evaluation after every task.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{objective, prepare_targets, LossBreakdown, ObjectiveConfig, StepBatch};
use crate::metrics::{task_accuracy, OracleCache, ResultsTable};
use crate::model::{Augmentation, IncrementalClassifier, Snapshot};
use crate::ood::{auroc, train_detector, DetectorConfig, OodDetector};
use crate::optim::{Sgd, StepSchedule};
use crate::rng::{derive_rng, derive_seed, tag, Rng};
use crate::stream::{
    live_unlabeled_batches, sample_labeled_from, sample_unlabeled_from, unlabeled_class_pool,
    ScenarioConfig, TaskSequence,
};
use crate::taxonomy::{ClassId, Dataset, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DistillMatch,
    /// Labeled data (and coreset) only.
    Base,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::DistillMatch => "distillmatch",
            Method::Base => "base",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distillmatch" => Ok(Method::DistillMatch),
            "base" => Ok(Method::Base),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected distillmatch or base)"
            ))),
        }
    }
}

/// Single-component removals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_pl: bool,
    pub no_w: bool,
    pub no_ul: bool,
    pub no_dst: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.no_pl || self.no_w || self.no_ul || self.no_dst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<f64>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_ucl: f64,
    pub lambda_dst: f64,
    pub temperature: f64,
    pub tau_fm: f64,
    /// Target TPR for the OoD threshold; `None` picks 0.05 with a coreset
    /// and 0.5 without.
    pub tpr: Option<f64>,
    pub epsilon_ood: f64,
    /// Coreset budget in examples.
    pub coreset: usize,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_decays: Vec<f64>,
    pub hidden: Vec<usize>,
    pub ood_holdout: f64,
    /// Base learning rate of the detector; the quotient logits diverge at
    /// the classifier's 0.1.
    pub ood_lr: f64,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.1,
            decay_epochs: vec![12.0, 16.0, 18.0],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_ucl: 1.0,
            lambda_dst: 1.0,
            temperature: 2.0,
            tau_fm: 0.9,
            tpr: None,
            epsilon_ood: 0.002,
            coreset: 0,
            finetune: true,
            finetune_epochs: 2,
            finetune_decays: vec![1.0, 1.5],
            hidden: vec![64, 64],
            ood_holdout: 0.5,
            ood_lr: 0.01,
            augmentation: Augmentation::default(),
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 200 epochs, decays at 120/160/180,
    /// 20 fine-tune epochs with decays at 10/15.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 200,
            decay_epochs: vec![120.0, 160.0, 180.0],
            finetune_epochs: 20,
            finetune_decays: vec![10.0, 15.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("ood_lr", self.ood_lr),
            ("decay_factor", self.decay_factor),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_ucl", self.lambda_ucl),
            ("lambda_dst", self.lambda_dst),
            ("epsilon_ood", self.epsilon_ood),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        check_decays("decay_epochs", &self.decay_epochs, self.epochs)?;
        if self.finetune && self.coreset > 0 {
            if self.finetune_epochs >= self.epochs {
                return Err(Error::Config(format!(
                    "finetune_epochs ({}) must be below epochs ({})",
                    self.finetune_epochs, self.epochs
                )));
            }
            check_decays("finetune_decays", &self.finetune_decays, self.finetune_epochs.max(1))?;
        }
        if !(0.0..=1.0).contains(&self.tau_fm) {
            return Err(Error::Config(format!("tau_fm must lie in [0,1], got {}", self.tau_fm)));
        }
        if let Some(t) = self.tpr {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("tpr must lie in (0,1], got {t}")));
            }
        }
        if !(self.ood_holdout > 0.0 && self.ood_holdout < 1.0) {
            return Err(Error::Config(format!(
                "ood_holdout must lie in (0,1), got {}",
                self.ood_holdout
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        let a = &self.augmentation;
        if a.sigma_weak < 0.0 || a.sigma_strong < 0.0 || !(0.0..=1.0).contains(&a.drop_fraction) {
            return Err(Error::Config("invalid augmentation parameters".into()));
        }
        Ok(())
    }

    pub fn tpr_value(&self) -> f64 {
        self.tpr
            .unwrap_or(if self.coreset > 0 { 0.05 } else { 0.5 })
    }

    /// Epochs of the main phase; the fine-tune phase takes the tail.
    pub fn main_epochs(&self) -> usize {
        if self.finetune && self.coreset > 0 {
            self.epochs - self.finetune_epochs
        } else {
            self.epochs
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base: self.lr,
            milestones: self.decay_epochs.clone(),
            factor: self.decay_factor,
        }
    }

    pub fn finetune_schedule(&self) -> StepSchedule {
        StepSchedule {
            base: 0.1 * self.lr,
            milestones: self.finetune_decays.clone(),
            factor: self.decay_factor,
        }
    }

    pub fn objective(&self, method: Method, ablation: Ablation) -> ObjectiveConfig {
        let base = ObjectiveConfig {
            lambda_ucl: self.lambda_ucl,
            lambda_dst: self.lambda_dst,
            temperature: self.temperature,
            tau_fm: self.tau_fm,
            ..ObjectiveConfig::default()
        };
        match method {
            Method::Base => ObjectiveConfig {
                pseudo_labels: false,
                consistency: false,
                distillation: false,
                ..base
            },
            Method::DistillMatch => ObjectiveConfig {
                pseudo_labels: !ablation.no_pl,
                class_balance: !ablation.no_w,
                consistency: !ablation.no_ul,
                distillation: !ablation.no_dst,
                ..base
            },
        }
    }

    pub fn detector_config(&self, batch_size: usize) -> DetectorConfig {
        DetectorConfig {
            hidden: self.hidden.clone(),
            epochs: self.main_epochs(),
            batch_size,
            schedule: StepSchedule {
                base: self.ood_lr,
                ..self.schedule()
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epsilon: self.epsilon_ood,
            split_fraction: self.ood_holdout,
        }
    }
}

fn check_decays(name: &str, decays: &[f64], limit: usize) -> Result<()> {
    if decays.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{name} must be strictly increasing")));
    }
    if decays.iter().any(|&d| !(d >= 0.0 && d < limit as f64)) {
        return Err(Error::Config(format!("{name} must lie in [0, {limit})")));
    }
    Ok(())
}

/// Main-phase learning rate at a (fractional) epoch.
pub fn lr_schedule(epoch: f64, config: &TrainConfig) -> f64 {
    config.schedule().lr(epoch)
}

/// Fine-tune learning rate, `epoch` counted from the start of fine-tuning.
pub fn finetune_lr(epoch: f64, config: &TrainConfig) -> f64 {
    config.finetune_schedule().lr(epoch)
}

/// Stored labeled examples (dataset indices) of past classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Coreset {
    budget: usize,
    entries: BTreeMap<ClassId, Vec<usize>>,
}

impl Coreset {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            entries: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        self.entries.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.values().flatten().copied().collect()
    }

    /// Rebalances over every stored class plus `new_classes`: each class
    /// gets `floor(budget/K)` slots and a random `budget mod K` of them one
    /// more. Old classes evict uniformly at random; new classes draw
    /// uniformly from their training data.
    pub fn update(&mut self, dataset: &Dataset, new_classes: &[ClassId], rng: &mut Rng) {
        if self.budget == 0 {
            self.entries.clear();
            return;
        }
        let mut classes: Vec<ClassId> = self.entries.keys().copied().collect();
        classes.extend(new_classes.iter().filter(|c| !self.entries.contains_key(c)));
        classes.sort_unstable();
        classes.dedup();
        let k = classes.len();
        if k == 0 {
            return;
        }
        let mut order = classes.clone();
        order.shuffle(rng);
        let extra: std::collections::BTreeSet<ClassId> =
            order[..self.budget % k].iter().copied().collect();
        for &c in &classes {
            let quota = self.budget / k + usize::from(extra.contains(&c));
            let slot = self.entries.entry(c).or_default();
            if slot.is_empty() {
                let mut pool = dataset.train_indices(c).to_vec();
                pool.shuffle(rng);
                pool.truncate(quota);
                pool.sort_unstable();
                *slot = pool;
            } else if slot.len() > quota {
                slot.shuffle(rng);
                slot.truncate(quota);
                slot.sort_unstable();
            }
        }
        self.entries.retain(|_, v| !v.is_empty());
    }
}

pub fn update_coreset(
    mut coreset: Coreset,
    dataset: &Dataset,
    new_classes: &[ClassId],
    rng: &mut Rng,
) -> Coreset {
    coreset.update(dataset, new_classes, rng);
    coreset
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Accuracies and AUROC measured after one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    /// Task-n test data, task-n logits only.
    pub local: Vec<f64>,
    /// Task-n test data, logits of tasks 1..n.
    pub global: Vec<f64>,
    /// Test data of tasks 1..n, logits of tasks 1..n.
    pub prefix: Vec<f64>,
    pub auroc: Option<f64>,
}

/// Everything fixed for the duration of one run.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub dataset: &'a Dataset,
    pub taxonomy: &'a Taxonomy,
    pub sequence: &'a TaskSequence,
    pub scenario: &'a ScenarioConfig,
    pub train: &'a TrainConfig,
    pub method: Method,
    pub ablation: Ablation,
    pub seed: u64,
}

impl RunContext<'_> {
    pub fn objective(&self) -> ObjectiveConfig {
        self.train.objective(self.method, self.ablation)
    }

    fn uses_unlabeled(&self) -> bool {
        let o = self.objective();
        o.pseudo_labels || o.consistency || o.distillation
    }
}

/// Live state between tasks. `completed` counts finished tasks; while task
/// `completed + 1` trains, `snapshot` is the end-of-task-`completed` model.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: IncrementalClassifier,
    pub snapshot: Option<Snapshot>,
    pub detector: Option<OodDetector>,
    pub coreset: Coreset,
    pub completed: usize,
    pub steps: Vec<StepLog>,
    pub evals: Vec<TaskEval>,
    /// Parameter hash of the teacher used while training each task.
    pub teacher_hashes: Vec<Option<String>>,
    /// Parameter hash of each end-of-task snapshot.
    pub snapshot_hashes: Vec<String>,
    /// Largest number of live unlabeled batches seen at the start of a step.
    pub max_live_unlabeled: usize,
}

impl RunState {
    pub fn new(ctx: &RunContext<'_>) -> Self {
        let mut rng = derive_rng(ctx.seed, &[tag::INIT]);
        Self {
            model: IncrementalClassifier::new(ctx.dataset.dim(), &ctx.train.hidden, &mut rng),
            snapshot: None,
            detector: None,
            coreset: Coreset::new(ctx.train.coreset),
            completed: 0,
            steps: Vec::new(),
            evals: Vec::new(),
            teacher_hashes: Vec::new(),
            snapshot_hashes: Vec::new(),
            max_live_unlabeled: 0,
        }
    }
}

/// Trains task `completed + 1` and evaluates after it.
pub fn train_task(state: &mut RunState, ctx: &RunContext<'_>) -> Result<()> {
    let n = state.completed + 1;
    if n > ctx.sequence.len() {
        return Err(Error::Contract(format!("all {} tasks already trained", ctx.sequence.len())));
    }
    let classes = ctx.sequence.task(n);
    let obj = ctx.objective();
    let train = ctx.train;
    let b = ctx.scenario.batch_size;

    let mut init_rng = derive_rng(ctx.seed, &[tag::INIT, n as u64]);
    state.model.expand_head(classes, &mut init_rng)?;

    let snapshot = match (&state.snapshot, n) {
        (_, 1) => None,
        (Some(s), _) => Some(s.clone()),
        (None, _) => {
            return Err(Error::Contract(format!("task {n} needs the end-of-task-{} snapshot", n - 1)))
        }
    };
    let gating = obj.pseudo_labels && n >= 2;
    if gating && state.detector.is_none() {
        return Err(Error::Contract(format!(
            "task {n}: OoD gating is enabled but no detector was trained after task {}",
            n - 1
        )));
    }
    state.teacher_hashes.push(snapshot.as_ref().map(Snapshot::param_hash));

    let mut labeled_pool = ctx.dataset.train_pool(classes);
    labeled_pool.extend(state.coreset.indices());
    if labeled_pool.is_empty() {
        return Err(Error::Data(format!("task {n} has no labeled training data")));
    }
    let unlabeled_pool = if ctx.uses_unlabeled() {
        let pool_classes = unlabeled_class_pool(ctx.taxonomy, ctx.sequence, n, ctx.scenario, ctx.seed)?;
        ctx.dataset.train_pool(&pool_classes)
    } else {
        Vec::new()
    };
    let n_u = ctx.scenario.unlabeled_batch_size();

    let mut rng = derive_rng(ctx.seed, &[tag::TRAIN, n as u64]);
    let steps_per_epoch = labeled_pool.len().div_ceil(b);
    let schedule = train.schedule();
    let mut sgd = Sgd::new(state.model.net().n_params(), train.momentum, train.weight_decay);
    for epoch in 0..train.main_epochs() {
        for s in 0..steps_per_epoch {
            state.max_live_unlabeled = state.max_live_unlabeled.max(live_unlabeled_batches());
            let lr = schedule.lr(epoch as f64 + s as f64 / steps_per_epoch as f64);
            let labeled = sample_labeled_from(ctx.dataset, &labeled_pool, b, &mut rng)?;
            let unlabeled = if unlabeled_pool.is_empty() {
                None
            } else {
                Some(sample_unlabeled_from(ctx.dataset, &unlabeled_pool, n_u, &mut rng)?)
            };
            let raw_u: &[f64] = unlabeled.as_ref().map_or(&[], |u| u.features());
            let batch = StepBatch::augment(
                &state.model,
                &labeled.features,
                &labeled.labels,
                raw_u,
                &train.augmentation,
                &mut rng,
            )?;
            let gate = match (&state.detector, gating && !raw_u.is_empty()) {
                (Some(det), true) => Some(det.accept(raw_u)?),
                _ => None,
            };
            drop(unlabeled);
            let targets = prepare_targets(&state.model, snapshot.as_ref(), gate.as_deref(), &batch, &obj)?;
            let (loss, grad) = objective(&state.model, &batch, &targets, &obj);
            if !loss.l_total.is_finite() {
                return Err(Error::Data(format!("task {n}: loss diverged at step {}", state.steps.len())));
            }
            sgd.step(state.model.net_mut().params_mut(), &grad, lr);
            state.steps.push(StepLog {
                task: n,
                step: state.steps.len(),
                loss,
            });
        }
    }
    state.model.mark_trained(n);

    let mut core_rng = derive_rng(ctx.seed, &[tag::CORESET, n as u64]);
    state.coreset.update(ctx.dataset, classes, &mut core_rng);
    if train.finetune && !state.coreset.is_empty() {
        let mut ft_rng = derive_rng(ctx.seed, &[tag::FINETUNE, n as u64]);
        finetune_last_layer(&mut state.model, ctx.dataset, &state.coreset.indices(), train, b, &mut ft_rng)?;
    }

    let snap = state.model.snapshot()?;
    state.snapshot_hashes.push(snap.param_hash());
    state.snapshot = Some(snap);

    let seen = ctx.sequence.prefix_classes(n);
    let det_cfg = train.detector_config(b);
    let (mut detector, split) =
        train_detector(ctx.dataset, &seen, &det_cfg, derive_seed(ctx.seed, &[tag::DETECTOR, n as u64]))?;
    detector.calibrate(&ctx.dataset.gather(&split.holdout), train.tpr_value())?;

    let mut eval = evaluate(&state.model, ctx.dataset, ctx.sequence, n)?;
    eval.auroc = task_auroc(&detector, ctx.dataset, ctx.sequence, n)?;
    state.detector = Some(detector);
    state.evals.push(eval);
    state.completed = n;
    Ok(())
}

/// Class-balanced cross-entropy on the coreset, output layer only.
fn finetune_last_layer(
    model: &mut IncrementalClassifier,
    dataset: &Dataset,
    pool: &[usize],
    train: &TrainConfig,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    let obj = ObjectiveConfig {
        temperature: train.temperature,
        ..ObjectiveConfig::supervised_only()
    };
    let range = model.net().output_layer_range();
    let mut sgd = Sgd::new(range.len(), train.momentum, train.weight_decay);
    let schedule = train.finetune_schedule();
    let steps = pool.len().div_ceil(batch_size);
    for epoch in 0..train.finetune_epochs {
        for s in 0..steps {
            let lr = schedule.lr(epoch as f64 + s as f64 / steps as f64);
            let lb = sample_labeled_from(dataset, pool, batch_size, rng)?;
            let batch = StepBatch::augment(model, &lb.features, &lb.labels, &[], &train.augmentation, rng)?;
            let targets = prepare_targets(model, None, None, &batch, &obj)?;
            let (_, grad) = objective(model, &batch, &targets, &obj);
            sgd.step(&mut model.net_mut().params_mut()[range.clone()], &grad[range.clone()], lr);
        }
    }
    Ok(())
}

/// Trains a fresh model jointly on the labeled data of `classes` with the
/// main schedule (no continual constraint, no unlabeled data).
pub fn fit_supervised(
    dataset: &Dataset,
    classes: &[ClassId],
    train: &TrainConfig,
    batch_size: usize,
    seed: u64,
) -> Result<IncrementalClassifier> {
    let mut rng = derive_rng(seed, &[tag::ORACLE]);
    let mut model = IncrementalClassifier::new(dataset.dim(), &train.hidden, &mut rng);
    model.expand_head(classes, &mut rng)?;
    let pool = dataset.train_pool(classes);
    if pool.is_empty() {
        return Err(Error::Data("no labeled data to fit".into()));
    }
    let obj = ObjectiveConfig {
        temperature: train.temperature,
        ..ObjectiveConfig::supervised_only()
    };
    let schedule = train.schedule();
    let mut sgd = Sgd::new(model.net().n_params(), train.momentum, train.weight_decay);
    let steps = pool.len().div_ceil(batch_size);
    for epoch in 0..train.epochs {
        for s in 0..steps {
            let lr = schedule.lr(epoch as f64 + s as f64 / steps as f64);
            let lb = sample_labeled_from(dataset, &pool, batch_size, &mut rng)?;
            let batch = StepBatch::augment(&model, &lb.features, &lb.labels, &[], &train.augmentation, &mut rng)?;
            let targets = prepare_targets(&model, None, None, &batch, &obj)?;
            let (_, grad) = objective(&model, &batch, &targets, &obj);
            sgd.step(model.net_mut().params_mut(), &grad, lr);
        }
    }
    model.mark_trained(1);
    Ok(model)
}

fn accuracy_on(
    model: &IncrementalClassifier,
    dataset: &Dataset,
    test: &[usize],
    range: std::ops::Range<usize>,
) -> Result<f64> {
    let labels: Vec<ClassId> = test.iter().map(|&i| dataset.label(i)).collect();
    let preds = model.classify(&dataset.gather(test), test.len(), range);
    task_accuracy(&preds, &labels)
}

/// Local, global, and prefix accuracies after task `i` on the test split.
pub fn evaluate(
    model: &IncrementalClassifier,
    dataset: &Dataset,
    sequence: &TaskSequence,
    i: usize,
) -> Result<TaskEval> {
    let mut eval = TaskEval {
        local: Vec::with_capacity(i),
        global: Vec::with_capacity(i),
        prefix: Vec::with_capacity(i),
        auroc: None,
    };
    for n in 1..=i {
        let test = dataset.test_pool(sequence.task(n));
        eval.local.push(accuracy_on(model, dataset, &test, model.task_range(n, n)?)?);
        eval.global.push(accuracy_on(model, dataset, &test, model.task_range(1, n)?)?);
        let prefix_test = dataset.test_pool(&sequence.prefix_classes(n));
        eval.prefix.push(accuracy_on(model, dataset, &prefix_test, model.task_range(1, n)?)?);
    }
    Ok(eval)
}

/// Seen-class test data against not-yet-seen test data; `None` once every
/// task has been seen.
fn task_auroc(
    detector: &OodDetector,
    dataset: &Dataset,
    sequence: &TaskSequence,
    n: usize,
) -> Result<Option<f64>> {
    let unseen: Vec<ClassId> = sequence.tasks()[n..].iter().flatten().copied().collect();
    if unseen.is_empty() {
        return Ok(None);
    }
    let id = detector.score_batch(&dataset.gather(&dataset.test_pool(&sequence.prefix_classes(n))));
    let ood = detector.score_batch(&dataset.gather(&dataset.test_pool(&unseen)));
    if id.is_empty() || ood.is_empty() {
        return Ok(None);
    }
    auroc(&id, &ood).map(Some)
}

/// Result of a full task sequence.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: ResultsTable,
    pub state: RunState,
}

/// Trains tasks 1..N in order and assembles the results table, using
/// `oracle` for the offline-oracle normalizers.
pub fn run_sequence(ctx: &RunContext<'_>, oracle: &mut OracleCache) -> Result<RunOutcome> {
    ctx.scenario.validate()?;
    ctx.train.validate()?;
    let mut state = RunState::new(ctx);
    for _ in 0..ctx.sequence.len() {
        train_task(&mut state, ctx)?;
    }
    let oracle_acc = (1..=ctx.sequence.len())
        .map(|n| oracle.get(ctx.dataset, ctx.sequence, n, ctx.train, ctx.scenario.batch_size, ctx.seed))
        .collect::<Result<Vec<_>>>()?;
    let table = ResultsTable::from_evals(ctx.sequence.task_sizes(), &state.evals, oracle_acc)?;
    Ok(RunOutcome { table, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{make_tasks, TaskMode, UnlabeledMode};
    use crate::taxonomy::{synthetic_dataset, Taxonomy};

    #[test]
    fn schedule_examples() {
        let long = TrainConfig::paper_scale();
        assert_eq!(lr_schedule(0.0, &long), 0.1);
        assert!((lr_schedule(130.0, &long) - 0.01).abs() < 1e-15);
        assert!((finetune_lr(0.0, &long) - 0.01).abs() < 1e-15);
        assert!((finetune_lr(12.0, &long) - 0.001).abs() < 1e-15);
        let desk = TrainConfig::default();
        assert!((lr_schedule(12.5, &desk) - 0.01).abs() < 1e-15);
        assert!((finetune_lr(1.5, &desk) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::paper_scale().validate().unwrap();
        let bad = TrainConfig {
            decay_epochs: vec![12.0, 12.0],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            decay_epochs: vec![25.0],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tpr_default_follows_coreset() {
        assert_eq!(TrainConfig::default().tpr_value(), 0.5);
        let c = TrainConfig {
            coreset: 400,
            ..TrainConfig::default()
        };
        assert_eq!(c.tpr_value(), 0.05);
        assert_eq!(c.main_epochs(), 18);
        assert_eq!(TrainConfig::paper_scale().main_epochs(), 200);
    }

    fn dataset() -> (Taxonomy, Dataset) {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 12, 2, 4, 0).unwrap();
        (t, d)
    }

    #[test]
    fn coreset_budget_zero_stays_empty() {
        let (_, d) = dataset();
        let mut rng = derive_rng(0, &[]);
        let c = update_coreset(Coreset::new(0), &d, &[0, 1, 2], &mut rng);
        assert!(c.is_empty());
    }

    #[test]
    fn coreset_balanced_partition() {
        let (_, d) = dataset();
        let mut rng = derive_rng(0, &[]);
        let c = update_coreset(Coreset::new(10), &d, &[3, 7, 9], &mut rng);
        let mut counts: Vec<usize> = c.counts().values().copied().collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![3, 3, 4]);
        for (&class, _) in c.counts().iter() {
            for i in &c.entries[&class] {
                assert_eq!(d.label(*i), class);
            }
        }
    }

    #[test]
    fn coreset_shrinks_old_classes_when_new_ones_arrive() {
        let (_, d) = dataset();
        let mut rng = derive_rng(1, &[]);
        let mut c = Coreset::new(12);
        c.update(&d, &[0, 1], &mut rng);
        assert_eq!(c.counts().values().copied().collect::<Vec<_>>(), vec![6, 6]);
        let before = c.entries[&0].clone();
        c.update(&d, &[2, 3, 4, 5], &mut rng);
        assert_eq!(c.len(), 12);
        assert!(c.counts().values().all(|&v| v == 2));
        assert!(c.entries[&0].iter().all(|i| before.contains(i)));
    }

    #[test]
    fn coreset_twenty_classes() {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 30, 1, 2, 0).unwrap();
        let mut rng = derive_rng(0, &[]);
        let classes: Vec<ClassId> = (0..20).collect();
        let c = update_coreset(Coreset::new(400), &d, &classes, &mut rng);
        assert!(c.counts().values().all(|&v| v == 20));
    }

    fn tiny_ctx_parts() -> (Taxonomy, Dataset, TaskSequence, ScenarioConfig, TrainConfig) {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 10, 4, 6, 3).unwrap();
        let scenario = ScenarioConfig {
            task_mode: TaskMode::RandomClass,
            unlabeled_mode: UnlabeledMode::Uniform,
            n_tasks: 5,
            batch_size: 16,
            mu: 1,
            random_sample_count: 20,
        };
        let seq = make_tasks(&t, scenario.task_mode, 5, 9).unwrap();
        let seq = TaskSequence::from_tasks(seq.tasks()[..2].to_vec()).unwrap();
        let train = TrainConfig {
            epochs: 2,
            decay_epochs: vec![1.0],
            finetune_epochs: 1,
            finetune_decays: vec![],
            hidden: vec![8],
            coreset: 20,
            ..TrainConfig::default()
        };
        (t, d, seq, scenario, train)
    }

    #[test]
    fn snapshot_is_the_previous_task_model() {
        let (t, d, seq, scenario, train) = tiny_ctx_parts();
        let ctx = RunContext {
            dataset: &d,
            taxonomy: &t,
            sequence: &seq,
            scenario: &scenario,
            train: &train,
            method: Method::DistillMatch,
            ablation: Ablation::default(),
            seed: 5,
        };
        let mut state = RunState::new(&ctx);
        train_task(&mut state, &ctx).unwrap();
        assert_eq!(state.teacher_hashes, vec![None]);
        let end1 = state.model.param_hash();
        train_task(&mut state, &ctx).unwrap();
        assert_eq!(state.teacher_hashes[1].as_deref(), Some(end1.as_str()));
        assert_eq!(state.snapshot_hashes[0], end1);
        assert_eq!(state.snapshot.as_ref().unwrap().param_hash(), state.model.param_hash());
        assert!(state.coreset.len() <= 20);
        assert_eq!(state.evals.len(), 2);
        assert!(state.evals[0].auroc.is_some());
        assert_eq!(state.evals[1].auroc, None);
    }

    #[test]
    fn gating_without_a_detector_is_a_contract_error() {
        let (t, d, seq, scenario, train) = tiny_ctx_parts();
        let ctx = RunContext {
            dataset: &d,
            taxonomy: &t,
            sequence: &seq,
            scenario: &scenario,
            train: &train,
            method: Method::DistillMatch,
            ablation: Ablation::default(),
            seed: 5,
        };
        let mut state = RunState::new(&ctx);
        train_task(&mut state, &ctx).unwrap();
        state.detector = None;
        assert!(matches!(train_task(&mut state, &ctx), Err(Error::Contract(_))));
    }

    #[test]
    fn first_task_without_unlabeled_data_is_supervised() {
        let (t, d, seq, scenario, train) = tiny_ctx_parts();
        let ctx = RunContext {
            dataset: &d,
            taxonomy: &t,
            sequence: &seq,
            scenario: &scenario,
            train: &train,
            method: Method::Base,
            ablation: Ablation::default(),
            seed: 1,
        };
        let mut state = RunState::new(&ctx);
        train_task(&mut state, &ctx).unwrap();
        train_task(&mut state, &ctx).unwrap();
        assert!(state
            .steps
            .iter()
            .all(|s| s.loss.l_pl == 0.0 && s.loss.l_dst == 0.0 && s.loss.l_ul == 0.0));
    }
}
