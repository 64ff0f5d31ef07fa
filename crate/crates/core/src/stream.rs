//! Task sequences and labeled/unlabeled batch sampling under the four
//! unlabeled-distribution scenarios.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag, Rng};
use crate::taxonomy::{ClassId, Dataset, ParentRef, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    RandomClass,
    ParentClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnlabeledMode {
    Uniform,
    PositiveSuperclass,
    NegativeSuperclass,
    RandomSample,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::RandomClass => "random_class",
            TaskMode::ParentClass => "parent_class",
        }
    }
}

impl UnlabeledMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UnlabeledMode::Uniform => "uniform",
            UnlabeledMode::PositiveSuperclass => "positive_superclass",
            UnlabeledMode::NegativeSuperclass => "negative_superclass",
            UnlabeledMode::RandomSample => "random_sample",
        }
    }

    fn needs_parent_tasks(self) -> bool {
        matches!(
            self,
            UnlabeledMode::PositiveSuperclass | UnlabeledMode::NegativeSuperclass
        )
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for UnlabeledMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_class" => Ok(TaskMode::RandomClass),
            "parent_class" => Ok(TaskMode::ParentClass),
            other => Err(Error::Config(format!("unknown task mode '{other}'"))),
        }
    }
}

impl FromStr for UnlabeledMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(UnlabeledMode::Uniform),
            "positive_superclass" => Ok(UnlabeledMode::PositiveSuperclass),
            "negative_superclass" => Ok(UnlabeledMode::NegativeSuperclass),
            "random_sample" => Ok(UnlabeledMode::RandomSample),
            other => Err(Error::Config(format!("unknown unlabeled mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub task_mode: TaskMode,
    pub unlabeled_mode: UnlabeledMode,
    pub n_tasks: usize,
    /// Labeled batch size B.
    pub batch_size: usize,
    /// Unlabeled batch is `mu * batch_size` examples.
    pub mu: usize,
    pub random_sample_count: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            task_mode: TaskMode::RandomClass,
            unlabeled_mode: UnlabeledMode::Uniform,
            n_tasks: 5,
            batch_size: 64,
            mu: 2,
            random_sample_count: 20,
        }
    }
}

impl ScenarioConfig {
    pub fn unlabeled_batch_size(&self) -> usize {
        self.mu * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("labeled batch size must be >= 1".into()));
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("task count must be >= 1".into()));
        }
        if self.unlabeled_mode == UnlabeledMode::RandomSample && self.random_sample_count == 0 {
            return Err(Error::Config(
                "random_sample requires random_sample_count >= 1".into(),
            ));
        }
        if self.unlabeled_mode.needs_parent_tasks() && self.task_mode != TaskMode::ParentClass {
            return Err(Error::Config(format!(
                "unlabeled mode {} requires task mode parent_class (got {})",
                self.unlabeled_mode, self.task_mode
            )));
        }
        Ok(())
    }
}

/// Disjoint class sets, one per task, in presentation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    tasks: Vec<Vec<ClassId>>,
    /// Source parent of each task under `ParentClass` mode.
    parents: Option<Vec<ParentRef>>,
}

impl TaskSequence {
    pub fn from_tasks(tasks: Vec<Vec<ClassId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if t.is_empty() {
                return Err(Error::Config("empty task".into()));
            }
            for &c in t {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in two tasks")));
                }
            }
        }
        Ok(Self {
            tasks,
            parents: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of task `n` (1-based).
    pub fn task(&self, n: usize) -> &[ClassId] {
        &self.tasks[n - 1]
    }

    pub fn tasks(&self) -> &[Vec<ClassId>] {
        &self.tasks
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    /// Classes of tasks `1..=n`, in task order.
    pub fn prefix_classes(&self, n: usize) -> Vec<ClassId> {
        self.tasks[..n].iter().flatten().copied().collect()
    }

    pub fn parent_of_task(&self, n: usize) -> Option<ParentRef> {
        self.parents.as_ref().map(|p| p[n - 1])
    }
}

pub fn make_tasks(
    taxonomy: &Taxonomy,
    mode: TaskMode,
    n_tasks: usize,
    seed: u64,
) -> Result<TaskSequence> {
    let mut rng = derive_rng(seed, &[tag::TASKS]);
    match mode {
        TaskMode::RandomClass => {
            let m = taxonomy.n_classes();
            if n_tasks == 0 || m % n_tasks != 0 {
                return Err(Error::Config(format!(
                    "random_class needs a task count dividing {m}, got {n_tasks}"
                )));
            }
            let mut classes: Vec<ClassId> = (0..m as ClassId).collect();
            classes.shuffle(&mut rng);
            let per = m / n_tasks;
            Ok(TaskSequence {
                tasks: classes.chunks(per).map(<[ClassId]>::to_vec).collect(),
                parents: None,
            })
        }
        TaskMode::ParentClass => {
            let n_parents = taxonomy.n_parents();
            if n_tasks != n_parents {
                return Err(Error::Config(format!(
                    "parent_class needs exactly {n_parents} tasks, got {n_tasks}"
                )));
            }
            let mut parents: Vec<ParentRef> = taxonomy.parents().map(|(r, _)| r).collect();
            parents.shuffle(&mut rng);
            let tasks = parents
                .iter()
                .map(|&r| taxonomy.parent(r).classes.clone())
                .collect();
            Ok(TaskSequence {
                tasks,
                parents: Some(parents),
            })
        }
    }
}

/// Class ids that feed the unlabeled stream during task `task_index` (1-based).
pub fn unlabeled_class_pool(
    taxonomy: &Taxonomy,
    sequence: &TaskSequence,
    task_index: usize,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<Vec<ClassId>> {
    if task_index == 0 || task_index > sequence.len() {
        return Err(Error::Contract(format!(
            "task index {task_index} outside 1..={}",
            sequence.len()
        )));
    }
    let current_parent = || {
        sequence.parent_of_task(task_index).ok_or_else(|| {
            Error::Config(format!(
                "{} requires parent_class tasks",
                config.unlabeled_mode
            ))
        })
    };
    let mut rng = derive_rng(seed, &[tag::POOL, task_index as u64]);
    match config.unlabeled_mode {
        UnlabeledMode::Uniform => Ok((0..taxonomy.n_classes() as ClassId).collect()),
        UnlabeledMode::PositiveSuperclass => {
            let p = current_parent()?;
            Ok(taxonomy.superclass_classes(p.superclass))
        }
        UnlabeledMode::NegativeSuperclass => {
            let p = current_parent()?;
            let others: Vec<usize> = (0..taxonomy.superclasses().len())
                .filter(|&s| s != p.superclass)
                .collect();
            let &chosen = others.choose(&mut rng).ok_or_else(|| {
                Error::Config("negative_superclass needs at least two super-classes".into())
            })?;
            Ok(taxonomy.superclass_classes(chosen))
        }
        UnlabeledMode::RandomSample => {
            let m = taxonomy.n_classes();
            if config.random_sample_count > m {
                return Err(Error::Config(format!(
                    "random_sample_count {} exceeds class count {m}",
                    config.random_sample_count
                )));
            }
            let mut pool: Vec<ClassId> = index::sample(&mut rng, m, config.random_sample_count)
                .into_iter()
                .map(|c| c as ClassId)
                .collect();
            pool.sort_unstable();
            Ok(pool)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<ClassId>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

static LIVE_UNLABELED: AtomicUsize = AtomicUsize::new(0);

/// Number of `UnlabeledBatch` values currently alive in this process.
pub fn live_unlabeled_batches() -> usize {
    LIVE_UNLABELED.load(Ordering::SeqCst)
}

/// A batch from the unlabeled stream. The true labels ride along only for
/// audits; training code works with [`UnlabeledBatch::features`].
#[derive(Debug, PartialEq)]
pub struct UnlabeledBatch {
    dim: usize,
    features: Vec<f64>,
    hidden_labels: Vec<ClassId>,
}

impl UnlabeledBatch {
    fn new(dim: usize, features: Vec<f64>, hidden_labels: Vec<ClassId>) -> Self {
        LIVE_UNLABELED.fetch_add(1, Ordering::SeqCst);
        Self {
            dim,
            features,
            hidden_labels,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.hidden_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_labels.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Ground truth for test-only auditing.
    pub fn audit_labels(&self) -> &[ClassId] {
        &self.hidden_labels
    }
}

impl Clone for UnlabeledBatch {
    fn clone(&self) -> Self {
        Self::new(self.dim, self.features.clone(), self.hidden_labels.clone())
    }
}

impl Drop for UnlabeledBatch {
    fn drop(&mut self) {
        LIVE_UNLABELED.fetch_sub(1, Ordering::SeqCst);
    }
}

/// `size` distinct draws when the pool is large enough, otherwise draws
/// with replacement.
pub fn draw_indices(pool: &[usize], size: usize, rng: &mut Rng) -> Vec<usize> {
    if size <= pool.len() {
        index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// Samples a labeled batch from explicit dataset indices (task data mixed
/// with coreset entries, for example).
pub fn sample_labeled_from(
    dataset: &Dataset,
    pool: &[usize],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<LabeledBatch> {
    if pool.is_empty() {
        return Err(Error::Data("empty labeled pool".into()));
    }
    let picks = draw_indices(pool, batch_size, rng);
    Ok(LabeledBatch {
        dim: dataset.dim(),
        features: dataset.gather(&picks),
        labels: picks.iter().map(|&i| dataset.label(i)).collect(),
    })
}

pub fn sample_labeled_batch(
    dataset: &Dataset,
    task: &[ClassId],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<LabeledBatch> {
    if let Some(&c) = task.iter().find(|&&c| dataset.train_indices(c).is_empty()) {
        return Err(Error::Data(format!("no training examples for class {c}")));
    }
    sample_labeled_from(dataset, &dataset.train_pool(task), batch_size, rng)
}

pub fn sample_unlabeled_from(
    dataset: &Dataset,
    pool: &[usize],
    size: usize,
    rng: &mut Rng,
) -> Result<UnlabeledBatch> {
    if pool.is_empty() {
        return Err(Error::Data("empty unlabeled pool".into()));
    }
    let picks = draw_indices(pool, size, rng);
    Ok(UnlabeledBatch::new(
        dataset.dim(),
        dataset.gather(&picks),
        picks.iter().map(|&i| dataset.label(i)).collect(),
    ))
}

pub fn sample_unlabeled_batch(
    dataset: &Dataset,
    pool: &[ClassId],
    size: usize,
    rng: &mut Rng,
) -> Result<UnlabeledBatch> {
    sample_unlabeled_from(dataset, &dataset.train_pool(pool), size, rng)
}
