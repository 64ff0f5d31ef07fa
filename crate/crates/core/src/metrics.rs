//! Accuracy matrices and the summary metrics computed from them: Ω
//! (oracle-normalized average accuracy), BWT, FGT, plus the cached offline
//! oracle that supplies Ω's normalizers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::stream::TaskSequence;
use crate::taxonomy::{ClassId, Dataset, Split};
use crate::trainer::{fit_supervised, TaskEval, TrainConfig};

/// Fraction of positions where `predictions` equals `labels`.
pub fn task_accuracy(predictions: &[ClassId], labels: &[ClassId]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy on an empty test set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Lower-triangular accuracy matrices for tasks `1..=N`; row `i - 1` holds
/// entries `n = 1..=i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    /// Number of classes in each task.
    pub task_sizes: Vec<usize>,
    /// `A_{i,n}`: task-n data, task-n logits.
    pub local: Vec<Vec<f64>>,
    /// `R_{i,n}`: task-n data, logits of tasks 1..n.
    pub global: Vec<Vec<f64>>,
    /// `A_{i,1:n}`: data of tasks 1..n, logits of tasks 1..n.
    pub prefix: Vec<Vec<f64>>,
    /// Offline oracle accuracy on tasks 1..n, one per prefix.
    pub oracle: Vec<f64>,
    pub auroc: Vec<Option<f64>>,
}

impl ResultsTable {
    pub fn new(
        task_sizes: Vec<usize>,
        local: Vec<Vec<f64>>,
        global: Vec<Vec<f64>>,
        prefix: Vec<Vec<f64>>,
        oracle: Vec<f64>,
        auroc: Vec<Option<f64>>,
    ) -> Result<Self> {
        let n = task_sizes.len();
        if n == 0 {
            return Err(Error::Contract("results table needs at least one task".into()));
        }
        if task_sizes.contains(&0) {
            return Err(Error::Contract("task sizes must be positive".into()));
        }
        for (name, m) in [("local", &local), ("global", &global), ("prefix", &prefix)] {
            if m.len() != n {
                return Err(Error::Contract(format!("{name} matrix has {} rows, expected {n}", m.len())));
            }
            for (i, row) in m.iter().enumerate() {
                if row.len() != i + 1 {
                    return Err(Error::Contract(format!(
                        "{name} row {} has {} entries, expected {}",
                        i + 1,
                        row.len(),
                        i + 1
                    )));
                }
                if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Contract(format!("{name} entry {v} outside [0,1]")));
                }
            }
        }
        if oracle.len() > n || oracle.iter().any(|&o| !(o > 0.0 && o <= 1.0)) {
            return Err(Error::Contract("oracle accuracies must lie in (0,1], one per task".into()));
        }
        if auroc.len() != n {
            return Err(Error::Contract(format!("{} AUROC entries for {n} tasks", auroc.len())));
        }
        Ok(Self {
            task_sizes,
            local,
            global,
            prefix,
            oracle,
            auroc,
        })
    }

    pub fn from_evals(task_sizes: Vec<usize>, evals: &[TaskEval], oracle: Vec<f64>) -> Result<Self> {
        Self::new(
            task_sizes,
            evals.iter().map(|e| e.local.clone()).collect(),
            evals.iter().map(|e| e.global.clone()).collect(),
            evals.iter().map(|e| e.prefix.clone()).collect(),
            oracle,
            evals.iter().map(|e| e.auroc).collect(),
        )
    }

    pub fn n_tasks(&self) -> usize {
        self.task_sizes.len()
    }

    /// The first `t` tasks as a table of their own.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.n_tasks() {
            return Err(Error::Contract(format!("cannot truncate to {t} tasks")));
        }
        Self::new(
            self.task_sizes[..t].to_vec(),
            self.local[..t].to_vec(),
            self.global[..t].to_vec(),
            self.prefix[..t].to_vec(),
            self.oracle[..t.min(self.oracle.len())].to_vec(),
            self.auroc[..t].to_vec(),
        )
    }

    /// CSV with one row per `(i, n)`, `n <= i`. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,n,local_acc,global_acc,prefix_acc,oracle_acc,task_size,auroc\n");
        for i in 0..self.n_tasks() {
            for n in 0..=i {
                let oracle = self.oracle.get(n).map(|v| v.to_string()).unwrap_or_default();
                let auroc = self.auroc[i].map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    i + 1,
                    n + 1,
                    self.local[i][n],
                    self.global[i][n],
                    self.prefix[i][n],
                    oracle,
                    self.task_sizes[n],
                    auroc
                );
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::parse("accuracy csv", "empty file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let want = [
            "i", "n", "local_acc", "global_acc", "prefix_acc", "oracle_acc", "task_size", "auroc",
        ];
        if cols != want {
            return Err(Error::parse("accuracy csv", format!("unexpected header {header:?}")));
        }
        let mut rows: Vec<(usize, usize, [f64; 3], Option<f64>, usize, Option<f64>)> = Vec::new();
        for (k, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let ctx = format!("accuracy csv line {}", k + 2);
            if f.len() != want.len() {
                return Err(Error::parse(&ctx, format!("expected {} fields, got {}", want.len(), f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(&ctx, e.to_string()));
            let float = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(&ctx, e.to_string()));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { float(s).map(Some) };
            rows.push((
                int(f[0])?,
                int(f[1])?,
                [float(f[2])?, float(f[3])?, float(f[4])?],
                opt(f[5])?,
                int(f[6])?,
                opt(f[7])?,
            ));
        }
        let n_tasks = rows.iter().map(|r| r.0).max().unwrap_or(0);
        let mut local = vec![Vec::new(); n_tasks];
        let mut global = vec![Vec::new(); n_tasks];
        let mut prefix = vec![Vec::new(); n_tasks];
        let mut sizes = vec![0; n_tasks];
        let mut oracle: Vec<Option<f64>> = vec![None; n_tasks];
        let mut auroc = vec![None; n_tasks];
        for (i, n, [l, g, p], o, size, a) in rows {
            if i == 0 || n == 0 || n > i || local[i - 1].len() != n - 1 {
                return Err(Error::parse("accuracy csv", format!("row ({i},{n}) out of order")));
            }
            local[i - 1].push(l);
            global[i - 1].push(g);
            prefix[i - 1].push(p);
            sizes[n - 1] = size;
            if o.is_some() {
                oracle[n - 1] = o;
            }
            auroc[i - 1] = a;
        }
        let oracle: Vec<f64> = oracle.into_iter().map_while(|o| o).collect();
        Self::new(sizes, local, global, prefix, oracle, auroc)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Task-size-weighted sum inside Ω for each `i`:
/// `sum_{n<=i} |T_n| / |T_1:i| * A_{i,1:n} / A_offline,1:n`.
pub fn omega_partials(table: &ResultsTable) -> Result<Vec<f64>> {
    let n_tasks = table.n_tasks();
    if table.oracle.len() < n_tasks {
        return Err(Error::Contract(format!(
            "omega needs {n_tasks} oracle accuracies, table has {}",
            table.oracle.len()
        )));
    }
    let mut partials = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let seen: usize = table.task_sizes[..=i].iter().sum();
        let weighted: f64 = (0..=i)
            .map(|n| table.task_sizes[n] as f64 * (table.prefix[i][n] / table.oracle[n]))
            .sum();
        partials.push(weighted / seen as f64);
    }
    Ok(partials)
}

/// `(1/N) sum_i partial_i`.
pub fn omega(table: &ResultsTable) -> Result<f64> {
    let p = omega_partials(table)?;
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

/// Ω of the first `t` tasks for every `t`; the last entry equals [`omega`].
pub fn omega_curve(table: &ResultsTable) -> Result<Vec<f64>> {
    let p = omega_partials(table)?;
    let mut running = 0.0;
    Ok(p.iter()
        .enumerate()
        .map(|(t, v)| {
            running += v;
            running / (t + 1) as f64
        })
        .collect())
}

/// `(1/(N-1)) sum_{n<N} (A_{N,n} - A_{n,n})` on local accuracies.
pub fn bwt(table: &ResultsTable) -> Result<f64> {
    let n_tasks = table.n_tasks();
    if n_tasks < 2 {
        return Err(Error::Contract("BWT is undefined for a single task".into()));
    }
    let last = &table.local[n_tasks - 1];
    let sum: f64 = (0..n_tasks - 1).map(|n| last[n] - table.local[n][n]).sum();
    Ok(sum / (n_tasks - 1) as f64)
}

/// `(1/(N-1)) sum_{i>=2} sum_{n<i} |T_n| / |T_1:i| * (R_{n,n} - R_{i,n})`.
pub fn fgt(table: &ResultsTable) -> Result<f64> {
    let n_tasks = table.n_tasks();
    if n_tasks < 2 {
        return Err(Error::Contract("FGT is undefined for a single task".into()));
    }
    let mut total = 0.0;
    for i in 1..n_tasks {
        let seen: usize = table.task_sizes[..=i].iter().sum();
        let weighted: f64 = (0..i)
            .map(|n| table.task_sizes[n] as f64 * (table.global[n][n] - table.global[i][n]))
            .sum();
        total += weighted / seen as f64;
    }
    Ok(total / (n_tasks - 1) as f64)
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `A_{N,1:N}`.
    pub final_accuracy: f64,
    pub omega: f64,
    pub bwt: Option<f64>,
    pub fgt: Option<f64>,
    pub auroc_per_task: Vec<Option<f64>>,
    pub omega_partials: Vec<f64>,
}

impl RunSummary {
    pub fn from_table(table: &ResultsTable) -> Result<Self> {
        let n = table.n_tasks();
        let (bwt, fgt) = if n >= 2 {
            (Some(bwt(table)?), Some(fgt(table)?))
        } else {
            (None, None)
        };
        Ok(Self {
            final_accuracy: table.prefix[n - 1][n - 1],
            omega: omega(table)?,
            bwt,
            fgt,
            auroc_per_task: table.auroc.clone(),
            omega_partials: omega_partials(table)?,
        })
    }
}

fn dataset_fingerprint(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((dataset.dim() as u64).to_le_bytes());
    for i in 0..dataset.len() {
        h.update(dataset.label(i).to_le_bytes());
        h.update([matches!(dataset.split(i), Split::Train) as u8]);
        for v in dataset.feature(i) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Accuracy over the test data of tasks `1..=prefix` of a model trained
/// jointly on all their labeled data.
pub fn offline_oracle(
    dataset: &Dataset,
    sequence: &TaskSequence,
    prefix: usize,
    train: &TrainConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if prefix == 0 || prefix > sequence.len() {
        return Err(Error::Contract(format!("oracle prefix {prefix} outside 1..={}", sequence.len())));
    }
    let classes = sequence.prefix_classes(prefix);
    let model = fit_supervised(
        dataset,
        &classes,
        train,
        batch_size,
        derive_seed(seed, &[tag::ORACLE, prefix as u64]),
    )?;
    let test = dataset.test_pool(&classes);
    let labels: Vec<ClassId> = test.iter().map(|&i| dataset.label(i)).collect();
    let preds = model.classify(&dataset.gather(&test), test.len(), 0..model.n_outputs());
    task_accuracy(&preds, &labels)
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    accuracy: f64,
}

/// Memoizes oracle accuracies per (data, class prefix, schedule, seed),
/// optionally persisted as one JSON file per entry.
#[derive(Debug, Default)]
pub struct OracleCache {
    dir: Option<PathBuf>,
    memo: HashMap<String, f64>,
    fingerprints: HashMap<usize, String>,
    computed: usize,
}

impl OracleCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    /// Oracle trainings actually run (cache misses).
    pub fn computed(&self) -> usize {
        self.computed
    }

    fn key(
        &mut self,
        dataset: &Dataset,
        sequence: &TaskSequence,
        prefix: usize,
        train: &TrainConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<String> {
        let addr = dataset as *const Dataset as usize;
        let fp = self
            .fingerprints
            .entry(addr)
            .or_insert_with(|| dataset_fingerprint(dataset))
            .clone();
        let mut h = Sha256::new();
        h.update(fp.as_bytes());
        h.update(serde_json::to_vec(&sequence.prefix_classes(prefix))?);
        h.update(serde_json::to_vec(train)?);
        h.update((batch_size as u64).to_le_bytes());
        h.update(seed.to_le_bytes());
        h.update((prefix as u64).to_le_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn get(
        &mut self,
        dataset: &Dataset,
        sequence: &TaskSequence,
        prefix: usize,
        train: &TrainConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<f64> {
        let key = self.key(dataset, sequence, prefix, train, batch_size, seed)?;
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("oracle-{}.json", &key[..32])));
        if let Some(path) = &path {
            if let Ok(text) = fs::read_to_string(path) {
                if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
                    if entry.key == key {
                        self.memo.insert(key, entry.accuracy);
                        return Ok(entry.accuracy);
                    }
                }
            }
        }
        let acc = offline_oracle(dataset, sequence, prefix, train, batch_size, seed)?;
        self.computed += 1;
        if let (Some(dir), Some(path)) = (&self.dir, &path) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            let body = serde_json::to_string(&CacheEntry {
                key: key.clone(),
                accuracy: acc,
            })?;
            fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        }
        self.memo.insert(key, acc);
        Ok(acc)
    }
}
