//! Experiment configuration, execution, and persistence.
//!
//! Config files are flat `key: value` lines with section prefixes
//! (`train.lr: 0.1`, `scenario.task_mode: parent_class`). A key without a
//! prefix resolves to the unique full key whose last component matches it,
//! so `coreset: 400` sets `train.coreset`. Lines starting with `#` are
//! comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{omega_curve, OracleCache, ResultsTable, RunSummary};
use crate::stream::{make_tasks, ScenarioConfig, TaskSequence};
use crate::taxonomy::{load_taxonomy, synthetic_dataset, Dataset, Taxonomy};
use crate::trainer::{run_sequence, Ablation, Method, RunContext, RunOutcome, StepLog, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            train_per_class: 100,
            test_per_class: 20,
            dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `None` uses the bundled layout.
    pub taxonomy: Option<PathBuf>,
    pub dataset: DatasetParams,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub method: Method,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Oracle cache directory; `None` means `<out_dir>/oracle-cache`.
    pub oracle_cache: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_train(TrainConfig::default())
    }
}

const KEYS: &[&str] = &[
    "taxonomy",
    "dataset.train_per_class",
    "dataset.test_per_class",
    "dataset.dim",
    "dataset.seed",
    "scenario.task_mode",
    "scenario.unlabeled_mode",
    "scenario.n_tasks",
    "scenario.batch_size",
    "scenario.mu",
    "scenario.random_sample_count",
    "train.epochs",
    "train.lr",
    "train.decay_epochs",
    "train.decay_factor",
    "train.momentum",
    "train.weight_decay",
    "train.lambda_ucl",
    "train.lambda_dst",
    "train.temperature",
    "train.tau_fm",
    "train.tpr",
    "train.epsilon_ood",
    "train.coreset",
    "train.finetune",
    "train.finetune_epochs",
    "train.finetune_decays",
    "train.hidden",
    "train.ood_holdout",
    "train.ood_lr",
    "train.sigma_weak",
    "train.sigma_strong",
    "train.drop_fraction",
    "method",
    "ablation.no_pl",
    "ablation.no_w",
    "ablation.no_ul",
    "ablation.no_dst",
    "seeds",
    "out_dir",
    "oracle_cache",
];

fn resolve_key(key: &str, line: usize) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    if key == "seed" {
        return Ok("seeds");
    }
    let matches: Vec<&'static str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.rsplit('.').next() == Some(key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::UnknownKey {
            key: key.to_string(),
            line,
        }),
        many => Err(Error::Config(format!(
            "line {line}: key `{key}` is ambiguous ({})",
            many.join(", ")
        ))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(value: &str, ctx: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| Error::parse(ctx, e.to_string())))
        .collect()
}

fn parse_one<T: std::str::FromStr>(value: &str, ctx: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| Error::parse(ctx, format!("{value:?}: {e}")))
}

impl ExperimentConfig {
    /// Defaults with the given training constants.
    pub fn with_train(train: TrainConfig) -> Self {
        Self {
            taxonomy: None,
            dataset: DatasetParams::default(),
            scenario: ScenarioConfig::default(),
            train,
            method: Method::DistillMatch,
            ablation: Ablation::default(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            oracle_cache: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(text, Self::default())
    }

    /// Applies the lines of `text` on top of `base`, then validates.
    pub fn parse_over(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::parse(format!("config line {}", k + 1), format!("expected `key: value`, got {line:?}"))
            })?;
            let key = resolve_key(key.trim(), k + 1)?;
            cfg.set(key, value.trim(), k + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let ctx = format!("config line {line} ({key})");
        let c = ctx.as_str();
        let t = &mut self.train;
        match key {
            "taxonomy" => {
                self.taxonomy = match value {
                    "" | "bundled" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "dataset.train_per_class" => self.dataset.train_per_class = parse_one(value, c)?,
            "dataset.test_per_class" => self.dataset.test_per_class = parse_one(value, c)?,
            "dataset.dim" => self.dataset.dim = parse_one(value, c)?,
            "dataset.seed" => self.dataset.seed = parse_one(value, c)?,
            "scenario.task_mode" => self.scenario.task_mode = value.parse()?,
            "scenario.unlabeled_mode" => self.scenario.unlabeled_mode = value.parse()?,
            "scenario.n_tasks" => self.scenario.n_tasks = parse_one(value, c)?,
            "scenario.batch_size" => self.scenario.batch_size = parse_one(value, c)?,
            "scenario.mu" => self.scenario.mu = parse_one(value, c)?,
            "scenario.random_sample_count" => self.scenario.random_sample_count = parse_one(value, c)?,
            "train.epochs" => t.epochs = parse_one(value, c)?,
            "train.lr" => t.lr = parse_one(value, c)?,
            "train.decay_epochs" => t.decay_epochs = parse_list(value, c)?,
            "train.decay_factor" => t.decay_factor = parse_one(value, c)?,
            "train.momentum" => t.momentum = parse_one(value, c)?,
            "train.weight_decay" => t.weight_decay = parse_one(value, c)?,
            "train.lambda_ucl" => t.lambda_ucl = parse_one(value, c)?,
            "train.lambda_dst" => t.lambda_dst = parse_one(value, c)?,
            "train.temperature" => t.temperature = parse_one(value, c)?,
            "train.tau_fm" => t.tau_fm = parse_one(value, c)?,
            "train.tpr" => {
                t.tpr = match value {
                    "auto" => None,
                    v => Some(parse_one(v, c)?),
                }
            }
            "train.epsilon_ood" => t.epsilon_ood = parse_one(value, c)?,
            "train.coreset" => t.coreset = parse_one(value, c)?,
            "train.finetune" => t.finetune = parse_one(value, c)?,
            "train.finetune_epochs" => t.finetune_epochs = parse_one(value, c)?,
            "train.finetune_decays" => t.finetune_decays = parse_list(value, c)?,
            "train.hidden" => t.hidden = parse_list(value, c)?,
            "train.ood_holdout" => t.ood_holdout = parse_one(value, c)?,
            "train.ood_lr" => t.ood_lr = parse_one(value, c)?,
            "train.sigma_weak" => t.augmentation.sigma_weak = parse_one(value, c)?,
            "train.sigma_strong" => t.augmentation.sigma_strong = parse_one(value, c)?,
            "train.drop_fraction" => t.augmentation.drop_fraction = parse_one(value, c)?,
            "method" => self.method = value.parse()?,
            "ablation.no_pl" => self.ablation.no_pl = parse_one(value, c)?,
            "ablation.no_w" => self.ablation.no_w = parse_one(value, c)?,
            "ablation.no_ul" => self.ablation.no_ul = parse_one(value, c)?,
            "ablation.no_dst" => self.ablation.no_dst = parse_one(value, c)?,
            "seeds" => self.seeds = parse_list(value, c)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "oracle_cache" => {
                self.oracle_cache = match value {
                    "" | "default" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            other => unreachable!("key table and setter disagree on {other}"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "taxonomy" => self
                .taxonomy
                .as_ref()
                .map_or("bundled".into(), |p| p.display().to_string()),
            "dataset.train_per_class" => self.dataset.train_per_class.to_string(),
            "dataset.test_per_class" => self.dataset.test_per_class.to_string(),
            "dataset.dim" => self.dataset.dim.to_string(),
            "dataset.seed" => self.dataset.seed.to_string(),
            "scenario.task_mode" => self.scenario.task_mode.to_string(),
            "scenario.unlabeled_mode" => self.scenario.unlabeled_mode.to_string(),
            "scenario.n_tasks" => self.scenario.n_tasks.to_string(),
            "scenario.batch_size" => self.scenario.batch_size.to_string(),
            "scenario.mu" => self.scenario.mu.to_string(),
            "scenario.random_sample_count" => self.scenario.random_sample_count.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.decay_epochs" => join(&t.decay_epochs),
            "train.decay_factor" => t.decay_factor.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.lambda_ucl" => t.lambda_ucl.to_string(),
            "train.lambda_dst" => t.lambda_dst.to_string(),
            "train.temperature" => t.temperature.to_string(),
            "train.tau_fm" => t.tau_fm.to_string(),
            "train.tpr" => t.tpr.map_or("auto".into(), |v| v.to_string()),
            "train.epsilon_ood" => t.epsilon_ood.to_string(),
            "train.coreset" => t.coreset.to_string(),
            "train.finetune" => t.finetune.to_string(),
            "train.finetune_epochs" => t.finetune_epochs.to_string(),
            "train.finetune_decays" => join(&t.finetune_decays),
            "train.hidden" => join(&t.hidden),
            "train.ood_holdout" => t.ood_holdout.to_string(),
            "train.ood_lr" => t.ood_lr.to_string(),
            "train.sigma_weak" => t.augmentation.sigma_weak.to_string(),
            "train.sigma_strong" => t.augmentation.sigma_strong.to_string(),
            "train.drop_fraction" => t.augmentation.drop_fraction.to_string(),
            "method" => self.method.to_string(),
            "ablation.no_pl" => self.ablation.no_pl.to_string(),
            "ablation.no_w" => self.ablation.no_w.to_string(),
            "ablation.no_ul" => self.ablation.no_ul.to_string(),
            "ablation.no_dst" => self.ablation.no_dst.to_string(),
            "seeds" => join(&self.seeds),
            "out_dir" => self.out_dir.display().to_string(),
            "oracle_cache" => self
                .oracle_cache
                .as_ref()
                .map_or("default".into(), |p| p.display().to_string()),
            other => unreachable!("unknown key {other}"),
        }
    }

    /// Every key, fully qualified, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}: {}", self.get(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.ablation.any() && self.method != Method::DistillMatch {
            return Err(Error::Config("ablation flags require method distillmatch".into()));
        }
        let d = &self.dataset;
        if d.train_per_class < 2 || d.test_per_class == 0 || d.dim == 0 {
            return Err(Error::Config(
                "dataset needs train_per_class >= 2, test_per_class >= 1, dim >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Run directory name stem: method plus any removed components.
    pub fn label(&self) -> String {
        let mut s = self.method.to_string();
        let a = &self.ablation;
        for (on, name) in [(a.no_pl, "no_pl"), (a.no_w, "no_w"), (a.no_ul, "no_ul"), (a.no_dst, "no_dst")] {
            if on {
                s.push('-');
                s.push_str(name);
            }
        }
        s
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-seed{seed}", self.label())
    }

    pub fn oracle_cache_dir(&self) -> PathBuf {
        self.oracle_cache
            .clone()
            .unwrap_or_else(|| self.out_dir.join("oracle-cache"))
    }

    pub fn load_taxonomy(&self) -> Result<Taxonomy> {
        match &self.taxonomy {
            Some(p) => load_taxonomy(p),
            None => Ok(Taxonomy::cifar_layout()),
        }
    }

    pub fn build_data(&self) -> Result<ExperimentData> {
        let taxonomy = self.load_taxonomy()?;
        let d = &self.dataset;
        let dataset = synthetic_dataset(&taxonomy, d.train_per_class, d.test_per_class, d.dim, d.seed)?;
        Ok(ExperimentData { taxonomy, dataset })
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    ExperimentConfig::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Taxonomy and dataset shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub taxonomy: Taxonomy,
    pub dataset: Dataset,
}

/// One seed of one configuration.
pub fn run_single(
    config: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    oracle: &mut OracleCache,
) -> Result<(TaskSequence, RunOutcome)> {
    config.validate()?;
    let sequence = make_tasks(&data.taxonomy, config.scenario.task_mode, config.scenario.n_tasks, seed)?;
    let ctx = RunContext {
        dataset: &data.dataset,
        taxonomy: &data.taxonomy,
        sequence: &sequence,
        scenario: &config.scenario,
        train: &config.train,
        method: config.method,
        ablation: config.ablation,
        seed,
    };
    let outcome = run_sequence(&ctx, oracle)?;
    Ok((sequence, outcome))
}

pub const STEPS_FILE: &str = "steps.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const TASKS_FILE: &str = "tasks.txt";
pub const OMEGA_CURVE_FILE: &str = "omega_curve.csv";
pub const AUROC_CURVE_FILE: &str = "auroc_curve.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

pub fn steps_csv(steps: &[StepLog]) -> String {
    let mut out = String::from("step,l_s,l_pl,l_ul,l_dst,l_total,B_pl\n");
    for s in steps {
        let l = &s.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.step, l.l_s, l.l_pl, l.l_ul, l.l_dst, l.l_total, l.b_pl
        );
    }
    out
}

/// Loss columns of a steps CSV, keyed by header name.
pub fn read_steps_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse("steps csv", "empty file"))?;
    let mut cols: Vec<(String, Vec<f64>)> =
        header.split(',').map(|h| (h.to_string(), Vec::new())).collect();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(format!("steps csv line {}", k + 2), "wrong field count"));
        }
        for (col, f) in cols.iter_mut().zip(fields) {
            col.1.push(f.parse().map_err(|e: std::num::ParseFloatError| {
                Error::parse(format!("steps csv line {}", k + 2), e.to_string())
            })?);
        }
    }
    Ok(cols)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the per-run artifacts into `dir` (which must exist).
pub fn write_run(
    dir: &Path,
    config: &ExperimentConfig,
    seed: u64,
    sequence: &TaskSequence,
    outcome: &RunOutcome,
) -> Result<RunSummary> {
    let summary = RunSummary::from_table(&outcome.table)?;
    let mut cfg = config.clone();
    cfg.seeds = vec![seed];
    write(&dir.join(CONFIG_FILE), cfg.to_text())?;
    let mut tasks = String::new();
    for (n, t) in sequence.tasks().iter().enumerate() {
        let _ = writeln!(tasks, "{}: {}", n + 1, join(t));
    }
    write(&dir.join(TASKS_FILE), tasks)?;
    write(&dir.join(STEPS_FILE), steps_csv(&outcome.state.steps))?;
    outcome.table.save_csv(dir.join(ACCURACY_FILE))?;
    write(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; one value gives std 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Cross-seed aggregate of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub run_dirs: Vec<PathBuf>,
    pub final_accuracy: MeanStd,
    pub omega: MeanStd,
    pub bwt: Option<MeanStd>,
    pub fgt: Option<MeanStd>,
    pub runs: Vec<RunSummary>,
}

impl ExperimentSummary {
    fn aggregate(label: String, seeds: Vec<u64>, run_dirs: Vec<PathBuf>, runs: Vec<RunSummary>) -> Self {
        let pick = |f: fn(&RunSummary) -> Option<f64>| -> Option<MeanStd> {
            let v: Option<Vec<f64>> = runs.iter().map(f).collect();
            v.and_then(|v| MeanStd::of(&v))
        };
        Self {
            label,
            seeds,
            run_dirs,
            final_accuracy: pick(|r| Some(r.final_accuracy)).expect("at least one run"),
            omega: pick(|r| Some(r.omega)).expect("at least one run"),
            bwt: pick(|r| r.bwt),
            fgt: pick(|r| r.fgt),
            runs,
        }
    }
}

/// Runs every seed of `config`, writing `<out>/<run_id>/` per seed and
/// `<out>/<label>-summary.json`. Existing run directories are an error
/// unless `overwrite` is set.
pub fn run_experiment(config: &ExperimentConfig, overwrite: bool) -> Result<ExperimentSummary> {
    config.validate()?;
    let data = config.build_data()?;
    let mut oracle = OracleCache::on_disk(config.oracle_cache_dir());
    run_experiment_with(config, &data, &mut oracle, overwrite)
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    data: &ExperimentData,
    oracle: &mut OracleCache,
    overwrite: bool,
) -> Result<ExperimentSummary> {
    config.validate()?;
    let dirs: Vec<PathBuf> = config.seeds.iter().map(|&s| config.out_dir.join(config.run_id(s))).collect();
    let summary_path = config.out_dir.join(format!("{}-summary.json", config.label()));
    if !overwrite {
        if let Some(d) = dirs.iter().find(|d| d.exists()) {
            return Err(Error::OutputExists(d.clone()));
        }
        if summary_path.exists() {
            return Err(Error::OutputExists(summary_path));
        }
    }
    let mut runs = Vec::new();
    for (&seed, dir) in config.seeds.iter().zip(&dirs) {
        prepare_dir(dir, overwrite)?;
        let (sequence, outcome) = run_single(config, data, seed, oracle)?;
        runs.push(write_run(dir, config, seed, &sequence, &outcome)?);
    }
    let summary = ExperimentSummary::aggregate(config.label(), config.seeds.clone(), dirs, runs);
    write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Row names of the ablation table, in table order.
pub const ABLATION_ROWS: [&str; 5] = ["l_pl", "w_k", "l_ul", "l_dst", "full"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// `(row, [A_N, omega, BWT, FGT])`, cross-seed means.
    pub rows: Vec<(String, [Option<f64>; 4])>,
    pub arms: Vec<ExperimentSummary>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("removed,final_accuracy,omega,bwt,fgt\n");
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }
}

/// The full method plus four single-removal variants, one experiment each,
/// summarized in `<out>/ablation.csv`.
pub fn ablate(config: &ExperimentConfig, overwrite: bool) -> Result<AblationTable> {
    config.validate()?;
    if config.method != Method::DistillMatch || config.ablation.any() {
        return Err(Error::Config(
            "ablate needs method distillmatch with no ablation flags set".into(),
        ));
    }
    let data = config.build_data()?;
    let mut oracle = OracleCache::on_disk(config.oracle_cache_dir());
    let variants = [
        Ablation { no_pl: true, ..Ablation::default() },
        Ablation { no_w: true, ..Ablation::default() },
        Ablation { no_ul: true, ..Ablation::default() },
        Ablation { no_dst: true, ..Ablation::default() },
        Ablation::default(),
    ];
    let table_path = config.out_dir.join(ABLATION_FILE);
    if table_path.exists() && !overwrite {
        return Err(Error::OutputExists(table_path));
    }
    let mut rows = Vec::new();
    let mut arms = Vec::new();
    for (name, ablation) in ABLATION_ROWS.iter().zip(variants) {
        let arm = ExperimentConfig {
            ablation,
            ..config.clone()
        };
        let s = run_experiment_with(&arm, &data, &mut oracle, overwrite)?;
        rows.push((
            name.to_string(),
            [
                Some(s.final_accuracy.mean),
                Some(s.omega.mean),
                s.bwt.map(|m| m.mean),
                s.fgt.map(|m| m.mean),
            ],
        ));
        arms.push(s);
    }
    let table = AblationTable { rows, arms };
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    write(&table_path, table.to_csv())?;
    Ok(table)
}

/// Curve files written for one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveReport {
    pub dir: PathBuf,
    pub omega: Vec<f64>,
    pub auroc: Vec<Option<f64>>,
}

/// Writes `omega_curve.csv` (`task,omega_so_far`) and `auroc_curve.csv`
/// (`task,auroc`) into each completed run directory.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<CurveReport>> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut out = Vec::new();
    for dir in dirs {
        for f in [ACCURACY_FILE, SUMMARY_FILE] {
            if !dir.join(f).is_file() {
                return Err(Error::IncompleteRun {
                    dir: dir.clone(),
                    missing: f.to_string(),
                });
            }
        }
        let table = ResultsTable::load_csv(dir.join(ACCURACY_FILE))?;
        let omega = omega_curve(&table)?;
        let mut oc = String::from("task,omega_so_far\n");
        let mut ac = String::from("task,auroc\n");
        for (t, v) in omega.iter().enumerate() {
            let _ = writeln!(oc, "{},{v}", t + 1);
        }
        for (t, a) in table.auroc.iter().enumerate() {
            let _ = writeln!(ac, "{},{}", t + 1, a.map(|v| v.to_string()).unwrap_or_default());
        }
        write(&dir.join(OMEGA_CURVE_FILE), oc)?;
        write(&dir.join(AUROC_CURVE_FILE), ac)?;
        out.push(CurveReport {
            dir: dir.clone(),
            omega,
            auroc: table.auroc,
        });
    }
    Ok(out)
}

/// Offline-oracle accuracies for every prefix and seed, written to
/// `<out>/oracle.csv` (`seed,prefix,accuracy`).
pub fn oracle_table(config: &ExperimentConfig, overwrite: bool) -> Result<Vec<(u64, usize, f64)>> {
    config.validate()?;
    let path = config.out_dir.join("oracle.csv");
    if path.exists() && !overwrite {
        return Err(Error::OutputExists(path));
    }
    let data = config.build_data()?;
    let mut cache = OracleCache::on_disk(config.oracle_cache_dir());
    let mut rows = Vec::new();
    let mut csv = String::from("seed,prefix,accuracy\n");
    for &seed in &config.seeds {
        let seq = make_tasks(&data.taxonomy, config.scenario.task_mode, config.scenario.n_tasks, seed)?;
        for n in 1..=seq.len() {
            let acc = cache.get(&data.dataset, &seq, n, &config.train, config.scenario.batch_size, seed)?;
            let _ = writeln!(csv, "{seed},{n},{acc}");
            rows.push((seed, n, acc));
        }
    }
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    write(&path, csv)?;
    Ok(rows)
}
