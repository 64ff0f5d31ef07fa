//! Incremental classifier with per-task output groups, frozen snapshots,
//! temperature-scaled prediction, and the weak/strong augmentation
//! operators used on feature vectors.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Forward, Mlp};
use crate::rng::Rng;
use crate::taxonomy::ClassId;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    logits
        .iter()
        .map(|&z| (z - max) / temperature - lse)
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalClassifier {
    net: Mlp,
    classes: Vec<ClassId>,
    groups: Vec<Range<usize>>,
    trained_through: usize,
    index: HashMap<ClassId, usize>,
}

impl IncrementalClassifier {
    /// A network `input_dim -> hidden.. -> 0`; outputs arrive with
    /// [`expand_head`](Self::expand_head).
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(0);
        Self {
            net: Mlp::new(&sizes, rng),
            classes: Vec::new(),
            groups: Vec::new(),
            trained_through: 0,
            index: HashMap::new(),
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn group(&self, task: usize) -> Range<usize> {
        self.groups[task - 1].clone()
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn trained_through(&self) -> usize {
        self.trained_through
    }

    pub fn mark_trained(&mut self, task: usize) {
        self.trained_through = task;
    }

    /// Output index of `class`, if the head covers it.
    pub fn output_of(&self, class: ClassId) -> Option<usize> {
        self.index.get(&class).copied()
    }

    /// Logit indices of tasks `first..=last` (1-based).
    pub fn task_range(&self, first: usize, last: usize) -> Result<Range<usize>> {
        if first == 0 || first > last || last > self.groups.len() {
            return Err(Error::Contract(format!(
                "task range {first}..={last} outside trained head 1..={}",
                self.groups.len()
            )));
        }
        Ok(self.groups[first - 1].start..self.groups[last - 1].end)
    }

    /// Adds one output group for `classes`; returns its task number.
    pub fn expand_head(&mut self, classes: &[ClassId], rng: &mut Rng) -> Result<usize> {
        if classes.is_empty() {
            return Err(Error::Contract("expand_head needs at least one class".into()));
        }
        if let Some(c) = classes.iter().find(|c| self.index.contains_key(c)) {
            return Err(Error::Contract(format!("class {c} already has an output")));
        }
        let start = self.classes.len();
        self.net.append_outputs(classes.len(), rng);
        for (k, &c) in classes.iter().enumerate() {
            self.index.insert(c, start + k);
        }
        self.classes.extend_from_slice(classes);
        self.groups.push(start..self.classes.len());
        Ok(self.groups.len())
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Forward {
        self.net.forward(x, rows)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.net.forward(x, 1).outputs().to_vec()
    }

    /// Class distribution over the classes of tasks `1..=t`.
    pub fn predict(&self, x: &[f64], t: usize, temperature: f64) -> Result<Vec<f64>> {
        let range = self.task_range(1, t)?;
        self.predict_range(x, range, temperature)
    }

    /// Softmax over an arbitrary logit index range.
    pub fn predict_range(&self, x: &[f64], range: Range<usize>, temperature: f64) -> Result<Vec<f64>> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        if range.end > self.n_outputs() || range.is_empty() {
            return Err(Error::Contract(format!(
                "logit range {range:?} outside head of width {}",
                self.n_outputs()
            )));
        }
        Ok(softmax(&self.logits(x)[range], temperature))
    }

    /// Predicted class id over a logit range, for a batch of rows.
    pub fn classify(&self, x: &[f64], rows: usize, range: Range<usize>) -> Vec<ClassId> {
        let fwd = self.net.forward(x, rows);
        (0..rows)
            .map(|i| self.classes[range.start + argmax(&fwd.row(i)[range.clone()])])
            .collect()
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        if self.trained_through == 0 {
            return Err(Error::Contract(
                "cannot snapshot a model that has not finished a task".into(),
            ));
        }
        Ok(Snapshot(Arc::new(self.clone())))
    }

    /// SHA-256 over the parameter bytes and output-group table.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.net.params() {
            h.update(p.to_le_bytes());
        }
        for c in &self.classes {
            h.update(c.to_le_bytes());
        }
        for g in &self.groups {
            h.update((g.end as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, taxonomy_hash: &str) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            taxonomy_hash: taxonomy_hash.to_string(),
            layer_sizes: self.net.sizes().to_vec(),
            classes: self.classes.clone(),
            groups: self.groups.iter().map(|g| [g.start, g.end]).collect(),
            trained_through: self.trained_through,
            params: self.net.params().to_vec(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; returns the model and the taxonomy hash it was
    /// written with.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        let ctx = path.display().to_string();
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::parse(ctx, format!("unsupported checkpoint version {}", file.version)));
        }
        let net = Mlp::from_parts(file.layer_sizes, file.params)
            .ok_or_else(|| Error::parse(&ctx, "parameter count does not match layer sizes"))?;
        let groups: Vec<Range<usize>> = file.groups.iter().map(|g| g[0]..g[1]).collect();
        let contiguous = groups.iter().enumerate().all(|(i, g)| {
            g.start < g.end && g.start == if i == 0 { 0 } else { groups[i - 1].end }
        });
        if net.output_dim() != file.classes.len()
            || !contiguous
            || groups.last().map_or(0, |g| g.end) != file.classes.len()
        {
            return Err(Error::parse(ctx, "output-group table does not match the head"));
        }
        let index = file.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok((
            Self {
                net,
                classes: file.classes,
                groups,
                trained_through: file.trained_through,
                index,
            },
            file.taxonomy_hash,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    taxonomy_hash: String,
    layer_sizes: Vec<usize>,
    classes: Vec<ClassId>,
    groups: Vec<[usize; 2]>,
    trained_through: usize,
    params: Vec<f64>,
}

/// A frozen copy of a classifier. Cloning shares the same immutable model.
#[derive(Debug, Clone)]
pub struct Snapshot(Arc<IncrementalClassifier>);

impl Snapshot {
    pub fn model(&self) -> &IncrementalClassifier {
        &self.0
    }

    pub fn n_groups(&self) -> usize {
        self.0.n_groups()
    }

    pub fn predict(&self, x: &[f64], t: usize, temperature: f64) -> Result<Vec<f64>> {
        self.0.predict(x, t, temperature)
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Forward {
        self.0.forward(x, rows)
    }

    pub fn param_hash(&self) -> String {
        self.0.param_hash()
    }
}

/// Feature-space stand-ins for flips/crops (weak) and RandAugment (strong).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    /// Fraction of coordinates zeroed by the strong operator.
    pub drop_fraction: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            sigma_weak: 0.05,
            sigma_strong: 0.25,
            drop_fraction: 0.1,
        }
    }
}

impl Augmentation {
    /// Adds N(0, sigma_weak^2) jitter to every coordinate.
    pub fn weak(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        if self.sigma_weak == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + self.sigma_weak * z
            })
            .collect()
    }

    /// Larger jitter, then zeroes `round(drop_fraction * d)` coordinates.
    pub fn strong(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut out: Vec<f64> = x
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + self.sigma_strong * z
            })
            .collect();
        let d = out.len();
        let k = ((self.drop_fraction * d as f64).round() as usize).min(d);
        for i in index::sample(rng, d, k) {
            out[i] = 0.0;
        }
        out
    }

    /// Applies `weak` row by row to a row-major batch.
    pub fn weak_batch(&self, x: &[f64], dim: usize, rng: &mut Rng) -> Vec<f64> {
        x.chunks(dim).flat_map(|row| self.weak(row, rng)).collect()
    }

    pub fn strong_batch(&self, x: &[f64], dim: usize, rng: &mut Rng) -> Vec<f64> {
        x.chunks(dim).flat_map(|row| self.strong(row, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn model() -> IncrementalClassifier {
        let mut rng = derive_rng(0, &[]);
        let mut m = IncrementalClassifier::new(4, &[8, 8], &mut rng);
        m.expand_head(&[0, 1, 2], &mut rng).unwrap();
        m
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2.0, 0.0], 1.0);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        let hot = softmax(&[2.0, 0.0], 2.0);
        assert!(hot[0] < p[0]);
        let flat = softmax(&[0.7; 5], 1.3);
        assert!(flat.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    }

    #[test]
    fn predict_normalizes() {
        let m = model();
        let p = m.predict(&[0.1, -0.3, 2.0, 1.0], 1, 2.0).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_beyond_head_is_a_contract_error() {
        let m = model();
        assert!(matches!(m.predict(&[0.0; 4], 2, 1.0), Err(Error::Contract(_))));
        assert!(matches!(m.predict(&[0.0; 4], 1, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn expansion_keeps_old_predictions() {
        let mut rng = derive_rng(3, &[]);
        let mut m = model();
        let x = [0.4, -1.0, 0.3, 0.9];
        let before = m.predict(&x, 1, 1.0).unwrap();
        assert_eq!(m.expand_head(&[3, 4, 5, 6, 7], &mut rng).unwrap(), 2);
        assert_eq!(m.predict_range(&x, 0..3, 1.0).unwrap(), before);
        assert_eq!(m.predict(&x, 1, 1.0).unwrap(), before);
    }

    #[test]
    fn three_expansions_give_disjoint_groups() {
        let mut rng = derive_rng(0, &[]);
        let mut m = IncrementalClassifier::new(4, &[8], &mut rng);
        for t in 0..3u32 {
            let classes: Vec<ClassId> = (5 * t..5 * t + 5).collect();
            m.expand_head(&classes, &mut rng).unwrap();
        }
        assert_eq!(m.n_outputs(), 15);
        assert_eq!(m.groups(), &[0..5, 5..10, 10..15]);
        assert_eq!(m.output_of(12), Some(12));
    }

    #[test]
    fn fresh_model_expanded_by_five() {
        let mut rng = derive_rng(0, &[]);
        let mut m = IncrementalClassifier::new(4, &[8], &mut rng);
        m.expand_head(&[9, 8, 7, 6, 5], &mut rng).unwrap();
        assert_eq!(m.n_outputs(), 5);
        assert_eq!(m.output_of(9), Some(0));
    }

    #[test]
    fn snapshot_requires_a_finished_task() {
        let m = model();
        assert!(matches!(m.snapshot(), Err(Error::Contract(_))));
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut m = model();
        m.mark_trained(1);
        let snap = m.snapshot().unwrap();
        let x = [1.0, 2.0, -1.0, 0.0];
        let p0 = snap.predict(&x, 1, 1.0).unwrap();
        assert_eq!(p0, m.predict(&x, 1, 1.0).unwrap());
        for (i, p) in m.net_mut().params_mut().iter_mut().enumerate() {
            *p += 0.01 * (i as f64).sin();
        }
        assert_eq!(snap.predict(&x, 1, 1.0).unwrap(), p0);
        assert_ne!(m.predict(&x, 1, 1.0).unwrap(), p0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut m = model();
        m.mark_trained(1);
        m.save_checkpoint(&path, "abc").unwrap();
        let (back, hash) = IncrementalClassifier::load_checkpoint(&path).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back.param_hash(), m.param_hash());
        assert_eq!(back.output_of(2), Some(2));
        assert_eq!(back.trained_through(), 1);
    }

    #[test]
    fn weak_with_zero_sigma_is_identity() {
        let aug = Augmentation {
            sigma_weak: 0.0,
            ..Augmentation::default()
        };
        let x = [1.5, -2.0, 3.25];
        assert_eq!(aug.weak(&x, &mut derive_rng(0, &[])), x.to_vec());
    }

    #[test]
    fn weak_displacement_matches_variance() {
        let aug = Augmentation::default();
        let d = 16;
        let x = vec![0.5; d];
        let mut rng = derive_rng(11, &[]);
        let n = 10_000;
        let mean_sq: f64 = (0..n)
            .map(|_| {
                aug.weak(&x, &mut rng)
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        let expected = d as f64 * aug.sigma_weak.powi(2);
        assert!((mean_sq / expected - 1.0).abs() < 0.05, "{mean_sq} vs {expected}");
    }

    #[test]
    fn strong_with_full_drop_is_zero() {
        let aug = Augmentation {
            drop_fraction: 1.0,
            ..Augmentation::default()
        };
        assert_eq!(aug.strong(&[3.0; 8], &mut derive_rng(0, &[])), vec![0.0; 8]);
    }

    #[test]
    fn augmentations_are_deterministic_per_rng_state() {
        let aug = Augmentation::default();
        let x = [1.0; 10];
        assert_eq!(
            aug.strong(&x, &mut derive_rng(4, &[])),
            aug.strong(&x, &mut derive_rng(4, &[]))
        );
    }
}
