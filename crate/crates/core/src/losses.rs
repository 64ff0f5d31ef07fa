//! Training objective: local (soft) distillation over previous tasks,
//! OoD-gated hard distillation on pseudo-labels, class-balance weights,
//! consistency regularization, and the balanced total.
//!
//! A training step is split in two. [`prepare_targets`] runs every forward
//! pass that produces labels (snapshot distributions, pseudo-labels,
//! confidence masks, class weights) with no gradient. [`objective`] then
//! evaluates the loss and its analytic gradient as a function of the live
//! parameters alone, holding those targets fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, log_softmax, softmax, Augmentation, IncrementalClassifier, Snapshot};
use crate::rng::Rng;
use crate::taxonomy::ClassId;

/// Every component of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_pl: f64,
    pub l_ul: f64,
    pub l_dst: f64,
    pub l_total: f64,
    pub b: usize,
    pub b_pl: usize,
    pub lambda_ucl: f64,
    pub lambda_dst: f64,
}

/// `(l_s + l_pl) / (B + B_pl) + lambda_ucl * l_ul + lambda_dst * l_dst`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    l_s: f64,
    l_pl: f64,
    l_ul: f64,
    l_dst: f64,
    b: usize,
    b_pl: usize,
    lambda_ucl: f64,
    lambda_dst: f64,
) -> LossBreakdown {
    let denom = (b + b_pl) as f64;
    let balanced = if denom > 0.0 { (l_s + l_pl) / denom } else { 0.0 };
    LossBreakdown {
        l_s,
        l_pl,
        l_ul,
        l_dst,
        l_total: balanced + lambda_ucl * l_ul + lambda_dst * l_dst,
        b,
        b_pl,
        lambda_ucl,
        lambda_dst,
    }
}

/// Per-class loss weights. Index `k` is an output index of the live head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    /// Classes with no label or pseudo-label in the batch (weight 0).
    pub absent: Vec<bool>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
            counts: vec![0; k],
            absent: vec![false; k],
        }
    }

    pub fn get(&self, k: usize) -> f64 {
        self.weights[k]
    }
}

/// `w(k) = (1/K) * total / count(k)` over labels and pseudo-labels
/// combined; absent classes get weight 0.
pub fn class_balance_weights(labels: &[usize], pseudo_labels: &[usize], k: usize) -> ClassWeights {
    let mut counts = vec![0usize; k];
    for &y in labels.iter().chain(pseudo_labels) {
        counts[y] += 1;
    }
    let total = (labels.len() + pseudo_labels.len()) as f64;
    let weights = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total / (k as f64 * c as f64)
            }
        })
        .collect();
    ClassWeights {
        weights,
        absent: counts.iter().map(|&c| c == 0).collect(),
        counts,
    }
}

/// `-log softmax(logits)[target]`; adds `scale * (p - onehot)` to `dlogits`.
pub fn cross_entropy_grad(logits: &[f64], target: usize, scale: f64, dlogits: &mut [f64]) -> f64 {
    let p = softmax(logits, 1.0);
    for (k, (g, &pk)) in dlogits.iter_mut().zip(&p).enumerate() {
        *g += scale * (pk - if k == target { 1.0 } else { 0.0 });
    }
    -log_softmax(logits, 1.0)[target]
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits, 1.0)[target]
}

/// `KL(teacher || softmax(student / T))`; adds `scale * (q - teacher) / T`
/// to `dlogits`.
pub fn kl_grad(
    teacher: &[f64],
    student_logits: &[f64],
    temperature: f64,
    scale: f64,
    dlogits: &mut [f64],
) -> f64 {
    let log_q = log_softmax(student_logits, temperature);
    let mut kl = 0.0;
    for ((g, &p), &lq) in dlogits.iter_mut().zip(teacher).zip(&log_q) {
        if p > 0.0 {
            kl += p * (p.ln() - lq);
        }
        *g += scale * (lq.exp() - p) / temperature;
    }
    kl
}

pub fn kl_divergence(teacher: &[f64], student_logits: &[f64], temperature: f64) -> f64 {
    let log_q = log_softmax(student_logits, temperature);
    teacher
        .iter()
        .zip(&log_q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &lq)| p * (p.ln() - lq))
        .sum()
}

fn rows_of(x: &[f64], dim: usize) -> usize {
    x.len() / dim
}

/// Mean over previous tasks `t = 1..n-1` of the batch-mean KL between the
/// snapshot's and the live model's temperature-softened group-`t`
/// distributions. Both models see the same weak view of every input.
/// Returns 0 when there is no snapshot.
pub fn local_distillation_loss(
    current: &IncrementalClassifier,
    previous: Option<&Snapshot>,
    inputs: &[f64],
    augmentation: &Augmentation,
    rng: &mut Rng,
    temperature: f64,
) -> Result<f64> {
    let Some(previous) = previous else {
        return Ok(0.0);
    };
    let prev_tasks = previous.n_groups();
    if prev_tasks == 0 {
        return Ok(0.0);
    }
    if prev_tasks > current.n_groups() {
        return Err(Error::Contract("snapshot has more tasks than the live model".into()));
    }
    let dim = current.input_dim();
    let rows = rows_of(inputs, dim);
    if rows == 0 {
        return Err(Error::Contract("empty distillation batch".into()));
    }
    let view = augmentation.weak_batch(inputs, dim, rng);
    let teacher = previous.forward(&view, rows);
    let student = current.forward(&view, rows);
    let mut total = 0.0;
    for t in 1..=prev_tasks {
        let g = current.group(t);
        let mut sum = 0.0;
        for i in 0..rows {
            let p = softmax(&teacher.row(i)[g.clone()], temperature);
            sum += kl_divergence(&p, &student.row(i)[g.clone()], temperature);
        }
        total += sum / rows as f64;
    }
    Ok(total / prev_tasks as f64)
}

/// Sum over examples with `max q >= tau_fm` (q from the weak view) of the
/// cross-entropy between the argmax one-hot and the strong-view prediction,
/// divided by the batch size.
pub fn consistency_loss(
    model: &IncrementalClassifier,
    weak_view: &[f64],
    strong_view: &[f64],
    tau_fm: f64,
) -> f64 {
    let dim = model.input_dim();
    let rows = rows_of(weak_view, dim);
    if rows == 0 {
        return 0.0;
    }
    let weak = model.forward(weak_view, rows);
    let strong = model.forward(strong_view, rows);
    let mut sum = 0.0;
    for i in 0..rows {
        let q = softmax(weak.row(i), 1.0);
        let k = argmax(&q);
        if q[k] >= tau_fm {
            sum += cross_entropy(strong.row(i), k);
        }
    }
    sum / rows as f64
}

/// Unnormalized sum over gate-accepted examples of
/// `w(qhat) * CE(qhat, p_current(y | x))`, where `qhat` is the snapshot's
/// argmax over its own tasks. Returns the sum and the accepted count.
pub fn hard_distillation_loss(
    current: &IncrementalClassifier,
    previous: Option<&Snapshot>,
    weak_view: &[f64],
    gate: &[bool],
    weights: &ClassWeights,
) -> Result<(f64, usize)> {
    let Some(previous) = previous else {
        return Ok((0.0, 0));
    };
    let dim = current.input_dim();
    let rows = rows_of(weak_view, dim);
    if gate.len() != rows {
        return Err(Error::Contract(format!(
            "gate length {} does not match batch size {rows}",
            gate.len()
        )));
    }
    if !gate.iter().any(|&a| a) {
        return Ok((0.0, 0));
    }
    let prev_width = previous.model().n_outputs();
    let teacher = previous.forward(weak_view, rows);
    let student = current.forward(weak_view, rows);
    let mut sum = 0.0;
    let mut accepted = 0;
    for i in (0..rows).filter(|&i| gate[i]) {
        let k = argmax(&teacher.row(i)[..prev_width]);
        sum += weights.get(k) * cross_entropy(student.row(i), k);
        accepted += 1;
    }
    Ok((sum, accepted))
}

/// Unnormalized `sum_b w(y_b) * CE(y_b, p(y | x_b))` over the full head.
pub fn supervised_loss(
    model: &IncrementalClassifier,
    features: &[f64],
    labels: &[ClassId],
    weights: &ClassWeights,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("empty labeled batch".into()));
    }
    let targets = output_indices(model, labels)?;
    let fwd = model.forward(features, labels.len());
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &k)| weights.get(k) * cross_entropy(fwd.row(i), k))
        .sum())
}

pub fn output_indices(model: &IncrementalClassifier, labels: &[ClassId]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            model.output_of(y).ok_or_else(|| {
                Error::Contract(format!("label {y} is outside the trained head"))
            })
        })
        .collect()
}

/// Which components are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_ucl: f64,
    pub lambda_dst: f64,
    pub temperature: f64,
    pub tau_fm: f64,
    /// Hard distillation on OoD-accepted pseudo-labels.
    pub pseudo_labels: bool,
    pub class_balance: bool,
    pub consistency: bool,
    pub distillation: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_ucl: 1.0,
            lambda_dst: 1.0,
            temperature: 2.0,
            tau_fm: 0.9,
            pseudo_labels: true,
            class_balance: true,
            consistency: true,
            distillation: true,
        }
    }
}

impl ObjectiveConfig {
    /// Plain class-balanced cross-entropy on labeled data.
    pub fn supervised_only() -> Self {
        Self {
            pseudo_labels: false,
            consistency: false,
            distillation: false,
            ..Self::default()
        }
    }
}

/// Augmented inputs for one step, fixed before any loss is evaluated.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub dim: usize,
    pub labeled_weak: Vec<f64>,
    /// Output indices of the labels.
    pub labels: Vec<usize>,
    pub unlabeled_weak: Vec<f64>,
    pub unlabeled_strong: Vec<f64>,
}

impl StepBatch {
    pub fn n_labeled(&self) -> usize {
        self.labels.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_weak.len() / self.dim
    }

    /// Draws the weak and strong views. Labeled and unlabeled inputs each
    /// get one weak view, shared by every model that looks at them.
    pub fn augment(
        model: &IncrementalClassifier,
        labeled: &[f64],
        labels: &[ClassId],
        unlabeled: &[f64],
        augmentation: &Augmentation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dim = model.input_dim();
        Ok(Self {
            dim,
            labeled_weak: augmentation.weak_batch(labeled, dim, rng),
            labels: output_indices(model, labels)?,
            unlabeled_weak: augmentation.weak_batch(unlabeled, dim, rng),
            unlabeled_strong: augmentation.strong_batch(unlabeled, dim, rng),
        })
    }
}

/// Labels and distributions produced without gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    /// Number of snapshot tasks distilled (n - 1).
    pub prev_tasks: usize,
    /// Snapshot group distributions at the distillation temperature, one
    /// row of width `prev_width` per distillation input (labeled rows
    /// first, then unlabeled rows).
    pub teacher: Vec<f64>,
    pub prev_width: usize,
    /// Accepted hard pseudo-labels for unlabeled rows.
    pub pseudo: Vec<Option<usize>>,
    /// Confident weak-view argmax labels of the live model.
    pub confident: Vec<Option<usize>>,
    pub weights: ClassWeights,
}

impl StepTargets {
    pub fn accepted(&self) -> usize {
        self.pseudo.iter().filter(|p| p.is_some()).count()
    }
}

/// Computes every stop-gradient quantity for a step. `gate[b]` is the OoD
/// accept decision for unlabeled row `b`; `None` rejects everything.
pub fn prepare_targets(
    model: &IncrementalClassifier,
    snapshot: Option<&Snapshot>,
    gate: Option<&[bool]>,
    batch: &StepBatch,
    config: &ObjectiveConfig,
) -> Result<StepTargets> {
    let n_u = batch.n_unlabeled();
    let snapshot = snapshot.filter(|s| s.n_groups() > 0);
    let prev_tasks = snapshot.map_or(0, Snapshot::n_groups);
    let prev_width = snapshot.map_or(0, |s| s.model().n_outputs());
    if prev_width > model.n_outputs() {
        return Err(Error::Contract("snapshot head is wider than the live head".into()));
    }

    let mut teacher = Vec::new();
    let mut pseudo = vec![None; n_u];
    if let Some(snap) = snapshot {
        let want_dst = config.distillation && config.lambda_dst != 0.0;
        let want_pl = config.pseudo_labels && gate.is_some_and(|g| g.iter().any(|&a| a));
        if want_dst {
            let lab = snap.forward(&batch.labeled_weak, batch.n_labeled());
            teacher.reserve((batch.n_labeled() + n_u) * prev_width);
            for i in 0..batch.n_labeled() {
                push_group_probs(&mut teacher, lab.row(i), model, prev_tasks, config.temperature);
            }
        }
        if n_u > 0 && (want_dst || want_pl) {
            let un = snap.forward(&batch.unlabeled_weak, n_u);
            for i in 0..n_u {
                let row = un.row(i);
                if want_dst {
                    push_group_probs(&mut teacher, row, model, prev_tasks, config.temperature);
                }
                if want_pl {
                    let g = gate.unwrap();
                    if g.len() != n_u {
                        return Err(Error::Contract(format!(
                            "gate length {} does not match unlabeled batch {n_u}",
                            g.len()
                        )));
                    }
                    if g[i] {
                        pseudo[i] = Some(argmax(&row[..prev_width]));
                    }
                }
            }
        }
    }

    let mut confident = vec![None; n_u];
    if config.consistency && config.lambda_ucl != 0.0 && n_u > 0 {
        let weak = model.forward(&batch.unlabeled_weak, n_u);
        for (i, slot) in confident.iter_mut().enumerate() {
            let q = softmax(weak.row(i), 1.0);
            let k = argmax(&q);
            if q[k] >= config.tau_fm {
                *slot = Some(k);
            }
        }
    }

    let k = model.n_outputs();
    let weights = if config.class_balance {
        let accepted: Vec<usize> = pseudo.iter().flatten().copied().collect();
        class_balance_weights(&batch.labels, &accepted, k)
    } else {
        ClassWeights::uniform(k)
    };
    Ok(StepTargets {
        prev_tasks,
        teacher,
        prev_width,
        pseudo,
        confident,
        weights,
    })
}

fn push_group_probs(
    out: &mut Vec<f64>,
    logits: &[f64],
    model: &IncrementalClassifier,
    prev_tasks: usize,
    temperature: f64,
) {
    for t in 1..=prev_tasks {
        out.extend(softmax(&logits[model.group(t)], temperature));
    }
}

/// Loss breakdown and gradient of `l_total` with respect to every live
/// parameter, holding `targets` fixed.
pub fn objective(
    model: &IncrementalClassifier,
    batch: &StepBatch,
    targets: &StepTargets,
    config: &ObjectiveConfig,
) -> (LossBreakdown, Vec<f64>) {
    let net = model.net();
    let width = model.n_outputs();
    let n_l = batch.n_labeled();
    let n_u = batch.n_unlabeled();
    let b_pl = targets.accepted();
    let denom = (n_l + b_pl) as f64;
    let mut grad = vec![0.0; net.n_params()];

    let use_dst = !targets.teacher.is_empty() && targets.prev_tasks > 0;
    let dst_rows = if use_dst { targets.teacher.len() / targets.prev_width } else { 0 };
    let dst_scale = if use_dst {
        config.lambda_dst / (targets.prev_tasks as f64 * dst_rows as f64)
    } else {
        0.0
    };
    let mut dst_sum = 0.0;

    let mut distill_row = |row: usize, logits: &[f64], d: &mut [f64]| {
        let t_row = &targets.teacher[row * targets.prev_width..(row + 1) * targets.prev_width];
        for t in 1..=targets.prev_tasks {
            let g = model.group(t);
            dst_sum += kl_grad(
                &t_row[g.clone()],
                &logits[g.clone()],
                config.temperature,
                dst_scale,
                &mut d[g],
            );
        }
    };

    // labeled weak view: supervised term and distillation rows 0..n_l
    let mut l_s = 0.0;
    if n_l > 0 {
        let fwd = model.forward(&batch.labeled_weak, n_l);
        let mut dout = vec![0.0; n_l * width];
        for i in 0..n_l {
            let k = batch.labels[i];
            let w = targets.weights.get(k);
            let d = &mut dout[i * width..(i + 1) * width];
            l_s += w * cross_entropy_grad(fwd.row(i), k, w / denom, d);
            if use_dst {
                distill_row(i, fwd.row(i), d);
            }
        }
        net.backward(&fwd, &dout, &mut grad, None);
    }

    // unlabeled weak view: hard distillation and distillation rows n_l..
    let mut l_pl = 0.0;
    let weak_needed = n_u > 0 && (b_pl > 0 || (use_dst && dst_rows > n_l));
    if weak_needed {
        let fwd = model.forward(&batch.unlabeled_weak, n_u);
        let mut dout = vec![0.0; n_u * width];
        for i in 0..n_u {
            let d = &mut dout[i * width..(i + 1) * width];
            if let Some(k) = targets.pseudo[i] {
                let w = targets.weights.get(k);
                l_pl += w * cross_entropy_grad(fwd.row(i), k, w / denom, d);
            }
            if use_dst && dst_rows > n_l {
                distill_row(n_l + i, fwd.row(i), d);
            }
        }
        net.backward(&fwd, &dout, &mut grad, None);
    }

    // strong view: consistency
    let mut l_ul = 0.0;
    if n_u > 0 && targets.confident.iter().any(Option::is_some) {
        let fwd = model.forward(&batch.unlabeled_strong, n_u);
        let mut dout = vec![0.0; n_u * width];
        let scale = config.lambda_ucl / n_u as f64;
        for i in 0..n_u {
            if let Some(k) = targets.confident[i] {
                l_ul += cross_entropy_grad(fwd.row(i), k, scale, &mut dout[i * width..(i + 1) * width]);
            }
        }
        l_ul /= n_u as f64;
        net.backward(&fwd, &dout, &mut grad, None);
    }

    let l_dst = if use_dst {
        dst_sum / (targets.prev_tasks as f64 * dst_rows as f64)
    } else {
        0.0
    };
    let breakdown = total_loss(
        l_s,
        l_pl,
        l_ul,
        l_dst,
        n_l,
        b_pl,
        config.lambda_ucl,
        config.lambda_dst,
    );
    (breakdown, grad)
}
