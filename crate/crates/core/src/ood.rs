//! Decomposed-confidence OoD detector: a per-class numerator head `f_i(x)`
//! over a shared positive denominator `g(x) = sigmoid(s(x))`, trained with
//! cross-entropy on the quotient logits `f_i / g`, scored as
//! `max_i f_i(x') / g(x')` after one signed-gradient input perturbation,
//! and thresholded at a target true-positive rate on held-out labeled data.

use std::cmp::Ordering;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{argmax, softmax};
use crate::nn::{Forward, Mlp};
use crate::optim::{Sgd, StepSchedule};
use crate::rng::{derive_rng, tag};
use crate::stream::draw_indices;
use crate::taxonomy::{ClassId, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Input pre-processing step size.
    pub epsilon: f64,
    /// Fraction of each class held out for calibration.
    pub split_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 20,
            batch_size: 64,
            schedule: StepSchedule {
                base: 0.01,
                milestones: vec![12.0, 16.0, 18.0],
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            epsilon: 0.002,
            split_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodDetector {
    net: Mlp,
    classes: Vec<ClassId>,
    epsilon: f64,
    threshold: Option<f64>,
    tpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

fn sigmoid(s: f64) -> f64 {
    (1.0 / (1.0 + (-s).exp())).max(f64::MIN_POSITIVE)
}

/// Per class, shuffles the training indices and holds out
/// `round(fraction * count)` of them (at least one on each side).
pub fn split_holdout(
    dataset: &Dataset,
    classes: &[ClassId],
    fraction: f64,
    seed: u64,
) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0,1), got {fraction}")));
    }
    let mut rng = derive_rng(seed, &[tag::SPLIT]);
    let mut split = HoldoutSplit {
        train: Vec::new(),
        holdout: Vec::new(),
    };
    for &c in classes {
        let mut idx = dataset.train_indices(c).to_vec();
        if idx.len() < 2 {
            return Err(Error::Split {
                class: c,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        split.holdout.extend_from_slice(&idx[..k]);
        split.train.extend_from_slice(&idx[k..]);
    }
    if split.train.is_empty() {
        return Err(Error::Data("no labeled data for the detector".into()));
    }
    Ok(split)
}

/// Trains a detector on the training half of the labeled data of `classes`
/// (supervised loss only) and returns it with the untouched holdout.
pub fn train_detector(
    dataset: &Dataset,
    classes: &[ClassId],
    config: &DetectorConfig,
    seed: u64,
) -> Result<(OodDetector, HoldoutSplit)> {
    if classes.is_empty() {
        return Err(Error::Data("detector needs at least one class".into()));
    }
    let split = split_holdout(dataset, classes, config.split_fraction, seed)?;
    let mut rng = derive_rng(seed, &[tag::DETECTOR]);
    let mut sizes = vec![dataset.dim()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(classes.len() + 1);
    let mut detector = OodDetector {
        net: Mlp::new(&sizes, &mut rng),
        classes: classes.to_vec(),
        epsilon: config.epsilon,
        threshold: None,
        tpr: None,
    };
    let mut class_slot = vec![usize::MAX; dataset.n_classes()];
    for (k, &c) in classes.iter().enumerate() {
        class_slot[c as usize] = k;
    }

    let steps = split.train.len().div_ceil(config.batch_size);
    let mut sgd = Sgd::new(detector.net.n_params(), config.momentum, config.weight_decay);
    for epoch in 0..config.epochs {
        for step in 0..steps {
            let lr = config
                .schedule
                .lr(epoch as f64 + step as f64 / steps as f64);
            let picks = draw_indices(&split.train, config.batch_size, &mut rng);
            let x = dataset.gather(&picks);
            let targets: Vec<usize> = picks
                .iter()
                .map(|&i| class_slot[dataset.label(i) as usize])
                .collect();
            let grad = detector.loss_gradient(&x, &targets);
            sgd.step(detector.net.params_mut(), &grad, lr);
        }
    }
    if detector.net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Data("detector training diverged".into()));
    }
    Ok((detector, split))
}

impl OodDetector {
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn tpr(&self) -> Option<f64> {
        self.tpr
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon;
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Quotient logits `f_i / g` of one output row.
    fn quotient(&self, row: &[f64]) -> (Vec<f64>, f64) {
        let c = self.n_classes();
        let g = sigmoid(row[c]);
        (row[..c].iter().map(|f| f / g).collect(), g)
    }

    /// d(output row) from d(quotient logits).
    fn quotient_backward(&self, row: &[f64], g: f64, dq: &[f64], out: &mut [f64]) {
        let c = self.n_classes();
        let mut ds = 0.0;
        for i in 0..c {
            out[i] = dq[i] / g;
            ds += dq[i] * row[i];
        }
        out[c] = -ds * (1.0 - g) / g;
    }

    /// Gradient of the mean cross-entropy on quotient logits.
    pub fn loss_gradient(&self, x: &[f64], targets: &[usize]) -> Vec<f64> {
        let rows = targets.len();
        let width = self.n_classes() + 1;
        let fwd = self.net.forward(x, rows);
        let mut dout = vec![0.0; rows * width];
        for (i, &t) in targets.iter().enumerate() {
            let row = fwd.row(i);
            let (q, g) = self.quotient(row);
            let mut dq = softmax(&q, 1.0);
            dq[t] -= 1.0;
            dq.iter_mut().for_each(|v| *v /= rows as f64);
            self.quotient_backward(row, g, &dq, &mut dout[i * width..(i + 1) * width]);
        }
        let mut grad = vec![0.0; self.net.n_params()];
        self.net.backward(&fwd, &dout, &mut grad, None);
        grad
    }

    pub fn loss(&self, x: &[f64], targets: &[usize]) -> f64 {
        let fwd = self.net.forward(x, targets.len());
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| crate::losses::cross_entropy(&self.quotient(fwd.row(i)).0, t))
            .sum::<f64>()
            / targets.len() as f64
    }

    fn raw_scores(&self, fwd: &Forward) -> Vec<f64> {
        (0..fwd.rows())
            .map(|i| {
                let (q, _) = self.quotient(fwd.row(i));
                q.into_iter().fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Scores without input pre-processing.
    pub fn raw_score_batch(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.net.input_dim();
        self.raw_scores(&self.net.forward(x, rows))
    }

    /// `max_i f_i(x') / g(x')` where `x' = x + epsilon * sign(grad_x score)`.
    pub fn score_batch(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.net.input_dim();
        let rows = x.len() / dim;
        let fwd = self.net.forward(x, rows);
        if self.epsilon == 0.0 {
            return self.raw_scores(&fwd);
        }
        let width = self.n_classes() + 1;
        let mut dout = vec![0.0; rows * width];
        for i in 0..rows {
            let row = fwd.row(i);
            let (q, g) = self.quotient(row);
            let k = argmax(&q);
            let mut dq = vec![0.0; self.n_classes()];
            dq[k] = 1.0;
            self.quotient_backward(row, g, &dq, &mut dout[i * width..(i + 1) * width]);
        }
        let dx = self.net.input_gradient(&fwd, &dout);
        let perturbed: Vec<f64> = x
            .iter()
            .zip(&dx)
            .map(|(&v, &d)| v + self.epsilon * sign(d))
            .collect();
        self.raw_scores(&self.net.forward(&perturbed, rows))
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.score_batch(x)[0]
    }

    /// Accuracy of the numerator argmax on labeled rows.
    pub fn accuracy(&self, x: &[f64], labels: &[ClassId]) -> f64 {
        let fwd = self.net.forward(x, labels.len());
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| self.classes[argmax(&fwd.row(i)[..self.n_classes()])] == y)
            .count();
        hits as f64 / labels.len() as f64
    }

    /// Sets the threshold from in-distribution holdout features.
    pub fn calibrate(&mut self, holdout: &[f64], tpr: f64) -> Result<f64> {
        let scores = self.score_batch(holdout);
        let tau = calibrate_threshold(&scores, tpr)?;
        self.threshold = Some(tau);
        self.tpr = Some(tpr);
        Ok(tau)
    }

    /// Accept mask `score >= threshold`.
    pub fn accept(&self, x: &[f64]) -> Result<Vec<bool>> {
        let tau = self
            .threshold
            .ok_or_else(|| Error::Contract("detector has not been calibrated".into()))?;
        Ok(self.score_batch(x).into_iter().map(|s| s >= tau).collect())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sorts scores descending and returns the one at index `ceil(tpr * n) - 1`,
/// so `{s >= tau}` is the smallest accepted fraction that reaches `tpr`.
pub fn calibrate_threshold(scores: &[f64], tpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("calibration needs a nonempty holdout".into()));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Config(format!("TPR must lie in (0,1], got {tpr}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let k = ((tpr * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

/// Probability that a random in-distribution score exceeds a random OoD
/// score, ties counted one half (normalized Mann-Whitney U).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Contract("AUROC needs nonempty score sets".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // midranks (1-based) over tie blocks
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_id += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let n1 = id_scores.len() as f64;
    let n0 = ood_scores.len() as f64;
    let u = rank_sum_id - n1 * (n1 + 1.0) / 2.0;
    Ok(u / (n1 * n0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{synthetic_dataset, Taxonomy};

    fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5);
        // 1 vs {2,2,4}: 0; 2 vs {2,2,4}: 1/2+1/2; 3 vs {2,2,4}: 1+1 -> 3/9
        assert!((auroc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0]).unwrap() - 3.0 / 9.0).abs() < 1e-15);
        assert_eq!(pairwise(&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0]), 3.0 / 9.0);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn threshold_quantile_convention() {
        assert_eq!(calibrate_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.0);
        assert_eq!(calibrate_threshold(&[4.0, 1.0, 3.0, 2.0], 1.0).unwrap(), 1.0);
        assert_eq!(calibrate_threshold(&[4.0, 1.0, 3.0, 2.0], 0.01).unwrap(), 4.0);
        assert!(calibrate_threshold(&[1.0], 0.0).is_err());
    }

    #[test]
    fn holdout_split_halves_each_class() {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 100, 2, 4, 0).unwrap();
        let classes: Vec<ClassId> = (0..10).collect();
        let s = split_holdout(&d, &classes, 0.5, 3).unwrap();
        for &c in &classes {
            assert_eq!(s.holdout.iter().filter(|&&i| d.label(i) == c).count(), 50);
            assert_eq!(s.train.iter().filter(|&&i| d.label(i) == c).count(), 50);
        }
        assert_eq!(s, split_holdout(&d, &classes, 0.5, 3).unwrap());
    }

    #[test]
    fn tiny_class_is_a_split_error() {
        let t = Taxonomy::parse("s,p,0\ns,p,1\n").unwrap();
        let d = synthetic_dataset(&t, 1, 1, 2, 0).unwrap();
        assert!(matches!(
            split_holdout(&d, &[0, 1], 0.5, 0),
            Err(Error::Split { class: 0, count: 1 })
        ));
    }

    #[test]
    fn quotient_gradient_matches_finite_differences() {
        let mut rng = derive_rng(1, &[]);
        let det = OodDetector {
            net: Mlp::new(&[3, 5, 4], &mut rng),
            classes: vec![0, 1, 2],
            epsilon: 0.0,
            threshold: None,
            tpr: None,
        };
        let x = [0.3, -0.2, 1.1, 0.5, 0.5, -0.9];
        let t = [2, 0];
        let g = det.loss_gradient(&x, &t);
        let h = 1e-6;
        for k in 0..det.net.n_params() {
            let mut p = det.clone();
            p.net.params_mut()[k] += h;
            let up = p.loss(&x, &t);
            p.net.params_mut()[k] -= 2.0 * h;
            let down = p.loss(&x, &t);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} {}", g[k]);
        }
    }

    #[test]
    fn preprocessing_increases_the_score() {
        let mut rng = derive_rng(4, &[]);
        let mut det = OodDetector {
            net: Mlp::new(&[3, 6, 4], &mut rng),
            classes: vec![0, 1, 2],
            epsilon: 0.0,
            threshold: None,
            tpr: None,
        };
        let x = [0.3, -0.2, 1.1];
        let raw = det.score(&x);
        assert_eq!(raw, det.raw_score_batch(&x)[0]);
        det.epsilon = 0.01;
        assert!(det.score(&x) > raw);
        assert_eq!(det.score(&x), det.score(&x));
    }

    fn quick_config() -> DetectorConfig {
        DetectorConfig {
            hidden: vec![16],
            epochs: 10,
            batch_size: 32,
            schedule: StepSchedule {
                base: 0.01,
                milestones: vec![7.0],
                factor: 0.1,
            },
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        use crate::taxonomy::Split;
        use rand_distr::{Distribution, Normal};
        let mut rng = derive_rng(11, &[]);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let (mut x, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..2u32 {
            for _ in 0..100 {
                let sign = if c == 0 { -1.0 } else { 1.0 };
                x.push(3.0 * sign + noise.sample(&mut rng));
                x.extend((0..3).map(|_| noise.sample(&mut rng)));
                y.push(c);
                s.push(Split::Train);
            }
        }
        let d = Dataset::from_parts(4, 2, x, y, s).unwrap();
        let (det, split) = train_detector(&d, &[0, 1], &quick_config(), 0).unwrap();
        let labels: Vec<ClassId> = split.holdout.iter().map(|&i| d.label(i)).collect();
        assert!(det.accuracy(&d.gather(&split.holdout), &labels) > 0.95);
    }

    #[test]
    fn far_shifted_inputs_score_lower() {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 60, 2, 16, 0).unwrap();
        let classes: Vec<ClassId> = (0..20).collect();
        let (det, split) = train_detector(&d, &classes, &quick_config(), 2).unwrap();
        let hold = d.gather(&split.holdout);
        // 100 x the super-class radius
        let far: Vec<f64> = hold.iter().map(|v| v + 1000.0).collect();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(det.score_batch(&hold)) > mean(det.score_batch(&far)));
    }

    #[test]
    fn calibration_is_sound_on_its_own_holdout() {
        let t = Taxonomy::cifar_layout();
        let d = synthetic_dataset(&t, 40, 2, 8, 1).unwrap();
        let classes: Vec<ClassId> = (0..10).collect();
        let (mut det, split) = train_detector(&d, &classes, &quick_config(), 3).unwrap();
        let hold = d.gather(&split.holdout);
        for tpr in [0.05, 0.5, 0.95, 1.0] {
            det.calibrate(&hold, tpr).unwrap();
            let acc = det.accept(&hold).unwrap();
            let frac = acc.iter().filter(|&&a| a).count() as f64 / acc.len() as f64;
            assert!(frac >= tpr && frac <= tpr + 1.0 / acc.len() as f64 + 1e-12, "{tpr}: {frac}");
        }
    }

    #[test]
    fn uncalibrated_detector_cannot_gate() {
        let mut rng = derive_rng(4, &[]);
        let det = OodDetector {
            net: Mlp::new(&[3, 4, 3], &mut rng),
            classes: vec![0, 1],
            epsilon: 0.0,
            threshold: None,
            tpr: None,
        };
        assert!(matches!(det.accept(&[0.0; 3]), Err(Error::Contract(_))));
    }
}
