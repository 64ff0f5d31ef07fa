//! Fully connected network with tanh hidden layers and a linear output
//! layer, with hand-written reverse-mode gradients over a flat parameter
//! vector.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Layer `l` stores its weight matrix (`out x in`, row-major) followed by
/// its bias, and layers are laid out back to back in `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    rows: usize,
    /// `acts[0]` is the input, `acts[l]` the tanh output of hidden layer
    /// `l`, and the last entry the raw output layer.
    acts: Vec<Vec<f64>>,
}

impl Forward {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn outputs(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    pub fn width(&self) -> usize {
        self.outputs().len() / self.rows.max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.outputs()[i * w..(i + 1) * w]
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Mlp {
    /// `sizes` is `[input, hidden.., output]`.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut params = Vec::with_capacity(param_count(sizes));
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = if l == last {
                1.0 / (fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && param_count(&sizes) == params.len()).then_some(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// Index range of the output layer (weights and bias) in `params`.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        self.layer_offset(self.sizes.len() - 2)..self.params.len()
    }

    /// Appends `extra` output units. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// bias 0. Existing outputs are untouched.
    pub fn append_outputs(&mut self, extra: usize, rng: &mut Rng) {
        let l = self.sizes.len() - 2;
        let fan_in = self.sizes[l];
        let old_out = self.sizes[l + 1];
        let off = self.layer_offset(l);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut tail: Vec<f64> = self.params.split_off(off);
        let bias = tail.split_off(old_out * fan_in);
        self.params.extend_from_slice(&tail);
        self.params
            .extend((0..extra * fan_in).map(|_| rng.random_range(-bound..=bound)));
        self.params.extend_from_slice(&bias);
        self.params.extend(std::iter::repeat_n(0.0, extra));
        self.sizes[l + 1] = old_out + extra;
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Forward {
        debug_assert_eq!(x.len(), rows * self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let mut out = vec![0.0; rows * fan_out];
            for i in 0..rows {
                let xi = &input[i * fan_in..(i + 1) * fan_in];
                let oi = &mut out[i * fan_out..(i + 1) * fan_out];
                for (j, o) in oi.iter_mut().enumerate() {
                    *o = b[j] + dot(&w[j * fan_in..(j + 1) * fan_in], xi);
                }
            }
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        Forward { rows, acts }
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(outputs).
    pub fn backward(&self, fwd: &Forward, doutput: &[f64], grad: &mut [f64], dinput: Option<&mut Vec<f64>>) {
        self.backward_impl(fwd, doutput, Some(grad), dinput);
    }

    /// d(loss)/d(input) only; parameter gradients are not formed.
    pub fn input_gradient(&self, fwd: &Forward, doutput: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.backward_impl(fwd, doutput, None, Some(&mut out));
        out
    }

    fn backward_impl(
        &self,
        fwd: &Forward,
        doutput: &[f64],
        mut grad: Option<&mut [f64]>,
        dinput: Option<&mut Vec<f64>>,
    ) {
        let rows = fwd.rows;
        let n_layers = self.sizes.len() - 1;
        let want_input = dinput.is_some();
        let mut delta = doutput.to_vec();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut input_grad = None;
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let w = &self.params[off..off + fan_in * fan_out];
            if let Some(grad) = grad.as_deref_mut() {
                let (gw, gb) =
                    grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                let input = &fwd.acts[l];
                for i in 0..rows {
                    let xi = &input[i * fan_in..(i + 1) * fan_in];
                    let di = &delta[i * fan_out..(i + 1) * fan_out];
                    for (j, &d) in di.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, xi, &mut gw[j * fan_in..(j + 1) * fan_in]);
                            gb[j] += d;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let mut prev = vec![0.0; rows * fan_in];
            for i in 0..rows {
                let di = &delta[i * fan_out..(i + 1) * fan_out];
                let pi = &mut prev[i * fan_in..(i + 1) * fan_in];
                for (j, &d) in di.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &w[j * fan_in..(j + 1) * fan_in], pi);
                    }
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(&fwd.acts[l]) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            } else {
                input_grad = Some(prev);
            }
        }
        if let (Some(out), Some(g)) = (dinput, input_grad) {
            *out = g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn scalar_loss(net: &Mlp, x: &[f64], rows: usize, coef: &[f64]) -> f64 {
        let f = net.forward(x, rows);
        f.outputs().iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = derive_rng(0, &[]);
        let net = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let coef = [0.3, -1.2, 0.8, 0.5];
        let fwd = net.forward(&x, 2);
        let mut grad = vec![0.0; net.n_params()];
        let mut dx = Vec::new();
        net.backward(&fwd, &coef, &mut grad, Some(&mut dx));
        let h = 1e-5;
        for k in 0..net.n_params() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let up = scalar_loss(&p, &x, 2, &coef);
            p.params_mut()[k] -= 2.0 * h;
            let down = scalar_loss(&p, &x, 2, &coef);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7, "param {k}: {fd} vs {}", grad[k]);
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let up = scalar_loss(&net, &xp, 2, &coef);
            xp[k] -= 2.0 * h;
            let down = scalar_loss(&net, &xp, 2, &coef);
            assert!(((up - down) / (2.0 * h) - dx[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn appending_outputs_keeps_old_outputs_bitwise() {
        let mut rng = derive_rng(1, &[]);
        let mut net = Mlp::new(&[4, 8, 3], &mut rng);
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
        let before = net.forward(&x, 3);
        net.append_outputs(2, &mut rng);
        assert_eq!(net.output_dim(), 5);
        let after = net.forward(&x, 3);
        for i in 0..3 {
            assert_eq!(&after.row(i)[..3], before.row(i));
        }
        let r = net.output_layer_range();
        assert_eq!(&net.params()[r.end - 2..], &[0.0, 0.0]);
    }
}
