//! Building blocks layered on the autodiff tape: parameters, initializers,
//! linear and convolutional projections, normalization, a gated recurrent
//! cell, and the Adam optimizer used by the trainer.

use crate::tensor::{Array, GradStore, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward-pass mode. Training mode carries the run's dropout stream;
/// evaluation is a pure function of parameters and inputs.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Dropout that vanishes in eval mode.
pub fn apply_dropout(tape: &Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train { rng } if p > 0.0 => tape.dropout(x, p, rng),
        _ => x,
    }
}

/// A named trainable tensor. The id is unique per process and lets a tape
/// fold repeated uses of the same parameter into one gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    pub name: String,
    pub value: Array,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Uniform(-bound, bound), the fan-in convention used for projections.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    Array::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 * bound - bound)
}

pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Array {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

/// Standard normal scaled by `1/sqrt(dim)`; used for node embeddings so the
/// embedding inner products start at O(1).
pub fn scaled_normal(rng: &mut ChaCha8Rng, shape: &[usize], dim: usize) -> Array {
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
    Array::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

/// Affine map over the last axis: `y = x . w + b` with `w: [d_in, d_out]`.
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[d_in, d_out], d_in),
            ),
            bias: bias.then(|| {
                Param::new(format!("{name}.bias"), fan_in_uniform(rng, &[d_out], d_in))
            }),
        }
    }

    /// `x: [..., d_in] -> [..., d_out]`.
    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let shape = tape.shape(x);
        let d_in = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[rows, d_in]);
        let w = tape.param(&self.weight);
        let mut y = tape.matmul(flat, w);
        if let Some(b) = &self.bias {
            let bv = tape.param(b);
            y = tape.add(y, bv);
        }
        let mut out_shape = shape;
        let d_out = self.weight.value.shape()[1];
        *out_shape.last_mut().unwrap() = d_out;
        tape.reshape(y, &out_shape)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// 1x1 convolution over the channel axis of a `[B, C, N, T]` tensor.
pub struct ChannelLinear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl ChannelLinear {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        ChannelLinear {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[c_out, c_in], c_in),
            ),
            bias: bias.then(|| {
                Param::new(format!("{name}.bias"), fan_in_uniform(rng, &[c_out], c_in))
            }),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.channel_linear(x, w, b)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Dilated causal convolution along time for `[B, C, N, T]` tensors.
pub struct CausalConv {
    pub weight: Param,
    pub bias: Param,
    pub dilation: usize,
}

impl CausalConv {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let fan = c_in * kernel;
        CausalConv {
            weight: Param::new(
                format!("{name}.weight"),
                fan_in_uniform(rng, &[c_out, c_in, kernel], fan),
            ),
            bias: Param::new(format!("{name}.bias"), fan_in_uniform(rng, &[c_out], fan)),
            dilation,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.causal_conv(x, w, Some(b), self.dilation)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// LayerNorm over the last axis with per-feature affine parameters.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Array::ones(IxDyn(&[dim]))),
            beta: Param::new(format!("{name}.beta"), Array::zeros(IxDyn(&[dim]))),
        }
    }

    /// `x: [..., d]`, normalized per leading index over the d features.
    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let normed = normalize_trailing(tape, x, 1);
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let scaled = tape.mul(normed, g);
        tape.add(scaled, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// LayerNorm over all trailing axes (one sample = one normalization group)
/// with a scalar gain/bias; used on the N x N edge-logit matrices.
pub struct MatrixLayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl MatrixLayerNorm {
    pub fn new(name: &str) -> Self {
        MatrixLayerNorm {
            gain: Param::new(format!("{name}.gain"), Array::ones(IxDyn(&[1]))),
            bias: Param::new(format!("{name}.bias"), Array::zeros(IxDyn(&[1]))),
        }
    }

    /// Normalizes over every axis after the first.
    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let k = tape.shape(x).len() - 1;
        let normed = normalize_trailing(tape, x, k);
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        let scaled = tape.mul(normed, g);
        tape.add(scaled, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// `(x - mean) / sqrt(var + eps)` over the trailing `k` axes.
fn normalize_trailing(tape: &Tape, x: Var, k: usize) -> Var {
    let mu = tape.mean_trailing(x, k);
    let centered = tape.sub(x, mu);
    let var = tape.mean_trailing(tape.mul(centered, centered), k);
    let inv = tape.recip_sqrt(var, LAYER_NORM_EPS);
    tape.mul(centered, inv)
}

/// Gated recurrent cell with the update gate wired so that a closed gate
/// (z = 0) leaves the hidden state untouched: `h' = z*n + (1-z)*h`.
pub struct GruCell {
    pub input_weights: Param,  // [d_in, 3h] -> reset | update | candidate
    pub input_bias: Param,     // [3h]
    pub hidden_weights: Param, // [h, 3h]
    pub hidden_bias: Param,    // [3h]
    hidden: usize,
}

impl GruCell {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_in: usize, hidden: usize) -> Self {
        GruCell {
            input_weights: Param::new(
                format!("{name}.input_weights"),
                fan_in_uniform(rng, &[d_in, 3 * hidden], hidden),
            ),
            input_bias: Param::new(
                format!("{name}.input_bias"),
                fan_in_uniform(rng, &[3 * hidden], hidden),
            ),
            hidden_weights: Param::new(
                format!("{name}.hidden_weights"),
                fan_in_uniform(rng, &[hidden, 3 * hidden], hidden),
            ),
            hidden_bias: Param::new(
                format!("{name}.hidden_bias"),
                fan_in_uniform(rng, &[3 * hidden], hidden),
            ),
            hidden,
        }
    }

    /// One step. `x: [M, d_in]`, `h: [M, hidden]` -> `[M, hidden]`.
    pub fn step(&self, tape: &Tape, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let wx = tape.param(&self.input_weights);
        let bx = tape.param(&self.input_bias);
        let wh = tape.param(&self.hidden_weights);
        let bh = tape.param(&self.hidden_bias);

        let gx = tape.add(tape.matmul(x, wx), bx);
        let gh = tape.add(tape.matmul(h, wh), bh);
        let slice3 = |v: Var, i: usize| tape.slice_axis_op(v, 1, i * hd, hd);

        let reset = tape.sigmoid(tape.add(slice3(gx, 0), slice3(gh, 0)));
        let update = tape.sigmoid(tape.add(slice3(gx, 1), slice3(gh, 1)));
        let candidate = tape.tanh(tape.add(
            slice3(gx, 2),
            tape.mul(reset, slice3(gh, 2)),
        ));

        let keep = tape.add_scalar(tape.neg(update), 1.0);
        tape.add(tape.mul(update, candidate), tape.mul(keep, h))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.input_weights,
            &self.input_bias,
            &self.hidden_weights,
            &self.hidden_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.input_weights,
            &mut self.input_bias,
            &mut self.hidden_weights,
            &mut self.hidden_bias,
        ]
    }
}

/// Adam with optional global-norm gradient clipping. State is kept in the
/// same order as the model's parameter list.
#[derive(Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moments: Vec<Array>,
    pub second_moments: Vec<Array>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[&Param]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moments: params.iter().map(|p| Array::zeros(p.value.shape())).collect(),
            second_moments: params.iter().map(|p| Array::zeros(p.value.shape())).collect(),
        }
    }

    /// Applies one update. `grads` must align with `params`; entries may be
    /// `None` for parameters untouched by the loss (their state still decays
    /// toward zero the standard way via zero gradients). Returns the global
    /// gradient norm before clipping.
    pub fn step(
        &mut self,
        params: Vec<&mut Param>,
        grads: Vec<Option<Array>>,
        clip_norm: Option<f64>,
    ) -> f64 {
        assert_eq!(params.len(), grads.len());
        let mut grads: Vec<Array> = grads
            .into_iter()
            .zip(params.iter())
            .map(|(g, p)| g.unwrap_or_else(|| Array::zeros(p.value.shape())))
            .collect();
        let norm: f64 = grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if let Some(clip) = clip_norm {
            if norm > clip && norm > 0.0 {
                let scale = clip / norm;
                for g in &mut grads {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for ((param, grad), (m, v)) in params
            .into_iter()
            .zip(grads.iter())
            .zip(self.first_moments.iter_mut().zip(self.second_moments.iter_mut()))
        {
            m.zip_mut_with(grad, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(grad, |vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
            });
            let lr = self.learning_rate;
            let eps = self.eps;
            ndarray::Zip::from(&mut param.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let m_hat = mv / bias1;
                    let v_hat = vv / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        norm
    }
}

/// Pull gradients for a parameter list out of a finished backward pass.
pub fn collect_grads(tape: &Tape, store: &mut GradStore, params: &[&Param]) -> Vec<Option<Array>> {
    params
        .iter()
        .map(|p| tape.var_of_param(p).and_then(|v| store.take(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_shapes_and_bias() {
        let mut r = rng(0);
        let lin = Linear::new(&mut r, "t", 3, 5, true);
        let tape = Tape::new();
        let x = tape.leaf(Array::zeros(IxDyn(&[2, 4, 3])));
        let y = lin.forward(&tape, x);
        assert_eq!(tape.shape(y), vec![2, 4, 5]);
        // zero input -> output equals bias per row
        let yv = tape.value(y);
        for row in yv.view().into_shape_with_order((8, 5)).unwrap().rows() {
            for (a, b) in row.iter().zip(lin.bias.as_ref().unwrap().value.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut r = rng(1);
        let ln = LayerNorm::new("ln", 6);
        let tape = Tape::new();
        let x = tape.leaf(uniform(&mut r, &[4, 6], 3.0));
        let y = ln.forward(&tape, x);
        let yv = tape.value(y);
        for row in yv.rows() {
            let mean: f64 = row.sum() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gru_closed_update_gate_is_identity() {
        let mut r = rng(2);
        let mut cell = GruCell::new(&mut r, "gru", 4, 4);
        // force the update gate shut: z = sigmoid(very negative)
        cell.input_bias
            .value
            .slice_mut(ndarray::s![4..8])
            .fill(-40.0);
        cell.input_weights
            .value
            .slice_mut(ndarray::s![.., 4..8])
            .fill(0.0);
        cell.hidden_weights
            .value
            .slice_mut(ndarray::s![.., 4..8])
            .fill(0.0);
        cell.hidden_bias
            .value
            .slice_mut(ndarray::s![4..8])
            .fill(0.0);

        let tape = Tape::new();
        let x = tape.leaf(uniform(&mut r, &[3, 4], 1.0));
        let h0 = uniform(&mut r, &[3, 4], 1.0);
        let h = tape.leaf(h0.clone());
        let h1 = cell.step(&tape, x, h);
        let h1v = tape.value(h1);
        for (a, b) in h1v.iter().zip(h0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut r = rng(3);
        let mut p = Param::new("p", uniform(&mut r, &[3, 3], 1.0));
        let before = p.value.clone();
        let mut opt = Adam::new(0.0, &[&p]);
        let g = Array::from_elem(IxDyn(&[3, 3]), 0.7);
        opt.step(vec![&mut p], vec![Some(g)], Some(5.0));
        let delta = (&p.value - &before).iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(delta < 1e-12);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Param::new("p", Array::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(0.1, &[&p]);
        for _ in 0..500 {
            let g = p.value.mapv(|x| 2.0 * x);
            opt.step(vec![&mut p], vec![Some(g)], None);
        }
        assert!(p.value[[0]].abs() < 1e-2);
    }

    #[test]
    fn grad_clipping_bounds_update_norm() {
        let mut p = Param::new("p", Array::zeros(IxDyn(&[4])));
        let mut opt = Adam::new(1.0, &[&p]);
        let g = Array::from_elem(IxDyn(&[4]), 100.0);
        let norm = opt.step(vec![&mut p], vec![Some(g)], Some(1.0));
        assert!((norm - 200.0).abs() < 1e-9);
    }
}
