//! Reverse-mode automatic differentiation over dynamically shaped `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar loss walks the record in reverse and
//! accumulates gradients for every variable, including parameter leaves
//! registered through [`Tape::param`]. All arrays are kept in standard
//! (row-major) layout so views and reshapes stay cheap and deterministic.
//!
//! The op set is intentionally small: generic broadcasting arithmetic,
//! a few reductions, matrix products, and three fused primitives that the
//! forecaster leans on heavily (`channel_linear`, `causal_conv`,
//! `node_mix`). Everything else in the crate is composed from these.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, ArrayView2, ArrayViewMut2, Axis, Ix2, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub type Array = ndarray::ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; only valid for
/// the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Array, &mut GradStore)>;

struct OpRecord {
    out: usize,
    backward: BackwardFn,
}

/// Gradients indexed by variable, filled in by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Array>>,
}

impl GradStore {
    fn new(len: usize) -> Self {
        GradStore {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, var: Var, grad: Array) {
        match &mut self.grads[var.0] {
            Some(g) => *g += &grad,
            slot => *slot = Some(grad),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Array> {
        self.grads[var.0].take()
    }
}

/// Records a forward computation so that gradients can be replayed backward.
pub struct Tape {
    values: RefCell<Vec<Rc<Array>>>,
    ops: RefCell<Vec<OpRecord>>,
    param_vars: RefCell<HashMap<u64, Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Sum `grad` down to `target` shape, undoing an ndarray-style broadcast
/// (trailing-axis alignment, size-1 stretching).
fn reduce_to_shape(grad: &Array, target: &[usize]) -> Array {
    let mut g = grad.clone();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &want) in target.iter().enumerate() {
        if want == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn view2(a: &Array) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d array")
}

/// Contiguous slab viewed as a `rows x cols` matrix.
fn slab2(slice: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), slice).expect("slab shape")
}

fn slab2_mut(slice: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), slice).expect("slab shape")
}

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: RefCell::new(Vec::new()),
            ops: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    fn push_value(&self, value: Array) -> Var {
        let mut values = self.values.borrow_mut();
        values.push(Rc::new(standard(value)));
        Var(values.len() - 1)
    }

    fn push_op(&self, out: Var, backward: BackwardFn) {
        self.ops.borrow_mut().push(OpRecord {
            out: out.0,
            backward,
        });
    }

    /// Record a constant/input leaf. Gradients still flow to it.
    pub fn leaf(&self, value: Array) -> Var {
        self.push_value(value)
    }

    /// Register a parameter leaf, cached per parameter identity so a layer
    /// invoked several times in one forward still accumulates into a single
    /// gradient slot.
    pub fn param(&self, param: &crate::nn::Param) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&param.id()) {
            return v;
        }
        let v = self.push_value(param.value.clone());
        self.param_vars.borrow_mut().insert(param.id(), v);
        v
    }

    pub fn var_of_param(&self, param: &crate::nn::Param) -> Option<Var> {
        self.param_vars.borrow().get(&param.id()).copied()
    }

    pub fn value(&self, v: Var) -> Rc<Array> {
        Rc::clone(&self.values.borrow()[v.0])
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.values.borrow()[v.0].shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. Gradients of intermediate variables
    /// are freed as soon as their producing op has consumed them; leaves
    /// (inputs and parameters) survive in the returned store.
    pub fn backward(&self, loss: Var) -> GradStore {
        let values = self.values.borrow();
        assert_eq!(
            values[loss.0].len(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            values[loss.0].shape()
        );
        let mut store = GradStore::new(values.len());
        drop(values);
        let seed = Array::ones(self.shape(loss));
        store.accumulate(loss, seed);
        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            if let Some(g) = store.take(Var(op.out)) {
                (op.backward)(&g, &mut store);
            }
        }
        store
    }

    // ---- elementwise / broadcasting arithmetic ----

    /// `a + b`, with `b` broadcastable to `a`'s shape.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = {
            let bb = bv
                .broadcast(av.shape())
                .unwrap_or_else(|| panic!("add: cannot broadcast {:?} to {:?}", bv.shape(), av.shape()));
            &*av + &bb
        };
        let b_shape = bv.shape().to_vec();
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                sink.accumulate(a, g.clone());
                sink.accumulate(b, reduce_to_shape(g, &b_shape));
            }),
        );
        out
    }

    /// `a - b`, with `b` broadcastable to `a`'s shape.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `a * b` elementwise, with `b` broadcastable to `a`'s shape.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = {
            let bb = bv
                .broadcast(av.shape())
                .unwrap_or_else(|| panic!("mul: cannot broadcast {:?} to {:?}", bv.shape(), av.shape()));
            &*av * &bb
        };
        let b_shape = bv.shape().to_vec();
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let bb = bc.broadcast(g.shape()).expect("mul backward broadcast");
                sink.accumulate(a, g * &bb);
                sink.accumulate(b, reduce_to_shape(&(g * &*ac), &b_shape));
            }),
        );
        out
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = self.push_value(av.mapv(|x| x * c));
        self.push_op(
            out,
            Box::new(move |g, sink| sink.accumulate(a, g.mapv(|x| x * c))),
        );
        out
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = self.push_value(av.mapv(|x| x + c));
        self.push_op(out, Box::new(move |g, sink| sink.accumulate(a, g.clone())));
        out
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- activations ----

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        // NaN is preserved, not laundered to zero, so bad numerics surface
        let out = self.push_value(av.mapv(|x| if x.is_nan() { x } else { x.max(0.0) }));
        let ac = Rc::clone(&av);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&ac, |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                sink.accumulate(a, gx);
            }),
        );
        out
    }

    pub fn abs(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = self.push_value(av.mapv(f64::abs));
        let ac = Rc::clone(&av);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&ac, |gv, &x| {
                    *gv *= if x == 0.0 { 0.0 } else { x.signum() };
                });
                sink.accumulate(a, gx);
            }),
        );
        out
    }

    pub fn tanh(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = self.push_value(av.mapv(f64::tanh));
        let yc = self.value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&yc, |gv, &y| *gv *= 1.0 - y * y);
                sink.accumulate(a, gx);
            }),
        );
        out
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = self.push_value(av.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        let yc = self.value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&yc, |gv, &y| *gv *= y * (1.0 - y));
                sink.accumulate(a, gx);
            }),
        );
        out
    }

    /// Row-wise softmax over the last axis (numerically stabilized).
    pub fn softmax_last(&self, a: Var) -> Var {
        let av = self.value(a);
        let last = Axis(av.ndim() - 1);
        let mut out = (*av).clone();
        for mut lane in out.lanes_mut(last) {
            let m = lane.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let out = self.push_value(out);
        let yc = self.value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = g.clone();
                let last = Axis(yc.ndim() - 1);
                for (mut glane, ylane) in gx.lanes_mut(last).into_iter().zip(yc.lanes(last)) {
                    let dot: f64 = glane.iter().zip(ylane.iter()).map(|(gv, yv)| gv * yv).sum();
                    for (gv, &yv) in glane.iter_mut().zip(ylane.iter()) {
                        *gv = yv * (*gv - dot);
                    }
                }
                sink.accumulate(a, gx);
            }),
        );
        out
    }

    // ---- reductions ----

    /// Mean over the trailing `k` axes, keeping them as size-1 dims.
    pub fn mean_trailing(&self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let ndim = av.ndim();
        assert!(k >= 1 && k <= ndim);
        let count: usize = av.shape()[ndim - k..].iter().product();
        let mut red = (*av).clone();
        for _ in 0..k {
            let ax = Axis(red.ndim() - 1);
            red = red.sum_axis(ax);
        }
        for _ in 0..k {
            let ax = Axis(red.ndim());
            red = red.insert_axis(ax);
        }
        red.mapv_inplace(|x| x / count as f64);
        let a_shape = av.shape().to_vec();
        let out = self.push_value(red);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let gb = g
                    .broadcast(a_shape.as_slice())
                    .expect("mean_trailing backward broadcast")
                    .to_owned();
                sink.accumulate(a, gb.mapv(|x| x / count as f64));
            }),
        );
        out
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = self.push_value(ndarray::arr0(av.sum()).into_dyn());
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                sink.accumulate(a, Array::from_elem(shape.as_slice(), gv));
            }),
        );
        out
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `(a + eps)^(-1/2)` elementwise; `a + eps` must be positive.
    pub fn recip_sqrt(&self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let out = self.push_value(av.mapv(|x| 1.0 / (x + eps).sqrt()));
        let yc = self.value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = g.clone();
                gx.zip_mut_with(&yc, |gv, &y| *gv *= -0.5 * y * y * y);
                sink.accumulate(a, gx);
            }),
        );
        out
    }

    // ---- linear algebra ----

    /// 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = view2(&av).dot(&view2(&bv)).into_dyn();
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let g2 = view2(g);
                sink.accumulate(a, g2.dot(&view2(&bc).t()).into_dyn());
                sink.accumulate(b, view2(&ac).t().dot(&g2).into_dyn());
            }),
        );
        out
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bsz2, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(bsz, bsz2, "batch_matmul batch sizes differ");
        assert_eq!(k, k2, "batch_matmul inner dims differ");
        let mut out = Array::zeros(vec![bsz, m, n]);
        for i in 0..bsz {
            let ab = av.index_axis(Axis(0), i);
            let bb = bv.index_axis(Axis(0), i);
            let mut ob = out.index_axis_mut(Axis(0), i);
            general_mat_mul(
                1.0,
                &ab.into_dimensionality::<Ix2>().unwrap(),
                &bb.into_dimensionality::<Ix2>().unwrap(),
                0.0,
                &mut ob.view_mut().into_dimensionality::<Ix2>().unwrap(),
            );
        }
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut ga = Array::zeros(ac.shape());
                let mut gb = Array::zeros(bc.shape());
                for i in 0..bsz {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let ai = ac
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = bc
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut gai = ga.index_axis_mut(Axis(0), i);
                    general_mat_mul(
                        1.0,
                        &gi,
                        &bi.t(),
                        0.0,
                        &mut gai.view_mut().into_dimensionality::<Ix2>().unwrap(),
                    );
                    let mut gbi = gb.index_axis_mut(Axis(0), i);
                    general_mat_mul(
                        1.0,
                        &ai.t(),
                        &gi,
                        0.0,
                        &mut gbi.view_mut().into_dimensionality::<Ix2>().unwrap(),
                    );
                }
                sink.accumulate(a, ga);
                sink.accumulate(b, gb);
            }),
        );
        out
    }

    // ---- shape manipulation ----

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(perm.len(), av.ndim());
        let out = av
            .view()
            .permuted_axes(perm.to_vec())
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let gp = g
                    .view()
                    .permuted_axes(inv.clone())
                    .as_standard_layout()
                    .to_owned();
                sink.accumulate(a, gp);
            }),
        );
        out
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let numel: usize = shape.iter().product();
        assert_eq!(av.len(), numel, "reshape element count mismatch");
        let out = Array::from_shape_vec(shape.to_vec(), av.as_slice().unwrap().to_vec()).unwrap();
        let a_shape = av.shape().to_vec();
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let gs = standard(g.clone());
                let gr =
                    Array::from_shape_vec(a_shape.clone(), gs.as_slice().unwrap().to_vec()).unwrap();
                sink.accumulate(a, gr);
            }),
        );
        out
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Array>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let parts = parts.to_vec();
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(sizes.iter()) {
                    let gs = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                        .to_owned();
                    sink.accumulate(p, standard(gs));
                    offset += sz;
                }
            }),
        );
        out
    }

    pub fn slice_axis_op(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let out = av
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let a_shape = av.shape().to_vec();
        let out = self.push_value(standard(out));
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gz = Array::zeros(a_shape.as_slice());
                gz.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink.accumulate(a, gz);
            }),
        );
        out
    }

    /// Keep the last `len` entries along the final (time) axis.
    pub fn slice_time_tail(&self, a: Var, len: usize) -> Var {
        let shape = self.shape(a);
        let last = shape.len() - 1;
        let t = shape[last];
        assert!(len <= t, "slice_time_tail: keep {} of {}", len, t);
        self.slice_axis_op(a, last, t - len, len)
    }

    /// Zero-pad `n` steps at the front of the final (time) axis.
    pub fn pad_time_front(&self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        let last = shape.len() - 1;
        let t = shape[last];
        shape[last] += n;
        let mut out = Array::zeros(shape.as_slice());
        out.slice_axis_mut(Axis(last), Slice::from(n..n + t))
            .assign(&av);
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let gs = g
                    .slice_axis(Axis(last), Slice::from(n..n + t))
                    .to_owned();
                sink.accumulate(a, standard(gs));
            }),
        );
        out
    }

    /// Materialize `a` broadcast to `shape` (trailing-axis alignment).
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let out = av
            .broadcast(shape)
            .unwrap_or_else(|| {
                panic!("broadcast_to: cannot broadcast {:?} to {:?}", av.shape(), shape)
            })
            .to_owned();
        let a_shape = av.shape().to_vec();
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                sink.accumulate(a, reduce_to_shape(g, &a_shape));
            }),
        );
        out
    }

    // ---- regularization ----

    /// Inverted dropout: keep with probability `1-p`, scale kept entries by
    /// `1/(1-p)`. Only call in training mode; eval forward simply skips it.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        if p == 0.0 {
            return a;
        }
        let av = self.value(a);
        let keep = 1.0 - p;
        let mask = Array::from_shape_simple_fn(av.shape().to_vec(), || {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let mask = Rc::new(mask);
        let out = self.push_value(&*av * &*mask);
        let mc = Rc::clone(&mask);
        self.push_op(
            out,
            Box::new(move |g, sink| sink.accumulate(a, g * &*mc)),
        );
        out
    }

    // ---- fused network primitives ----

    /// Per-position channel projection of a `[B, C_in, N, T]` tensor:
    /// `out[b, o, n, t] = sum_c w[o, c] * x[b, c, n, t] (+ bias[o])`.
    pub fn channel_linear(&self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, ci, n, t) = dims4(&xv);
        let (co, ci2) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(ci, ci2, "channel_linear: weight/input channels differ");
        let mut out = Array::zeros(vec![bsz, co, n, t]);
        {
            let w2 = view2(&wv);
            for b in 0..bsz {
                let xb = xv.index_axis(Axis(0), b);
                let xs = slab2(xb.as_slice().unwrap(), ci, n * t);
                let mut ob = out.index_axis_mut(Axis(0), b);
                let mut os = slab2_mut(ob.as_slice_mut().unwrap(), co, n * t);
                general_mat_mul(1.0, &w2, &xs, 0.0, &mut os);
            }
        }
        if let Some(bvar) = bias {
            let bv = self.value(bvar);
            assert_eq!(bv.len(), co, "channel_linear: bias length");
            for (o, &bval) in bv.iter().enumerate() {
                out.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + bval);
            }
        }
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gw = Array::zeros(vec![co, ci]);
                let mut gx = Array::zeros(vec![bsz, ci, n, t]);
                {
                    let w2 = view2(&wc);
                    let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for b in 0..bsz {
                        let gb = g.index_axis(Axis(0), b);
                        let gs = slab2(gb.as_slice().unwrap(), co, n * t);
                        let xb = xc.index_axis(Axis(0), b);
                        let xs = slab2(xb.as_slice().unwrap(), ci, n * t);
                        general_mat_mul(1.0, &gs, &xs.t(), 1.0, &mut gw2);
                        let mut gxb = gx.index_axis_mut(Axis(0), b);
                        let mut gxs = slab2_mut(gxb.as_slice_mut().unwrap(), ci, n * t);
                        general_mat_mul(1.0, &w2.t(), &gs, 0.0, &mut gxs);
                    }
                }
                sink.accumulate(x, gx);
                sink.accumulate(w, gw);
                if let Some(bvar) = bias {
                    let gb = g
                        .sum_axis(Axis(3))
                        .sum_axis(Axis(2))
                        .sum_axis(Axis(0));
                    sink.accumulate(bvar, gb.into_dyn());
                }
            }),
        );
        out
    }

    /// Dilated causal 1-D convolution along the trailing (time) axis of a
    /// `[B, C_in, N, T]` tensor. Weight tap `s` reads `dilation*s` steps into
    /// the past; the output keeps only fully covered positions, so
    /// `T' = T - dilation*(S-1)` and output index `t` is aligned with input
    /// index `t + dilation*(S-1)` (the latest timestep).
    pub fn causal_conv(&self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, ci, n, t) = dims4(&xv);
        let (co, ci2, taps) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(ci, ci2, "causal_conv: weight/input channels differ");
        assert!(dilation >= 1);
        let span = dilation * (taps - 1);
        assert!(t > span, "causal_conv: input length {} <= span {}", t, span);
        let tp = t - span;
        let mut out = Array::zeros(vec![bsz, co, n, tp]);
        for tau in 0..taps {
            let start = dilation * (taps - 1 - tau);
            let xs = xv
                .slice_axis(Axis(3), Slice::from(start..start + tp))
                .as_standard_layout()
                .to_owned();
            let wt = wv.index_axis(Axis(2), tau).as_standard_layout().to_owned();
            let wt2 = view2(&wt);
            for b in 0..bsz {
                let xb = xs.index_axis(Axis(0), b);
                let xsl = slab2(xb.as_slice().unwrap(), ci, n * tp);
                let mut ob = out.index_axis_mut(Axis(0), b);
                let mut os = slab2_mut(ob.as_slice_mut().unwrap(), co, n * tp);
                general_mat_mul(1.0, &wt2, &xsl, 1.0, &mut os);
            }
        }
        if let Some(bvar) = bias {
            let bv = self.value(bvar);
            assert_eq!(bv.len(), co, "causal_conv: bias length");
            for (o, &bval) in bv.iter().enumerate() {
                out.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + bval);
            }
        }
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut gx = Array::zeros(vec![bsz, ci, n, t]);
                let mut gw = Array::zeros(vec![co, ci, taps]);
                for tau in 0..taps {
                    let start = dilation * (taps - 1 - tau);
                    let xs = xc
                        .slice_axis(Axis(3), Slice::from(start..start + tp))
                        .as_standard_layout()
                        .to_owned();
                    let wt = wc.index_axis(Axis(2), tau).as_standard_layout().to_owned();
                    let wt2 = view2(&wt);
                    let mut gwt = Array::zeros(vec![co, ci]);
                    let mut buf = Array::zeros(vec![ci, n * tp]);
                    for b in 0..bsz {
                        let gb = g.index_axis(Axis(0), b);
                        let gs = slab2(gb.as_slice().unwrap(), co, n * tp);
                        let xb = xs.index_axis(Axis(0), b);
                        let xsl = slab2(xb.as_slice().unwrap(), ci, n * tp);
                        {
                            let mut gwt2 = gwt.view_mut().into_dimensionality::<Ix2>().unwrap();
                            general_mat_mul(1.0, &gs, &xsl.t(), 1.0, &mut gwt2);
                        }
                        {
                            let mut buf2 = buf.view_mut().into_dimensionality::<Ix2>().unwrap();
                            general_mat_mul(1.0, &wt2.t(), &gs, 0.0, &mut buf2);
                        }
                        let buf3 = buf.view().into_shape_with_order((ci, n, tp)).unwrap();
                        let mut gxb = gx.index_axis_mut(Axis(0), b);
                        let mut gslice =
                            gxb.slice_axis_mut(Axis(2), Slice::from(start..start + tp));
                        gslice += &buf3;
                    }
                    gw.index_axis_mut(Axis(2), tau).assign(&gwt);
                }
                sink.accumulate(x, gx);
                sink.accumulate(w, gw);
                if let Some(bvar) = bias {
                    let gb = g
                        .sum_axis(Axis(3))
                        .sum_axis(Axis(2))
                        .sum_axis(Axis(0));
                    sink.accumulate(bvar, gb.into_dyn());
                }
            }),
        );
        out
    }

    /// Node-axis mixing by an adjacency matrix:
    /// `out[b, c, i, t] = sum_j adj[(b,) i, j] * z[b, c, j, t]`.
    /// `adj` is `[N, N]` (shared) or `[B, N, N]` (per-sample).
    pub fn node_mix(&self, adj: Var, z: Var) -> Var {
        let av = self.value(adj);
        let zv = self.value(z);
        let (bsz, c, n, t) = dims4(&zv);
        let per_sample = match av.ndim() {
            2 => {
                assert_eq!(av.shape(), &[n, n], "node_mix: adjacency shape");
                false
            }
            3 => {
                assert_eq!(av.shape(), &[bsz, n, n], "node_mix: adjacency shape");
                true
            }
            d => panic!("node_mix: adjacency must be 2-d or 3-d, got {}-d", d),
        };
        // z_b permuted to [N, C*T] so the node axis leads the contraction.
        let permute_nodes_first = |zb: ndarray::ArrayViewD<'_, f64>| -> Array {
            zb.permuted_axes(vec![1, 0, 2])
                .as_standard_layout()
                .to_owned()
        };
        let mut out = Array::zeros(vec![bsz, c, n, t]);
        for b in 0..bsz {
            let zp = permute_nodes_first(zv.index_axis(Axis(0), b));
            let zp2 = slab2(zp.as_slice().unwrap(), n, c * t);
            let ab = if per_sample {
                av.index_axis(Axis(0), b)
            } else {
                av.view().into_dyn()
            };
            let ab2 = ab.into_dimensionality::<Ix2>().unwrap();
            let mut yb = Array::zeros(vec![n, c * t]);
            {
                let mut yb2 = yb.view_mut().into_dimensionality::<Ix2>().unwrap();
                general_mat_mul(1.0, &ab2, &zp2, 0.0, &mut yb2);
            }
            let yb3 = yb.view().into_shape_with_order((n, c, t)).unwrap();
            out.index_axis_mut(Axis(0), b)
                .assign(&yb3.permuted_axes([1, 0, 2]));
        }
        let (ac, zc) = (Rc::clone(&av), Rc::clone(&zv));
        let out = self.push_value(out);
        self.push_op(
            out,
            Box::new(move |g, sink| {
                let mut ga = Array::zeros(ac.shape());
                let mut gz = Array::zeros(vec![bsz, c, n, t]);
                for b in 0..bsz {
                    let gp = g
                        .index_axis(Axis(0), b)
                        .permuted_axes(vec![1, 0, 2])
                        .as_standard_layout()
                        .to_owned();
                    let gp2 = slab2(gp.as_slice().unwrap(), n, c * t);
                    let zp = zc
                        .index_axis(Axis(0), b)
                        .permuted_axes(vec![1, 0, 2])
                        .as_standard_layout()
                        .to_owned();
                    let zp2 = slab2(zp.as_slice().unwrap(), n, c * t);
                    let ab = if per_sample {
                        ac.index_axis(Axis(0), b)
                    } else {
                        ac.view().into_dyn()
                    };
                    let ab2 = ab.into_dimensionality::<Ix2>().unwrap();
                    // dA_b += gp . zp^T
                    {
                        let mut gab = if per_sample {
                            ga.index_axis_mut(Axis(0), b)
                        } else {
                            ga.view_mut().into_dyn()
                        };
                        let mut gab2 = gab.view_mut().into_dimensionality::<Ix2>().unwrap();
                        general_mat_mul(1.0, &gp2, &zp2.t(), 1.0, &mut gab2);
                    }
                    // dZp_b = A_b^T . gp
                    let mut dzp = Array::zeros(vec![n, c * t]);
                    {
                        let mut dzp2 = dzp.view_mut().into_dimensionality::<Ix2>().unwrap();
                        general_mat_mul(1.0, &ab2.t(), &gp2, 0.0, &mut dzp2);
                    }
                    let dzp3 = dzp.view().into_shape_with_order((n, c, t)).unwrap();
                    gz.index_axis_mut(Axis(0), b)
                        .assign(&dzp3.permuted_axes([1, 0, 2]));
                }
                sink.accumulate(adj, ga);
                sink.accumulate(z, gz);
            }),
        );
        out
    }
}
