//! Graph structure learning.
//!
//! Two adjacency matrices are inferred per forward pass. The static graph
//! comes from trainable node embeddings alone and captures stable long-term
//! dependencies. The dynamic graph conditions on the current input window:
//! a 1x1 convolution lifts the window to embedding width, a gated recurrent
//! cell fuses it with the embeddings, multi-head scaled inner products score
//! node pairs, and the static graph enters as an additive prior before the
//! final rectified row-softmax. Both results are row-stochastic, so the
//! propagation downstream is a convex combination over incoming neighbors.

use crate::error::{Error, Result};
use crate::nn::{
    apply_dropout, ChannelLinear, GruCell, LayerNorm, Linear, MatrixLayerNorm, Mode, Param,
};
use crate::tensor::{Array, Tape, Var};
use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Static,
    Dynamic,
}

/// Materialized adjacency weights for export and validation: `[N, N]` for
/// the static graph, `[B, N, N]` (one per window) for the dynamic graph.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    pub weights: Array,
    pub kind: GraphKind,
}

impl AdjacencyMatrix {
    pub fn from_var(tape: &Tape, var: Var, kind: GraphKind) -> Self {
        AdjacencyMatrix {
            weights: tape.value(var).as_ref().clone(),
            kind,
        }
    }

    /// Entries nonnegative, every row summing to 1 within `tol`.
    pub fn validate_row_stochastic(&self, tol: f64) -> Result<()> {
        validate_row_stochastic(&self.weights, tol)
    }

    /// Write a 2-D matrix as a plain numeric CSV (no header).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let m = self
            .weights
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| {
                Error::Shape(format!(
                    "CSV export needs a 2-d matrix, got shape {:?}",
                    self.weights.shape()
                ))
            })?;
        let mut out = String::new();
        for row in m.rows() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn validate_row_stochastic(weights: &Array, tol: f64) -> Result<()> {
    let last = weights.ndim() - 1;
    for (i, lane) in weights.lanes(Axis(last)).into_iter().enumerate() {
        if lane.iter().any(|&x| x.is_nan() || x < 0.0) {
            return Err(Error::NotRowStochastic {
                row: i,
                sum: lane.sum(),
                tol,
            });
        }
        let sum = lane.sum();
        if !sum.is_finite() || (sum - 1.0).abs() > tol {
            return Err(Error::NotRowStochastic { row: i, sum, tol });
        }
    }
    Ok(())
}

/// Static graph: row-softmax of the rectified embedding Gram matrix.
pub fn static_adjacency(tape: &Tape, embeddings: Var) -> Var {
    let transposed = tape.permute(embeddings, &[1, 0]);
    let scores = tape.matmul(embeddings, transposed);
    tape.softmax_last(tape.relu(scores))
}

/// Eval-mode convenience for export and tests.
pub fn static_adjacency_matrix(embeddings: &Array2<f64>) -> AdjacencyMatrix {
    let tape = Tape::new();
    let emb = tape.leaf(embeddings.clone().into_dyn());
    let adj = static_adjacency(&tape, emb);
    AdjacencyMatrix::from_var(&tape, adj, GraphKind::Static)
}

/// One similarity head: two distinct nonlinear projections of the normalized
/// fused state, scored by a scaled inner product.
pub struct SimilarityHead {
    pub source_proj: Linear,
    pub target_proj: Linear,
}

/// Parameters of the dynamic graph learning layer.
pub struct DynamicGraphLearner {
    pub input_proj: ChannelLinear,
    pub fusion_cell: GruCell,
    pub state_norm: LayerNorm,
    pub heads: Vec<SimilarityHead>,
    pub skip_source: Linear,
    pub skip_target: Linear,
    pub skip_norm: MatrixLayerNorm,
    pub edge_norm: MatrixLayerNorm,
    pub head_dim: usize,
    pub dropout: f64,
}

impl DynamicGraphLearner {
    pub fn new(
        rng: &mut ChaCha8Rng,
        embed_dim: usize,
        num_heads: usize,
        head_dim: usize,
        skip_dim: usize,
        dropout: f64,
    ) -> Self {
        let heads = (0..num_heads)
            .map(|k| SimilarityHead {
                source_proj: Linear::new(rng, &format!("dynamic_graph.head{k}.source"), embed_dim, head_dim, true),
                target_proj: Linear::new(rng, &format!("dynamic_graph.head{k}.target"), embed_dim, head_dim, true),
            })
            .collect();
        DynamicGraphLearner {
            input_proj: ChannelLinear::new(rng, "dynamic_graph.input_proj", 1, embed_dim, true),
            fusion_cell: GruCell::new(rng, "dynamic_graph.fusion", embed_dim, embed_dim),
            state_norm: LayerNorm::new("dynamic_graph.state_norm", embed_dim),
            heads,
            skip_source: Linear::new(rng, "dynamic_graph.skip_source", embed_dim, skip_dim, true),
            skip_target: Linear::new(rng, "dynamic_graph.skip_target", embed_dim, skip_dim, true),
            skip_norm: MatrixLayerNorm::new("dynamic_graph.skip_norm"),
            edge_norm: MatrixLayerNorm::new("dynamic_graph.edge_norm"),
            head_dim,
            dropout,
        }
    }

    /// Fuse the window with the node embeddings: 1x1-convolved features are
    /// fed step by step into the recurrent cell, whose hidden state starts
    /// from the embeddings (broadcast over the batch). Returns `[B, N, d]`.
    pub fn fuse_node_state(&self, tape: &Tape, window: Var, embeddings: Var) -> Result<Var> {
        let wshape = tape.shape(window);
        if wshape.len() != 4 || wshape[1] != 1 {
            return Err(Error::Shape(format!(
                "fuse_node_state expects [B,1,N,u], got {wshape:?}"
            )));
        }
        let (b, n, u) = (wshape[0], wshape[2], wshape[3]);
        let eshape = tape.shape(embeddings);
        if eshape[0] != n {
            return Err(Error::Shape(format!(
                "window has {n} nodes but embeddings have {}",
                eshape[0]
            )));
        }
        let d = eshape[1];
        let features = self.input_proj.forward(tape, window); // [B,d,N,u]
        let per_step = tape.permute(features, &[0, 2, 3, 1]); // [B,N,u,d]

        let broadcast = tape.broadcast_to(embeddings, &[b, n, d]);
        let mut hidden = tape.reshape(broadcast, &[b * n, d]);
        for t in 0..u {
            let step = tape.slice_axis_op(per_step, 2, t, 1); // [B,N,1,d]
            let step = tape.reshape(step, &[b * n, d]);
            hidden = self.fusion_cell.step(tape, step, hidden);
        }
        Ok(tape.reshape(hidden, &[b, n, d]))
    }

    /// Scaled inner-product edge scores of one head: `[B, N, N]`.
    pub fn head_similarity(
        &self,
        tape: &Tape,
        fused: Var,
        head: usize,
        mode: &mut Mode<'_>,
    ) -> Var {
        let normed = self.state_norm.forward(tape, fused);
        let h = &self.heads[head];
        let source = tape.tanh(h.source_proj.forward(tape, normed));
        let target = tape.tanh(h.target_proj.forward(tape, normed));
        let target_t = tape.permute(target, &[0, 2, 1]);
        let scores = tape.batch_matmul(source, target_t);
        let scaled = tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        apply_dropout(tape, scaled, self.dropout, mode)
    }

    /// Sum the heads and add the normalized bilinear skip term.
    pub fn aggregate_heads(&self, tape: &Tape, head_edges: &[Var], fused: Var) -> Var {
        assert!(!head_edges.is_empty());
        let mut total = head_edges[0];
        for &e in &head_edges[1..] {
            total = tape.add(total, e);
        }
        let source = self.skip_source.forward(tape, fused);
        let target = self.skip_target.forward(tape, fused);
        let target_t = tape.permute(target, &[0, 2, 1]);
        let logits = tape.batch_matmul(source, target_t);
        let skip = self.skip_norm.forward(tape, logits);
        tape.add(total, skip)
    }

    /// Final dynamic graph: rectified row-softmax of the normalized edges
    /// plus the static prior (when present). One matrix per window.
    pub fn dynamic_adjacency(
        &self,
        tape: &Tape,
        edges: Var,
        static_prior: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Var {
        let normed = self.edge_norm.forward(tape, edges);
        let dropped = apply_dropout(tape, normed, self.dropout, mode);
        let biased = match static_prior {
            Some(prior) => tape.add(dropped, prior),
            None => dropped,
        };
        tape.softmax_last(tape.relu(biased))
    }

    /// Full pipeline from a window to the dynamic adjacency `[B, N, N]`.
    pub fn adjacency(
        &self,
        tape: &Tape,
        window: Var,
        embeddings: Var,
        static_prior: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let fused = self.fuse_node_state(tape, window, embeddings)?;
        let head_edges: Vec<Var> = (0..self.heads.len())
            .map(|k| self.head_similarity(tape, fused, k, mode))
            .collect();
        let edges = self.aggregate_heads(tape, &head_edges, fused);
        Ok(self.dynamic_adjacency(tape, edges, static_prior, mode))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.input_proj.params();
        v.extend(self.fusion_cell.params());
        v.extend(self.state_norm.params());
        for h in &self.heads {
            v.extend(h.source_proj.params());
            v.extend(h.target_proj.params());
        }
        v.extend(self.skip_source.params());
        v.extend(self.skip_target.params());
        v.extend(self.skip_norm.params());
        v.extend(self.edge_norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input_proj.params_mut();
        v.extend(self.fusion_cell.params_mut());
        v.extend(self.state_norm.params_mut());
        for h in &mut self.heads {
            v.extend(h.source_proj.params_mut());
            v.extend(h.target_proj.params_mut());
        }
        v.extend(self.skip_source.params_mut());
        v.extend(self.skip_target.params_mut());
        v.extend(self.skip_norm.params_mut());
        v.extend(self.edge_norm.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LAYER_NORM_EPS;
    use ndarray::{Array3, Array4, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn learner(seed: u64, d: usize, heads: usize, dk: usize, ds: usize, p: f64) -> DynamicGraphLearner {
        DynamicGraphLearner::new(&mut rng(seed), d, heads, dk, ds, p)
    }

    #[test]
    fn zero_embeddings_give_uniform_static_rows() {
        let adj = static_adjacency_matrix(&Array2::zeros((5, 3)));
        for row in adj.weights.rows() {
            for &x in row.iter() {
                assert!((x - 0.2).abs() < 1e-12);
            }
        }
        adj.validate_row_stochastic(1e-5).unwrap();
    }

    #[test]
    fn identity_embeddings_match_softmax_by_hand() {
        let adj = static_adjacency_matrix(&Array2::eye(2));
        // relu(I) = I, row softmax: e/(e+1) on the diagonal
        let hot = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((adj.weights[[0, 0]] - hot).abs() < 1e-10);
        assert!((adj.weights[[0, 1]] - (1.0 - hot)).abs() < 1e-10);
        assert!((adj.weights[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((adj.weights[[1, 1]] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn static_adjacency_row_stochastic_for_random_embeddings() {
        let mut r = rng(3);
        for _ in 0..20 {
            let emb = Array2::from_shape_fn((7, 4), |_| r.gen::<f64>() * 4.0 - 2.0);
            static_adjacency_matrix(&emb)
                .validate_row_stochastic(1e-5)
                .unwrap();
        }
    }

    #[test]
    fn closed_update_gate_returns_embeddings() {
        let mut l = learner(5, 4, 2, 3, 3, 0.0);
        let d = 4;
        // shut the update gate: z ~ 0 keeps the initial hidden state
        l.fusion_cell
            .input_bias
            .value
            .slice_mut(ndarray::s![d..2 * d])
            .fill(-40.0);
        l.fusion_cell
            .input_weights
            .value
            .slice_mut(ndarray::s![.., d..2 * d])
            .fill(0.0);
        l.fusion_cell
            .hidden_weights
            .value
            .slice_mut(ndarray::s![.., d..2 * d])
            .fill(0.0);
        l.fusion_cell
            .hidden_bias
            .value
            .slice_mut(ndarray::s![d..2 * d])
            .fill(0.0);

        let tape = Tape::new();
        let mut r = rng(6);
        let emb_arr = Array2::from_shape_fn((3, d), |_| r.gen::<f64>() - 0.5);
        let window = Array4::from_shape_fn((2, 1, 3, 1), |_| r.gen::<f64>());
        let emb = tape.leaf(emb_arr.clone().into_dyn());
        let w = tape.leaf(window.into_dyn());
        let fused = l.fuse_node_state(&tape, w, emb).unwrap();
        let fv = tape.value(fused);
        for b in 0..2 {
            for n in 0..3 {
                for k in 0..d {
                    assert!((fv[[b, n, k]] - emb_arr[[n, k]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_windows_fuse_identically() {
        let l = learner(7, 6, 2, 3, 4, 0.0);
        let tape = Tape::new();
        let mut r = rng(8);
        let emb = tape.leaf(Array2::from_shape_fn((4, 6), |_| r.gen::<f64>()).into_dyn());
        let one = Array3::from_shape_fn((1, 4, 5), |_| r.gen::<f64>());
        let mut batch = Array4::zeros((2, 1, 4, 5));
        for b in 0..2 {
            batch.index_axis_mut(Axis(0), b).assign(&one);
        }
        let w = tape.leaf(batch.into_dyn());
        let fused = l.fuse_node_state(&tape, w, emb).unwrap();
        let fv = tape.value(fused);
        for n in 0..4 {
            for k in 0..6 {
                assert_eq!(fv[[0, n, k]], fv[[1, n, k]]);
            }
        }
    }

    #[test]
    fn fuse_node_state_shape_contract() {
        let l = learner(9, 8, 2, 4, 4, 0.0);
        let tape = Tape::new();
        let emb = tape.leaf(Array::zeros(IxDyn(&[6, 8])));
        let w = tape.leaf(Array::zeros(IxDyn(&[4, 1, 6, 12])));
        let fused = l.fuse_node_state(&tape, w, emb).unwrap();
        assert_eq!(tape.shape(fused), vec![4, 6, 8]);
    }

    #[test]
    fn head_similarity_eval_mode_is_deterministic() {
        let l = learner(10, 5, 1, 4, 3, 0.5);
        let mut r = rng(11);
        let fused_arr = Array3::from_shape_fn((2, 3, 5), |_| r.gen::<f64>());
        let run = || {
            let tape = Tape::new();
            let fused = tape.leaf(fused_arr.clone().into_dyn());
            let e = l.head_similarity(&tape, fused, 0, &mut Mode::Eval);
            tape.value(e).as_ref().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shared_projections_make_similarity_symmetric() {
        let mut l = learner(12, 5, 1, 4, 3, 0.0);
        // share f1 = f2
        l.heads[0].target_proj.weight.value = l.heads[0].source_proj.weight.value.clone();
        l.heads[0].target_proj.bias.as_mut().unwrap().value =
            l.heads[0].source_proj.bias.as_ref().unwrap().value.clone();
        let tape = Tape::new();
        let mut r = rng(13);
        let fused = tape.leaf(Array3::from_shape_fn((1, 4, 5), |_| r.gen::<f64>()).into_dyn());
        let e = l.head_similarity(&tape, fused, 0, &mut Mode::Eval);
        let ev = tape.value(e);
        for i in 0..4 {
            for j in 0..4 {
                assert!((ev[[0, i, j]] - ev[[0, j, i]]).abs() < 1e-12);
            }
        }
    }

    /// Scalar re-derivation of one head for a tiny case.
    fn head_oracle(
        l: &DynamicGraphLearner,
        fused: &Array3<f64>,
        head: usize,
    ) -> Array3<f64> {
        let (b, n, d) = fused.dim();
        let dk = l.head_dim;
        let gamma = &l.state_norm.gamma.value;
        let beta = &l.state_norm.beta.value;
        let project = |lin: &Linear, x: &[f64]| -> Vec<f64> {
            let w = &lin.weight.value;
            let bias = &lin.bias.as_ref().unwrap().value;
            (0..dk)
                .map(|o| {
                    let mut acc = bias[[o]];
                    for i in 0..d {
                        acc += x[i] * w[[i, o]];
                    }
                    acc.tanh()
                })
                .collect()
        };
        let mut out = Array3::zeros((b, n, n));
        for bi in 0..b {
            let normed: Vec<Vec<f64>> = (0..n)
                .map(|node| {
                    let row: Vec<f64> = (0..d).map(|k| fused[[bi, node, k]]).collect();
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                    row.iter()
                        .enumerate()
                        .map(|(k, x)| {
                            (x - mean) / (var + LAYER_NORM_EPS).sqrt() * gamma[[k]] + beta[[k]]
                        })
                        .collect()
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    let q = project(&l.heads[head].source_proj, &normed[i]);
                    let k = project(&l.heads[head].target_proj, &normed[j]);
                    let dot: f64 = q.iter().zip(k.iter()).map(|(a, b)| a * b).sum();
                    out[[bi, i, j]] = dot / (dk as f64).sqrt();
                }
            }
        }
        out
    }

    #[test]
    fn head_similarity_matches_double_loop_oracle() {
        let l = learner(14, 5, 2, 3, 3, 0.0);
        let mut r = rng(15);
        let fused_arr = Array3::from_shape_fn((2, 3, 5), |_| r.gen::<f64>() * 2.0 - 1.0);
        let tape = Tape::new();
        let fused = tape.leaf(fused_arr.clone().into_dyn());
        for head in 0..2 {
            let e = l.head_similarity(&tape, fused, head, &mut Mode::Eval);
            let ev = tape.value(e);
            let oracle = head_oracle(&l, &fused_arr, head);
            for (a, b) in ev.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    fn zero_skip(l: &mut DynamicGraphLearner) {
        l.skip_source.weight.value.fill(0.0);
        l.skip_source.bias.as_mut().unwrap().value.fill(0.0);
        l.skip_target.weight.value.fill(0.0);
        l.skip_target.bias.as_mut().unwrap().value.fill(0.0);
        l.skip_norm.gain.value.fill(0.0);
        l.skip_norm.bias.value.fill(0.0);
    }

    #[test]
    fn aggregate_single_head_with_zeroed_skip_is_identity() {
        let mut l = learner(16, 5, 1, 3, 3, 0.0);
        zero_skip(&mut l);
        let tape = Tape::new();
        let mut r = rng(17);
        let fused = tape.leaf(Array3::from_shape_fn((1, 3, 5), |_| r.gen::<f64>()).into_dyn());
        let e1 = l.head_similarity(&tape, fused, 0, &mut Mode::Eval);
        let agg = l.aggregate_heads(&tape, &[e1], fused);
        let (a, b) = (tape.value(agg), tape.value(e1));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_additive_in_heads() {
        let mut l = learner(18, 5, 2, 3, 3, 0.0);
        // zero the second head so E^2 = tanh(0)*tanh(0) scores = 0
        l.heads[1].source_proj.weight.value.fill(0.0);
        l.heads[1].source_proj.bias.as_mut().unwrap().value.fill(0.0);
        let tape = Tape::new();
        let mut r = rng(19);
        let fused = tape.leaf(Array3::from_shape_fn((1, 3, 5), |_| r.gen::<f64>()).into_dyn());
        let e1 = l.head_similarity(&tape, fused, 0, &mut Mode::Eval);
        let e2 = l.head_similarity(&tape, fused, 1, &mut Mode::Eval);
        assert!(tape.value(e2).iter().all(|&x| x == 0.0));
        let agg_both = l.aggregate_heads(&tape, &[e1, e2], fused);
        let agg_one = l.aggregate_heads(&tape, &[e1], fused);
        for (x, y) in tape.value(agg_both).iter().zip(tape.value(agg_one).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Per-entry summation oracle for Eq.-style aggregation.
    #[test]
    fn aggregate_matches_summation_oracle() {
        let l = learner(20, 4, 2, 3, 3, 0.0);
        let mut r = rng(21);
        let fused_arr = Array3::from_shape_fn((1, 3, 4), |_| r.gen::<f64>() - 0.5);
        let tape = Tape::new();
        let fused = tape.leaf(fused_arr.clone().into_dyn());
        let e1 = l.head_similarity(&tape, fused, 0, &mut Mode::Eval);
        let e2 = l.head_similarity(&tape, fused, 1, &mut Mode::Eval);
        let agg = l.aggregate_heads(&tape, &[e1, e2], fused);
        let av = tape.value(agg);

        // oracle: head sums + layer-normalized skip logits, all scalar loops
        let (e1v, e2v) = (tape.value(e1), tape.value(e2));
        let ds = l.skip_source.weight.value.shape()[1];
        let d = 4;
        let proj = |lin: &Linear, x: ndarray::ArrayView1<f64>| -> Vec<f64> {
            (0..ds)
                .map(|o| {
                    let mut acc = lin.bias.as_ref().unwrap().value[[o]];
                    for i in 0..d {
                        acc += x[i] * lin.weight.value[[i, o]];
                    }
                    acc
                })
                .collect()
        };
        let mut logits = Array2::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                let s = proj(&l.skip_source, fused_arr.slice(ndarray::s![0, i, ..]));
                let t = proj(&l.skip_target, fused_arr.slice(ndarray::s![0, j, ..]));
                logits[[i, j]] = s.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
            }
        }
        let mean: f64 = logits.sum() / 9.0;
        let var: f64 = logits.iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / 9.0;
        let (gain, bias) = (l.skip_norm.gain.value[[0]], l.skip_norm.bias.value[[0]]);
        for i in 0..3 {
            for j in 0..3 {
                let skip = (logits[[i, j]] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain + bias;
                let expected = e1v[[0, i, j]] + e2v[[0, i, j]] + skip;
                assert!(
                    (av[[0, i, j]] - expected).abs() < 1e-6,
                    "({i},{j}): {} vs {expected}",
                    av[[0, i, j]]
                );
            }
        }
    }

    #[test]
    fn zero_edges_reduce_to_prior_softmax() {
        let mut l = learner(22, 4, 1, 3, 3, 0.0);
        l.edge_norm.gain.value.fill(0.0);
        l.edge_norm.bias.value.fill(0.0);
        let tape = Tape::new();
        let edges = tape.leaf(Array::zeros(IxDyn(&[2, 3, 3])));
        let prior_arr = static_adjacency_matrix(&Array2::eye(3)).weights;
        let prior = tape.leaf(prior_arr.clone());
        let adj = l.dynamic_adjacency(&tape, edges, Some(prior), &mut Mode::Eval);
        let av = tape.value(adj);
        // prior entries are nonnegative so relu passes them through
        let tape2 = Tape::new();
        let p = tape2.leaf(prior_arr);
        let expected = tape2.value(tape2.softmax_last(p));
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((av[[b, i, j]] - expected[[i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dynamic_adjacency_is_row_stochastic() {
        let l = learner(23, 6, 3, 4, 4, 0.0);
        let mut r = rng(24);
        let tape = Tape::new();
        let emb = tape.leaf(Array2::from_shape_fn((5, 6), |_| r.gen::<f64>() - 0.5).into_dyn());
        let window = tape.leaf(Array4::from_shape_fn((3, 1, 5, 7), |_| r.gen::<f64>()).into_dyn());
        let prior = static_adjacency(&tape, emb);
        let adj = l
            .adjacency(&tape, window, emb, Some(prior), &mut Mode::Eval)
            .unwrap();
        let m = AdjacencyMatrix::from_var(&tape, adj, GraphKind::Dynamic);
        m.validate_row_stochastic(1e-5).unwrap();
    }

    /// Full Eq.-(4)-style pipeline against a scalar per-entry oracle.
    #[test]
    fn dynamic_adjacency_matches_pipeline_oracle() {
        let l = learner(25, 4, 1, 3, 3, 0.0);
        let mut r = rng(26);
        let edges_arr = Array3::from_shape_fn((2, 3, 3), |_| r.gen::<f64>() * 2.0 - 1.0);
        let prior_arr = {
            let m = Array2::from_shape_fn((3, 3), |_| r.gen::<f64>());
            static_adjacency_matrix(&m).weights
        };
        let tape = Tape::new();
        let edges = tape.leaf(edges_arr.clone().into_dyn());
        let prior = tape.leaf(prior_arr.clone());
        let adj = l.dynamic_adjacency(&tape, edges, Some(prior), &mut Mode::Eval);
        let av = tape.value(adj);

        let (gain, bias) = (l.edge_norm.gain.value[[0]], l.edge_norm.bias.value[[0]]);
        for b in 0..2 {
            let mean = edges_arr.index_axis(Axis(0), b).sum() / 9.0;
            let var = edges_arr
                .index_axis(Axis(0), b)
                .iter()
                .map(|x| (x - mean).powi(2))
                .sum::<f64>()
                / 9.0;
            for i in 0..3 {
                let mut logits = [0.0; 3];
                for j in 0..3 {
                    let normed =
                        (edges_arr[[b, i, j]] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain + bias;
                    logits[j] = (normed + prior_arr[[i, j]]).max(0.0);
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..3 {
                    let expected = exps[j] / total;
                    assert!(
                        (av[[b, i, j]] - expected).abs() < 1e-6,
                        "({b},{i},{j}): {} vs {expected}",
                        av[[b, i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn raising_prior_never_lowers_its_edge() {
        let l = learner(27, 4, 1, 3, 3, 0.0);
        let mut r = rng(28);
        let edges_arr = Array3::from_shape_fn((1, 3, 3), |_| r.gen::<f64>() - 0.5);
        let base_prior = {
            let m = Array2::from_shape_fn((3, 3), |_| r.gen::<f64>());
            static_adjacency_matrix(&m).weights
        };
        let weight_at = |prior: &Array, i: usize, j: usize| -> f64 {
            let tape = Tape::new();
            let e = tape.leaf(edges_arr.clone().into_dyn());
            let p = tape.leaf(prior.clone());
            let adj = l.dynamic_adjacency(&tape, e, Some(p), &mut Mode::Eval);
            tape.value(adj)[[0, i, j]]
        };
        for step in 0..5 {
            let mut bumped = base_prior.clone();
            bumped[[1, 2]] += 0.2 * step as f64;
            let lo = weight_at(&base_prior, 1, 2);
            let hi = weight_at(&bumped, 1, 2);
            assert!(hi >= lo - 1e-12, "step {step}: {hi} < {lo}");
        }
    }

    #[test]
    fn different_windows_give_different_dynamic_graphs() {
        let l = learner(29, 6, 2, 4, 4, 0.0);
        let mut r = rng(30);
        let tape = Tape::new();
        let emb = tape.leaf(Array2::from_shape_fn((4, 6), |_| r.gen::<f64>() - 0.5).into_dyn());
        let w1 = tape.leaf(Array4::from_shape_fn((1, 1, 4, 6), |_| r.gen::<f64>()).into_dyn());
        let w2 = tape.leaf(Array4::from_shape_fn((1, 1, 4, 6), |_| r.gen::<f64>() + 0.8).into_dyn());
        let prior = static_adjacency(&tape, emb);
        let a1 = l.adjacency(&tape, w1, emb, Some(prior), &mut Mode::Eval).unwrap();
        let a2 = l.adjacency(&tape, w2, emb, Some(prior), &mut Mode::Eval).unwrap();
        let (v1, v2) = (tape.value(a1), tape.value(a2));
        let max_diff = v1
            .iter()
            .zip(v2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-8, "dynamic graphs identical (max diff {max_diff})");
    }
}
