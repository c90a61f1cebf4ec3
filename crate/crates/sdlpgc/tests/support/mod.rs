//! Shared helpers for the integration suites: independent scalar oracles
//! (kept free of the vectorized code paths they check) and small builders.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sd_lpgc::lpgc::LpgcBranch;
use sd_lpgc::nn::ChannelLinear;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_row_stochastic(n: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    let mut adj = Array2::from_shape_fn((n, n), |_| r.gen::<f64>() + 0.02);
    for mut row in adj.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    adj
}

pub fn random_row_stochastic_batch(b: usize, n: usize, r: &mut ChaCha8Rng) -> Array3<f64> {
    let mut out = Array3::zeros((b, n, n));
    for bi in 0..b {
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&random_row_stochastic(n, r));
    }
    out
}

/// Either one shared matrix or one per window.
pub enum AdjacencyInput {
    Shared(Array2<f64>),
    PerWindow(Array3<f64>),
}

impl AdjacencyInput {
    pub fn at(&self, b: usize, i: usize, j: usize) -> f64 {
        match self {
            AdjacencyInput::Shared(m) => m[[i, j]],
            AdjacencyInput::PerWindow(m) => m[[b, i, j]],
        }
    }

    pub fn to_dyn(&self) -> ndarray::ArrayD<f64> {
        match self {
            AdjacencyInput::Shared(m) => m.clone().into_dyn(),
            AdjacencyInput::PerWindow(m) => m.clone().into_dyn(),
        }
    }
}

fn scalar_channel_linear(layer: &ChannelLinear, input: &[f64]) -> Vec<f64> {
    let w = &layer.weight.value;
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    assert_eq!(ci, input.len());
    (0..co)
        .map(|o| {
            let mut acc = layer.bias.as_ref().map(|b| b.value[[o]]).unwrap_or(0.0);
            for (c, &x) in input.iter().enumerate() {
                acc += w[[o, c]] * x;
            }
            acc
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Naive per-node double-loop re-implementation of one personalized
/// propagation branch. Every tensor contraction is an explicit scalar loop;
/// no tape code is involved.
pub fn naive_branch_forward(
    branch: &LpgcBranch,
    features: &Array4<f64>,
    adjacency: &AdjacencyInput,
    embeddings: &Array2<f64>,
) -> Array4<f64> {
    let (bsz, c_in, n, t) = features.dim();
    let channels = branch.state_map.out_channels();
    let depth = branch.depth;

    let feature_vec = |b: usize, node: usize, step: usize| -> Vec<f64> {
        (0..c_in).map(|c| features[[b, c, node, step]]).collect()
    };

    // Z_0 = f_theta(X)
    let mut state = Array4::zeros((bsz, channels, n, t));
    for b in 0..bsz {
        for node in 0..n {
            for step in 0..t {
                let out = scalar_channel_linear(&branch.state_map, &feature_vec(b, node, step));
                for (c, v) in out.iter().enumerate() {
                    state[[b, c, node, step]] = *v;
                }
            }
        }
    }

    // self-evolution pattern (None for the plain-powers ablation)
    let self_pattern = branch.self_evolution.as_ref().map(|evo| {
        let mut h = Array4::zeros((bsz, channels, n, t));
        let d = embeddings.shape()[1];
        for b in 0..bsz {
            for node in 0..n {
                for step in 0..t {
                    let lifted = scalar_channel_linear(&evo.input_map, &feature_vec(b, node, step));
                    let mut cat = lifted.clone();
                    for k in 0..d {
                        cat.push(embeddings[[node, k]]);
                    }
                    let mid: Vec<f64> = scalar_channel_linear(&evo.expand, &cat)
                        .into_iter()
                        .map(|x| x.max(0.0))
                        .collect();
                    let back = scalar_channel_linear(&evo.contract, &mid);
                    let residual: Vec<f64> =
                        back.iter().zip(cat.iter()).map(|(a, b)| a + b).collect();
                    let out = scalar_channel_linear(&evo.output_map, &residual);
                    for (c, v) in out.iter().enumerate() {
                        h[[b, c, node, step]] = *v;
                    }
                }
            }
        }
        h
    });

    let mut states = vec![state.clone()];
    for _ in 0..depth - 1 {
        let prev = states.last().unwrap().clone();
        let mut next = Array4::zeros((bsz, channels, n, t));
        for b in 0..bsz {
            for node in 0..n {
                for step in 0..t {
                    // restart gate from FC5(H_self + Z_l), shared over channels
                    let alpha = match (&branch.restart, &self_pattern) {
                        (Some(head), Some(h)) => {
                            let merged: Vec<f64> = (0..channels)
                                .map(|c| h[[b, c, node, step]] + prev[[b, c, node, step]])
                                .collect();
                            sigmoid(scalar_channel_linear(&head.proj, &merged)[0])
                        }
                        _ => 0.0,
                    };
                    for c in 0..channels {
                        let mut neighbor = 0.0;
                        for j in 0..n {
                            neighbor += adjacency.at(b, node, j) * prev[[b, c, j, step]];
                        }
                        let own = self_pattern
                            .as_ref()
                            .map(|h| h[[b, c, node, step]])
                            .unwrap_or(0.0);
                        next[[b, c, node, step]] = (1.0 - alpha) * neighbor + alpha * own;
                    }
                }
            }
        }
        states.push(next);
    }

    // FC6 over the channel concatenation of all states
    let out_channels = branch.collect.out_channels();
    let mut collected = Array4::zeros((bsz, out_channels, n, t));
    for b in 0..bsz {
        for node in 0..n {
            for step in 0..t {
                let mut cat = Vec::with_capacity(depth * channels);
                for s in &states {
                    for c in 0..channels {
                        cat.push(s[[b, c, node, step]]);
                    }
                }
                let out = scalar_channel_linear(&branch.collect, &cat);
                for (c, v) in out.iter().enumerate() {
                    collected[[b, c, node, step]] = *v;
                }
            }
        }
    }
    collected
}
