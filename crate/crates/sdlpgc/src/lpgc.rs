//! Learnable personalized graph convolution.
//!
//! Each branch propagates a latent state over one adjacency while blending
//! in the node's own dynamics. The state starts from a 1x1 projection of the
//! temporal features; a per-node self-evolution network (an MLP over the
//! features concatenated with the node embedding) produces a stationary
//! target `H_self`, and at every propagation step a learned restart
//! probability decides, per node and timestep, how much of the neighbor
//! aggregate versus the self-evolution enters the next state:
//!
//! ```text
//! Z_0     = f_theta(X)
//! alpha_l = sigmoid(FC(H_self + Z_l))            in (0,1)
//! Z_{l+1} = (1 - alpha_l) * A Z_l + alpha_l * H_self
//! out     = FC(concat(Z_0, ..., Z_{L-1}))
//! ```
//!
//! A module runs two branches with separate parameters, one on the static
//! and one on the dynamic graph, and sums them.

use crate::error::{Error, Result};
use crate::graph::{validate_row_stochastic, GraphKind};
use crate::nn::{ChannelLinear, Param};
use crate::tensor::{Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Mean restart probability for one propagation step; exported into metrics
/// JSON as an interpretability diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlphaStat {
    pub branch: GraphKind,
    pub step: usize,
    pub mean: f64,
}

/// Per-node self-evolution: FC1 lifts the features, the node embedding is
/// concatenated, and a residual MLP produces the stationary pattern.
pub struct SelfEvolution {
    pub input_map: ChannelLinear,  // FC1
    pub expand: ChannelLinear,     // FC4
    pub contract: ChannelLinear,   // FC3
    pub output_map: ChannelLinear, // FC2
}

impl SelfEvolution {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        hidden_channels: usize,
        embed_dim: usize,
        out_channels: usize,
    ) -> Self {
        let cat = hidden_channels + embed_dim;
        SelfEvolution {
            input_map: ChannelLinear::new(rng, &format!("{name}.input_map"), in_channels, hidden_channels, true),
            expand: ChannelLinear::new(rng, &format!("{name}.expand"), cat, cat, true),
            contract: ChannelLinear::new(rng, &format!("{name}.contract"), cat, cat, true),
            output_map: ChannelLinear::new(rng, &format!("{name}.output_map"), cat, out_channels, true),
        }
    }

    /// `x: [B, C_in, N, T]`, `embeddings: [N, d]` -> `[B, C_out, N, T]`.
    pub fn forward(&self, tape: &Tape, x: Var, embeddings: Var) -> Var {
        let shape = tape.shape(x);
        let (b, n, t) = (shape[0], shape[2], shape[3]);
        let d = tape.shape(embeddings)[1];
        let lifted = self.input_map.forward(tape, x);
        // [N, d] -> [B, d, N, T]
        let emb_t = tape.permute(embeddings, &[1, 0]);
        let emb_c = tape.reshape(emb_t, &[1, d, n, 1]);
        let emb_b = tape.broadcast_to(emb_c, &[b, d, n, t]);
        let cat = tape.concat(1, &[lifted, emb_b]);
        let mid = tape.relu(self.expand.forward(tape, cat));
        let back = self.contract.forward(tape, mid);
        let residual = tape.add(back, cat);
        self.output_map.forward(tape, residual)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.input_map.params();
        v.extend(self.expand.params());
        v.extend(self.contract.params());
        v.extend(self.output_map.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input_map.params_mut();
        v.extend(self.expand.params_mut());
        v.extend(self.contract.params_mut());
        v.extend(self.output_map.params_mut());
        v
    }
}

/// FC5: per-node, per-timestep scalar gate shared across channels.
pub struct RestartHead {
    pub proj: ChannelLinear, // C -> 1
}

impl RestartHead {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        RestartHead {
            proj: ChannelLinear::new(rng, &format!("{name}.proj"), channels, 1, true),
        }
    }

    /// `sigmoid(FC5(H_self + Z_l))` -> `[B, 1, N, T]` in (0, 1).
    pub fn alpha(&self, tape: &Tape, self_evolution: Var, state: Var) -> Var {
        let s = tape.add(self_evolution, state);
        tape.sigmoid(self.proj.forward(tape, s))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.proj.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.proj.params_mut()
    }
}

/// Personalized propagation, or the plain power-iteration used by the
/// SD-GCN ablation (no restart, no self-evolution, collection retained).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationKind {
    Personalized,
    PlainPowers,
}

pub struct LpgcBranch {
    pub state_map: ChannelLinear, // f_theta
    pub self_evolution: Option<SelfEvolution>,
    pub restart: Option<RestartHead>,
    pub collect: ChannelLinear, // FC6 over concat(Z_0..Z_{L-1})
    pub depth: usize,
    pub graph_kind: GraphKind,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

impl LpgcBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: PropagationKind,
        graph_kind: GraphKind,
        in_channels: usize,
        channels: usize,
        embed_dim: usize,
        out_channels: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Config("propagation depth must be >= 1".into()));
        }
        let personalized = kind == PropagationKind::Personalized;
        Ok(LpgcBranch {
            state_map: ChannelLinear::new(rng, &format!("{name}.state_map"), in_channels, channels, true),
            self_evolution: personalized.then(|| {
                SelfEvolution::new(rng, &format!("{name}.self_evolution"), in_channels, channels, embed_dim, channels)
            }),
            restart: personalized.then(|| RestartHead::new(rng, &format!("{name}.restart"), channels)),
            collect: ChannelLinear::new(rng, &format!("{name}.collect"), depth * channels, out_channels, true),
            depth,
            graph_kind,
        })
    }

    /// Run the propagation recursion; returns every state `Z_0..Z_{L-1}`
    /// plus the collected output. The adjacency must be row-stochastic.
    pub fn propagate(
        &self,
        tape: &Tape,
        features: Var,
        adjacency: Var,
        embeddings: Var,
        mut alpha_sink: Option<&mut Vec<AlphaStat>>,
    ) -> Result<(Vec<Var>, Var)> {
        validate_row_stochastic(&tape.value(adjacency), ROW_SUM_TOLERANCE)?;
        let mut state = self.state_map.forward(tape, features);
        let mut states = vec![state];
        match (&self.self_evolution, &self.restart) {
            (Some(evo), Some(restart)) => {
                let self_pattern = evo.forward(tape, features, embeddings);
                for step in 0..self.depth - 1 {
                    let alpha = restart.alpha(tape, self_pattern, state);
                    if let Some(sink) = alpha_sink.as_deref_mut() {
                        let av = tape.value(alpha);
                        sink.push(AlphaStat {
                            branch: self.graph_kind,
                            step,
                            mean: av.sum() / av.len() as f64,
                        });
                    }
                    let neighbor = tape.node_mix(adjacency, state);
                    let keep = tape.add_scalar(tape.neg(alpha), 1.0);
                    state = tape.add(tape.mul(neighbor, keep), tape.mul(self_pattern, alpha));
                    states.push(state);
                }
            }
            _ => {
                for _ in 0..self.depth - 1 {
                    state = tape.node_mix(adjacency, state);
                    states.push(state);
                }
            }
        }
        let stacked = if states.len() == 1 {
            states[0]
        } else {
            tape.concat(1, &states)
        };
        Ok((states.clone(), self.collect.forward(tape, stacked)))
    }

    pub fn forward(
        &self,
        tape: &Tape,
        features: Var,
        adjacency: Var,
        embeddings: Var,
        alpha_sink: Option<&mut Vec<AlphaStat>>,
    ) -> Result<Var> {
        let (_, out) = self.propagate(tape, features, adjacency, embeddings, alpha_sink)?;
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.state_map.params();
        if let Some(evo) = &self.self_evolution {
            v.extend(evo.params());
        }
        if let Some(r) = &self.restart {
            v.extend(r.params());
        }
        v.extend(self.collect.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.state_map.params_mut();
        if let Some(evo) = &mut self.self_evolution {
            v.extend(evo.params_mut());
        }
        if let Some(r) = &mut self.restart {
            v.extend(r.params_mut());
        }
        v.extend(self.collect.params_mut());
        v
    }
}

/// Static + dynamic branch pair; output is their sum. Branches never share
/// parameters.
pub struct LpgcModule {
    pub static_branch: LpgcBranch,
    pub dynamic_branch: LpgcBranch,
}

impl LpgcModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: PropagationKind,
        in_channels: usize,
        channels: usize,
        embed_dim: usize,
        out_channels: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(LpgcModule {
            static_branch: LpgcBranch::new(
                rng,
                &format!("{name}.static"),
                kind,
                GraphKind::Static,
                in_channels,
                channels,
                embed_dim,
                out_channels,
                depth,
            )?,
            dynamic_branch: LpgcBranch::new(
                rng,
                &format!("{name}.dynamic"),
                kind,
                GraphKind::Dynamic,
                in_channels,
                channels,
                embed_dim,
                out_channels,
                depth,
            )?,
        })
    }

    /// `features: [B, C_in, N, T]` under both adjacencies -> summed output.
    pub fn forward(
        &self,
        tape: &Tape,
        features: Var,
        static_adjacency: Var,
        dynamic_adjacency: Var,
        embeddings: Var,
        mut alpha_sink: Option<&mut Vec<AlphaStat>>,
    ) -> Result<Var> {
        let s = self.static_branch.forward(
            tape,
            features,
            static_adjacency,
            embeddings,
            alpha_sink.as_deref_mut(),
        )?;
        let d = self.dynamic_branch.forward(
            tape,
            features,
            dynamic_adjacency,
            embeddings,
            alpha_sink,
        )?;
        let (ss, ds) = (tape.shape(s), tape.shape(d));
        if ss != ds {
            return Err(Error::Shape(format!(
                "branch outputs differ: {ss:?} vs {ds:?}"
            )));
        }
        Ok(tape.add(s, d))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.static_branch.params();
        v.extend(self.dynamic_branch.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.static_branch.params_mut();
        v.extend(self.dynamic_branch.params_mut());
        v
    }
}
