//! The assembled forecaster: graph learning feeding K alternating
//! temporal-convolution / personalized-propagation blocks with residual and
//! skip connections, closed by a two-stage 1x1 output head that emits all
//! horizon steps at once.
//!
//! Both adjacencies are computed once per forward pass and shared by every
//! block. Ablation variants rewire which adjacency each propagation branch
//! consumes (or drop components entirely); see [`Variant`].

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AdamSnapshot, CheckpointManifest, CheckpointMeta,
    CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::graph::{static_adjacency, DynamicGraphLearner};
use crate::lpgc::{AlphaStat, LpgcModule, PropagationKind};
use crate::nn::{scaled_normal, ChannelLinear, Mode, Param};
use crate::tcn::{receptive_field, GatedTemporalConv, DEFAULT_KERNEL_SET};
use crate::tensor::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How to reconcile the input length with the temporal receptive field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    /// Left-pad the window with zeros up to the receptive field.
    #[default]
    ZeroLeft,
    /// Reject configurations whose receptive field exceeds the input length.
    None,
}

/// Every architecture hyperparameter in one validated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of stations N; 0 means "fill in from the dataset".
    pub num_nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    /// Node embedding width d.
    pub embed_dim: usize,
    /// Similarity heads K_h and per-head width d_k.
    pub num_heads: usize,
    pub head_dim: usize,
    /// Width of the bilinear skip projections in edge aggregation.
    pub skip_proj_dim: usize,
    /// Stacked TC/propagation blocks K.
    pub num_blocks: usize,
    /// Propagation depth L.
    pub propagation_depth: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub end_channels: usize,
    pub dilation_base: usize,
    pub kernel_set: Vec<usize>,
    pub dropout: f64,
    pub padding: PaddingPolicy,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_nodes: 0,
            input_len: 12,
            horizon: 12,
            embed_dim: 40,
            num_heads: 4,
            head_dim: 10,
            skip_proj_dim: 16,
            num_blocks: 2,
            propagation_depth: 3,
            residual_channels: 32,
            skip_channels: 64,
            end_channels: 128,
            dilation_base: 1,
            kernel_set: DEFAULT_KERNEL_SET.to_vec(),
            dropout: 0.2,
            padding: PaddingPolicy::ZeroLeft,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.kernel_set, self.num_blocks, self.dilation_base)
    }

    /// Zero steps prepended to each window before the first convolution.
    pub fn pad_len(&self) -> usize {
        match self.padding {
            PaddingPolicy::ZeroLeft => self.receptive_field().saturating_sub(self.input_len),
            PaddingPolicy::None => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_nodes", self.num_nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("skip_proj_dim", self.skip_proj_dim),
            ("num_blocks", self.num_blocks),
            ("propagation_depth", self.propagation_depth),
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("end_channels", self.end_channels),
            ("dilation_base", self.dilation_base),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.kernel_set.is_empty() || self.kernel_set.contains(&0) {
            return Err(Error::Config("kernel_set must hold sizes >= 1".into()));
        }
        if !self.residual_channels.is_multiple_of(self.kernel_set.len()) {
            return Err(Error::Config(format!(
                "residual_channels {} must split evenly over {} kernel sizes",
                self.residual_channels,
                self.kernel_set.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        let rf = self.receptive_field();
        let effective = self.input_len + self.pad_len();
        if rf > effective {
            let mut valid = Vec::new();
            for blocks in 1..=4 {
                for base in 1..=3 {
                    if receptive_field(&self.kernel_set, blocks, base) <= self.input_len {
                        valid.push(format!("(num_blocks={blocks}, dilation_base={base})"));
                    }
                }
            }
            return Err(Error::Config(format!(
                "receptive field {rf} exceeds input length {} with padding disabled; \
                 enable zero_left padding or use one of: {}",
                self.input_len,
                if valid.is_empty() {
                    "a larger input length".to_string()
                } else {
                    valid.join(", ")
                }
            )));
        }
        Ok(())
    }
}

/// Full model or one of the paper-style ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Static graph learning removed: the dynamic graph loses its prior and
    /// both propagation branches consume it.
    #[serde(rename = "no_SL")]
    NoStaticGraph,
    /// Dynamic graph learning removed: both branches use the static graph.
    #[serde(rename = "no_DL")]
    NoDynamicGraph,
    /// Propagation removed: blocks pass temporal features straight through.
    #[serde(rename = "no_LPGC")]
    NoLpgc,
    /// Personalized propagation replaced by plain power iteration.
    #[serde(rename = "SD_GCN")]
    StaticDynamicGcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoStaticGraph,
        Variant::NoDynamicGraph,
        Variant::NoLpgc,
        Variant::StaticDynamicGcn,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoStaticGraph => "no_SL",
            Variant::NoDynamicGraph => "no_DL",
            Variant::NoLpgc => "no_LPGC",
            Variant::StaticDynamicGcn => "SD_GCN",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}`; expected one of full, no_SL, no_DL, no_LPGC, SD_GCN"
                ))
            })
    }
}

struct Block {
    temporal: GatedTemporalConv,
    propagation: Option<LpgcModule>,
    residual_proj: ChannelLinear,
    skip_proj: ChannelLinear,
}

/// The end-to-end forecaster.
pub struct SdLpgc {
    pub config: ModelConfig,
    pub variant: Variant,
    embeddings: Param,
    dynamic_learner: Option<DynamicGraphLearner>,
    input_proj: ChannelLinear,
    blocks: Vec<Block>,
    out_hidden: ChannelLinear,
    out_final: ChannelLinear,
}

impl SdLpgc {
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.num_nodes;
        let d = config.embed_dim;
        let c = config.residual_channels;

        let embeddings = Param::new("embeddings", scaled_normal(&mut rng, &[n, d], d));
        let dynamic_learner = (variant != Variant::NoDynamicGraph).then(|| {
            DynamicGraphLearner::new(
                &mut rng,
                d,
                config.num_heads,
                config.head_dim,
                config.skip_proj_dim,
                config.dropout,
            )
        });
        let input_proj = ChannelLinear::new(&mut rng, "input_proj", 1, c, true);

        let propagation_kind = match variant {
            Variant::StaticDynamicGcn => PropagationKind::PlainPowers,
            _ => PropagationKind::Personalized,
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut dilation = 1usize;
        for k in 0..config.num_blocks {
            let name = format!("block{k}");
            let temporal = GatedTemporalConv::new(
                &mut rng,
                &format!("{name}.tc"),
                c,
                c,
                &config.kernel_set,
                dilation,
            )?;
            let propagation = if variant == Variant::NoLpgc {
                None
            } else {
                Some(LpgcModule::new(
                    &mut rng,
                    &format!("{name}.lpgc"),
                    propagation_kind,
                    c,
                    c,
                    d,
                    c,
                    config.propagation_depth,
                )?)
            };
            blocks.push(Block {
                temporal,
                propagation,
                residual_proj: ChannelLinear::new(&mut rng, &format!("{name}.residual"), c, c, true),
                skip_proj: ChannelLinear::new(
                    &mut rng,
                    &format!("{name}.skip"),
                    c,
                    config.skip_channels,
                    true,
                ),
            });
            dilation *= config.dilation_base.max(1);
        }
        let out_hidden = ChannelLinear::new(
            &mut rng,
            "output.hidden",
            config.skip_channels,
            config.end_channels,
            true,
        );
        let out_final = ChannelLinear::new(
            &mut rng,
            "output.final",
            config.end_channels,
            config.horizon,
            true,
        );
        Ok(SdLpgc {
            config,
            variant,
            embeddings,
            dynamic_learner,
            input_proj,
            blocks,
            out_hidden,
            out_final,
        })
    }

    /// Build a named ablation variant of the same configuration.
    pub fn build_variant(config: ModelConfig, variant: Variant) -> Result<Self> {
        SdLpgc::new(config, variant)
    }

    pub fn node_embeddings(&self) -> &Param {
        &self.embeddings
    }

    pub fn node_embeddings_mut(&mut self) -> &mut Param {
        &mut self.embeddings
    }

    /// Forecast `[B, v, N]` from a normalized window `[B, 1, N, u]`.
    pub fn forward(&self, tape: &Tape, window: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.forward_impl(tape, window, mode, None)
    }

    /// As [`forward`](Self::forward), also collecting per-step mean restart
    /// probabilities.
    pub fn forward_with_diagnostics(
        &self,
        tape: &Tape,
        window: Var,
        mode: &mut Mode<'_>,
        alpha_sink: &mut Vec<AlphaStat>,
    ) -> Result<Var> {
        self.forward_impl(tape, window, mode, Some(alpha_sink))
    }

    /// The learned adjacencies for a (batch of) window(s); eval-mode only,
    /// used by the graph export command. Returns `(static, dynamic)`;
    /// either may be absent depending on the variant.
    pub fn adjacencies(
        &self,
        tape: &Tape,
        window: Var,
    ) -> Result<(Option<Var>, Option<Var>)> {
        self.learn_graphs(tape, window, &mut Mode::Eval)
    }

    fn learn_graphs(
        &self,
        tape: &Tape,
        window: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let emb = tape.param(&self.embeddings);
        match self.variant {
            Variant::Full | Variant::StaticDynamicGcn => {
                let s = static_adjacency(tape, emb);
                let learner = self.dynamic_learner.as_ref().expect("learner present");
                let d = learner.adjacency(tape, window, emb, Some(s), mode)?;
                Ok((Some(s), Some(d)))
            }
            Variant::NoStaticGraph => {
                let learner = self.dynamic_learner.as_ref().expect("learner present");
                let d = learner.adjacency(tape, window, emb, None, mode)?;
                Ok((None, Some(d)))
            }
            Variant::NoDynamicGraph => Ok((Some(static_adjacency(tape, emb)), None)),
            Variant::NoLpgc => {
                // graphs are still learnable in this variant, but nothing
                // consumes them; skip the computation
                Ok((None, None))
            }
        }
    }

    fn forward_impl(
        &self,
        tape: &Tape,
        window: Var,
        mode: &mut Mode<'_>,
        mut alpha_sink: Option<&mut Vec<AlphaStat>>,
    ) -> Result<Var> {
        let shape = tape.shape(window);
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.config.num_nodes
            || shape[3] != self.config.input_len
        {
            return Err(Error::Shape(format!(
                "expected window [B, 1, {}, {}], got {shape:?}",
                self.config.num_nodes, self.config.input_len
            )));
        }
        let batch = shape[0];
        let (adj_static, adj_dynamic) = self.learn_graphs(tape, window, mode)?;
        let emb = tape.param(&self.embeddings);

        let pad = self.config.pad_len();
        let padded = if pad > 0 {
            tape.pad_time_front(window, pad)
        } else {
            window
        };
        let mut hidden = self.input_proj.forward(tape, padded);
        let mut skip_sum: Option<Var> = None;
        for block in &self.blocks {
            let features = block.temporal.forward(tape, hidden)?;
            let t_out = *tape.shape(features).last().unwrap();
            let mixed = match &block.propagation {
                Some(module) => {
                    let (a_first, a_second) = match self.variant {
                        Variant::Full | Variant::StaticDynamicGcn => {
                            (adj_static.unwrap(), adj_dynamic.unwrap())
                        }
                        Variant::NoStaticGraph => (adj_dynamic.unwrap(), adj_dynamic.unwrap()),
                        Variant::NoDynamicGraph => (adj_static.unwrap(), adj_static.unwrap()),
                        Variant::NoLpgc => unreachable!("no propagation module"),
                    };
                    module.forward(
                        tape,
                        features,
                        a_first,
                        a_second,
                        emb,
                        alpha_sink.as_deref_mut(),
                    )?
                }
                None => features,
            };
            let residual = block
                .residual_proj
                .forward(tape, tape.slice_time_tail(hidden, t_out));
            hidden = tape.add(mixed, residual);
            let tap = block
                .skip_proj
                .forward(tape, tape.slice_time_tail(hidden, 1));
            skip_sum = Some(match skip_sum {
                Some(s) => tape.add(s, tap),
                None => tap,
            });
        }
        let skip = skip_sum.expect("at least one block");
        let head = tape.relu(self.out_hidden.forward(tape, tape.relu(skip)));
        let out = self.out_final.forward(tape, head); // [B, v, N, 1]
        Ok(tape.reshape(out, &[batch, self.config.horizon, self.config.num_nodes]))
    }

    /// Parameters in a fixed traversal order (construction order).
    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.embeddings];
        if let Some(l) = &self.dynamic_learner {
            v.extend(l.params());
        }
        v.extend(self.input_proj.params());
        for b in &self.blocks {
            v.extend(b.temporal.params());
            if let Some(p) = &b.propagation {
                v.extend(p.params());
            }
            v.extend(b.residual_proj.params());
            v.extend(b.skip_proj.params());
        }
        v.extend(self.out_hidden.params());
        v.extend(self.out_final.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.embeddings];
        if let Some(l) = &mut self.dynamic_learner {
            v.extend(l.params_mut());
        }
        v.extend(self.input_proj.params_mut());
        for b in &mut self.blocks {
            v.extend(b.temporal.params_mut());
            if let Some(p) = &mut b.propagation {
                v.extend(p.params_mut());
            }
            v.extend(b.residual_proj.params_mut());
            v.extend(b.skip_proj.params_mut());
        }
        v.extend(self.out_hidden.params_mut());
        v.extend(self.out_final.params_mut());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Copy parameter values from `other` wherever names match.
    pub fn copy_matching_params(&mut self, other: &SdLpgc) {
        let source: std::collections::HashMap<&str, &Param> =
            other.params().into_iter().map(|p| (p.name.as_str(), p)).collect();
        for p in self.params_mut() {
            if let Some(src) = source.get(p.name.as_str()) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                }
            }
        }
    }
}
