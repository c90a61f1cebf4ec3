//! Gated dilated-inception temporal convolution.
//!
//! Each branch runs four parallel dilated causal convolutions over the time
//! axis with different kernel sizes, truncates every output to the shortest
//! branch (the one with the largest kernel, left-aligned to the latest
//! timestep), and concatenates along channels. A block pairs a tanh filter
//! branch with a sigmoid gate branch, so its output lives in (-1, 1).

use crate::error::{Error, Result};
use crate::nn::{CausalConv, Param};
use crate::tensor::{Tape, Var};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_KERNEL_SET: [usize; 4] = [2, 3, 6, 7];

/// Lookback consumed by `num_blocks` stacked blocks with dilations
/// `dilation_base^(k-1)`: `1 + (max_kernel - 1) * sum_k dilation_k`.
pub fn receptive_field(kernel_set: &[usize], num_blocks: usize, dilation_base: usize) -> usize {
    let max_kernel = kernel_set.iter().copied().max().unwrap_or(1);
    let mut span = 0usize;
    let mut dilation = 1usize;
    for _ in 0..num_blocks {
        span += (max_kernel - 1) * dilation;
        dilation *= dilation_base.max(1);
    }
    1 + span
}

/// One inception branch: parallel causal convolutions, outputs truncated to
/// the largest-kernel length and channel-concatenated.
pub struct DilatedInception {
    pub convs: Vec<CausalConv>,
    pub dilation: usize,
}

impl DilatedInception {
    /// `out_channels` must split evenly across the kernel set.
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_set: &[usize],
        dilation: usize,
    ) -> Result<Self> {
        if kernel_set.is_empty() {
            return Err(Error::Config("kernel set must not be empty".into()));
        }
        if !out_channels.is_multiple_of(kernel_set.len()) {
            return Err(Error::Config(format!(
                "out_channels {} not divisible by the {} kernel sizes",
                out_channels,
                kernel_set.len()
            )));
        }
        let per = out_channels / kernel_set.len();
        let convs = kernel_set
            .iter()
            .map(|&k| CausalConv::new(rng, &format!("{name}.k{k}"), in_channels, per, k, dilation))
            .collect();
        Ok(DilatedInception {
            convs,
            dilation,
        })
    }

    pub fn max_kernel(&self) -> usize {
        self.convs.iter().map(|c| c.kernel_size()).max().unwrap()
    }

    /// Minimum input length for one valid output step.
    pub fn min_input_len(&self) -> usize {
        1 + self.dilation * (self.max_kernel() - 1)
    }

    /// Output time length for an input of length `t`.
    pub fn output_len(&self, t: usize) -> Result<usize> {
        let min = self.min_input_len();
        if t < min {
            return Err(Error::Config(format!(
                "temporal convolution needs input length >= {min}, got {t}"
            )));
        }
        Ok(t - self.dilation * (self.max_kernel() - 1))
    }

    /// `x: [B, C_in, N, T] -> [B, C_out, N, T']`.
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let t = *tape.shape(x).last().unwrap();
        let t_out = self.output_len(t)?;
        let parts: Vec<Var> = self
            .convs
            .iter()
            .map(|conv| {
                let y = conv.forward(tape, x);
                tape.slice_time_tail(y, t_out)
            })
            .collect();
        Ok(tape.concat(1, &parts))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// Filter/gate pair: `tanh(filter(x)) * sigmoid(gate(x))`.
pub struct GatedTemporalConv {
    pub filter: DilatedInception,
    pub gate: DilatedInception,
}

impl GatedTemporalConv {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_set: &[usize],
        dilation: usize,
    ) -> Result<Self> {
        Ok(GatedTemporalConv {
            filter: DilatedInception::new(
                rng,
                &format!("{name}.filter"),
                in_channels,
                out_channels,
                kernel_set,
                dilation,
            )?,
            gate: DilatedInception::new(
                rng,
                &format!("{name}.gate"),
                in_channels,
                out_channels,
                kernel_set,
                dilation,
            )?,
        })
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let f = tape.tanh(self.filter.forward(tape, x)?);
        let g = tape.sigmoid(self.gate.forward(tape, x)?);
        Ok(tape.mul(f, g))
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        self.filter.output_len(t)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.filter.params();
        v.extend(self.gate.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.filter.params_mut();
        v.extend(self.gate.params_mut());
        v
    }
}
