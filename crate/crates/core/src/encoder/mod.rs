//! Convolutional feature encoder, span masking, conformer context network
//! and Gumbel-softmax quantizer.

mod conformer;
mod feature;
mod quantizer;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use conformer::{context_encode, ContextSequence, LayerHook};
pub use feature::{apply_mask, feature_encode, FeatureSequence};
pub use quantizer::{quantize, Quantized, QuantizerConfig};

use crate::error::{Error, Result};
use crate::numerics::{same_padding, Init, ParamSpec};

/// Whether stochastic regularizers (dropout, layerdrop) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_feature_dim: usize,
    pub conv_channels: [usize; 2],
    pub conv_filter: [usize; 2],
    pub conv_strides: [[usize; 2]; 2],
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub attention_heads: usize,
    pub conv_kernel_size: usize,
    pub projection_dim: usize,
    pub dropout: f64,
    pub layerdrop: f64,
    /// Rows of the learned absolute positional table.
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small profile that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            input_feature_dim: 40,
            conv_channels: [32, 16],
            conv_filter: [3, 3],
            conv_strides: [[2, 2], [2, 2]],
            num_blocks: 4,
            model_dim: 64,
            ffn_dim: 256,
            attention_heads: 4,
            conv_kernel_size: 15,
            projection_dim: 32,
            dropout: 0.1,
            layerdrop: 0.2,
            max_positions: 256,
        }
    }

    /// Full-size profile (about 100M parameters); used for accounting.
    pub fn full_scale() -> Self {
        Self {
            input_feature_dim: 40,
            conv_channels: [128, 32],
            conv_filter: [3, 3],
            conv_strides: [[2, 2], [2, 2]],
            num_blocks: 16,
            model_dim: 512,
            ffn_dim: 2048,
            attention_heads: 8,
            conv_kernel_size: 15,
            projection_dim: 768,
            dropout: 0.1,
            layerdrop: 0.2,
            max_positions: 512,
        }
    }

    /// Minimal profile for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_feature_dim: 40,
            conv_channels: [4, 4],
            conv_filter: [3, 3],
            conv_strides: [[2, 2], [2, 2]],
            num_blocks: 2,
            model_dim: 16,
            ffn_dim: 32,
            attention_heads: 2,
            conv_kernel_size: 5,
            projection_dim: 8,
            dropout: 0.0,
            layerdrop: 0.0,
            max_positions: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.attention_heads == 0 || !self.model_dim.is_multiple_of(self.attention_heads) {
            return bad("model_dim must be divisible by attention_heads");
        }
        if self.conv_kernel_size.is_multiple_of(2) {
            return bad("conv_kernel_size must be odd");
        }
        if self.conv_strides.iter().flatten().any(|&s| s == 0) || self.conv_filter.contains(&0) {
            return bad("conv filter and strides must be positive");
        }
        if self.conv_channels.contains(&0) || self.input_feature_dim == 0 {
            return bad("conv channels and input_feature_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.layerdrop) {
            return bad("layerdrop must be in [0, 1]");
        }
        if self.model_dim == 0 || self.ffn_dim == 0 || self.projection_dim == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }

    /// Time and feature extents after each convolution layer.
    pub fn conv_output_dims(&self, frames: usize) -> [(usize, usize); 2] {
        let [k_t, k_f] = self.conv_filter;
        let (t1, _) = same_padding(frames, k_t, self.conv_strides[0][0]);
        let (f1, _) = same_padding(self.input_feature_dim, k_f, self.conv_strides[0][1]);
        let (t2, _) = same_padding(t1, k_t, self.conv_strides[1][0]);
        let (f2, _) = same_padding(f1, k_f, self.conv_strides[1][1]);
        [(t1, f1), (t2, f2)]
    }

    /// Encoder-rate length for `frames` input frames.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        self.conv_output_dims(frames)[1].0
    }

    /// Shortest accepted input (one output frame per stride-product).
    pub fn min_frames(&self) -> usize {
        self.conv_strides[0][0] * self.conv_strides[1][0]
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let [c1, c2] = self.conv_channels;
        let [kt, kf] = self.conv_filter;
        let d = self.model_dim;
        let [(_, _), (_, f2)] = self.conv_output_dims(self.min_frames());
        out.push(ParamSpec::new("fe.conv1.w", &[kt * kf, c1], Init::LeCun));
        out.push(ParamSpec::new("fe.conv1.b", &[c1], Init::Zeros));
        out.push(ParamSpec::new(
            "fe.conv2.w",
            &[kt * kf * c1, c2],
            Init::LeCun,
        ));
        out.push(ParamSpec::new("fe.conv2.b", &[c2], Init::Zeros));
        out.push(ParamSpec::new("fe.proj.w", &[f2 * c2, d], Init::LeCun));
        out.push(ParamSpec::new("fe.proj.b", &[d], Init::Zeros));
        out.push(ParamSpec::new("enc.mask_emb", &[d], Init::Uniform(1.0)));
        out.push(ParamSpec::new(
            "enc.pos",
            &[self.max_positions, d],
            Init::Normal(0.02),
        ));
        for b in 0..self.num_blocks {
            conformer::block_param_specs(self, b, out);
        }
        out.push(ParamSpec::new(
            "enc.proj.w",
            &[d, self.projection_dim],
            Init::LeCun,
        ));
        out.push(ParamSpec::new(
            "enc.proj.b",
            &[self.projection_dim],
            Init::Zeros,
        ));
    }
}

pub(crate) fn check_language(id: usize, count: usize) -> Result<()> {
    if id >= count {
        return Err(Error::UnknownLanguage { id, count });
    }
    Ok(())
}

pub(crate) fn block_prefix(b: usize) -> alloc::string::String {
    format!("enc.block{b}")
}
