use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the per-speaker LHUC scaling is applied inside the subsampling
/// front-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LhucPlacement {
    /// After the linear projection that closes the subsampling module
    /// (`d_lhuc = d_model`).
    #[default]
    SubsampleOutput,
    /// On the flattened output of the second 2-D convolution, before the
    /// projection (`d_lhuc = channels * reduced feature dim`).
    ConvOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    /// Includes the blank (id 0) and the shared sos/eos symbol (last id).
    pub vocab_size: usize,
    pub subsample_stride: usize,
    pub subsample_channels: usize,
    pub dropout_rate: f64,
    pub max_decode_len: usize,
    pub lhuc_placement: LhucPlacement,
    /// Adds sinusoidal positions to the encoder input, after the LHUC layer.
    pub encoder_pos_enc: bool,
    /// Test-only construction: identity-initialized, activation-free
    /// subsampling so an input channel gain maps onto one hidden channel.
    pub linear_probe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            num_encoder_blocks: 2,
            num_decoder_blocks: 2,
            d_model: 16,
            d_ffn: 32,
            num_heads: 2,
            conv_kernel: 5,
            vocab_size: 10,
            subsample_stride: 2,
            subsample_channels: 4,
            dropout_rate: 0.1,
            max_decode_len: 64,
            lhuc_placement: LhucPlacement::SubsampleOutput,
            encoder_pos_enc: false,
            linear_probe: false,
        }
    }
}

/// Number of stride-2 convolution layers in the subsampling front-end.
pub const SUBSAMPLE_LAYERS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad("d_model must be a positive multiple of num_heads");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd");
        }
        if self.feat_dim == 0 || self.d_ffn == 0 || self.subsample_channels == 0 || self.subsample_stride == 0 {
            return bad("dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.max_decode_len < 2 {
            return bad("max_decode_len must be at least 2");
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn sos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }

    /// Ids that can appear in a transcript.
    pub fn lexical_tokens(&self) -> std::ops::Range<usize> {
        1..self.vocab_size - 1
    }

    pub fn subsampled_len(&self, frames: usize) -> usize {
        (0..SUBSAMPLE_LAYERS).fold(frames, |n, _| n.div_ceil(self.subsample_stride))
    }

    pub fn subsampled_feat_dim(&self) -> usize {
        self.subsampled_len(self.feat_dim)
    }

    /// Minimum input frames for the subsampling front-end.
    pub fn min_frames(&self) -> usize {
        self.subsample_stride.pow(SUBSAMPLE_LAYERS as u32)
    }

    pub fn d_lhuc(&self) -> usize {
        match self.lhuc_placement {
            LhucPlacement::SubsampleOutput => self.d_model,
            LhucPlacement::ConvOutput => self.subsample_channels * self.subsampled_feat_dim(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}
