use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DEFAULT_MASK_HOPS;

/// Model structure. `Full` is the complete encoder/decoder network; the
/// others are ablations of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Global encoder only; runs without an adjacency matrix.
    EncoderOnly,
    /// Masked self-attention + FFN blocks, no fusion attention.
    DecoderOnly,
    /// The m speeds of each node are flattened and linearly projected instead of using the LSTM.
    NoTemporal,
    /// LSTM embedding straight into the output head.
    FcLstmBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::EncoderOnly,
        Variant::DecoderOnly,
        Variant::NoTemporal,
        Variant::FcLstmBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EncoderOnly => "encoder-only",
            Variant::DecoderOnly => "decoder-only",
            Variant::NoTemporal => "no-temporal",
            Variant::FcLstmBaseline => "fc-lstm-baseline",
        }
    }

    pub(crate) fn code(self) -> u64 {
        Variant::ALL
            .iter()
            .position(|v| *v == self)
            .expect("listed") as u64
    }

    pub(crate) fn from_code(code: u64) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }

    pub fn uses_encoder(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::EncoderOnly | Variant::NoTemporal
        )
    }

    pub fn uses_decoder(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::DecoderOnly | Variant::NoTemporal
        )
    }

    /// Decoder blocks attend over the encoder output.
    pub fn decoder_fuses_encoder(self) -> bool {
        matches!(self, Variant::Full | Variant::NoTemporal)
    }

    pub fn uses_lstm(self) -> bool {
        self != Variant::NoTemporal
    }

    pub fn uses_positional_terms(self) -> bool {
        self != Variant::FcLstmBaseline
    }

    pub fn needs_graph(self) -> bool {
        self.uses_decoder()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Output steps `n`.
    pub horizon: usize,
    /// Input steps `m`.
    pub window: usize,
    pub mask_hops: usize,
    /// Feature channels `C` of the input window.
    pub input_channels: usize,
    pub variant: Variant,
    /// Adds the fixed sinusoidal node encoding; switched off only for equivariance checks.
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            heads: 8,
            encoder_blocks: 6,
            decoder_blocks: 6,
            horizon: 12,
            window: 12,
            mask_hops: DEFAULT_MASK_HOPS,
            input_channels: 3,
            variant: Variant::Full,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.horizon == 0 || self.window == 0 || self.input_channels == 0 {
            return fail("d_model, horizon, window and input_channels must be positive".into());
        }
        if v.uses_encoder() || v.uses_decoder() {
            if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                return fail(format!(
                    "{} heads do not divide d_model {}",
                    self.heads, self.d_model
                ));
            }
            if self.d_ff == 0 {
                return fail("d_ff must be positive".into());
            }
        }
        if v.uses_positional_terms() && self.positional_encoding && !self.d_model.is_multiple_of(2)
        {
            return fail(format!(
                "positional encoding needs an even d_model, got {}",
                self.d_model
            ));
        }
        if v.uses_encoder() && self.encoder_blocks == 0 {
            return fail(format!("variant {v} needs at least one encoder block"));
        }
        if v.uses_decoder() && self.decoder_blocks == 0 {
            return fail(format!("variant {v} needs at least one decoder block"));
        }
        if v.needs_graph() && self.mask_hops == 0 {
            return fail("mask_hops must be at least 1".into());
        }
        Ok(())
    }

    /// Encoder blocks actually instantiated by the variant.
    pub fn active_encoder_blocks(&self) -> usize {
        if self.variant.uses_encoder() {
            self.encoder_blocks
        } else {
            0
        }
    }

    pub fn active_decoder_blocks(&self) -> usize {
        if self.variant.uses_decoder() {
            self.decoder_blocks
        } else {
            0
        }
    }
}
