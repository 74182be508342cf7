//! Binary checkpoint format.
//!
//! Layout (all little-endian):
//!
//! | bytes | content                                                        |
//! |-------|----------------------------------------------------------------|
//! | 8     | magic `TTFCKPT1`                                               |
//! | 8×12  | u64: d_model, d_ff, heads, encoder_blocks, decoder_blocks,     |
//! |       | horizon, window, mask_hops, input_channels, variant code,      |
//! |       | positional flag, node count                                    |
//! | 8×2   | f64: normalization mean, std                                   |
//! | 8     | u64: parameter count P                                         |
//! | 8×P   | f64 parameters in [`ParameterSet::tensors`] order              |
//! | 4     | u32 CRC-32 of everything above                                 |

use std::path::Path;

use crate::dataset::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Variant};
use crate::model::params::{parameter_count, ParameterSet};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TTFCKPT1";
const HEADER_WORDS: usize = 12;
const PREFIX_LEN: usize = 8 + 8 * HEADER_WORDS + 16 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub nodes: usize,
    pub stats: NormalizationStats,
    pub params: ParameterSet<S>,
}

fn header_words(config: &ModelConfig, nodes: usize) -> [u64; HEADER_WORDS] {
    [
        config.d_model as u64,
        config.d_ff as u64,
        config.heads as u64,
        config.encoder_blocks as u64,
        config.decoder_blocks as u64,
        config.horizon as u64,
        config.window as u64,
        config.mask_hops as u64,
        config.input_channels as u64,
        config.variant.code(),
        u64::from(config.positional_encoding),
        nodes as u64,
    ]
}

pub fn encode_checkpoint<S: Scalar>(checkpoint: &Checkpoint<S>) -> Vec<u8> {
    let values = checkpoint.params.flatten();
    let mut buf = Vec::with_capacity(PREFIX_LEN + 8 * values.len() + 4);
    buf.extend_from_slice(MAGIC);
    for w in header_words(&checkpoint.config, checkpoint.nodes) {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&checkpoint.stats.mean.to_le_bytes());
    buf.extend_from_slice(&checkpoint.stats.std.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn word(bytes: &[u8], index: usize) -> [u8; 8] {
    bytes[index * 8..index * 8 + 8]
        .try_into()
        .expect("8-byte slice")
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    if bytes.len() < PREFIX_LEN + 4 {
        return Err(Error::Format(format!(
            "checkpoint truncated at {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let words = &body[8..];
    let count = u64::from_le_bytes(word(words, HEADER_WORDS + 2)) as usize;
    if body.len() != PREFIX_LEN + 8 * count {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters but holds {} bytes",
            body.len()
        )));
    }
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Format(
            "checkpoint checksum mismatch (corrupt file)".into(),
        ));
    }
    let h: Vec<u64> = (0..HEADER_WORDS)
        .map(|i| u64::from_le_bytes(word(words, i)))
        .collect();
    let variant = Variant::from_code(h[9])
        .ok_or_else(|| Error::Format(format!("unknown variant code {}", h[9])))?;
    let config = ModelConfig {
        d_model: h[0] as usize,
        d_ff: h[1] as usize,
        heads: h[2] as usize,
        encoder_blocks: h[3] as usize,
        decoder_blocks: h[4] as usize,
        horizon: h[5] as usize,
        window: h[6] as usize,
        mask_hops: h[7] as usize,
        input_channels: h[8] as usize,
        variant,
        positional_encoding: h[10] != 0,
    };
    let nodes = h[11] as usize;
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint header is invalid: {e}")))?;
    if parameter_count(&config, nodes) != count {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, header implies {}",
            parameter_count(&config, nodes)
        )));
    }
    let stats = NormalizationStats {
        mean: f64::from_le_bytes(word(words, HEADER_WORDS)),
        std: f64::from_le_bytes(word(words, HEADER_WORDS + 1)),
    };
    let values: Vec<S> = body[PREFIX_LEN..]
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let mut params = ParameterSet::zeros(&config, nodes);
    params.assign(&values);
    Ok(Checkpoint {
        config,
        nodes,
        stats,
        params,
    })
}

pub fn save_checkpoint<S: Scalar>(path: &Path, checkpoint: &Checkpoint<S>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(checkpoint)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn save_parameters<S: Scalar>(
    path: &Path,
    config: &ModelConfig,
    nodes: usize,
    stats: &NormalizationStats,
    params: &ParameterSet<S>,
) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            config: config.clone(),
            nodes,
            stats: *stats,
            params: params.clone(),
        },
    )
}

/// Loads parameters written for exactly `config` on `nodes` sensors.
pub fn load_parameters<S: Scalar>(
    path: &Path,
    config: &ModelConfig,
    nodes: usize,
) -> Result<ParameterSet<S>> {
    let ckpt = read_checkpoint(path)?;
    if header_words(&ckpt.config, ckpt.nodes) != header_words(config, nodes) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint is for {:?} on {} nodes, requested {:?} on {nodes}",
            ckpt.config, ckpt.nodes, config
        )));
    }
    Ok(ckpt.params)
}
