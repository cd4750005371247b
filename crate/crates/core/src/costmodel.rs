//! Bit accounting and parameter-server communication time.

use serde::{Deserialize, Serialize};

use crate::compressors::{select_count, CompressedMessage, CompressorConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub bandwidth_bps: f64,
    pub bits_per_value: u64,
    pub bits_per_index: u64,
    /// 2 counts the worker->server upload and the server->worker broadcast.
    pub direction_multiplier: u64,
    /// Count one 32-bit scale per QSGD bucket.
    pub include_scale_overhead: bool,
    /// Charge the broadcast as a dense vector instead of the compressed size.
    pub dense_downlink: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            bandwidth_bps: 10e9,
            bits_per_value: 32,
            bits_per_index: 32,
            direction_multiplier: 2,
            include_scale_overhead: false,
            dense_downlink: false,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0) || !self.bandwidth_bps.is_finite() {
            return Err(Error::config("cost.bandwidth_bps", "must be positive"));
        }
        if !matches!(self.direction_multiplier, 1 | 2) {
            return Err(Error::config("cost.direction_multiplier", "must be 1 or 2"));
        }
        Ok(())
    }

    pub fn dense_bits(&self, n: usize) -> u64 {
        self.bits_per_value * n as u64
    }

    pub fn message_bits(&self, msg: &CompressedMessage) -> Result<u64> {
        match msg {
            CompressedMessage::Dense(values) => Ok(self.dense_bits(values.len())),
            CompressedMessage::Sparse { indices, .. } => {
                Ok((self.bits_per_value + self.bits_per_index) * indices.len() as u64)
            }
            CompressedMessage::Quantized {
                n, levels, scales, ..
            } => {
                let per_component = quantized_bits_per_component(*levels)?;
                let mut bits = per_component * *n as u64;
                if self.include_scale_overhead {
                    bits += self.bits_per_value * scales.len() as u64;
                }
                Ok(bits)
            }
        }
    }

    /// Bits one worker is expected to send for a gradient of length `n`.
    ///
    /// DGC is charged at its target keep fraction (after warm-up).
    pub fn expected_message_bits(&self, config: &CompressorConfig, n: usize) -> Result<u64> {
        let sparse =
            |keep: f64| (self.bits_per_value + self.bits_per_index) * select_count(n, keep) as u64;
        Ok(match config {
            CompressorConfig::Identity => self.dense_bits(n),
            CompressorConfig::RandomK { keep, .. } | CompressorConfig::TopK { keep, .. } => {
                sparse(*keep)
            }
            CompressorConfig::Dgc(d) => sparse(d.keep),
            CompressorConfig::Qsgd { levels, bucket } => {
                let mut bits = quantized_bits_per_component(*levels)? * n as u64;
                if self.include_scale_overhead {
                    let buckets = n.div_ceil(bucket.unwrap_or(n).clamp(1, n.max(1)));
                    bits += self.bits_per_value * buckets as u64;
                }
                bits
            }
        })
    }

    /// Uncompressed bits over expected compressed bits.
    pub fn compression_ratio(&self, config: &CompressorConfig, n: usize) -> Result<f64> {
        Ok(self.dense_bits(n) as f64 / self.expected_message_bits(config, n)? as f64)
    }

    /// Seconds to move `bits` through the parameter server.
    pub fn comm_time(&self, bits: u64) -> f64 {
        (self.direction_multiplier * bits) as f64 / self.bandwidth_bps
    }

    /// Upload plus broadcast time for one exchange, honouring `dense_downlink`.
    pub fn exchange_time(&self, upload_bits: u64, n: usize) -> f64 {
        if self.dense_downlink && self.direction_multiplier == 2 {
            (upload_bits + self.dense_bits(n)) as f64 / self.bandwidth_bps
        } else {
            self.comm_time(upload_bits)
        }
    }
}

/// `log2(s) + 1` bits: level magnitude plus sign, at power-of-two `s`.
pub fn quantized_bits_per_component(levels: u32) -> Result<u64> {
    if levels == 0 || !levels.is_power_of_two() {
        return Err(Error::LevelsNotPowerOfTwo(levels));
    }
    Ok(levels.trailing_zeros() as u64 + 1)
}
