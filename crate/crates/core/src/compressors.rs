//! Gradient compressors: identity, random-k, top-k, DGC and QSGD.
//!
//! Every compressor is a function of `(gradient, state, rng)`. Per-worker state
//! lives in [`CompressorState`]; [`WorkerCompressor`] bundles a config with one
//! state and dispatches to the free functions below.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_finite, clip_by_global_norm, l2_norm, Rng};

/// How the top-k candidates are ranked. Both strategies return identical indices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Partial,
    FullSort,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgcConfig {
    pub keep: f64,
    #[serde(default = "DgcConfig::default_momentum")]
    pub momentum: f64,
    /// Global-norm threshold before the `1/sqrt(W)` scaling.
    #[serde(default = "DgcConfig::default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_true")]
    pub clipping: bool,
    #[serde(default = "DgcConfig::default_sample_fraction")]
    pub sample_fraction: f64,
    #[serde(default = "DgcConfig::default_warmup_epochs")]
    pub warmup_epochs: u32,
}

impl DgcConfig {
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_clip_norm() -> f64 {
        1.0
    }
    fn default_sample_fraction() -> f64 {
        0.01
    }
    fn default_warmup_epochs() -> u32 {
        4
    }

    pub fn new(keep: f64) -> Self {
        DgcConfig {
            keep,
            momentum: Self::default_momentum(),
            clip_norm: Self::default_clip_norm(),
            clipping: true,
            sample_fraction: Self::default_sample_fraction(),
            warmup_epochs: Self::default_warmup_epochs(),
        }
    }

    /// The configuration under which DGC reduces to plain top-k.
    pub fn plain(keep: f64) -> Self {
        DgcConfig {
            keep,
            momentum: 0.0,
            clip_norm: 1.0,
            clipping: false,
            sample_fraction: 1.0,
            warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorConfig {
    Identity,
    RandomK {
        keep: f64,
        #[serde(default = "default_true")]
        residual: bool,
    },
    TopK {
        keep: f64,
        #[serde(default)]
        selection: Selection,
    },
    Dgc(DgcConfig),
    Qsgd {
        levels: u32,
        /// Bucket size; `None` quantizes the whole vector with one scale.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bucket: Option<usize>,
    },
}

fn check_fraction(field: &str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must be in (0, 1], got {value}"),
        ))
    }
}

impl CompressorConfig {
    pub fn method_name(&self) -> &'static str {
        match self {
            CompressorConfig::Identity => "identity",
            CompressorConfig::RandomK { .. } => "random_k",
            CompressorConfig::TopK { .. } => "top_k",
            CompressorConfig::Dgc(_) => "dgc",
            CompressorConfig::Qsgd { .. } => "qsgd",
        }
    }

    pub fn keep(&self) -> Option<f64> {
        match self {
            CompressorConfig::RandomK { keep, .. } | CompressorConfig::TopK { keep, .. } => {
                Some(*keep)
            }
            CompressorConfig::Dgc(d) => Some(d.keep),
            _ => None,
        }
    }

    pub fn levels(&self) -> Option<u32> {
        match self {
            CompressorConfig::Qsgd { levels, .. } => Some(*levels),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressorConfig::Identity => Ok(()),
            CompressorConfig::RandomK { keep, .. } | CompressorConfig::TopK { keep, .. } => {
                check_fraction("compressor.keep", *keep)
            }
            CompressorConfig::Dgc(d) => {
                check_fraction("compressor.keep", d.keep)?;
                check_fraction("compressor.sample_fraction", d.sample_fraction)?;
                if !(0.0..1.0).contains(&d.momentum) {
                    return Err(Error::config("compressor.momentum", "must be in [0, 1)"));
                }
                if !(d.clip_norm > 0.0) {
                    return Err(Error::config("compressor.clip_norm", "must be positive"));
                }
                Ok(())
            }
            CompressorConfig::Qsgd { levels, bucket } => {
                if *levels == 0 {
                    return Err(Error::config("compressor.levels", "must be at least 1"));
                }
                if *bucket == Some(0) {
                    return Err(Error::config("compressor.bucket", "must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

/// One QSGD code: sign bit plus a level in `[0, s]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantCode {
    pub negative: bool,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressedMessage {
    Dense(Vec<f32>),
    Sparse {
        n: u32,
        indices: Vec<u32>,
        values: Vec<f32>,
    },
    Quantized {
        n: u32,
        levels: u32,
        bucket: u32,
        scales: Vec<f32>,
        codes: Vec<QuantCode>,
    },
}

impl CompressedMessage {
    pub fn len(&self) -> usize {
        match self {
            CompressedMessage::Dense(v) => v.len(),
            CompressedMessage::Sparse { n, .. } | CompressedMessage::Quantized { n, .. } => {
                *n as usize
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices carried by a sparse message.
    pub fn sparse_indices(&self) -> Option<&[u32]> {
        match self {
            CompressedMessage::Sparse { indices, .. } => Some(indices),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let corrupt = |why: &str| Err(Error::CorruptMessage(why.to_string()));
        match self {
            CompressedMessage::Dense(_) => Ok(()),
            CompressedMessage::Sparse { n, indices, values } => {
                if indices.len() != values.len() {
                    return corrupt("index and value counts differ");
                }
                if indices.windows(2).any(|w| w[0] >= w[1]) {
                    return corrupt("indices not strictly increasing");
                }
                if indices.last().is_some_and(|&i| i >= *n) {
                    return corrupt("index out of range");
                }
                Ok(())
            }
            CompressedMessage::Quantized {
                n,
                levels,
                bucket,
                scales,
                codes,
            } => {
                if *levels == 0 || *bucket == 0 {
                    return corrupt("zero levels or bucket size");
                }
                if codes.len() != *n as usize {
                    return corrupt("code count differs from length");
                }
                if scales.len() != (*n as usize).div_ceil(*bucket as usize) {
                    return corrupt("scale count does not match bucket layout");
                }
                if codes.iter().any(|c| c.level > *levels) {
                    return corrupt("level code exceeds level count");
                }
                for (b, &scale) in scales.iter().enumerate() {
                    if !(scale >= 0.0) || !scale.is_finite() {
                        return corrupt("negative or non-finite scale");
                    }
                    if scale == 0.0 {
                        let start = b * *bucket as usize;
                        let end = (start + *bucket as usize).min(*n as usize);
                        if codes[start..end].iter().any(|c| c.level != 0) {
                            return corrupt("zero scale with nonzero level");
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Canonical little-endian encoding: tag byte, `n` as u32, then the payload.
    ///
    /// Quantized codes are bit-packed LSB first, `1 + bit_length(s)` bits each
    /// (magnitude in the low bits, sign above it).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            CompressedMessage::Dense(values) => {
                out.push(0);
                out.extend_from_slice(&(values.len() as u32).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            CompressedMessage::Sparse { n, indices, values } => {
                out.push(1);
                out.extend_from_slice(&n.to_le_bytes());
                out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
                for i in indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            CompressedMessage::Quantized {
                n,
                levels,
                bucket,
                scales,
                codes,
            } => {
                out.push(2);
                out.extend_from_slice(&n.to_le_bytes());
                out.extend_from_slice(&levels.to_le_bytes());
                out.extend_from_slice(&bucket.to_le_bytes());
                for s in scales {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                let magnitude_bits = quant_magnitude_bits(*levels);
                let mut packer = BitPacker::default();
                for c in codes {
                    let word = c.level as u64 | ((c.negative as u64) << magnitude_bits);
                    packer.push(word, magnitude_bits + 1);
                }
                out.extend_from_slice(&packer.finish());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let tag = r.u8()?;
        let n = r.u32()?;
        let msg = match tag {
            0 => CompressedMessage::Dense((0..n).map(|_| r.f32()).collect::<Result<_>>()?),
            1 => {
                let count = r.u32()?;
                let indices = (0..count).map(|_| r.u32()).collect::<Result<_>>()?;
                let values = (0..count).map(|_| r.f32()).collect::<Result<_>>()?;
                CompressedMessage::Sparse { n, indices, values }
            }
            2 => {
                let levels = r.u32()?;
                let bucket = r.u32()?;
                if levels == 0 || bucket == 0 {
                    return Err(Error::CorruptMessage("zero levels or bucket size".into()));
                }
                let nb = (n as usize).div_ceil(bucket as usize);
                let scales = (0..nb).map(|_| r.f32()).collect::<Result<_>>()?;
                let magnitude_bits = quant_magnitude_bits(levels);
                let mut unpacker = BitUnpacker::new(&bytes[r.pos..]);
                let mut codes = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let word = unpacker
                        .pull(magnitude_bits + 1)
                        .ok_or_else(|| Error::CorruptMessage("truncated codes".into()))?;
                    codes.push(QuantCode {
                        negative: (word >> magnitude_bits) & 1 == 1,
                        level: (word & ((1u64 << magnitude_bits) - 1)) as u32,
                    });
                }
                r.pos += unpacker.bytes_consumed();
                CompressedMessage::Quantized {
                    n,
                    levels,
                    bucket,
                    scales,
                    codes,
                }
            }
            t => return Err(Error::CorruptMessage(format!("unknown tag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::CorruptMessage("trailing bytes".into()));
        }
        msg.validate()?;
        Ok(msg)
    }
}

/// Bits needed for a level in `[0, s]`.
pub fn quant_magnitude_bits(levels: u32) -> u32 {
    32 - levels.leading_zeros()
}

#[derive(Default)]
struct BitPacker {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitPacker {
    fn push(&mut self, word: u64, width: u32) {
        self.acc |= word << self.filled;
        self.filled += width;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitUnpacker<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitUnpacker<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitUnpacker { bytes, bit: 0 }
    }

    fn pull(&mut self, width: u32) -> Option<u64> {
        let mut word = 0u64;
        for k in 0..width as usize {
            let byte = *self.bytes.get((self.bit + k) / 8)?;
            word |= (((byte >> ((self.bit + k) % 8)) & 1) as u64) << k;
        }
        self.bit += width as usize;
        Some(word)
    }

    fn bytes_consumed(&self) -> usize {
        self.bit.div_ceil(8)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::CorruptMessage("truncated message".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

/// Per-worker persistent buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorState {
    pub residual: Vec<f32>,
    pub momentum: Vec<f32>,
    pub accumulator: Vec<f32>,
    pub step: u64,
    pub epoch: u32,
}

impl CompressorState {
    pub fn new(n: usize) -> Self {
        CompressorState {
            residual: vec![0.0; n],
            momentum: vec![0.0; n],
            accumulator: vec![0.0; n],
            step: 0,
            epoch: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    fn check_len(&self, g: &[f32]) -> Result<()> {
        if g.is_empty() {
            return Err(Error::EmptyGradient);
        }
        if g.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: g.len(),
            });
        }
        Ok(())
    }
}

/// Number of entries a sparsifier keeps: `max(1, ceil(k * n))`.
///
/// Products within 1e-9 (relative) of an integer are snapped to it so that, for
/// example, `0.001 * 5000` keeps 5 entries rather than 6.
pub fn select_count(n: usize, keep: f64) -> usize {
    let x = keep * n as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (count as usize).clamp(1, n.max(1))
}

/// `|a_i|` descending, then index ascending.
fn magnitude_order(values: &[f32]) -> impl Fn(&u32, &u32) -> Ordering + '_ {
    move |&i, &j| {
        let (a, b) = (values[i as usize].abs(), values[j as usize].abs());
        b.total_cmp(&a).then(i.cmp(&j))
    }
}

/// Indices of the `count` largest-magnitude entries, returned in ascending order.
pub fn top_k_indices(values: &[f32], count: usize, selection: Selection) -> Vec<u32> {
    let count = count.min(values.len());
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    if count == 0 {
        return Vec::new();
    }
    let order = magnitude_order(values);
    match selection {
        Selection::FullSort => idx.sort_unstable_by(&order),
        Selection::Partial => {
            if count < idx.len() {
                idx.select_nth_unstable_by(count - 1, &order);
            }
        }
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Same as [`top_k_indices`] but restricted to a candidate subset.
fn top_k_among(values: &[f32], candidates: &mut Vec<u32>, count: usize) {
    if candidates.len() > count {
        let order = magnitude_order(values);
        candidates.select_nth_unstable_by(count - 1, &order);
        candidates.truncate(count);
    }
    candidates.sort_unstable();
}

/// Emit the entries of `source` at `indices` and zero them in place.
fn take_entries(source: &mut [f32], indices: Vec<u32>) -> CompressedMessage {
    let values = indices
        .iter()
        .map(|&i| std::mem::take(&mut source[i as usize]))
        .collect();
    CompressedMessage::Sparse {
        n: source.len() as u32,
        indices,
        values,
    }
}

pub fn identity_compress(g: &[f32]) -> Result<CompressedMessage> {
    if g.is_empty() {
        return Err(Error::EmptyGradient);
    }
    check_finite(g)?;
    Ok(CompressedMessage::Dense(g.to_vec()))
}

/// `a = g + r` written into the residual buffer.
fn accumulate_residual(g: &[f32], residual: &mut [f32]) -> Result<()> {
    for (r, &x) in residual.iter_mut().zip(g) {
        *r += x;
    }
    check_finite(residual)
}

pub fn randomk_compress(
    g: &[f32],
    keep: f64,
    state: &mut CompressorState,
    residual_enabled: bool,
    rng: &mut Rng,
) -> Result<CompressedMessage> {
    state.check_len(g)?;
    let n = g.len();
    let count = select_count(n, keep);
    // Partial Fisher-Yates: the first `count` slots end up a uniform sample.
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..count {
        let j = i + rng.below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool.sort_unstable();
    state.step += 1;
    if residual_enabled {
        accumulate_residual(g, &mut state.residual)?;
        Ok(take_entries(&mut state.residual, pool))
    } else {
        check_finite(g)?;
        let values = pool.iter().map(|&i| g[i as usize]).collect();
        Ok(CompressedMessage::Sparse {
            n: n as u32,
            indices: pool,
            values,
        })
    }
}

pub fn topk_compress(
    g: &[f32],
    keep: f64,
    state: &mut CompressorState,
    selection: Selection,
) -> Result<CompressedMessage> {
    state.check_len(g)?;
    accumulate_residual(g, &mut state.residual)?;
    let indices = top_k_indices(&state.residual, select_count(g.len(), keep), selection);
    state.step += 1;
    Ok(take_entries(&mut state.residual, indices))
}

/// Keep fraction during DGC warm-up: `0.25^(epoch+1)`, never below the target.
pub fn warmup_keep_ratio(epoch: u32, cfg: &DgcConfig) -> f64 {
    if cfg.warmup_epochs == 0 || epoch >= cfg.warmup_epochs {
        cfg.keep
    } else {
        cfg.keep.max(0.25f64.powi(epoch as i32 + 1))
    }
}

/// Minimum number of sampled magnitudes used to estimate the DGC threshold.
pub const DGC_MIN_SAMPLE: usize = 256;

pub fn dgc_compress(
    g: &[f32],
    cfg: &DgcConfig,
    workers: Option<usize>,
    state: &mut CompressorState,
    rng: &mut Rng,
) -> Result<CompressedMessage> {
    state.check_len(g)?;
    check_finite(g)?;
    let n = g.len();

    let clipped;
    let g = if cfg.clipping {
        let w = workers
            .filter(|&w| w > 0)
            .ok_or(Error::WorkerCountRequired)?;
        clipped = clip_by_global_norm(g, cfg.clip_norm / (w as f64).sqrt())?;
        &clipped[..]
    } else {
        g
    };

    // Momentum correction, accumulated locally.
    let m = cfg.momentum as f32;
    for ((u, v), &x) in state
        .momentum
        .iter_mut()
        .zip(state.accumulator.iter_mut())
        .zip(g)
    {
        *u = m * *u + x;
        *v += *u;
    }
    check_finite(&state.accumulator)?;

    let keep = warmup_keep_ratio(state.epoch, cfg);
    let count = select_count(n, keep);
    let sample_size = DGC_MIN_SAMPLE.max((cfg.sample_fraction * n as f64).ceil() as usize);

    let indices = if sample_size >= n {
        // Whole vector sampled: the threshold is exact, so select exactly.
        top_k_indices(&state.accumulator, count, Selection::Partial)
    } else {
        let v = &state.accumulator;
        let mut sample: Vec<f32> = (0..sample_size)
            .map(|_| v[rng.below(n as u64) as usize].abs())
            .collect();
        let rank = ((keep * sample_size as f64).ceil() as usize).clamp(1, sample_size);
        let (_, threshold, _) = sample.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
        let threshold = *threshold;
        let mut candidates: Vec<u32> = (0..n as u32)
            .filter(|&i| v[i as usize].abs() >= threshold)
            .collect();
        if candidates.is_empty() {
            candidates = top_k_indices(v, 1, Selection::Partial);
        } else if candidates.len() > 2 * count {
            top_k_among(v, &mut candidates, count);
        }
        candidates
    };

    for &i in &indices {
        state.momentum[i as usize] = 0.0;
    }
    state.step += 1;
    Ok(take_entries(&mut state.accumulator, indices))
}

pub fn qsgd_compress(
    g: &[f32],
    levels: u32,
    bucket: Option<usize>,
    rng: &mut Rng,
) -> Result<CompressedMessage> {
    if levels == 0 {
        return Err(Error::config("levels", "must be at least 1"));
    }
    if g.is_empty() {
        return Err(Error::EmptyGradient);
    }
    let n = g.len();
    let bucket = bucket.unwrap_or(n).clamp(1, n);
    let s = levels as f64;
    let mut scales = Vec::with_capacity(n.div_ceil(bucket));
    let mut codes = Vec::with_capacity(n);
    for chunk in g.chunks(bucket) {
        let norm = l2_norm(chunk)?;
        // Round the stored scale up so that |g_i| / scale never exceeds 1.
        let mut scale = norm as f32;
        if (scale as f64) < norm {
            scale = scale.next_up();
        }
        scales.push(scale);
        if scale == 0.0 {
            codes.extend(chunk.iter().map(|_| QuantCode {
                negative: false,
                level: 0,
            }));
            continue;
        }
        let sigma = scale as f64;
        for &x in chunk {
            let rho = (x.abs() as f64 / sigma * s).min(s);
            let floor = rho.floor();
            let up = rng.next_f64() < rho - floor;
            codes.push(QuantCode {
                negative: x.is_sign_negative() && x != 0.0,
                level: floor as u32 + up as u32,
            });
        }
    }
    Ok(CompressedMessage::Quantized {
        n: n as u32,
        levels,
        bucket: bucket as u32,
        scales,
        codes,
    })
}

fn quant_value(scale: f32, code: QuantCode, levels: u32) -> f32 {
    let magnitude = (scale as f64 * code.level as f64 / levels as f64) as f32;
    if code.negative {
        -magnitude
    } else {
        magnitude
    }
}

pub fn decompress(msg: &CompressedMessage, n: usize) -> Result<Vec<f32>> {
    if msg.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: msg.len(),
        });
    }
    let mut out = vec![0.0f32; n];
    match msg {
        CompressedMessage::Dense(values) => out.copy_from_slice(values),
        CompressedMessage::Sparse {
            indices, values, ..
        } => {
            if indices.len() != values.len() {
                return Err(Error::CorruptMessage(
                    "index and value counts differ".into(),
                ));
            }
            for (&i, &v) in indices.iter().zip(values) {
                *out.get_mut(i as usize)
                    .ok_or_else(|| Error::CorruptMessage(format!("index {i} >= {n}")))? = v;
            }
        }
        CompressedMessage::Quantized { .. } => {
            msg.validate()?;
            let CompressedMessage::Quantized {
                levels,
                bucket,
                scales,
                codes,
                ..
            } = msg
            else {
                unreachable!()
            };
            let bucket = *bucket as usize;
            for ((out, codes), &scale) in
                out.chunks_mut(bucket).zip(codes.chunks(bucket)).zip(scales)
            {
                for (o, &code) in out.iter_mut().zip(codes) {
                    *o = quant_value(scale, code, *levels);
                }
            }
        }
    }
    Ok(out)
}

/// Rough operation count for one compress call, used by the modeled compute clock.
pub fn compress_ops(config: &CompressorConfig, n: usize) -> u64 {
    let n64 = n as u64;
    let log_n = (n.max(2) as f64).log2().ceil() as u64;
    match config {
        CompressorConfig::Identity => 0,
        CompressorConfig::RandomK { keep, .. } => 2 * n64 + select_count(n, *keep) as u64,
        CompressorConfig::TopK { selection, .. } => match selection {
            Selection::FullSort => n64 + n64 * log_n,
            Selection::Partial => 3 * n64,
        },
        CompressorConfig::Dgc(d) => {
            let m = DGC_MIN_SAMPLE.max((d.sample_fraction * n as f64).ceil() as usize);
            if m >= n {
                6 * n64
            } else {
                let log_m = (m as f64).log2().ceil() as u64;
                5 * n64 + m as u64 * log_m
            }
        }
        CompressorConfig::Qsgd { .. } => 4 * n64,
    }
}

/// One worker's compressor: config, persistent state, and the worker count.
#[derive(Debug, Clone)]
pub struct WorkerCompressor {
    config: CompressorConfig,
    state: CompressorState,
    workers: usize,
}

impl WorkerCompressor {
    pub fn new(config: &CompressorConfig, n: usize, workers: usize) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::EmptyGradient);
        }
        Ok(WorkerCompressor {
            config: config.clone(),
            state: CompressorState::new(n),
            workers,
        })
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.config
    }

    pub fn state(&self) -> &CompressorState {
        &self.state
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.state.epoch = epoch;
    }

    pub fn compress(&mut self, g: &[f32], rng: &mut Rng) -> Result<CompressedMessage> {
        match &self.config {
            CompressorConfig::Identity => {
                self.state.check_len(g)?;
                self.state.step += 1;
                identity_compress(g)
            }
            CompressorConfig::RandomK { keep, residual } => {
                randomk_compress(g, *keep, &mut self.state, *residual, rng)
            }
            CompressorConfig::TopK { keep, selection } => {
                topk_compress(g, *keep, &mut self.state, *selection)
            }
            CompressorConfig::Dgc(cfg) => {
                dgc_compress(g, cfg, Some(self.workers), &mut self.state, rng)
            }
            CompressorConfig::Qsgd { levels, bucket } => {
                self.state.check_len(g)?;
                self.state.step += 1;
                qsgd_compress(g, *levels, *bucket, rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn sparse(n: u32, indices: &[u32], values: &[f32]) -> CompressedMessage {
        CompressedMessage::Sparse {
            n,
            indices: indices.to_vec(),
            values: values.to_vec(),
        }
    }

    /// Seed whose first random-k draw on `n` entries keeps exactly `want`.
    fn seed_picking(n: usize, keep: f64, want: &[u32]) -> Rng {
        (0..10_000)
            .map(|s| Rng::new(s, 0))
            .find(|rng| {
                let mut probe = rng.clone();
                let mut state = CompressorState::new(n);
                let msg =
                    randomk_compress(&vec![1.0; n], keep, &mut state, false, &mut probe).unwrap();
                msg.sparse_indices().unwrap() == want
            })
            .expect("some seed picks the wanted indices")
    }

    #[test]
    fn identity_examples() {
        assert_eq!(
            identity_compress(&[1.0, 2.0, 3.0]).unwrap(),
            CompressedMessage::Dense(vec![1.0, 2.0, 3.0])
        );
        assert!(matches!(identity_compress(&[]), Err(Error::EmptyGradient)));
        assert_eq!(
            decompress(&identity_compress(&[0.0, 0.0]).unwrap(), 2).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn select_count_examples() {
        assert_eq!(select_count(1000, 0.01), 10);
        assert_eq!(select_count(1000, 0.0001), 1);
        assert_eq!(select_count(5, 1.0), 5);
        assert_eq!(select_count(5000, 0.001), 5);
        assert_eq!(select_count(10, 0.15), 2);
    }

    #[test]
    fn randomk_full_keep_is_identity() {
        let mut state = CompressorState::new(2);
        let mut rng = Rng::new(1, 1);
        let msg = randomk_compress(&[1.0, 2.0], 1.0, &mut state, true, &mut rng).unwrap();
        assert_eq!(msg, sparse(2, &[0, 1], &[1.0, 2.0]));
        assert_eq!(state.residual, vec![0.0, 0.0]);
    }

    #[test]
    fn randomk_residual_hand_trace() {
        let mut state = CompressorState::new(2);
        let mut rng = seed_picking(2, 0.5, &[1]);
        let msg = randomk_compress(&[1.0, 0.2], 0.5, &mut state, true, &mut rng).unwrap();
        assert_eq!(msg, sparse(2, &[1], &[0.2]));
        assert_eq!(state.residual, vec![1.0, 0.0]);

        let mut rng = seed_picking(2, 0.5, &[0]);
        let msg = randomk_compress(&[0.0, 0.0], 0.5, &mut state, true, &mut rng).unwrap();
        assert_eq!(msg, sparse(2, &[0], &[1.0]));
        assert_eq!(state.residual, vec![0.0, 0.0]);
    }

    #[test]
    fn randomk_without_residual_discards() {
        let mut state = CompressorState::new(4);
        let mut rng = Rng::new(5, 5);
        randomk_compress(&[1.0, 2.0, 3.0, 4.0], 0.25, &mut state, false, &mut rng).unwrap();
        assert_eq!(state.residual, vec![0.0; 4]);
    }

    #[test]
    fn topk_examples() {
        let mut state = CompressorState::new(4);
        let msg =
            topk_compress(&[0.1, -0.5, 0.3, 0.05], 0.5, &mut state, Selection::Partial).unwrap();
        assert_eq!(msg, sparse(4, &[1, 2], &[-0.5, 0.3]));
        assert_eq!(state.residual, vec![0.1, 0.0, 0.0, 0.05]);

        let mut state = CompressorState::new(2);
        let msg = topk_compress(&[1.0, 0.2], 0.5, &mut state, Selection::Partial).unwrap();
        assert_eq!(msg, sparse(2, &[0], &[1.0]));
        let msg = topk_compress(&[0.0, 0.2], 0.5, &mut state, Selection::Partial).unwrap();
        assert_eq!(msg, sparse(2, &[1], &[0.4]));

        let mut state = CompressorState::new(3);
        let msg = topk_compress(&[0.7; 3], 1.0 / 3.0, &mut state, Selection::FullSort).unwrap();
        assert_eq!(msg, sparse(3, &[0], &[0.7]));
    }

    #[test]
    fn topk_rejects_non_finite_and_bad_length() {
        let mut state = CompressorState::new(2);
        assert!(matches!(
            topk_compress(&[f32::NAN, 1.0], 0.5, &mut state, Selection::Partial),
            Err(Error::NonFinite)
        ));
        let mut state = CompressorState::new(3);
        assert!(matches!(
            topk_compress(&[1.0, 1.0], 0.5, &mut state, Selection::Partial),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn warmup_examples() {
        let mut cfg = DgcConfig::new(0.001);
        cfg.warmup_epochs = 4;
        assert_eq!(warmup_keep_ratio(0, &cfg), 0.25);
        assert_eq!(warmup_keep_ratio(3, &cfg), 0.00390625);
        assert_eq!(warmup_keep_ratio(10, &cfg), 0.001);
        cfg.warmup_epochs = 0;
        assert_eq!(warmup_keep_ratio(0, &cfg), 0.001);
    }

    #[test]
    fn dgc_momentum_zero_matches_topk_on_one_vector() {
        let g = [0.1, -0.5, 0.3, 0.05];
        let mut a = CompressorState::new(4);
        let mut b = CompressorState::new(4);
        let mut rng = Rng::new(0, 0);
        let dgc = dgc_compress(&g, &DgcConfig::plain(0.5), None, &mut a, &mut rng).unwrap();
        let top = topk_compress(&g, 0.5, &mut b, Selection::Partial).unwrap();
        assert_eq!(dgc, top);
        assert_eq!(a.accumulator, b.residual);
    }

    #[test]
    fn dgc_masking_hand_trace() {
        let mut cfg = DgcConfig::plain(0.5);
        cfg.momentum = 0.5;
        let mut state = CompressorState::new(2);
        let mut rng = Rng::new(0, 0);
        let msg = dgc_compress(&[1.0, 0.0], &cfg, None, &mut state, &mut rng).unwrap();
        assert_eq!(msg, sparse(2, &[0], &[1.0]));
        assert_eq!(state.momentum, vec![0.0, 0.0]);
        assert_eq!(state.accumulator, vec![0.0, 0.0]);
        let msg = dgc_compress(&[1.0, 0.0], &cfg, None, &mut state, &mut rng).unwrap();
        assert_eq!(msg, sparse(2, &[0], &[1.0]));
        assert_eq!(state.step, 2);
    }

    #[test]
    fn dgc_momentum_correction_accumulates_more_than_plain_sum() {
        let mut cfg = DgcConfig::plain(0.5);
        cfg.momentum = 0.5;
        let mut state = CompressorState::new(2);
        let mut rng = Rng::new(0, 0);
        // Coordinate 0 dominates and is masked each step; coordinate 1 accumulates.
        for _ in 0..2 {
            let msg = dgc_compress(&[10.0, 0.1], &cfg, None, &mut state, &mut rng).unwrap();
            assert_eq!(msg.sparse_indices().unwrap(), &[0]);
        }
        assert!((state.accumulator[1] - 0.25).abs() < 1e-7);
        assert!(state.accumulator[1] > 0.2);
    }

    #[test]
    fn dgc_clipping_requires_worker_count() {
        let cfg = DgcConfig::new(0.5);
        let mut state = CompressorState::new(2);
        let mut rng = Rng::new(0, 0);
        assert!(matches!(
            dgc_compress(&[1.0, 2.0], &cfg, None, &mut state, &mut rng),
            Err(Error::WorkerCountRequired)
        ));
    }

    #[test]
    fn dgc_clipping_scales_by_worker_count() {
        let mut cfg = DgcConfig::plain(1.0);
        cfg.clipping = true;
        cfg.clip_norm = 2.0;
        let mut state = CompressorState::new(2);
        let mut rng = Rng::new(0, 0);
        let msg = dgc_compress(&[3.0, 4.0], &cfg, Some(4), &mut state, &mut rng).unwrap();
        // threshold 2 / sqrt(4) = 1, norm 5 -> scale 0.2
        assert_eq!(msg, sparse(2, &[0, 1], &[0.6, 0.8]));
    }

    #[test]
    fn dgc_sampled_threshold_keeps_message_bounded() {
        let n = 20_000;
        let mut rng = Rng::new(11, 0);
        let g: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let mut cfg = DgcConfig::plain(0.01);
        cfg.sample_fraction = 0.01;
        let mut state = CompressorState::new(n);
        let msg = dgc_compress(&g, &cfg, None, &mut state, &mut rng).unwrap();
        let sent = msg.sparse_indices().unwrap();
        assert!(!sent.is_empty() && sent.len() <= 2 * select_count(n, 0.01));
        for &i in sent {
            assert_eq!(state.accumulator[i as usize], 0.0);
            assert_eq!(state.momentum[i as usize], 0.0);
        }
    }

    #[test]
    fn qsgd_zero_vector() {
        let mut rng = Rng::new(0, 0);
        let msg = qsgd_compress(&[0.0; 3], 4, None, &mut rng).unwrap();
        let CompressedMessage::Quantized { scales, codes, .. } = &msg else {
            panic!()
        };
        assert_eq!(scales, &vec![0.0]);
        assert!(codes.iter().all(|c| c.level == 0));
        assert_eq!(decompress(&msg, 3).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn qsgd_two_outcomes_for_point_six() {
        // g = [0.6, 0.8], s = 4: component 0 is 0.5 or 0.75, component 1 is 0.75 or 1.0.
        let mut seen = std::collections::BTreeSet::new();
        let mut sum = 0.0;
        let trials = 20_000;
        for seed in 0..trials {
            let mut rng = Rng::new(seed, 3);
            let out =
                decompress(&qsgd_compress(&[0.6, 0.8], 4, None, &mut rng).unwrap(), 2).unwrap();
            seen.insert(out[0].to_bits());
            sum += out[0] as f64;
        }
        // The stored scale is the f32 norm rounded up, a hair above 1.
        let values: Vec<f32> = seen.into_iter().map(f32::from_bits).collect();
        assert_eq!(values.len(), 2);
        assert!((values[0] - 0.5).abs() < 1e-6 && (values[1] - 0.75).abs() < 1e-6);
        let mean = sum / trials as f64;
        // Bernoulli(0.4) spread of 0.25: standard error ~ 0.0017.
        assert!((mean - 0.6).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn qsgd_fine_levels_bound() {
        let mut rng = Rng::new(9, 9);
        let g: Vec<f32> = (0..257).map(|_| rng.normal() as f32).collect();
        let s = 1 << 20;
        let msg = qsgd_compress(&g, s, None, &mut rng).unwrap();
        let sigma = l2_norm(&g).unwrap();
        let out = decompress(&msg, g.len()).unwrap();
        for (o, x) in out.iter().zip(&g) {
            let bound = sigma / s as f64 + f32::EPSILON as f64 * x.abs() as f64;
            assert!(((o - x) as f64).abs() <= bound);
        }
    }

    #[test]
    fn qsgd_buckets_have_own_scales() {
        let mut rng = Rng::new(1, 2);
        let msg = qsgd_compress(&[3.0, 4.0, 0.0, 0.0, 1.0], 2, Some(2), &mut rng).unwrap();
        let CompressedMessage::Quantized { scales, bucket, .. } = &msg else {
            panic!()
        };
        assert_eq!(*bucket, 2);
        assert_eq!(scales, &vec![5.0, 0.0, 1.0]);
        let out = decompress(&msg, 5).unwrap();
        assert_eq!(&out[2..], &[0.0, 0.0, 1.0]);
        assert!(qsgd_compress(&[1.0], 0, None, &mut rng).is_err());
    }

    #[test]
    fn decompress_examples() {
        assert_eq!(
            decompress(&sparse(4, &[1, 2], &[-0.5, 0.3]), 4).unwrap(),
            vec![0.0, -0.5, 0.3, 0.0]
        );
        assert_eq!(
            decompress(&CompressedMessage::Dense(vec![1.0, 2.0]), 2).unwrap(),
            vec![1.0, 2.0]
        );
        let q = CompressedMessage::Quantized {
            n: 2,
            levels: 4,
            bucket: 2,
            scales: vec![1.0],
            codes: vec![
                QuantCode {
                    negative: false,
                    level: 2,
                },
                QuantCode {
                    negative: false,
                    level: 3,
                },
            ],
        };
        assert_eq!(decompress(&q, 2).unwrap(), vec![0.5, 0.75]);
    }

    #[test]
    fn decompress_rejects_corrupt() {
        assert!(matches!(
            decompress(&sparse(2, &[5], &[1.0]), 2),
            Err(Error::CorruptMessage(_))
        ));
        assert!(matches!(
            decompress(&CompressedMessage::Dense(vec![1.0]), 2),
            Err(Error::LengthMismatch { .. })
        ));
        let q = CompressedMessage::Quantized {
            n: 1,
            levels: 2,
            bucket: 1,
            scales: vec![1.0],
            codes: vec![QuantCode {
                negative: true,
                level: 3,
            }],
        };
        assert!(matches!(decompress(&q, 1), Err(Error::CorruptMessage(_))));
    }

    #[test]
    fn config_parses_by_method_tag() {
        let cfg: CompressorConfig = toml::from_str("method = \"top_k\"\nkeep = 0.01").unwrap();
        assert_eq!(
            cfg,
            CompressorConfig::TopK {
                keep: 0.01,
                selection: Selection::Partial
            }
        );
        let cfg: CompressorConfig = toml::from_str("method = \"dgc\"\nkeep = 0.001").unwrap();
        assert_eq!(cfg, CompressorConfig::Dgc(DgcConfig::new(0.001)));
        let err = toml::from_str::<CompressorConfig>("method = \"bogus\"").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(
            toml::from_str::<CompressorConfig>("method = \"top_k\"\nkeep = 0.1\nlevels = 4")
                .is_err()
        );
        assert!(CompressorConfig::TopK {
            keep: 0.0,
            selection: Selection::Partial
        }
        .validate()
        .is_err());
    }

    #[test]
    fn byte_encoding_sizes_track_bit_accounting() {
        let dense = CompressedMessage::Dense(vec![1.0; 10]);
        assert_eq!(dense.to_bytes().len(), 5 + 4 * 10);
        let sp = sparse(100, &[3, 9], &[1.0, -2.0]);
        assert_eq!(sp.to_bytes().len(), 5 + 4 + 8 * 2);
        let mut rng = Rng::new(0, 0);
        let q = qsgd_compress(&[0.5; 16], 16, None, &mut rng).unwrap();
        // 16 codes at 1 + bit_length(16) = 6 bits each.
        assert_eq!(q.to_bytes().len(), 5 + 8 + 4 + (16 * 6usize).div_ceil(8));
    }

    fn gradient(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, 1..max_len)
    }

    proptest! {
        #[test]
        fn byte_round_trip(g in gradient(200), levels in 1u32..300, seed in any::<u64>()) {
            let mut rng = Rng::new(seed, 0);
            let mut state = CompressorState::new(g.len());
            for msg in [
                identity_compress(&g).unwrap(),
                topk_compress(&g, 0.1, &mut state, Selection::Partial).unwrap(),
                qsgd_compress(&g, levels, Some(7), &mut rng).unwrap(),
            ] {
                prop_assert_eq!(CompressedMessage::from_bytes(&msg.to_bytes()).unwrap(), msg);
            }
        }

        #[test]
        fn selection_strategies_agree(g in gradient(500), keep in 0.001f64..1.0) {
            let count = select_count(g.len(), keep);
            let a = top_k_indices(&g, count, Selection::Partial);
            let b = top_k_indices(&g, count, Selection::FullSort);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), count);
            let min_sent = a.iter().map(|&i| g[i as usize].abs()).fold(f32::INFINITY, f32::min);
            let max_unsent = (0..g.len() as u32)
                .filter(|i| a.binary_search(i).is_err())
                .map(|i| g[i as usize].abs())
                .fold(0.0f32, f32::max);
            prop_assert!(min_sent >= max_unsent);
        }

        #[test]
        fn topk_conserves_mass(g in gradient(300), r in gradient(300), keep in 0.001f64..1.0) {
            let n = g.len().min(r.len());
            let mut state = CompressorState::new(n);
            state.residual.copy_from_slice(&r[..n]);
            let msg = topk_compress(&g[..n], keep, &mut state, Selection::Partial).unwrap();
            let out = decompress(&msg, n).unwrap();
            for i in 0..n {
                prop_assert_eq!(out[i] + state.residual[i], g[i] + r[i]);
            }
            for &i in msg.sparse_indices().unwrap() {
                prop_assert_eq!(state.residual[i as usize], 0.0);
            }
        }

        #[test]
        fn compression_is_deterministic(g in gradient(300), seed in any::<u64>()) {
            for cfg in [
                CompressorConfig::RandomK { keep: 0.1, residual: true },
                CompressorConfig::Dgc(DgcConfig::new(0.05)),
                CompressorConfig::Qsgd { levels: 8, bucket: None },
            ] {
                let mut a = WorkerCompressor::new(&cfg, g.len(), 2).unwrap();
                let mut b = a.clone();
                let ma = a.compress(&g, &mut Rng::new(seed, 1)).unwrap();
                let mb = b.compress(&g, &mut Rng::new(seed, 1)).unwrap();
                prop_assert_eq!(ma.to_bytes(), mb.to_bytes());
            }
        }
    }
}
