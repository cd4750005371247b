//! Scalar and vector primitives shared by every other module.
//!
//! Gradients are stored as `f32`; every reduction accumulates in `f64` with a
//! fixed left-to-right iteration order so results are reproducible bit for bit.

use crate::error::{Error, Result};

/// Default relative finite-difference step, scaled by `max(1, |x_i|)`.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn splitmix64_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    mix64(*state)
}

/// Purpose tags used to derive independent streams from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Compress = 4,
    Shuffle = 5,
    Sweep = 6,
    Test = 7,
}

/// xoshiro256** generator keyed by `(seed, stream)`.
///
/// State initialisation: `sm = seed ^ mix64(stream + 0x9E3779B97F4A7C15)`, then the
/// four state words are the next four outputs of SplitMix64 started at `sm`.
/// Transition and output function are the published xoshiro256** ones, so the
/// sequence is identical on every platform and easy to reproduce elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut sm = seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA));
        let s = [
            splitmix64_next(&mut sm),
            splitmix64_next(&mut sm),
            splitmix64_next(&mut sm),
            splitmix64_next(&mut sm),
        ];
        Rng { s }
    }

    /// Stream for one `(purpose, index)` pair, e.g. `(Dropout, worker)`.
    pub fn for_purpose(seed: u64, purpose: Purpose, index: u64) -> Self {
        Rng::new(seed, ((purpose as u64) << 32) | (index & 0xFFFF_FFFF))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Standard normal via Box-Muller; the second variate is discarded.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

pub fn check_finite(v: &[f32]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub fn l2_norm(v: &[f32]) -> Result<f64> {
    let mut acc = 0.0f64;
    for &x in v {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        let x = x as f64;
        acc += x * x;
    }
    Ok(acc.sqrt())
}

pub fn l2_norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rescales `v` so its global L2 norm is at most `max_norm`.
pub fn clip_by_global_norm(v: &[f32], max_norm: f64) -> Result<Vec<f32>> {
    if !(max_norm > 0.0) {
        return Err(Error::config("clip_norm", "must be positive"));
    }
    let norm = l2_norm(v)?;
    if norm <= max_norm {
        return Ok(v.to_vec());
    }
    let scale = max_norm / norm;
    Ok(v.iter().map(|&x| (x as f64 * scale) as f32).collect())
}

/// Central-difference gradient of `f` at `x`.
///
/// Component `i` uses the step `h * max(1, |x_i|)`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config(
            "h",
            "finite-difference step must be positive",
        ));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite);
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest componentwise relative error, with denominators floored at `floor`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
