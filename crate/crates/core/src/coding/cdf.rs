//! Quantized cumulative tables over the latent alphabet plus an escape symbol.

use super::rc::{RangeDecoder, RangeEncoder, TOTAL};
use crate::entropy_model::{gaussian_likelihood, TABLE_WINDOW_SIGMAS};
use crate::error::{Error, Result};

pub const SYMBOL_MIN: i32 = -128;
pub const SYMBOL_MAX: i32 = 127;
/// Number of in-range symbols.
pub const ALPHABET: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;
/// Index of the escape symbol; an escaped value follows as a raw 16-bit field.
pub const ESCAPE: usize = ALPHABET;
/// Bins per table, including the escape bin.
pub const BINS: usize = ALPHABET + 1;
/// Cost of the raw field after an escape.
pub const RAW_BITS: f64 = 16.0;

/// Monotone cumulative counts `cdf[0] = 0 < cdf[1] < … < cdf[BINS] = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    pub cdf: Vec<u32>,
}

impl QuantizedCdf {
    /// Tables from bin probabilities of the in-range symbols; the remaining
    /// mass goes to the escape bin. Every bin gets at least one count and
    /// the rounding remainder goes to the most probable bin.
    pub fn from_probs(probs: &[f64]) -> Self {
        assert_eq!(probs.len(), ALPHABET, "one probability per symbol");
        let scale = (TOTAL as usize - BINS) as f64;
        let in_range: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let escape = (1.0 - in_range).max(0.0);
        let mut freq: Vec<u32> = probs
            .iter()
            .chain(std::iter::once(&escape))
            .map(|&p| {
                let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
                1 + (p * scale).floor() as u32
            })
            .collect();
        let used: u32 = freq.iter().sum();
        // counts can only overshoot through rounding of probabilities above 1 in total
        let mut excess = used.saturating_sub(TOTAL);
        while excess > 0 {
            let i = argmax(&freq);
            let take = excess.min(freq[i] - 1);
            freq[i] -= take;
            excess -= take;
        }
        let used: u32 = freq.iter().sum();
        let i = argmax(&freq);
        freq[i] += TOTAL - used;
        let mut cdf = Vec::with_capacity(BINS + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        QuantizedCdf { cdf }
    }

    /// Table of the discretized Gaussian `N(mu, sigma^2)`. Bins further than
    /// [`TABLE_WINDOW_SIGMAS`] standard deviations from `mu` get no mass
    /// beyond the minimum count.
    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        let reach = TABLE_WINDOW_SIGMAS * sigma + 0.5;
        let probs: Vec<f64> = (SYMBOL_MIN..=SYMBOL_MAX)
            .map(|s| {
                let s = s as f64;
                if (s - mu).abs() <= reach {
                    gaussian_likelihood(s, mu, sigma)
                } else {
                    0.0
                }
            })
            .collect();
        Self::from_probs(&probs)
    }

    pub fn freq(&self, bin: usize) -> u32 {
        self.cdf[bin + 1] - self.cdf[bin]
    }

    /// Checks the table invariants.
    pub fn validate(cdf: &[u32]) -> Result<()> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
            return Err(Error::Coder("table must start at 0 and end at 2^16".into()));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Coder("table is not strictly increasing".into()));
        }
        Ok(())
    }

    /// Bits of a value under this table, including the raw field of escapes.
    pub fn cost(&self, value: i32) -> f64 {
        let (bin, raw) = bin_of(value);
        let bits = -(self.freq(bin) as f64 / TOTAL as f64).log2();
        if raw.is_some() {
            bits + RAW_BITS
        } else {
            bits
        }
    }
}

fn argmax(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Bin of a value and, for escapes, the raw 16-bit field.
pub fn bin_of(value: i32) -> (usize, Option<u32>) {
    if (SYMBOL_MIN..=SYMBOL_MAX).contains(&value) {
        ((value - SYMBOL_MIN) as usize, None)
    } else {
        let v = value.clamp(i16::MIN as i32, i16::MAX as i32);
        (ESCAPE, Some((v - i16::MIN as i32) as u32))
    }
}

pub fn value_of(bin: usize, raw: Option<u32>) -> i32 {
    match raw {
        Some(r) => r as i32 + i16::MIN as i32,
        None => bin as i32 + SYMBOL_MIN,
    }
}

/// Encodes a latent value; values beyond the 16-bit range are clamped.
pub fn encode_value(enc: &mut RangeEncoder, table: &QuantizedCdf, value: i32) -> Result<()> {
    let (bin, raw) = bin_of(value);
    enc.encode(table.cdf[bin], table.freq(bin))?;
    if let Some(r) = raw {
        enc.encode(r, 1)?;
    }
    Ok(())
}

/// Finds the bin whose interval holds `target`.
pub fn find_bin(cdf: &[u32], target: u32) -> usize {
    cdf.partition_point(|&c| c <= target) - 1
}

pub fn decode_value(dec: &mut RangeDecoder, table: &QuantizedCdf) -> Result<i32> {
    let t = dec.target()?;
    let bin = find_bin(&table.cdf, t);
    dec.consume(table.cdf[bin], table.freq(bin))?;
    if bin == ESCAPE {
        let r = dec.target()?;
        dec.consume(r, 1)?;
        Ok(value_of(bin, Some(r)))
    } else {
        Ok(value_of(bin, None))
    }
}
