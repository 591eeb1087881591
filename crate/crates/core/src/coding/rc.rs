//! Carry-less range coder with 32-bit state and 16-bit frequencies.
//!
//! Byte-level behaviour: `low` and `range` start at `0` and `0xFFFF_FFFF`. A
//! symbol with cumulative count `cum` and count `freq` (total `2^16`) does
//! `range >>= 16; low += cum * range; range *= freq`, then renormalizes while
//! the top byte of `low` is settled, or while `range < 2^16` (in which case
//! `range` is cut to `-low mod 2^16`), emitting the top byte of `low` and
//! shifting both left by 8. Finishing emits the four bytes of `low`, big end
//! first. The decoder mirrors the same arithmetic.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }

    /// Codes the interval `[cum, cum + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) -> Result<()> {
        if freq == 0 || cum.checked_add(freq).is_none_or(|e| e > TOTAL) {
            return Err(Error::Coder(format!("invalid interval cum={cum} freq={freq}")));
        }
        self.range >>= PRECISION_BITS;
        self.low = self.low.wrapping_add(cum.wrapping_mul(self.range));
        self.range = self.range.wrapping_mul(freq);
        self.normalize();
        Ok(())
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&self.low.to_be_bytes());
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { low: 0, range: u32::MAX, code: 0, input, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or_else(|| Error::Coder("truncated stream".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative count inside which the next symbol lies. Must be followed by
    /// [`RangeDecoder::consume`] with that symbol's interval.
    pub fn target(&mut self) -> Result<u32> {
        self.range >>= PRECISION_BITS;
        if self.range == 0 {
            return Err(Error::Coder("corrupt coder state".into()));
        }
        let t = self.code.wrapping_sub(self.low) / self.range;
        if t >= TOTAL {
            return Err(Error::Coder("stream inconsistent with the coding tables".into()));
        }
        Ok(t)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(cum.wrapping_mul(self.range));
        self.range = self.range.wrapping_mul(freq);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.input.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stream_is_flush_only() {
        let bytes = RangeEncoder::new().finish();
        assert_eq!(bytes, vec![0, 0, 0, 0]);
        let d = RangeDecoder::new(&bytes).unwrap();
        assert!(d.is_exhausted());
    }

    #[test]
    fn rejects_empty_interval() {
        let mut e = RangeEncoder::new();
        assert!(e.encode(5, 0).is_err());
        assert!(e.encode(TOTAL - 1, 2).is_err());
    }

    #[test]
    fn truncation_is_an_error() {
        let mut e = RangeEncoder::new();
        for i in 0..200u32 {
            e.encode((i * 97) % 60000, 3).unwrap();
        }
        let bytes = e.finish();
        let cut = &bytes[..bytes.len() - 2];
        let mut d = RangeDecoder::new(cut).unwrap();
        let mut failed = false;
        for i in 0..200u32 {
            let cum = (i * 97) % 60000;
            if d.target().is_err() || d.consume(cum, 3).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed);
    }
}
