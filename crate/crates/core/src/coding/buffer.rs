//! Flat symbol/table representation handed to a range coder backend, and
//! backend selection.
//!
//! A [`CoderBuffer`] holds, per coded symbol, the symbol index and the offset
//! of its table inside one flat `cdfs` array. A table occupies
//! `cdfs[offset .. offset + len]` where `len` is stored in `lengths`. An entry
//! whose offset is [`RAW_OFFSET`] is a raw 16-bit field (interval
//! `[symbol, symbol + 1)` of `2^16`) and has no table.

use std::sync::atomic::{AtomicBool, Ordering};

use super::cdf::{bin_of, QuantizedCdf};
use super::rc::RangeEncoder;
use crate::config::CoderBackend;
use crate::error::{Error, Result};

pub const RAW_OFFSET: u32 = u32::MAX;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoderBuffer {
    pub symbols: Vec<u32>,
    pub offsets: Vec<u32>,
    pub lengths: Vec<u32>,
    pub cdfs: Vec<u32>,
}

impl CoderBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Appends a table and returns its offset.
    pub fn push_table(&mut self, cdf: &[u32]) -> u32 {
        let off = self.cdfs.len() as u32;
        self.cdfs.extend_from_slice(cdf);
        off
    }

    pub fn push_symbol(&mut self, symbol: u32, offset: u32, len: u32) {
        self.symbols.push(symbol);
        self.offsets.push(offset);
        self.lengths.push(len);
    }

    pub fn push_raw(&mut self, value: u32) {
        self.push_symbol(value, RAW_OFFSET, 0);
    }

    /// Appends a latent value with its own table, escaping out-of-range values.
    pub fn push_value(&mut self, table: &QuantizedCdf, value: i32) {
        let off = self.push_table(&table.cdf);
        let (bin, raw) = bin_of(value);
        self.push_symbol(bin as u32, off, table.cdf.len() as u32);
        if let Some(r) = raw {
            self.push_raw(r);
        }
    }

    /// Appends a latent value coded with a table already in the buffer.
    pub fn push_value_at(&mut self, offset: u32, len: u32, value: i32) {
        let (bin, raw) = bin_of(value);
        self.push_symbol(bin as u32, offset, len);
        if let Some(r) = raw {
            self.push_raw(r);
        }
    }

    /// Encodes every entry with the reference coder.
    pub fn encode_reference(&self) -> Result<Vec<u8>> {
        let mut enc = RangeEncoder::new();
        for i in 0..self.symbols.len() {
            let s = self.symbols[i];
            if self.offsets[i] == RAW_OFFSET {
                enc.encode(s, 1)?;
                continue;
            }
            let (off, len) = (self.offsets[i] as usize, self.lengths[i] as usize);
            let cdf = self
                .cdfs
                .get(off..off + len)
                .ok_or_else(|| Error::Coder(format!("table of symbol {i} lies outside the buffer")))?;
            QuantizedCdf::validate(cdf)?;
            let s = s as usize;
            if s + 1 >= cdf.len() {
                return Err(Error::Coder(format!("symbol {s} outside its table")));
            }
            enc.encode(cdf[s], cdf[s + 1] - cdf[s])?;
        }
        Ok(enc.finish())
    }
}

/// Whether an accelerated coder library is linked into this build.
pub fn native_available() -> bool {
    false
}

static FALLBACK_WARNED: AtomicBool = AtomicBool::new(false);

/// Backend that will actually run for a requested one.
pub fn resolve_backend(requested: CoderBackend) -> CoderBackend {
    match requested {
        CoderBackend::Native if !native_available() => {
            if !FALLBACK_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!("native coder not available, using the reference coder");
            }
            CoderBackend::Reference
        }
        b => b,
    }
}

/// Encodes a buffer with the requested backend (after fallback).
pub fn encode_buffer(requested: CoderBackend, buf: &CoderBuffer) -> Result<Vec<u8>> {
    match resolve_backend(requested) {
        CoderBackend::Reference => buf.encode_reference(),
        CoderBackend::Native => unreachable!("native backend resolved without a native library"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::cdf::encode_value;

    #[test]
    fn buffer_matches_direct_encoding() {
        let tables = [QuantizedCdf::gaussian(0.0, 1.0), QuantizedCdf::gaussian(4.2, 0.3)];
        let values = [0, -3, 4, 300, -128, 5];
        let mut buf = CoderBuffer::new();
        let mut enc = RangeEncoder::new();
        for (i, &v) in values.iter().enumerate() {
            let t = &tables[i % 2];
            buf.push_value(t, v);
            encode_value(&mut enc, t, v).unwrap();
        }
        assert_eq!(buf.encode_reference().unwrap(), enc.finish());
    }

    #[test]
    fn native_request_falls_back() {
        assert_eq!(resolve_backend(CoderBackend::Native), CoderBackend::Reference);
        let buf = CoderBuffer::new();
        assert_eq!(encode_buffer(CoderBackend::Native, &buf).unwrap(), vec![0; 4]);
    }

    #[test]
    fn malformed_table_is_an_error() {
        let mut buf = CoderBuffer::new();
        let off = buf.push_table(&[0, 10, 10, 65536]);
        buf.push_symbol(0, off, 4);
        assert!(buf.encode_reference().is_err());
    }
}
