//! `.bsic` container.
//!
//! Layout (integers little-endian):
//!
//! | field | size |
//! |---|---|
//! | magic `BSIC` | 4 |
//! | version | 1 |
//! | mode (0 = autoregressive, 1 = checkerboard) | 1 |
//! | H, W, N, M | 2 each |
//! | K | 1 |
//! | z left, z right, y left, y right | u32 length + bytes each |
//! | CRC-32 of decoded symbols | 4 per view for z, then 4 per view and slice for y |
//!
//! The trailer CRCs let the decoder detect streams that decode without a
//! coder error but to different symbols.

use crate::config::Mode;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BSIC";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub mode: Mode,
    pub height: u16,
    pub width: u16,
    pub n: u16,
    pub m: u16,
    pub k: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    /// Hyper-latent streams, left then right.
    pub z: [Vec<u8>; 2],
    /// Latent streams, left then right.
    pub y: [Vec<u8>; 2],
    /// Per view CRC of the decoded hyper-latent symbols.
    pub z_crc: [u32; 2],
    /// Per view, per slice CRC of the decoded latent symbols.
    pub y_crc: [Vec<u32>; 2],
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.len_bytes());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(h.mode.code());
        for v in [h.height, h.width, h.n, h.m] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(h.k);
        for s in self.z.iter().chain(self.y.iter()) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        for c in self.z_crc {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for view in &self.y_crc {
            for c in view {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container whose latent trailer holds `slices` CRCs per view.
    pub fn from_bytes(bytes: &[u8], slices: usize) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let code = r.u8()?;
        let mode = Mode::from_code(code).ok_or_else(|| Error::Format(format!("unknown mode {code}")))?;
        let header = Header { mode, height: r.u16()?, width: r.u16()?, n: r.u16()?, m: r.u16()?, k: r.u8()? };
        let mut streams = Vec::with_capacity(4);
        for _ in 0..4 {
            let len = r.u32()? as usize;
            streams.push(r.take(len)?.to_vec());
        }
        let z_crc = [r.u32()?, r.u32()?];
        let mut y_crc = [Vec::with_capacity(slices), Vec::with_capacity(slices)];
        for view in y_crc.iter_mut() {
            for _ in 0..slices {
                view.push(r.u32()?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut it = streams.into_iter();
        let mut next = || it.next().unwrap();
        let z = [next(), next()];
        let y = [next(), next()];
        Ok(Bitstream { header, z, y, z_crc, y_crc })
    }

    pub fn len_bytes(&self) -> usize {
        HEADER_BYTES + self.overhead_payload_bytes() + self.z.iter().chain(self.y.iter()).map(Vec::len).sum::<usize>()
    }

    /// Bytes other than the header and the four coded streams.
    fn overhead_payload_bytes(&self) -> usize {
        4 * 4 + 4 * 2 + 4 * (self.y_crc[0].len() + self.y_crc[1].len())
    }

    /// Bytes not attributable to one view: header, length prefixes and trailer.
    pub fn shared_bytes(&self) -> usize {
        HEADER_BYTES + self.overhead_payload_bytes()
    }

    /// Bits per pixel of each view: the view's own streams plus half of the
    /// shared bytes, over `H·W`.
    pub fn bpp(&self) -> [f64; 2] {
        let pixels = self.header.height as f64 * self.header.width as f64;
        let shared = 8.0 * self.shared_bytes() as f64 / 2.0;
        [0, 1].map(|v| (8.0 * (self.z[v].len() + self.y[v].len()) as f64 + shared) / pixels)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!("container truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header { mode: Mode::Ckbd, height: 64, width: 128, n: 32, m: 32, k: 4 },
            z: [vec![1, 2, 3], vec![4]],
            y: [vec![5; 10], vec![]],
            z_crc: [7, 8],
            y_crc: [vec![1, 2, 3, 4], vec![5, 6, 7, 8]],
        }
    }

    #[test]
    fn roundtrip_and_size() {
        let b = sample();
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), b.len_bytes());
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Bitstream::from_bytes(&bytes, 4).unwrap(), b);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_format_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Bitstream::from_bytes(&bytes[..bytes.len() - 1], 4), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Bitstream::from_bytes(&longer, 4), Err(Error::Format(_))));
    }

    #[test]
    fn bpp_splits_shared_bytes() {
        let b = sample();
        let [l, r] = b.bpp();
        let total_bits = 8.0 * b.len_bytes() as f64;
        assert!(((l + r) * 64.0 * 128.0 - total_bits).abs() < 1e-9);
    }
}
