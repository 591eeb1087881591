//! Entropy coding: quantized tables, the range coder, the container and the
//! compress/decompress protocol.

pub mod bitstream;
pub mod buffer;
pub mod cdf;
pub mod codec;
pub mod rc;

pub use bitstream::{Bitstream, Header};
pub use buffer::CoderBuffer;
pub use cdf::QuantizedCdf;
pub use codec::{compress, decompress, CodingStats, Compressed, Decompressed};
