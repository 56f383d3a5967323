//! Integer range coding of occupancy symbols under model distributions, and
//! the container format.

mod bitstream;
mod freq;
mod range;

pub use bitstream::{Bitstream, Header, HEADER_LEN, MAGIC, VERSION};
pub use freq::{quantize_dist, FreqTable, FREQ_BITS, FREQ_TOTAL};
pub use range::{RangeDecoder, RangeEncoder};

use crate::error::{Error, Result};

/// Codes `symbols` (occupancy codes 1..=255), symbol `i` under `tables[i]`.
pub fn encode_symbols(symbols: &[u8], tables: &[FreqTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::invalid(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(payload: &[u8], tables: &[FreqTable]) -> Result<Vec<u8>> {
    let mut dec = RangeDecoder::new(payload)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}

/// `sum(-log2(freq / total))` over the stream.
pub fn ideal_bits(symbols: &[u8], tables: &[FreqTable]) -> f64 {
    symbols.iter().zip(tables).map(|(&s, t)| t.bits(s)).sum()
}
