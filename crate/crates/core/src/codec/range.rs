//! 32-bit range coder with carry propagation through a cached byte.

use super::FreqTable;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            started: false,
        }
    }

    fn emit(&mut self, b: u8) {
        // the first byte is always zero and is not stored
        if self.started {
            self.out.push(b);
        }
        self.started = true;
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            while self.pending > 0 {
                self.emit(b.wrapping_add(carry));
                b = 0xFF;
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, table: &FreqTable, code: u8) -> Result<()> {
        if code == 0 {
            return Err(Error::invalid("occupancy code 0 cannot be coded"));
        }
        let r = self.range / table.total();
        self.low += table.cum()[code as usize - 1] as u64 * r as u64;
        self.range = table.freq(code) * r;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::corrupt("payload ended early"))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<u8> {
        let r = self.range / table.total();
        let v = self.code / r;
        if v >= table.total() {
            return Err(Error::corrupt("code value outside the coding interval"));
        }
        let sym = table.lookup(v);
        self.code -= table.cum()[sym as usize - 1] * r;
        self.range = table.freq(sym) * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(sym)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
