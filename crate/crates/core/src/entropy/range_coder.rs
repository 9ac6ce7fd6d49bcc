//! Carry-propagating range coder over 16-bit frequency tables.

use super::pmf::{Pmf, PRECISION};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, pmf: &Pmf, symbol: usize) -> Result<()> {
        let (start, freq) = pmf.interval(symbol).ok_or(Error::SymbolOutOfRange {
            index: 0,
            symbol,
            support: pmf.symbols(),
        })?;
        let r = self.range >> PRECISION;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
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

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::Truncated(self.data.len()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, pmf: &Pmf) -> Result<usize> {
        let r = self.range >> PRECISION;
        let target = (self.code / r).min((1 << PRECISION) - 1);
        let symbol = pmf.lookup(target);
        let (start, freq) = pmf
            .interval(symbol)
            .ok_or_else(|| Error::Bitstream("corrupt payload".into()))?;
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next()? as u32;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
