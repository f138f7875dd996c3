//! MSB-first bit writer and reader.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    pending: u32,
    written: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `n` bits of `value`, most significant first. `n <= 32`.
    pub fn write(&mut self, value: u32, n: u32) {
        debug_assert!(n <= 32);
        if n == 0 {
            return;
        }
        let v = (value as u64) & ((1u64 << n) - 1);
        self.acc = (self.acc << n) | v;
        self.pending += n;
        self.written += n as u64;
        while self.pending >= 8 {
            self.pending -= 8;
            self.bytes.push((self.acc >> self.pending) as u8);
        }
        self.acc &= (1u64 << self.pending) - 1;
    }

    /// Number of bits written so far, excluding padding.
    pub fn bit_len(&self) -> u64 {
        self.written
    }

    /// Pads with zero bits up to the next byte boundary.
    pub fn align(&mut self) {
        if self.pending > 0 {
            let pad = 8 - self.pending;
            self.bytes.push((self.acc << pad) as u8);
            self.written += pad as u64;
            self.acc = 0;
            self.pending = 0;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.align();
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    /// Offset reported in errors, so positions are relative to the enclosing stream.
    base: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self::with_base(bytes, 0)
    }

    pub fn with_base(bytes: &'a [u8], base_bit: u64) -> Self {
        Self {
            bytes,
            pos: 0,
            base: base_bit,
        }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn stream_offset(&self) -> u64 {
        self.base + self.pos
    }

    pub fn remaining(&self) -> u64 {
        self.bytes.len() as u64 * 8 - self.pos
    }

    pub fn read_bit(&mut self) -> Result<u32> {
        if self.pos >= self.bytes.len() as u64 * 8 {
            return Err(Error::corrupt(self.stream_offset(), "unexpected end of stream"));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(bit as u32)
    }

    pub fn read(&mut self, n: u32) -> Result<u32> {
        debug_assert!(n <= 32);
        if (n as u64) > self.remaining() {
            return Err(Error::corrupt(
                self.stream_offset(),
                format!("need {n} bits, {} remain", self.remaining()),
            ));
        }
        let mut v = 0u32;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }

    /// Skips to the next byte boundary; padding bits must be zero.
    pub fn align(&mut self) -> Result<()> {
        while self.pos % 8 != 0 {
            let at = self.stream_offset();
            if self.read_bit()? != 0 {
                return Err(Error::corrupt(at, "non-zero padding bit"));
            }
        }
        Ok(())
    }
}
