//! MSB-first bit packing and order-0 exponential Golomb codes.

use super::DecodeError;

#[derive(Default, Debug, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nacc: u32,
    written: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of bits written so far (excluding final padding).
    pub fn bits_written(&self) -> u64 {
        self.written
    }

    /// Writes the low `n` bits of `value`, most significant first. `n <= 32`.
    pub fn write_bits(&mut self, value: u32, n: u32) {
        debug_assert!(n <= 32);
        if n == 0 {
            return;
        }
        let v = (value as u64) & ((1u64 << n) - 1);
        self.acc = (self.acc << n) | v;
        self.nacc += n;
        self.written += n as u64;
        while self.nacc >= 8 {
            self.nacc -= 8;
            self.bytes.push((self.acc >> self.nacc) as u8);
        }
        self.acc &= (1u64 << self.nacc) - 1;
    }

    pub fn write_bit(&mut self, bit: bool) {
        self.write_bits(bit as u32, 1);
    }

    /// Unsigned exp-Golomb, k = 0.
    pub fn write_ue(&mut self, value: u32) {
        let x = value as u64 + 1;
        let len = 64 - x.leading_zeros();
        // prefix of len-1 zeros, then x in len bits
        let zeros = len - 1;
        if zeros > 0 {
            let mut left = zeros;
            while left > 0 {
                let n = left.min(32);
                self.write_bits(0, n);
                left -= n;
            }
        }
        if len > 32 {
            self.write_bits((x >> 32) as u32, len - 32);
            self.write_bits(x as u32, 32);
        } else {
            self.write_bits(x as u32, len);
        }
    }

    /// Signed exp-Golomb: 0, 1, -1, 2, -2, ... map to 0, 1, 2, 3, 4, ...
    pub fn write_se(&mut self, value: i32) {
        self.write_ue(se_to_ue(value));
    }

    /// Pads with zero bits to the next byte boundary and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        if self.nacc > 0 {
            let pad = 8 - self.nacc;
            self.acc <<= pad;
            self.bytes.push(self.acc as u8);
            self.nacc = 0;
            self.acc = 0;
        }
        self.bytes
    }
}

pub fn se_to_ue(value: i32) -> u32 {
    if value > 0 {
        (value as u32) * 2 - 1
    } else {
        value.unsigned_abs() * 2
    }
}

pub fn ue_to_se(code: u32) -> i32 {
    if code % 2 == 1 {
        code.div_ceil(2) as i32
    } else {
        -((code / 2) as i32)
    }
}

/// Bit length of `ue(value)`.
pub fn ue_len(value: u32) -> u32 {
    let x = value as u64 + 1;
    2 * (64 - x.leading_zeros()) - 1
}

pub fn se_len(value: i32) -> u32 {
    ue_len(se_to_ue(value))
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    /// Offset of `data` inside the enclosing container, for error reporting.
    base_offset: usize,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8], base_offset: usize) -> Self {
        Self {
            data,
            base_offset,
            pos: 0,
        }
    }

    pub fn bit_position(&self) -> u64 {
        self.pos
    }

    pub fn byte_offset(&self) -> usize {
        self.base_offset + (self.pos / 8) as usize
    }

    pub fn read_bit(&mut self) -> Result<bool, DecodeError> {
        let byte = (self.pos / 8) as usize;
        let Some(&b) = self.data.get(byte) else {
            return Err(DecodeError::Truncated {
                byte_offset: self.base_offset + byte,
            });
        };
        let bit = (b >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(bit == 1)
    }

    pub fn read_bits(&mut self, n: u32) -> Result<u32, DecodeError> {
        debug_assert!(n <= 32);
        let mut v: u32 = 0;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()? as u32;
        }
        Ok(v)
    }

    pub fn read_ue(&mut self) -> Result<u32, DecodeError> {
        let start = self.byte_offset();
        let mut zeros = 0u32;
        while !self.read_bit()? {
            zeros += 1;
            if zeros > 31 {
                return Err(DecodeError::Corrupt {
                    byte_offset: start,
                    reason: "exp-Golomb prefix too long".into(),
                });
            }
        }
        let rest = self.read_bits(zeros)? as u64;
        let x = (1u64 << zeros) | rest;
        let v = x - 1;
        u32::try_from(v).map_err(|_| DecodeError::Corrupt {
            byte_offset: start,
            reason: "exp-Golomb value overflow".into(),
        })
    }

    pub fn read_se(&mut self) -> Result<i32, DecodeError> {
        let start = self.byte_offset();
        let code = self.read_ue()?;
        if code > (i32::MAX as u32) {
            return Err(DecodeError::Corrupt {
                byte_offset: start,
                reason: "signed exp-Golomb value overflow".into(),
            });
        }
        Ok(ue_to_se(code))
    }

    /// Bytes consumed, rounding a partial byte up.
    pub fn bytes_consumed(&self) -> usize {
        self.pos.div_ceil(8) as usize
    }
}
