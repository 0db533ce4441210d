//! Bit-exact payload packing.
//!
//! Every message in the model is charged by its declared bit length, so
//! payloads are packed field-by-field at bit granularity rather than with a
//! byte-oriented serializer.

/// Append-only bit buffer, LSB-first within each byte.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitWriter {
    buf: Vec<u8>,
    bits: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self { buf: Vec::with_capacity(bits.div_ceil(8)), bits: 0 }
    }

    /// Append the low `width` bits of `v`. `width` must be ≤ 64.
    pub fn push(&mut self, v: u64, width: usize) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || v < (1u64 << width), "value {v} overflows {width} bits");
        let mut done = 0;
        while done < width {
            let bit_pos = self.bits & 7;
            if bit_pos == 0 {
                self.buf.push(0);
            }
            let take = (8 - bit_pos).min(width - done);
            let chunk = ((v >> done) & ((1u64 << take) - 1)) as u8;
            *self.buf.last_mut().unwrap() |= chunk << bit_pos;
            done += take;
            self.bits += take;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bits
    }

    pub fn into_payload(self) -> (Vec<u8>, usize) {
        (self.buf, self.bits)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }
}

/// Cursor over a packed payload produced by [`BitWriter`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    buf: &'a [u8],
    pos: usize,
    bits: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(buf: &'a [u8], bits: usize) -> Self {
        debug_assert!(bits <= buf.len() * 8);
        Self { buf, pos: 0, bits }
    }

    pub fn remaining(&self) -> usize {
        self.bits - self.pos
    }

    /// Read `width` bits; panics if the payload is exhausted (protocol framing
    /// is always known to both sides, so a short read is a logic bug).
    pub fn pull(&mut self, width: usize) -> u64 {
        assert!(self.pos + width <= self.bits, "payload underrun");
        let mut v = 0u64;
        let mut done = 0;
        while done < width {
            let byte = self.buf[self.pos >> 3];
            let bit_pos = self.pos & 7;
            let take = (8 - bit_pos).min(width - done);
            let chunk = (byte >> bit_pos) as u64 & ((1u64 << take) - 1);
            v |= chunk << done;
            done += take;
            self.pos += take;
        }
        v
    }
}

/// Bits needed to encode values in `0..=max`.
pub fn width_for(max: u64) -> usize {
    64 - max.leading_zeros() as usize
}
