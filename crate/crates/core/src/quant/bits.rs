//! LSB-first bitstreams.

#[derive(Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn with_capacity_bits(bits: u64) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8) as usize),
            bit_len: 0,
        }
    }

    /// Appends the low `width` bits of `value`.
    pub fn write(&mut self, value: u32, width: u32) {
        debug_assert!(width <= 32 && (width == 32 || value >> width == 0));
        for i in 0..width {
            let byte = (self.bit_len / 8) as usize;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                self.bytes[byte] |= 1 << (self.bit_len % 8);
            }
            self.bit_len += 1;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub(crate) struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Byte offset of the next unread bit.
    pub fn byte_offset(&self) -> usize {
        (self.pos / 8) as usize
    }

    pub fn read(&mut self, width: u32) -> Option<u32> {
        if self.pos + width as u64 > self.bytes.len() as u64 * 8 {
            return None;
        }
        let mut v = 0u32;
        for i in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            if (byte >> (self.pos % 8)) & 1 == 1 {
                v |= 1 << i;
            }
            self.pos += 1;
        }
        Some(v)
    }

    /// True when every bit after the cursor is zero.
    pub fn rest_is_zero(&self) -> bool {
        let mut pos = self.pos;
        while pos < self.bytes.len() as u64 * 8 {
            if (self.bytes[(pos / 8) as usize] >> (pos % 8)) & 1 == 1 {
                return false;
            }
            pos += 1;
        }
        true
    }
}
