//! Binary range coder: 32-bit range, 64-bit low with carry propagation
//! through a cached byte run, byte-wise renormalization.
//!
//! Probabilities enter as f64 `P(bit = 1)` and are quantized to 16-bit
//! fixed point; the worst-case overhead against the ideal code length is
//! a fraction of a percent plus a constant of at most 8 bytes (one leading
//! cache byte and five flush bytes).

use super::EntropyError;

const PROB_BITS: u32 = 16;
const PROB_ONE: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Model outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// coding so neither symbol ever gets a zero-width interval.
pub const PROB_CLAMP: f64 = 1e-4;

pub fn clamp_prob(p1: f64) -> f64 {
    if p1.is_nan() {
        return 0.5;
    }
    p1.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn prob_to_fixed(p1: f64) -> u32 {
    let p = clamp_prob(p1);
    ((p * PROB_ONE as f64).round() as u32).clamp(1, PROB_ONE - 1)
}

pub struct AcEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for AcEncoder {
    fn default() -> Self {
        AcEncoder::new()
    }
}

impl AcEncoder {
    pub fn new() -> AcEncoder {
        AcEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, bit: bool, p1: f64) {
        let p = prob_to_fixed(p1);
        let bound = (self.range >> PROB_BITS) * p;
        if bit {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            while self.cache_size != 0 {
                self.out.push(self.cache.wrapping_add(carry));
                self.cache = 0xFF;
                self.cache_size -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct AcDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> AcDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<AcDecoder<'a>, EntropyError> {
        let mut dec = AcDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        // The first byte is the encoder's initial zero cache byte.
        for _ in 0..5 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        if self.pos >= self.input.len() {
            return Err(EntropyError::Truncated { offset: self.pos });
        }
        let b = self.input[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, p1: f64) -> Result<bool, EntropyError> {
        let p = prob_to_fixed(p1);
        let bound = (self.range >> PROB_BITS) * p;
        let bit = self.code < bound;
        if bit {
            self.range = bound;
        } else {
            self.code -= bound;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(bit)
    }
}

/// Encode a bit sequence under per-bit probabilities of a 1.
pub fn ac_encode(bits: &[bool], probs: &[f64]) -> Vec<u8> {
    assert_eq!(bits.len(), probs.len());
    let mut enc = AcEncoder::new();
    for (&bit, &p) in bits.iter().zip(probs) {
        enc.encode(bit, p);
    }
    enc.finish()
}

/// Decode `count` bits; `prob_fn` sees the decoded prefix and must
/// reproduce the encoder's probability sequence.
pub fn ac_decode(
    bytes: &[u8],
    count: usize,
    mut prob_fn: impl FnMut(usize, &[bool]) -> f64,
) -> Result<Vec<bool>, EntropyError> {
    let mut dec = AcDecoder::new(bytes)?;
    let mut bits = Vec::with_capacity(count);
    for idx in 0..count {
        let p = prob_fn(idx, &bits);
        bits.push(dec.decode(p)?);
    }
    Ok(bits)
}
