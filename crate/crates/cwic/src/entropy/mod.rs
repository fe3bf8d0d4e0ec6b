//! Lossless recompression of trimmed codes and quantized importance
//! maps: context extraction, probability models, the binary range coder,
//! and the bitplane representation of the importance map.

mod coder;
mod context;
mod model;

pub use coder::{ac_decode, ac_encode, clamp_prob, AcDecoder, AcEncoder, PROB_CLAMP};
pub use context::{
    extract_context, schedule_from_mask, small_context, ContextCuboid, CTX_CELLS, CTX_MAPS,
    CTX_SPATIAL, SMALL_CONTEXTS,
};
pub use model::{
    nll_bits, train_net, EntropyModel, EntropyNet, EntropyTrainConfig, FreqTable, Predictor,
    ENTROPY_MAGIC, ENTROPY_VERSION,
};

use thiserror::Error;

use crate::quant::CodeBundle;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("payload truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("bad magic {found:?}, expected \"CWEN\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported entropy-model version {0}")]
    BadVersion(u8),
    #[error("unknown entropy-model kind {0}")]
    BadKind(u8),
    #[error("entropy-model file has {extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("importance value {value} does not fit in {planes} bitplanes")]
    ValueTooLarge { value: usize, planes: usize },
    #[error("bit count mismatch: expected {expected}, got {got}")]
    BitCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Coding order of a bundle: channel maps first to last, row-major within
/// a map, masked-out positions skipped.
pub fn schedule(bundle: &CodeBundle) -> Vec<(usize, usize, usize)> {
    schedule_from_mask(&bundle.mask, bundle.n, bundle.h, bundle.w)
}

/// Cuboid context of a coded position in a bundle.
pub fn code_context(bundle: &CodeBundle, k: usize, i: usize, j: usize) -> ContextCuboid {
    extract_context(
        &bundle.codes,
        Some(&bundle.mask),
        bundle.n,
        bundle.h,
        bundle.w,
        k,
        i,
        j,
    )
}

/// Number of bitplanes for `L` levels: the smallest `n_b` with
/// `L <= 2^n_b` (so `2^(n_b-1) < L` as well).
pub fn bitplane_count(levels: usize) -> usize {
    let mut n_b = 1;
    while (1usize << n_b) < levels {
        n_b += 1;
    }
    n_b
}

/// LSB-first bitplanes of a quantized importance map:
/// `value = sum_k planes[k] * 2^k`.
pub fn binarize_importance(imp_q: &[u8], levels: usize) -> Result<Vec<u8>, EntropyError> {
    let n_b = bitplane_count(levels);
    let mut planes = vec![0u8; n_b * imp_q.len()];
    for (pos, &q) in imp_q.iter().enumerate() {
        if (q as usize) >= (1 << n_b) {
            return Err(EntropyError::ValueTooLarge {
                value: q as usize,
                planes: n_b,
            });
        }
        for k in 0..n_b {
            planes[k * imp_q.len() + pos] = (q >> k) & 1;
        }
    }
    Ok(planes)
}

/// Inverse of [`binarize_importance`].
pub fn debinarize_importance(planes: &[u8], n_b: usize, positions: usize) -> Vec<u8> {
    assert_eq!(planes.len(), n_b * positions);
    let mut imp_q = vec![0u8; positions];
    for (pos, q) in imp_q.iter_mut().enumerate() {
        for k in 0..n_b {
            *q |= planes[k * positions + pos] << k;
        }
    }
    imp_q
}

/// Entropy-code the trimmed code payload of a bundle.
pub fn encode_code_payload(bundle: &CodeBundle, pred: &mut Predictor) -> Vec<u8> {
    let mut enc = AcEncoder::new();
    for (k, i, j) in schedule(bundle) {
        let bit = bundle.codes[(k * bundle.h + i) * bundle.w + j] == 1;
        match pred {
            Predictor::Net(net) => {
                let p1 = net.predict(&code_context(bundle, k, i, j));
                enc.encode(bit, p1);
            }
            Predictor::Freq(table) => {
                let key = small_context(
                    &bundle.codes,
                    Some(&bundle.mask),
                    bundle.n,
                    bundle.h,
                    bundle.w,
                    k,
                    i,
                    j,
                );
                enc.encode(bit, table.predict(key));
                table.update(key, bit);
            }
        }
    }
    enc.finish()
}

/// Decode a code payload against a known mask; the context rebuilt from
/// already-decoded bits mirrors the encoder exactly.
pub fn decode_code_payload(
    bytes: &[u8],
    mask: &[u8],
    n: usize,
    h: usize,
    w: usize,
    pred: &mut Predictor,
) -> Result<Vec<u8>, EntropyError> {
    let order = schedule_from_mask(mask, n, h, w);
    let mut codes = vec![0u8; n * h * w];
    if order.is_empty() {
        return Ok(codes);
    }
    let mut dec = AcDecoder::new(bytes)?;
    for (k, i, j) in order {
        let bit = match pred {
            Predictor::Net(net) => {
                let cub = extract_context(&codes, Some(mask), n, h, w, k, i, j);
                dec.decode(net.predict(&cub))?
            }
            Predictor::Freq(table) => {
                let key = small_context(&codes, Some(mask), n, h, w, k, i, j);
                let bit = dec.decode(table.predict(key))?;
                table.update(key, bit);
                bit
            }
        };
        codes[(k * h + i) * w + j] = bit as u8;
    }
    Ok(codes)
}

/// Entropy-code the importance map as bitplanes; every position is coded
/// (no mask skipping), lower planes appear in the context's map axis.
pub fn encode_importance_payload(
    imp_q: &[u8],
    h: usize,
    w: usize,
    levels: usize,
    pred: &mut Predictor,
) -> Result<Vec<u8>, EntropyError> {
    let n_b = bitplane_count(levels);
    let planes = binarize_importance(imp_q, levels)?;
    let mut enc = AcEncoder::new();
    for b in 0..n_b {
        for i in 0..h {
            for j in 0..w {
                let bit = planes[(b * h + i) * w + j] == 1;
                match pred {
                    Predictor::Net(net) => {
                        let cub = extract_context(&planes, None, n_b, h, w, b, i, j);
                        enc.encode(bit, net.predict(&cub));
                    }
                    Predictor::Freq(table) => {
                        let key = small_context(&planes, None, n_b, h, w, b, i, j);
                        enc.encode(bit, table.predict(key));
                        table.update(key, bit);
                    }
                }
            }
        }
    }
    Ok(enc.finish())
}

/// Decode an importance payload of known geometry.
pub fn decode_importance_payload(
    bytes: &[u8],
    h: usize,
    w: usize,
    levels: usize,
    pred: &mut Predictor,
) -> Result<Vec<u8>, EntropyError> {
    let n_b = bitplane_count(levels);
    let mut planes = vec![0u8; n_b * h * w];
    let mut dec = AcDecoder::new(bytes)?;
    for b in 0..n_b {
        for i in 0..h {
            for j in 0..w {
                let bit = match pred {
                    Predictor::Net(net) => {
                        let cub = extract_context(&planes, None, n_b, h, w, b, i, j);
                        dec.decode(net.predict(&cub))?
                    }
                    Predictor::Freq(table) => {
                        let key = small_context(&planes, None, n_b, h, w, b, i, j);
                        let bit = dec.decode(table.predict(key))?;
                        table.update(key, bit);
                        bit
                    }
                };
                planes[(b * h + i) * w + j] = bit as u8;
            }
        }
    }
    Ok(debinarize_importance(&planes, n_b, h * w))
}

/// Pack bits (0/1 bytes) MSB-first.
pub fn pack_bits(bits: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut acc = 0u8;
    let mut filled = 0u8;
    for bit in bits {
        acc = (acc << 1) | (bit & 1);
        filled += 1;
        if filled == 8 {
            out.push(acc);
            acc = 0;
            filled = 0;
        }
    }
    if filled > 0 {
        out.push(acc << (8 - filled));
    }
    out
}

/// Unpack `count` MSB-first bits.
pub fn unpack_bits(bytes: &[u8], count: usize) -> Result<Vec<u8>, EntropyError> {
    if count.div_ceil(8) > bytes.len() {
        return Err(EntropyError::BitCount {
            expected: count,
            got: bytes.len() * 8,
        });
    }
    Ok((0..count)
        .map(|idx| (bytes[idx / 8] >> (7 - idx % 8)) & 1)
        .collect())
}

/// Raw (uncoded) code payload: scheduled bits packed MSB-first.
pub fn raw_code_payload(bundle: &CodeBundle) -> Vec<u8> {
    pack_bits(
        schedule(bundle)
            .into_iter()
            .map(|(k, i, j)| bundle.codes[(k * bundle.h + i) * bundle.w + j]),
    )
}

/// Inverse of [`raw_code_payload`] against a known mask.
pub fn unpack_code_payload(
    bytes: &[u8],
    mask: &[u8],
    n: usize,
    h: usize,
    w: usize,
) -> Result<Vec<u8>, EntropyError> {
    let order = schedule_from_mask(mask, n, h, w);
    let bits = unpack_bits(bytes, order.len())?;
    let mut codes = vec![0u8; n * h * w];
    for ((k, i, j), bit) in order.into_iter().zip(bits) {
        codes[(k * h + i) * w + j] = bit;
    }
    Ok(codes)
}

/// Raw importance payload: bitplanes packed MSB-first, `n_b * h * w`
/// bits.
pub fn raw_importance_payload(imp_q: &[u8], levels: usize) -> Result<Vec<u8>, EntropyError> {
    Ok(pack_bits(binarize_importance(imp_q, levels)?.into_iter()))
}

/// Inverse of [`raw_importance_payload`].
pub fn unpack_importance_payload(
    bytes: &[u8],
    h: usize,
    w: usize,
    levels: usize,
) -> Result<Vec<u8>, EntropyError> {
    let n_b = bitplane_count(levels);
    let planes = unpack_bits(bytes, n_b * h * w)?;
    Ok(debinarize_importance(&planes, n_b, h * w))
}

/// Training corpus: per coded bit, the cuboid context, the small
/// (frequency-table) context key, and the bit itself. Masked-out bits
/// never enter the corpus, which realizes the mask weighting of the
/// predictor loss.
#[derive(Debug, Clone, Default)]
pub struct ContextCorpus {
    pub cuboids: Vec<ContextCuboid>,
    pub small: Vec<usize>,
    pub bits: Vec<u8>,
}

impl ContextCorpus {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn extend(&mut self, other: &ContextCorpus) {
        self.cuboids.extend_from_slice(&other.cuboids);
        self.small.extend_from_slice(&other.small);
        self.bits.extend_from_slice(&other.bits);
    }
}

/// Contexts of every transmitted code bit of a bundle.
pub fn harvest_codes(bundle: &CodeBundle) -> ContextCorpus {
    let mut corpus = ContextCorpus::default();
    for (k, i, j) in schedule(bundle) {
        corpus.cuboids.push(code_context(bundle, k, i, j));
        corpus.small.push(small_context(
            &bundle.codes,
            Some(&bundle.mask),
            bundle.n,
            bundle.h,
            bundle.w,
            k,
            i,
            j,
        ));
        corpus
            .bits
            .push(bundle.codes[(k * bundle.h + i) * bundle.w + j]);
    }
    corpus
}

/// Contexts of every importance bitplane bit.
pub fn harvest_importance(
    imp_q: &[u8],
    h: usize,
    w: usize,
    levels: usize,
) -> Result<ContextCorpus, EntropyError> {
    let n_b = bitplane_count(levels);
    let planes = binarize_importance(imp_q, levels)?;
    let mut corpus = ContextCorpus::default();
    for b in 0..n_b {
        for i in 0..h {
            for j in 0..w {
                corpus
                    .cuboids
                    .push(extract_context(&planes, None, n_b, h, w, b, i, j));
                corpus
                    .small
                    .push(small_context(&planes, None, n_b, h, w, b, i, j));
                corpus.bits.push(planes[(b * h + i) * w + j]);
            }
        }
    }
    Ok(corpus)
}
