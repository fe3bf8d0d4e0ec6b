//! Binary quantization and importance-driven bit allocation.
//!
//! The encoder output is binarized with a hard 0.5 threshold; the
//! importance map is quantized to one of `L` levels and expanded into a
//! channel mask that keeps the first `(n/L) * level` code channels at each
//! location. Both steps are non-differentiable, so each carries a
//! straight-through gradient for training: the binarizer passes the
//! upstream gradient unchanged on `[0, 1]`, and the mask routes gradients
//! back to the importance map only near the active channel threshold.

use thiserror::Error;

use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("importance value {0} outside the open interval (0, 1)")]
    ImportanceOutOfRange(f64),
    #[error("channel count {n} is not divisible by {levels} importance levels")]
    LevelMismatch { n: usize, levels: usize },
    #[error("expected an importance map of shape [N, 1, h, w], got {0:?}")]
    BadMapShape(Vec<usize>),
}

/// Everything the entropy and container stages need about one image's
/// codes.
///
/// `codes` and `mask` are `n * h * w` in channel-major order; `imp_q` is
/// `h * w` with values in `0..L`. Trimmed positions (mask 0) always hold
/// code 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBundle {
    pub n: usize,
    pub levels: usize,
    pub h: usize,
    pub w: usize,
    pub codes: Vec<u8>,
    pub imp_q: Vec<u8>,
    pub mask: Vec<u8>,
}

impl CodeBundle {
    /// Assemble a bundle from raw (untrimmed) codes and a quantized map;
    /// the mask is derived and the codes are trimmed against it.
    pub fn build(
        n: usize,
        levels: usize,
        h: usize,
        w: usize,
        raw_codes: Vec<u8>,
        imp_q: Vec<u8>,
    ) -> Result<CodeBundle, QuantError> {
        assert_eq!(raw_codes.len(), n * h * w);
        assert_eq!(imp_q.len(), h * w);
        let mask = build_mask(&imp_q, h, w, n, levels)?;
        let codes = raw_codes.iter().zip(&mask).map(|(&c, &m)| c & m).collect();
        Ok(CodeBundle {
            n,
            levels,
            h,
            w,
            codes,
            imp_q,
            mask,
        })
    }

    /// Number of transmitted code bits, `(n/L) * sum(imp_q)`.
    pub fn coded_bits(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// Hard binarizer: 1 strictly above 0.5, 0 at or below.
pub fn binarize_value(e: f64) -> u8 {
    u8::from(e > 0.5)
}

/// Straight-through proxy slope for the binarizer: 1 on `[0, 1]`, else 0.
pub fn binarize_proxy_slope(e: f64) -> f64 {
    if (0.0..=1.0).contains(&e) {
        1.0
    } else {
        0.0
    }
}

/// Binarizer as a tape node: hard threshold forward, proxy slope backward.
pub fn binarize(tape: &mut Tape, e: TensorId) -> TensorId {
    tape.custom_unit(
        |d| d.iter().map(|&v| binarize_value(v) as f64).collect(),
        |d| d.iter().map(|&v| binarize_proxy_slope(v)).collect(),
        e,
    )
}

/// Quantize one importance value to a level in `0..L`.
///
/// Level `l-1` is assigned when `(l-1)/L <= p < l/L`. Since `p` lives in
/// the open interval `(0, 1)`, only `L` distinct values occur.
pub fn quantize_importance(p: f64, levels: usize) -> Result<usize, QuantError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(QuantError::ImportanceOutOfRange(p));
    }
    // floor(p * L), with the top bin guarded against f64 rounding of p*L
    // (p < 1 mathematically forces level <= L-1).
    Ok(((p * levels as f64).floor() as usize).min(levels - 1))
}

/// Expand a quantized importance map into the binary channel mask:
/// channel k (1-based) is kept at (i, j) iff `k <= (n/L) * imp_q[i, j]`.
pub fn build_mask(
    imp_q: &[u8],
    h: usize,
    w: usize,
    n: usize,
    levels: usize,
) -> Result<Vec<u8>, QuantError> {
    if levels == 0 || !n.is_multiple_of(levels) {
        return Err(QuantError::LevelMismatch { n, levels });
    }
    assert_eq!(imp_q.len(), h * w);
    let per_level = n / levels;
    let mut mask = vec![0u8; n * h * w];
    for (pos, &q) in imp_q.iter().enumerate() {
        let keep = per_level * q as usize;
        for k in 0..keep {
            mask[k * h * w + pos] = 1;
        }
    }
    Ok(mask)
}

/// Straight-through gradient of mask channel `k` (1-based) w.r.t. the
/// importance value `p`: `L` when `L*p - 1 <= ceil(k*L/n) < L*p + 2`,
/// else 0.
pub fn mask_backward(p: f64, k: usize, n: usize, levels: usize) -> f64 {
    let lf = levels as f64;
    let ceil_kl_n = (k * levels).div_ceil(n) as f64;
    if lf * p - 1.0 <= ceil_kl_n && ceil_kl_n < lf * p + 2.0 {
        lf
    } else {
        0.0
    }
}

/// Mask construction as a tape node.
///
/// Forward expands `p` of shape `[N, 1, h, w]` into the binary mask
/// `[N, n, h, w]` via [`quantize_importance`] + [`build_mask`]; backward
/// sums [`mask_backward`] over the channel axis at each location.
pub fn mask_node(
    tape: &mut Tape,
    p: TensorId,
    n: usize,
    levels: usize,
) -> Result<TensorId, QuantError> {
    let shape = tape.shape(p).to_vec();
    let [batch, h, w] = match shape.as_slice() {
        [a, 1, c, d] => [*a, *c, *d],
        _ => return Err(QuantError::BadMapShape(shape)),
    };
    if levels == 0 || !n.is_multiple_of(levels) {
        return Err(QuantError::LevelMismatch { n, levels });
    }
    let plane = h * w;
    let mut data = vec![0.0; batch * n * plane];
    {
        let pd = tape.data(p);
        for b in 0..batch {
            let mut imp_q = vec![0u8; plane];
            for (pos, q) in imp_q.iter_mut().enumerate() {
                *q = quantize_importance(pd[b * plane + pos], levels)? as u8;
            }
            let mask = build_mask(&imp_q, h, w, n, levels)?;
            for (i, &m) in mask.iter().enumerate() {
                data[b * n * plane + i] = m as f64;
            }
        }
    }
    let out_id = tape.next_id();
    let needs_grad = tape.value(p).requires_grad();
    let backward = needs_grad.then(|| -> crate::tensor::BackwardFn {
        Box::new(move |tape, store| {
            let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                return;
            };
            let pd = tape.data(p);
            let mut dp = vec![0.0; batch * plane];
            for b in 0..batch {
                for pos in 0..plane {
                    let pv = pd[b * plane + pos];
                    let mut acc = 0.0;
                    for k in 1..=n {
                        let slope = mask_backward(pv, k, n, levels);
                        if slope != 0.0 {
                            acc += slope * g[(b * n + (k - 1)) * plane + pos];
                        }
                    }
                    dp[b * plane + pos] = acc;
                }
            }
            store.accumulate(p, &dp);
        })
    });
    Ok(tape.push_node(vec![batch, n, h, w], data, backward))
}
