//! Context extraction over stacks of binary maps.
//!
//! A context is read from a `maps x h x w` bit array (code channels for
//! the code payload, bitplanes for the importance payload) around a
//! current position `(k, i, j)`. A neighbor is *available* only when it
//! is in bounds, not masked out, not the current position, and already
//! coded under the raster schedule (maps in order, rows top to bottom,
//! columns left to right). Available neighbors are recoded to 1 (bit 0)
//! or 2 (bit 1); everything else is 0.

/// Spatial extent of the context window.
pub const CTX_SPATIAL: usize = 5;
/// Number of maps in the context: the current one and the three below it.
pub const CTX_MAPS: usize = 4;
/// Total ternary symbols in a cuboid.
pub const CTX_CELLS: usize = CTX_SPATIAL * CTX_SPATIAL * CTX_MAPS;

/// Ternary 5x5x4 neighborhood; index `(m * 5 + dy) * 5 + dx` where map
/// `m` in `0..4` is absolute map `k - 3 + m`.
pub type ContextCuboid = [u8; CTX_CELLS];

/// Number of distinct small (5-neighbor) frequency-table contexts.
pub const SMALL_CONTEXTS: usize = 243;

#[derive(Clone, Copy)]
struct Pos {
    k: usize,
    i: usize,
    j: usize,
}

fn coded_before(cand: Pos, cur: Pos) -> bool {
    (cand.k, cand.i, cand.j) < (cur.k, cur.i, cur.j)
}

/// Ternary symbol of candidate `(kk, ii, jj)` (possibly out of bounds)
/// relative to the current position.
#[allow(clippy::too_many_arguments)]
fn symbol_at(
    bits: &[u8],
    mask: Option<&[u8]>,
    maps: usize,
    h: usize,
    w: usize,
    cur: Pos,
    kk: isize,
    ii: isize,
    jj: isize,
) -> u8 {
    if kk < 0 || ii < 0 || jj < 0 || kk >= maps as isize || ii >= h as isize || jj >= w as isize {
        return 0;
    }
    let cand = Pos {
        k: kk as usize,
        i: ii as usize,
        j: jj as usize,
    };
    let idx = (cand.k * h + cand.i) * w + cand.j;
    if let Some(mask) = mask {
        if mask[idx] == 0 {
            return 0;
        }
    }
    if !coded_before(cand, cur) {
        return 0;
    }
    1 + bits[idx]
}

/// Extract the 5x5x4 cuboid for position `(k, i, j)`.
///
/// `mask` marks transmitted positions for the code payload; pass `None`
/// for the importance bitplanes where every position is coded.
#[allow(clippy::too_many_arguments)]
pub fn extract_context(
    bits: &[u8],
    mask: Option<&[u8]>,
    maps: usize,
    h: usize,
    w: usize,
    k: usize,
    i: usize,
    j: usize,
) -> ContextCuboid {
    debug_assert_eq!(bits.len(), maps * h * w);
    let cur = Pos { k, i, j };
    let mut out = [0u8; CTX_CELLS];
    for m in 0..CTX_MAPS {
        let kk = k as isize - 3 + m as isize;
        for dy in 0..CTX_SPATIAL {
            let ii = i as isize + dy as isize - 2;
            for dx in 0..CTX_SPATIAL {
                let jj = j as isize + dx as isize - 2;
                out[(m * CTX_SPATIAL + dy) * CTX_SPATIAL + dx] =
                    symbol_at(bits, mask, maps, h, w, cur, kk, ii, jj);
            }
        }
    }
    out
}

/// Small frequency-table context: the five nearest previously-coded
/// neighbors (left, up-left, up, up-right, and the same position one map
/// below), base-3 packed into `0..243`.
#[allow(clippy::too_many_arguments)]
pub fn small_context(
    bits: &[u8],
    mask: Option<&[u8]>,
    maps: usize,
    h: usize,
    w: usize,
    k: usize,
    i: usize,
    j: usize,
) -> usize {
    let cur = Pos { k, i, j };
    let (ki, ii, ji) = (k as isize, i as isize, j as isize);
    let neighbors = [
        (ki, ii, ji - 1),
        (ki, ii - 1, ji - 1),
        (ki, ii - 1, ji),
        (ki, ii - 1, ji + 1),
        (ki - 1, ii, ji),
    ];
    let mut key = 0usize;
    for &(kk, aa, bb) in &neighbors {
        key = key * 3 + symbol_at(bits, mask, maps, h, w, cur, kk, aa, bb) as usize;
    }
    key
}

/// Coding order over a masked map stack: maps in order, row-major within
/// a map, masked-out positions skipped.
pub fn schedule_from_mask(
    mask: &[u8],
    maps: usize,
    h: usize,
    w: usize,
) -> Vec<(usize, usize, usize)> {
    debug_assert_eq!(mask.len(), maps * h * w);
    let mut order = Vec::new();
    for k in 0..maps {
        for i in 0..h {
            for j in 0..w {
                if mask[(k * h + i) * w + j] == 1 {
                    order.push((k, i, j));
                }
            }
        }
    }
    order
}
