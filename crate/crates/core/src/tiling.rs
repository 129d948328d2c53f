//! Row-block tiling of linear operators and the contiguous-allocation model.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

/// Output-row ranges of `tiles` blocks of `ceil(out_dim / tiles)` rows each;
/// the last block may be shorter.
pub fn row_splits(out_dim: usize, tiles: usize) -> Result<Vec<Range<usize>>> {
    if tiles == 0 || out_dim == 0 {
        return Err(Error::Domain("tiling needs at least one tile and one output row"));
    }
    if tiles > out_dim {
        return Err(Error::Shape(alloc::format!("{tiles} tiles for {out_dim} output rows")));
    }
    let rows = out_dim.div_ceil(tiles);
    let splits: Vec<Range<usize>> = (0..tiles)
        .map(|t| (t * rows).min(out_dim)..((t + 1) * rows).min(out_dim))
        .collect();
    if splits.iter().any(|r| r.is_empty()) {
        return Err(Error::Shape(alloc::format!(
            "{tiles} tiles of {rows} rows leave an empty tile for {out_dim} rows"
        )));
    }
    Ok(splits)
}

/// Resident tensors of one operator, each sized `coeff * hd^2` bytes before tiling.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationModel {
    pub tensors: Vec<(String, u64)>,
}

impl AllocationModel {
    /// fp16 parameter and gradient of the `hd -> 4hd` linear.
    pub fn fp16_working() -> Self {
        AllocationModel {
            tensors: alloc::vec![(String::from("fp16 param"), 8), (String::from("fp16 grad"), 8)],
        }
    }

    /// fp16 working copies plus fp32 master, momentum and variance resident.
    pub fn with_fp32_states() -> Self {
        let mut m = Self::fp16_working();
        for name in ["fp32 master", "fp32 momentum", "fp32 variance"] {
            m.tensors.push((String::from(name), 16));
        }
        m
    }

    pub fn largest_coefficient(&self) -> u64 {
        self.tensors.iter().map(|t| t.1).max().unwrap_or(0)
    }

    /// Largest single contiguous allocation at hidden size `hd` with `tiles` tiles.
    pub fn largest_allocation(&self, hd: u64, tiles: u64) -> u128 {
        let hd2 = hd as u128 * hd as u128;
        (self.largest_coefficient() as u128 * hd2).div_ceil(tiles.max(1) as u128)
    }
}

impl Default for AllocationModel {
    fn default() -> Self {
        Self::with_fp32_states()
    }
}

/// Largest `hd` whose biggest per-tile allocation fits in `chunk_bytes`.
pub fn max_hidden_under_fragmentation(chunk_bytes: u64, tiles: u64, model: &AllocationModel) -> u64 {
    if model.largest_coefficient() == 0 {
        return u64::MAX;
    }
    let fits = |hd: u64| model.largest_allocation(hd, tiles) <= chunk_bytes as u128;
    let (mut lo, mut hi) = (0u64, 1u64);
    while fits(hi) {
        lo = hi;
        match hi.checked_mul(2) {
            Some(h) if h < u64::MAX / 2 => hi = h,
            _ => return hi,
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
