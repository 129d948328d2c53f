//! Shard arithmetic and the fixed-order reduce-scatter.
//!
//! A tensor of `n` elements split over `world` ranks gives every rank
//! `ceil(n / world)` elements; the tail of the last shard is zero padding.

use alloc::vec::Vec;
use core::ops::{Add, Range};

use crate::dtype::{Element, TypedArray};
use crate::error::{Error, Result};

pub fn shard_len(full_len: usize, world: usize) -> usize {
    full_len.div_ceil(world.max(1))
}

/// Element range of rank `r`'s shard in the padded tensor.
pub fn shard_range(full_len: usize, world: usize, rank: usize) -> Range<usize> {
    let s = shard_len(full_len, world);
    rank * s..(rank + 1) * s
}

/// Per-rank key of a partitioned tensor.
pub fn shard_key(key: &str, rank: usize) -> alloc::string::String {
    alloc::format!("{key}/rank{rank}")
}

pub fn split_padded<T: Element>(full: &[T], world: usize) -> Vec<Vec<T>> {
    let s = shard_len(full.len(), world);
    (0..world)
        .map(|r| {
            let mut shard: Vec<T> = full.iter().skip(r * s).take(s).copied().collect();
            shard.resize(s, T::zero());
            shard
        })
        .collect()
}

pub fn split_padded_typed(full: &TypedArray, world: usize) -> Vec<TypedArray> {
    let s = shard_len(full.len(), world);
    (0..world)
        .map(|r| {
            let start = (r * s).min(full.len());
            let take = s.min(full.len() - start);
            let mut shard = full.slice(start, take);
            shard.resize(s);
            shard
        })
        .collect()
}

/// Concatenates shards and drops the padding.
pub fn gather_truncate<T: Element>(shards: &[Vec<T>], full_len: usize) -> Vec<T> {
    let mut out: Vec<T> = shards.iter().flatten().copied().collect();
    out.truncate(full_len);
    out
}

/// Elementwise sum of `contribs`, added in rank order, returned as `world`
/// padded shards. Rank `r` receives shard `r`.
pub fn reduce_scatter_sum<T>(contribs: &[&[T]], world: usize) -> Result<Vec<Vec<T>>>
where
    T: Element + Add<Output = T>,
{
    let Some(first) = contribs.first() else {
        return Err(Error::Shape(alloc::string::String::from("no contributions")));
    };
    let n = first.len();
    if let Some(bad) = contribs.iter().find(|c| c.len() != n) {
        return Err(Error::Shape(alloc::format!("contribution of length {} vs {n}", bad.len())));
    }
    let mut sum: Vec<T> = first.to_vec();
    for c in &contribs[1..] {
        for (a, &b) in sum.iter_mut().zip(c.iter()) {
            *a = *a + b;
        }
    }
    Ok(split_padded(&sum, world))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn ten_over_four() {
        assert_eq!(shard_len(10, 4), 3);
        let shards = split_padded(&[1.0f32, 2., 3., 4., 5., 6., 7., 8., 9., 10.], 4);
        assert_eq!(shards[3], vec![10.0, 0.0, 0.0]);
        assert_eq!(shard_range(10, 4, 3), 9..12);
        assert_eq!(shard_key("w", 2), "w/rank2");
    }

    #[test]
    fn world_one_is_identity() {
        let x = [1.5f64, -2.0, 3.25];
        assert_eq!(split_padded(&x, 1), vec![x.to_vec()]);
        assert_eq!(reduce_scatter_sum(&[&x[..]], 1).unwrap(), vec![x.to_vec()]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = [1.0f32, 2.0];
        let b = [1.0f32];
        assert!(matches!(reduce_scatter_sum(&[&a[..], &b[..]], 2), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn split_then_gather_round_trips(v in prop::collection::vec(-1e6f64..1e6, 1..300), world in 1usize..17) {
            let shards = split_padded(&v, world);
            prop_assert_eq!(shards.len(), world);
            prop_assert!(shards.iter().all(|s| s.len() == shard_len(v.len(), world)));
            prop_assert_eq!(gather_truncate(&shards, v.len()), v);
        }

        #[test]
        fn reduce_scatter_matches_sequential_sum(
            world in 1usize..9,
            len in 1usize..64,
            seed in prop::collection::vec(-1e3f32..1e3, 8 * 64),
        ) {
            let contribs: Vec<&[f32]> = (0..world).map(|r| &seed[r * len..(r + 1) * len]).collect();
            let shards = reduce_scatter_sum(&contribs, world).unwrap();
            let gathered = gather_truncate(&shards, len);
            for i in 0..len {
                let mut acc = 0.0f32;
                for c in &contribs {
                    acc += c[i];
                }
                prop_assert_eq!(gathered[i].to_bits(), acc.to_bits());
            }
        }
    }
}
