//! Parameters sharded across simulated data-parallel ranks.
//!
//! Each rank owns one `ceil(len / world)`-element shard stored under
//! `key/rank<r>`. Gathering issues every shard read before waiting on any of
//! them, so an asynchronous store services them in parallel.

use infinisim_core::collective::{self, shard_key, shard_len};
use infinisim_core::{DType, TierKind, TypedArray};

use crate::store::{StoreError, TierStore};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionedTensor {
    pub key: String,
    pub full_len: usize,
    pub dtype: DType,
    pub world_size: usize,
    pub shard_len: usize,
    pub tier: TierKind,
}

impl PartitionedTensor {
    pub fn new(key: &str, full_len: usize, dtype: DType, world_size: usize, tier: TierKind) -> Self {
        PartitionedTensor {
            key: key.to_string(),
            full_len,
            dtype,
            world_size,
            shard_len: shard_len(full_len, world_size),
            tier,
        }
    }

    pub fn shard_key(&self, rank: usize) -> String {
        shard_key(&self.key, rank)
    }

    pub fn shard_bytes(&self) -> u64 {
        (self.shard_len * self.dtype.size()) as u64
    }
}

/// Bytes moved over each rank's path by a collective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub per_rank_bytes: Vec<u64>,
}

impl Transfer {
    pub fn total(&self) -> u64 {
        self.per_rank_bytes.iter().sum()
    }
}

/// Splits `full` into `world_size` padded shards and writes them to `tier`.
pub fn partition(
    store: &TierStore,
    key: &str,
    full: &TypedArray,
    world_size: usize,
    tier: TierKind,
) -> Result<PartitionedTensor, Error> {
    if full.is_empty() || world_size == 0 {
        return Err(Error::Shape(format!("cannot partition `{key}` of {} elements over {world_size} ranks", full.len())));
    }
    let pt = PartitionedTensor::new(key, full.len(), full.dtype(), world_size, tier);
    let tickets = collective::split_padded_typed(full, world_size)
        .into_iter()
        .enumerate()
        .map(|(r, shard)| store.write(&pt.shard_key(r), shard, tier))
        .collect::<Result<Vec<_>, StoreError>>()?;
    store.flush(&tickets)?;
    Ok(pt)
}

/// Reassembles the full tensor from every rank's shard.
pub fn allgather(store: &TierStore, pt: &PartitionedTensor) -> Result<(TypedArray, Transfer), Error> {
    let tickets = (0..pt.world_size)
        .map(|r| store.read(&pt.shard_key(r), pt.tier))
        .collect::<Result<Vec<_>, StoreError>>()?;
    store.flush(&tickets)?;
    let mut full = TypedArray::zeros(pt.dtype, 0);
    let mut per_rank_bytes = Vec::with_capacity(pt.world_size);
    for t in &tickets {
        let shard = t.take_data()?;
        if shard.dtype() != pt.dtype || shard.len() != pt.shard_len {
            return Err(Error::Shape(format!("shard `{}` has {} {} elements", t.key(), shard.len(), shard.dtype().name())));
        }
        per_rank_bytes.push(shard.byte_len() as u64);
        full.extend_from(&shard);
    }
    full.resize(pt.full_len);
    Ok((full, Transfer { per_rank_bytes }))
}

/// Elementwise sum of per-rank contributions, added in rank order, returned
/// as the shard each rank owns.
pub fn reduce_scatter(contribs: &[TypedArray], world_size: usize) -> Result<Vec<TypedArray>, Error> {
    let first = contribs.first().ok_or_else(|| Error::Shape("no contributions".into()))?;
    if world_size == 0 {
        return Err(Error::Shape("world size 0".into()));
    }
    macro_rules! sum {
        ($variant:ident) => {{
            let views = contribs
                .iter()
                .map(|c| match c {
                    TypedArray::$variant(v) => Ok(&v[..]),
                    other => Err(Error::Shape(format!("mixed dtypes: {}", other.dtype().name()))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            collective::reduce_scatter_sum(&views, world_size)?.into_iter().map(TypedArray::$variant).collect()
        }};
    }
    Ok(match first {
        TypedArray::F32(_) => sum!(F32),
        TypedArray::F16(_) => sum!(F16),
        TypedArray::F64(_) => sum!(F64),
    })
}

/// Fetches a tensor held whole by one owner. Same data as an allgather, but
/// every byte crosses the owner's single path.
pub fn broadcast_fetch(
    store: &TierStore,
    key: &str,
    tier: TierKind,
    owner: usize,
    world_size: usize,
) -> Result<(TypedArray, Transfer), Error> {
    let data = store.read_now(key, tier)?;
    let mut per_rank_bytes = vec![0; world_size.max(owner + 1)];
    per_rank_bytes[owner] = data.byte_len() as u64;
    Ok((data, Transfer { per_rank_bytes }))
}

/// Deletes every shard of `pt`.
pub fn remove(store: &TierStore, pt: &PartitionedTensor) -> Result<(), Error> {
    for r in 0..pt.world_size {
        store.delete(&pt.shard_key(r), pt.tier)?;
    }
    Ok(())
}
