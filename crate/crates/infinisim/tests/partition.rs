use half::f16;
use infinisim::partition::{allgather, broadcast_fetch, partition, reduce_scatter, remove, PartitionedTensor};
use infinisim::store::{IoMode, StoreConfig, TierStore};
use infinisim_core::placement::effective_param_bandwidth;
use infinisim_core::{ClusterConfig, DType, TierKind, TypedArray};
use proptest::prelude::*;

fn store(dir: &std::path::Path) -> TierStore {
    TierStore::create(StoreConfig::new(dir)).unwrap()
}

fn typed(dtype: DType, bits: &[u64]) -> TypedArray {
    match dtype {
        DType::F16 => TypedArray::F16(bits.iter().map(|&b| f16::from_bits(b as u16)).collect()),
        DType::F32 => TypedArray::F32(bits.iter().map(|&b| f32::from_bits(b as u32)).collect()),
        DType::F64 => TypedArray::F64(bits.iter().map(|&b| f64::from_bits(b)).collect()),
    }
}

#[test]
fn ten_elements_over_four_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let full = TypedArray::F32((1..=10).map(|i| i as f32).collect());
    let pt = partition(&s, "w", &full, 4, TierKind::Host).unwrap();
    assert_eq!(pt.shard_len, 3);
    let last = s.read_now("w/rank3", TierKind::Host).unwrap();
    assert!(last.bit_eq(&TypedArray::F32(vec![10.0, 0.0, 0.0])));
    let before = s.stats().tier(TierKind::Host).bytes_read;
    let (back, transfer) = allgather(&s, &pt).unwrap();
    assert!(back.bit_eq(&full));
    assert_eq!(transfer.per_rank_bytes, vec![12; 4]);
    assert_eq!(s.stats().tier(TierKind::Host).bytes_read - before, 4 * pt.shard_bytes());
}

#[test]
fn world_one_is_identity_and_missing_shard_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let full = TypedArray::F64(vec![1.5, -2.0]);
    let pt = partition(&s, "p", &full, 1, TierKind::Nvme).unwrap();
    assert!(s.read_now("p/rank0", TierKind::Nvme).unwrap().bit_eq(&full));
    s.delete("p/rank0", TierKind::Nvme).unwrap();
    let err = allgather(&s, &pt).unwrap_err();
    assert!(err.to_string().contains("p/rank0"), "{err}");
    assert!(partition(&s, "e", &TypedArray::F32(vec![]), 2, TierKind::Host).is_err());
}

#[test]
fn broadcast_charges_one_path() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let full = TypedArray::F16((0..33).map(|i| f16::from_f32(i as f32)).collect());
    s.write_now("whole", full.clone(), TierKind::Host).unwrap();
    let pt = partition(&s, "split", &full, 4, TierKind::Host).unwrap();
    let (a, ta) = allgather(&s, &pt).unwrap();
    let (b, tb) = broadcast_fetch(&s, "whole", TierKind::Host, 2, 4).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(tb.per_rank_bytes, vec![0, 0, 66, 0]);
    assert_eq!(ta.per_rank_bytes.iter().filter(|&&x| x > 0).count(), 4);
    // the modeled bandwidths: allgather scales with ranks, broadcast does not
    for nodes in [1u64, 4, 64] {
        let c = ClusterConfig::dgx2(nodes);
        assert_eq!(effective_param_bandwidth(&c, TierKind::Host, false), 12e9);
        assert_eq!(effective_param_bandwidth(&c, TierKind::Host, true), 48e9 * nodes as f64);
    }
}

#[test]
fn all_zero_contributions_give_zero_shards() {
    let z = TypedArray::zeros(DType::F32, 9);
    let shards = reduce_scatter(&[z.clone(), z.clone(), z], 3).unwrap();
    for s in shards {
        assert!(s.bit_eq(&TypedArray::zeros(DType::F32, 3)));
    }
    assert!(reduce_scatter(&[TypedArray::zeros(DType::F32, 3), TypedArray::zeros(DType::F32, 4)], 2).is_err());
    assert!(reduce_scatter(&[TypedArray::zeros(DType::F32, 3), TypedArray::zeros(DType::F64, 3)], 2).is_err());
}

#[test]
fn partition_is_deterministic_on_disk() {
    let full = TypedArray::F32((0..1000).map(|i| (i as f32).sin()).collect());
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        partition(&s, "w", &full, 3, TierKind::Nvme).unwrap();
        drop(s);
        let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        files.push(names.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn concurrent_gather_matches_sequential() {
    let full = TypedArray::F32((0..200_000).map(|i| i as f32).collect());
    for io in [IoMode::Sync, IoMode::Async { workers: 4 }] {
        let dir = tempfile::tempdir().unwrap();
        let s = TierStore::create(StoreConfig::new(dir.path()).with_io(io)).unwrap();
        let pt = partition(&s, "big", &full, 8, TierKind::Nvme).unwrap();
        assert!(allgather(&s, &pt).unwrap().0.bit_eq(&full));
        remove(&s, &pt).unwrap();
        assert!(s.keys(TierKind::Nvme).is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_then_allgather_is_identity(
        bits in prop::collection::vec(any::<u64>(), 1..2_000),
        world in 1usize..18,
        dt in 0usize..3,
        tier_ix in 0usize..3,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let dtype = [DType::F16, DType::F32, DType::F64][dt];
        let full = typed(dtype, &bits);
        let pt = partition(&s, "t", &full, world, TierKind::ALL[tier_ix]).unwrap();
        prop_assert!(pt.shard_len * world >= full.len());
        prop_assert!((pt.shard_len - 1) * world < full.len());
        let (back, t) = allgather(&s, &pt).unwrap();
        prop_assert!(back.bit_eq(&full));
        prop_assert_eq!(t.total(), world as u64 * pt.shard_bytes());
        prop_assert_eq!(&pt, &PartitionedTensor::new("t", full.len(), dtype, world, TierKind::ALL[tier_ix]));
    }

    #[test]
    fn reduce_scatter_equals_sequential_sum(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 37), 1..9),
        world in 1usize..9,
    ) {
        let contribs: Vec<TypedArray> = rows.iter().map(|r| TypedArray::F64(r.clone())).collect();
        let shards = reduce_scatter(&contribs, world).unwrap();
        prop_assert_eq!(shards.len(), world);
        let mut gathered = Vec::new();
        for s in &shards {
            let TypedArray::F64(v) = s else { panic!("dtype changed") };
            gathered.extend_from_slice(v);
        }
        for i in 0..37 {
            let mut want = 0.0;
            for r in &rows {
                want += r[i];
            }
            prop_assert_eq!(gathered[i].to_bits(), want.to_bits());
        }
        prop_assert!(gathered[37..].iter().all(|&x| x == 0.0));

        // f32 follows the same fixed order
        let c32: Vec<TypedArray> = rows.iter().map(|r| TypedArray::F32(r.iter().map(|&x| x as f32).collect())).collect();
        let s32 = reduce_scatter(&c32, world).unwrap();
        let mut g32 = Vec::new();
        for s in &s32 {
            let TypedArray::F32(v) = s else { panic!("dtype changed") };
            g32.extend_from_slice(v);
        }
        for i in 0..37 {
            let mut want = 0.0f32;
            for r in &rows {
                want += r[i] as f32;
            }
            prop_assert_eq!(g32[i].to_bits(), want.to_bits());
        }
    }
}
