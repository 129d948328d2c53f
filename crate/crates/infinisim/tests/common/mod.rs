//! Reference implementations the integration tests compare against. Each is
//! written from the definition, without sharing code with the crate.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;

use half::f16;
use infinisim::store::{IoMode, PoolPolicy, PoolSpec, StoreConfig, StoreError, TierStore, HEADER_LEN, MAGIC};
use infinisim_core::overlap::{PrefetchDepths, StageCosts};
use infinisim_core::{TierKind, TypedArray};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `y[n][o] = sum_i w[o][i] * x[n][i] + b[o]`, summed from the bias up.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64], batch: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out_dim];
    for n in 0..batch {
        for o in 0..out_dim {
            let mut s = b[o];
            for i in 0..in_dim {
                s += w[o * in_dim + i] * x[n * in_dim + i];
            }
            y[n * out_dim + o] = s;
        }
    }
    y
}

/// `(dW, db, dx)` of the dense layer for upstream gradient `g`.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    g: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; out_dim * in_dim];
    let mut gb = vec![0.0; out_dim];
    let mut gx = vec![0.0; batch * in_dim];
    for n in 0..batch {
        for o in 0..out_dim {
            let go = g[n * out_dim + o];
            gb[o] += go;
            for i in 0..in_dim {
                gw[o * in_dim + i] += go * x[n * in_dim + i];
                gx[n * in_dim + i] += go * w[o * in_dim + i];
            }
        }
    }
    (gw, gb, gx)
}

/// `max |a - b| / max |b|` (absolute error when `b` is all zero).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Start and end tick of every forward stage, `[nc, cg, gg, compute]` per
/// operator, from a tick-by-tick simulation. Stage costs must be whole ticks
/// of at least one.
///
/// Rules: each of the four lanes runs one stage at a time and serves its
/// operators in sequence order. A fetch stage for operator `j` at depth `d`
/// becomes eligible once compute of `j - d` has started (immediately when
/// `j < d`) and its previous fetch stage has finished. Compute `j` needs
/// `gg(j)` finished.
pub fn tick_forward(costs: &[[u64; 4]], depths: PrefetchDepths) -> (Vec<[(u64, u64); 4]>, u64) {
    let n = costs.len();
    let depth = [depths.nc, depths.cg, depths.gg];
    let mut start: Vec<[Option<u64>; 4]> = vec![[None; 4]; n];
    let mut end: Vec<[Option<u64>; 4]> = vec![[None; 4]; n];
    let mut next = [0usize; 4];
    let mut busy_until = [0u64; 4];
    let mut t = 0u64;
    let mut remaining = 4 * n;
    while remaining > 0 {
        // start everything that can start at tick t; repeat because a
        // compute start at t can release a fetch at t
        loop {
            let mut progressed = false;
            for lane in 0..4 {
                let j = next[lane];
                if j >= n || busy_until[lane] > t {
                    continue;
                }
                let ready = if lane < 3 {
                    let released = j < depth[lane] || start[j - depth[lane]][3].is_some_and(|s| s <= t);
                    let prev_done = lane == 0 || end[j][lane - 1].is_some_and(|e| e <= t);
                    released && prev_done
                } else {
                    end[j][2].is_some_and(|e| e <= t)
                };
                if ready {
                    start[j][lane] = Some(t);
                    end[j][lane] = Some(t + costs[j][lane]);
                    busy_until[lane] = t + costs[j][lane];
                    next[lane] += 1;
                    remaining -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        t += 1;
        assert!(t < 1 << 40, "tick oracle did not terminate");
    }
    let spans: Vec<[(u64, u64); 4]> = (0..n)
        .map(|j| std::array::from_fn(|s| (start[j][s].unwrap(), end[j][s].unwrap())))
        .collect();
    let total = spans.iter().map(|s| s[3].1).max().unwrap_or(0);
    (spans, total)
}

pub fn stage_costs_from(c: [u64; 4]) -> StageCosts {
    StageCosts { nc: c[0] as f64, cg: c[1] as f64, gg: c[2] as f64, compute: c[3] as f64, ..StageCosts::default() }
}

pub fn stored(tier: TierKind, a: &TypedArray) -> u64 {
    a.byte_len() as u64 + if tier == TierKind::Nvme { HEADER_LEN as u64 } else { 0 }
}

pub fn random_array(rng: &mut ChaCha8Rng) -> TypedArray {
    let len = 1 + (rng.next_u32() % 64) as usize;
    match rng.next_u32() % 3 {
        0 => TypedArray::F32((0..len).map(|_| f32::from_bits(rng.next_u32())).collect()),
        1 => TypedArray::F16((0..len).map(|_| f16::from_bits(rng.next_u32() as u16)).collect()),
        _ => TypedArray::F64((0..len).map(|_| f64::from_bits(rng.next_u64())).collect()),
    }
}

/// Drives `ops` random operations against the store and a map-based model of
/// it; returns the number of operations that hit a capacity limit.
pub fn randomized_store_ops(seed: u64, ops: usize, io: IoMode) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let caps = [1_500u64, 2_500, 4_000];
    let pool = PoolSpec { buffer_size: 64, buffer_count: 3, policy: PoolPolicy::Block };
    let mut cfg = StoreConfig::new(dir.path()).with_pool(pool).with_io(io);
    for t in TierKind::ALL {
        cfg = cfg.with_capacity(t, caps[t.index()]);
    }
    let store = TierStore::create(cfg).unwrap();
    let mut model: [BTreeMap<String, TypedArray>; 3] = Default::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    let keys: Vec<String> = (0..24).map(|i| format!("t{i}/rank{}", i % 3)).collect();
    for _ in 0..ops {
        let tier = TierKind::ALL[(rng.next_u32() % 3) as usize];
        let key = &keys[(rng.next_u32() as usize) % keys.len()];
        let m = &model[tier.index()];
        match rng.next_u32() % 10 {
            0..=3 => {
                let a = random_array(&mut rng);
                let used: u64 = m.values().map(|v| stored(tier, v)).sum();
                let old = m.get(key).map_or(0, |v| stored(tier, v));
                let fits = used - old + stored(tier, &a) <= caps[tier.index()];
                match store.write_now(key, a.clone(), tier) {
                    Ok(()) => {
                        assert!(fits);
                        model[tier.index()].insert(key.clone(), a);
                    }
                    Err(StoreError::CapacityExceeded { .. }) => {
                        assert!(!fits);
                        rejected += 1;
                    }
                    Err(e) => panic!("write {key}: {e}"),
                }
            }
            4..=5 => match (store.read_now(key, tier), m.get(key)) {
                (Ok(got), Some(want)) => assert!(got.bit_eq(want), "{key} on {tier}"),
                (Err(StoreError::KeyNotFound { .. }), None) => {}
                (r, w) => panic!("read {key} on {tier}: {:?} vs model {}", r.err(), w.is_some()),
            },
            6 => {
                if let Some(want) = m.get(key) {
                    let start = (rng.next_u32() as usize) % want.len();
                    let count = (rng.next_u32() as usize) % (want.len() - start + 1);
                    let got = store.read_range(key, tier, start, count).unwrap().take_data().unwrap();
                    assert!(got.bit_eq(&want.slice(start, count)));
                    assert!(store.read_range(key, tier, start, want.len() + 1).and_then(|t| t.wait()).is_err());
                }
            }
            7 => {
                let to = TierKind::ALL[(rng.next_u32() % 3) as usize];
                let Some(src) = m.get(key).cloned() else {
                    assert!(store.move_key(key, tier, to).is_err());
                    continue;
                };
                if to == tier {
                    store.move_key(key, tier, to).unwrap().wait().unwrap();
                    continue;
                }
                let dest = &model[to.index()];
                let used: u64 = dest.values().map(|v| stored(to, v)).sum();
                let old = dest.get(key).map_or(0, |v| stored(to, v));
                let fits = used - old + stored(to, &src) <= caps[to.index()];
                match store.move_key(key, tier, to) {
                    Ok(t) => {
                        t.wait().unwrap();
                        assert!(fits);
                        model[tier.index()].remove(key);
                        model[to.index()].insert(key.clone(), src);
                    }
                    Err(StoreError::CapacityExceeded { .. }) => {
                        assert!(!fits);
                        rejected += 1;
                    }
                    Err(e) => panic!("move {key}: {e}"),
                }
            }
            _ => match (store.delete(key, tier), m.contains_key(key)) {
                (Ok(()), true) => {
                    model[tier.index()].remove(key);
                }
                (Err(StoreError::KeyNotFound { .. }), false) => {}
                (r, present) => panic!("delete {key} on {tier}: {r:?} vs model {present}"),
            },
        }
        let stats = store.stats();
        for t in TierKind::ALL {
            let s = stats.tier(t);
            let want: u64 = model[t.index()].values().map(|v| stored(t, v)).sum();
            assert_eq!(s.used, want, "{t} accounting");
            assert!(s.used <= s.capacity && s.peak <= s.capacity);
            assert_eq!(store.keys(t), model[t.index()].keys().cloned().collect::<Vec<_>>());
        }
        assert_eq!(stats.pool_in_use + stats.pool_free, pool.buffer_count);
    }
    let stats = store.stats();
    assert_eq!((stats.pool_in_use, stats.pool_free), (0, pool.buffer_count));
    // every NVMe key is a file that starts with the magic
    let mut files = 0;
    for entry in fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "shard") {
            let bytes = fs::read(&path).unwrap();
            assert_eq!(&bytes[..4], MAGIC);
            files += 1;
        }
    }
    assert_eq!(files, model[TierKind::Nvme.index()].len());
    rejected
}


/// Worst relative errors of the tiled layer against [`dense_forward`] and
/// [`dense_backward`] on seeded random data, plus the device peak seen
/// during the tiled forward and backward.
pub struct TilingCheck {
    pub forward_err: f64,
    pub grad_w_err: f64,
    pub grad_b_err: f64,
    pub grad_x_err: f64,
    pub forward_peak: u64,
    pub backward_peak: u64,
    pub untiled_bytes: u64,
    pub pool_buffer: u64,
}

impl TilingCheck {
    pub fn worst(&self) -> f64 {
        self.forward_err.max(self.grad_w_err).max(self.grad_b_err).max(self.grad_x_err)
    }
}

/// `F` is `f32` or `f64`; the oracle always runs in f64 on the same
/// (rounded) inputs.
pub fn check_tiling<F>(in_dim: usize, out_dim: usize, batch: usize, tiles: usize, seed: u64) -> TilingCheck
where
    F: infinisim_core::Element + num_traits::Float,
{
    use infinisim::tiled::{backward_tiled, forward_tiled, tile_linear};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<F> {
        (0..n).map(|_| F::from((rng.next_u32() as f64 / u32::MAX as f64) * 2.0 - 1.0).unwrap()).collect()
    };
    let w = draw(out_dim * in_dim);
    let b = draw(out_dim);
    let x = draw(batch * in_dim);
    let g = draw(batch * out_dim);
    let wide = |v: &[F]| -> Vec<f64> { v.iter().map(|a| a.to_f64().unwrap()).collect() };
    let (w64, b64, x64, g64) = (wide(&w), wide(&b), wide(&x), wide(&g));

    let dir = tempfile::tempdir().unwrap();
    let store = TierStore::create(StoreConfig::new(dir.path())).unwrap();
    let tl = tile_linear(&store, "lin", &w, &b, out_dim, in_dim, tiles, TierKind::Host).unwrap();
    store.reset_peaks();
    let y = forward_tiled(&store, &tl, &x, batch).unwrap();
    let forward_peak = store.stats().tier(TierKind::Device).peak;
    store.reset_peaks();
    let grads = backward_tiled(&store, &tl, &x, &g, batch).unwrap();
    let backward_peak = store.stats().tier(TierKind::Device).peak;

    let y_ref = dense_forward(&w64, &b64, &x64, batch, in_dim, out_dim);
    let (gw_ref, gb_ref, gx_ref) = dense_backward(&w64, &x64, &g64, batch, in_dim, out_dim);
    let gw: Vec<f64> = grads.grad_w.iter().flat_map(|t| wide(t)).collect();
    let gb: Vec<f64> = grads.grad_b.iter().flat_map(|t| wide(t)).collect();
    TilingCheck {
        forward_err: rel_err(&wide(&y), &y_ref),
        grad_w_err: rel_err(&gw, &gw_ref),
        grad_b_err: rel_err(&gb, &gb_ref),
        grad_x_err: rel_err(&wide(&grads.grad_x), &gx_ref),
        forward_peak,
        backward_peak,
        untiled_bytes: tl.untiled_bytes(),
        pool_buffer: store.pool().spec().buffer_size as u64,
    }
}
