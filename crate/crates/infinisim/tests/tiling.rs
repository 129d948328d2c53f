mod common;

use common::{check_tiling, dense_forward, rel_err};
use infinisim::store::{StoreConfig, TierStore};
use infinisim::tiled::{backward_tiled, forward_tiled, reassemble, tile_array, tile_linear};
use infinisim_core::tiling::{max_hidden_under_fragmentation, AllocationModel};
use infinisim_core::{TierKind, TypedArray};
use proptest::prelude::*;

const TILE_COUNTS: [usize; 6] = [1, 2, 3, 4, 7, 16];

#[test]
fn tiled_matches_dense_oracle_f64() {
    for (in_dim, out_dim, batch) in [(8, 32, 3), (20, 48, 5), (128, 512, 4)] {
        for t in TILE_COUNTS {
            let c = check_tiling::<f64>(in_dim, out_dim, batch, t, 100 + t as u64);
            assert!(c.worst() < 1e-12, "{in_dim}x{out_dim} T={t}: {}", c.worst());
        }
    }
}

#[test]
fn tiled_matches_dense_oracle_f32() {
    for (in_dim, out_dim, batch) in [(8, 32, 3), (20, 48, 5), (128, 512, 4)] {
        for t in TILE_COUNTS {
            let c = check_tiling::<f32>(in_dim, out_dim, batch, t, 200 + t as u64);
            assert!(c.worst() < 1e-5, "{in_dim}x{out_dim} T={t}: {}", c.worst());
        }
    }
}

#[test]
fn resident_tile_bytes_shrink_with_tiles() {
    let mut last = u64::MAX;
    for t in TILE_COUNTS {
        let c = check_tiling::<f32>(64, 112, 2, t, 9);
        let share = c.untiled_bytes.div_ceil(t as u64);
        assert!(c.forward_peak <= share + c.pool_buffer, "T={t}: {} > {share}", c.forward_peak);
        // backward also holds the tile's gradient
        assert!(c.backward_peak <= 2 * share + c.pool_buffer, "T={t}: {}", c.backward_peak);
        assert!(c.forward_peak <= last);
        last = c.forward_peak;
    }
}

#[test]
fn ceil_split_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = TierStore::create(StoreConfig::new(dir.path())).unwrap();
    let w: Vec<f64> = (0..30).map(|i| i as f64 * 0.5).collect();
    let b: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
    let tl = tile_linear(&s, "w", &w, &b, 10, 3, 4, TierKind::Nvme).unwrap();
    let rows: Vec<usize> = tl.rows.iter().map(|r| r.len()).collect();
    assert_eq!(rows, vec![3, 3, 3, 1]);
    let (w2, b2) = reassemble::<f64>(&s, &tl).unwrap();
    assert_eq!((w2, b2), (w.clone(), b.clone()));
    // tile 3 is the last weight row followed by its bias
    assert!(tile_array(&s, &tl, 3).unwrap().bit_eq(&TypedArray::F64(vec![13.5, 14.0, 14.5, -9.0])));

    let one = tile_linear(&s, "w1", &w, &b, 10, 3, 1, TierKind::Host).unwrap();
    let mut whole = w.clone();
    whole.extend(&b);
    assert!(tile_array(&s, &one, 0).unwrap().bit_eq(&TypedArray::F64(whole)));

    assert!(tile_linear(&s, "bad", &w, &b, 10, 3, 11, TierKind::Host).is_err());
    assert!(tile_linear(&s, "bad", &w, &b, 10, 3, 0, TierKind::Host).is_err());
}

#[test]
fn zero_inputs_and_zero_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let s = TierStore::create(StoreConfig::new(dir.path())).unwrap();
    let w: Vec<f64> = (0..48).map(|i| (i as f64).cos()).collect();
    let b: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let tl = tile_linear(&s, "w", &w, &b, 12, 4, 12, TierKind::Host).unwrap();
    let y = forward_tiled(&s, &tl, &[0.0; 8], 2).unwrap();
    assert_eq!(&y[..12], &b[..]);
    assert_eq!(&y[12..], &b[..]);
    let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let g = backward_tiled(&s, &tl, &x, &[0.0; 24], 2).unwrap();
    assert!(g.grad_w.iter().flatten().chain(g.grad_b.iter().flatten()).chain(&g.grad_x).all(|&v| v == 0.0));
    // one row per tile is still the dense product
    let y = forward_tiled(&s, &tl, &x, 2).unwrap();
    assert!(rel_err(&y, &dense_forward(&w, &b, &x, 2, 4, 12)) < 1e-12);
    assert!(forward_tiled(&s, &tl, &x[..7], 2).is_err());
}

#[test]
fn grad_x_matches_finite_differences() {
    // loss = sum(c * y) so dL/dy = c
    let (in_dim, out_dim, batch) = (8, 16, 2);
    let dir = tempfile::tempdir().unwrap();
    let s = TierStore::create(StoreConfig::new(dir.path())).unwrap();
    let w: Vec<f64> = (0..in_dim * out_dim).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let b: Vec<f64> = (0..out_dim).map(|i| i as f64 / 16.0).collect();
    let c: Vec<f64> = (0..batch * out_dim).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
    let x: Vec<f64> = (0..batch * in_dim).map(|i| (i as f64 * 0.3).sin()).collect();
    let tl = tile_linear(&s, "w", &w, &b, out_dim, in_dim, 4, TierKind::Host).unwrap();
    let loss = |x: &[f64]| -> f64 { forward_tiled(&s, &tl, x, batch).unwrap().iter().zip(&c).map(|(y, c)| y * c).sum() };
    let analytic = backward_tiled(&s, &tl, &x, &c, batch).unwrap().grad_x;
    let h = 1e-5;
    for i in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
        assert!(rel < 1e-6, "x[{i}]: fd {fd} vs {}", analytic[i]);
    }
}

#[test]
fn fragmentation_bound_follows_square_root_law() {
    let chunk = 2_000_000_000u64;
    let fp32 = AllocationModel::with_fp32_states();
    assert_eq!(max_hidden_under_fragmentation(chunk, 1, &fp32), 11_180);
    let fits = |hd: u64, t: u64| fp32.largest_allocation(hd, t) <= chunk as u128;
    assert!(fits(8 * 1024, 1) && !fits(16 * 1024, 1));

    for model in [AllocationModel::fp16_working(), fp32] {
        let c = model.largest_coefficient() as f64;
        let base = max_hidden_under_fragmentation(chunk, 1, &model);
        let mut last = base;
        for t in [1u64, 2, 3, 4, 7, 16, 64] {
            let hd = max_hidden_under_fragmentation(chunk, t, &model);
            // closed form: c * hd^2 / t <= chunk
            let exact = (chunk as f64 * t as f64 / c).sqrt();
            assert!((hd as f64 - exact.floor()).abs() <= 1.0, "T={t}: {hd} vs {exact}");
            let scaled = ((t as f64).sqrt() * base as f64).floor() as u64;
            assert!(hd >= scaled && hd <= ((t as f64).sqrt() * (base + 1) as f64) as u64, "T={t}");
            assert!(hd >= last);
            last = hd;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_shapes_agree_with_oracle(
        in_dim in 1usize..24,
        out_dim in 1usize..40,
        batch in 1usize..4,
        t_seed in 0usize..1000,
        seed in any::<u64>(),
    ) {
        let tiles = 1 + t_seed % out_dim;
        prop_assume!(infinisim_core::tiling::row_splits(out_dim, tiles).is_ok());
        let c = check_tiling::<f64>(in_dim, out_dim, batch, tiles, seed);
        prop_assert!(c.worst() < 1e-12);
    }

    #[test]
    fn bound_is_monotone(chunk in 1u64..1_000_000_000_000, t1 in 1u64..64, dt in 0u64..64) {
        let m = AllocationModel::default();
        prop_assert!(max_hidden_under_fragmentation(chunk, t1 + dt, &m) >= max_hidden_under_fragmentation(chunk, t1, &m));
        prop_assert!(max_hidden_under_fragmentation(chunk + chunk / 3 + 1, t1, &m) >= max_hidden_under_fragmentation(chunk, t1, &m));
    }
}
