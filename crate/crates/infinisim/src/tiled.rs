//! Linear layers stored as row-block tiles and executed one tile at a time.
//!
//! Tile `t` holds its weight rows followed by its bias rows. While a tile is
//! in use its bytes are reserved on the device tier, so the device peak
//! shows the resident working set.

use std::ops::Range;

use infinisim_core::mlp::{linear_backward, linear_forward, take_columns};
use infinisim_core::tiling::row_splits;
use infinisim_core::{DType, Element, TierKind, TypedArray};
use num_traits::Float;

use crate::store::TierStore;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TiledLinear {
    pub key: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub rows: Vec<Range<usize>>,
    pub dtype: DType,
    pub tier: TierKind,
}

impl TiledLinear {
    pub fn tiles(&self) -> usize {
        self.rows.len()
    }

    pub fn tile_key(&self, t: usize) -> String {
        format!("{}.tile{t}", self.key)
    }

    pub fn tile_bytes(&self, t: usize) -> u64 {
        (self.rows[t].len() * (self.in_dim + 1) * self.dtype.size()) as u64
    }

    pub fn untiled_bytes(&self) -> u64 {
        (self.out_dim * (self.in_dim + 1) * self.dtype.size()) as u64
    }

    fn load<F: Element>(&self, store: &TierStore, t: usize) -> Result<(Vec<F>, Vec<F>), Error> {
        let data = store.read_now(&self.tile_key(t), self.tier)?;
        let found = data.dtype();
        let mut v = F::unwrap(data).ok_or_else(|| Error::Shape(format!("tile holds {} data", found.name())))?;
        let rows = self.rows[t].len();
        if v.len() != rows * (self.in_dim + 1) {
            return Err(Error::Shape(format!("tile {t} of `{}` has {} elements", self.key, v.len())));
        }
        let b = v.split_off(rows * self.in_dim);
        Ok((v, b))
    }
}

/// Splits `w` (`out_dim x in_dim`, row-major) and `b` into `tiles` row blocks
/// and stores them on `tier`.
#[allow(clippy::too_many_arguments)]
pub fn tile_linear<F: Element>(
    store: &TierStore,
    key: &str,
    w: &[F],
    b: &[F],
    out_dim: usize,
    in_dim: usize,
    tiles: usize,
    tier: TierKind,
) -> Result<TiledLinear, Error> {
    if w.len() != out_dim * in_dim || b.len() != out_dim {
        return Err(Error::Shape(format!("weight {} / bias {} for {out_dim}x{in_dim}", w.len(), b.len())));
    }
    let rows = row_splits(out_dim, tiles)?;
    let tl = TiledLinear { key: key.to_string(), in_dim, out_dim, rows, dtype: F::DTYPE, tier };
    let mut tickets = Vec::with_capacity(tiles);
    for (t, r) in tl.rows.iter().enumerate() {
        let mut data = w[r.start * in_dim..r.end * in_dim].to_vec();
        data.extend_from_slice(&b[r.clone()]);
        tickets.push(store.write(&tl.tile_key(t), F::wrap(data), tier)?);
    }
    store.flush(&tickets)?;
    Ok(tl)
}

/// Reads every tile back into the full `(w, b)`.
pub fn reassemble<F: Element>(store: &TierStore, tl: &TiledLinear) -> Result<(Vec<F>, Vec<F>), Error> {
    let mut w = Vec::with_capacity(tl.out_dim * tl.in_dim);
    let mut b = Vec::with_capacity(tl.out_dim);
    for t in 0..tl.tiles() {
        let (wt, bt) = tl.load::<F>(store, t)?;
        w.extend(wt);
        b.extend(bt);
    }
    Ok((w, b))
}

/// `y = x W^T + b` for a `batch x in_dim` input, fetching one tile at a time.
pub fn forward_tiled<F: Element + Float>(
    store: &TierStore,
    tl: &TiledLinear,
    x: &[F],
    batch: usize,
) -> Result<Vec<F>, Error> {
    if x.len() != batch * tl.in_dim {
        return Err(Error::Shape(format!("input of {} elements for batch {batch} x {}", x.len(), tl.in_dim)));
    }
    let mut y = vec![<F as Element>::zero(); batch * tl.out_dim];
    for (t, r) in tl.rows.iter().enumerate() {
        let _resident = store.reserve(TierKind::Device, tl.tile_bytes(t))?;
        let (w, b) = tl.load::<F>(store, t)?;
        let yt = linear_forward(&w, &b, x, batch, tl.in_dim);
        for n in 0..batch {
            y[n * tl.out_dim + r.start..n * tl.out_dim + r.end].copy_from_slice(&yt[n * r.len()..(n + 1) * r.len()]);
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiledGrads<F> {
    pub grad_w: Vec<Vec<F>>,
    pub grad_b: Vec<Vec<F>>,
    pub grad_x: Vec<F>,
}

/// Backward pass for upstream gradient `g` (`batch x out_dim`). Each tile's
/// parameters and gradients are resident only while that tile runs;
/// `grad_x` accumulates across tiles in row order.
pub fn backward_tiled<F: Element + Float>(
    store: &TierStore,
    tl: &TiledLinear,
    x: &[F],
    g: &[F],
    batch: usize,
) -> Result<TiledGrads<F>, Error> {
    if x.len() != batch * tl.in_dim || g.len() != batch * tl.out_dim {
        return Err(Error::Shape(format!(
            "input {} / upstream {} for batch {batch} of {}x{}",
            x.len(),
            g.len(),
            tl.out_dim,
            tl.in_dim
        )));
    }
    let mut grad_x = vec![<F as Element>::zero(); batch * tl.in_dim];
    let mut grad_w = Vec::with_capacity(tl.tiles());
    let mut grad_b = Vec::with_capacity(tl.tiles());
    for (t, r) in tl.rows.iter().enumerate() {
        let _resident = store.reserve(TierKind::Device, 2 * tl.tile_bytes(t))?;
        let (w, _) = tl.load::<F>(store, t)?;
        let gt = take_columns(g, batch, tl.out_dim, r.clone());
        let (gw, gb) = linear_backward(&w, x, &gt, batch, tl.in_dim, &mut grad_x);
        grad_w.push(gw);
        grad_b.push(gb);
    }
    Ok(TiledGrads { grad_w, grad_b, grad_x })
}

/// Tile contents as stored, for inspection.
pub fn tile_array(store: &TierStore, tl: &TiledLinear, t: usize) -> Result<TypedArray, Error> {
    Ok(store.read_now(&tl.tile_key(t), tl.tier)?)
}
