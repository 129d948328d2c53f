//! Dense layer kernels shared by the tiled executor, the training harness
//! and its monolithic reference.
//!
//! Weights are row-major `out x in`; batches are row-major `batch x width`.
//! Every sum runs in a fixed index order, so splitting a layer into row
//! blocks and running the blocks in order reproduces the unsplit bits.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    /// tanh approximation of GELU.
    GeluApprox,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::GeluApprox => "gelu",
        }
    }

    pub fn apply<F: Float>(self, z: F) -> F {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(F::zero()),
            Activation::GeluApprox => {
                let (half, one, k, c) = gelu_consts::<F>();
                half * z * (one + (k * (z + c * z * z * z)).tanh())
            }
        }
    }

    /// Derivative at pre-activation `z`.
    pub fn derivative<F: Float>(self, z: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::GeluApprox => {
                let (half, one, k, c) = gelu_consts::<F>();
                let three = F::from(3.0).unwrap();
                let u = k * (z + c * z * z * z);
                let th = u.tanh();
                let du = k * (one + three * c * z * z);
                half * (one + th) + half * z * (one - th * th) * du
            }
        }
    }
}

fn gelu_consts<F: Float>() -> (F, F, F, F) {
    (
        F::from(0.5).unwrap(),
        F::one(),
        F::from(0.797_884_560_802_865_4).unwrap(),
        F::from(0.044_715).unwrap(),
    )
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "none" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" | "gelu-approx" | "gelu_approx" => Ok(Activation::GeluApprox),
            other => Err(alloc::format!("unknown activation `{other}`")),
        }
    }
}

/// `y[n][o] = (sum_i w[o][i] * x[n][i]) + b[o]` for the `rows` output rows in `w`.
pub fn linear_forward<F: Float>(w: &[F], b: &[F], x: &[F], batch: usize, in_dim: usize) -> Vec<F> {
    let rows = b.len();
    debug_assert_eq!(w.len(), rows * in_dim);
    debug_assert_eq!(x.len(), batch * in_dim);
    let mut y = Vec::with_capacity(batch * rows);
    for n in 0..batch {
        let xn = &x[n * in_dim..(n + 1) * in_dim];
        for o in 0..rows {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = F::zero();
            for i in 0..in_dim {
                acc = acc + wo[i] * xn[i];
            }
            y.push(acc + b[o]);
        }
    }
    y
}

/// Gradients of a linear layer block. `g` is `batch x rows`; `gx` is
/// accumulated into (`batch x in_dim`), output row by output row, so calling
/// this for consecutive row blocks matches a single call on the whole layer.
pub fn linear_backward<F: Float>(
    w: &[F],
    x: &[F],
    g: &[F],
    batch: usize,
    in_dim: usize,
    gx: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let rows = g.len().checked_div(batch).unwrap_or(0);
    debug_assert_eq!(w.len(), rows * in_dim);
    let mut gw = alloc::vec![F::zero(); rows * in_dim];
    let mut gb = alloc::vec![F::zero(); rows];
    for n in 0..batch {
        let xn = &x[n * in_dim..(n + 1) * in_dim];
        for o in 0..rows {
            let go = g[n * rows + o];
            gb[o] = gb[o] + go;
            let gwo = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gwo[i] = gwo[i] + go * xn[i];
            }
        }
    }
    for n in 0..batch {
        let gxn = &mut gx[n * in_dim..(n + 1) * in_dim];
        for o in 0..rows {
            let go = g[n * rows + o];
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gxn[i] = gxn[i] + wo[i] * go;
            }
        }
    }
    (gw, gb)
}

/// Columns `cols` of a row-major `batch x width` matrix.
pub fn take_columns<F: Copy>(m: &[F], batch: usize, width: usize, cols: core::ops::Range<usize>) -> Vec<F> {
    let mut out = Vec::with_capacity(batch * cols.len());
    for n in 0..batch {
        out.extend_from_slice(&m[n * width + cols.start..n * width + cols.end]);
    }
    out
}

/// Squared error averaged over the output width, per sample.
pub fn mse<F: Float>(y: &[F], target: &[F]) -> F {
    let mut acc = F::zero();
    for (a, t) in y.iter().zip(target) {
        let d = *a - *t;
        acc = acc + d * d;
    }
    acc / F::from(y.len().max(1)).unwrap()
}

/// Gradient of [`mse`] with respect to `y`.
pub fn mse_grad<F: Float>(y: &[F], target: &[F]) -> Vec<F> {
    let scale = F::from(2.0).unwrap() / F::from(y.len().max(1)).unwrap();
    y.iter().zip(target).map(|(a, t)| (*a - *t) * scale).collect()
}
