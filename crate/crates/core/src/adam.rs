//! Adam with bias correction on fp32 master weights, one chunk at a time.
//!
//! Elements are updated independently, so any chunking of a shard gives the
//! same bits as a single pass.

use half::f16;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Number of completed steps.
    pub step: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain("adam needs 0 <= beta < 1, eps > 0 and a finite lr"))
        }
    }

    /// Bias corrections `(1 - beta1^t, 1 - beta2^t)` for step `t`.
    pub fn corrections(&self, t: u64) -> (f32, f32) {
        let t = t.min(i32::MAX as u64) as f32;
        (1.0 - libm::powf(self.beta1, t), 1.0 - libm::powf(self.beta2, t))
    }
}

/// Applies step `t` (1-based) to one chunk. Updates master, momentum and
/// variance in place and writes the rounded fp16 copy of the new master.
pub fn adam_update_chunk(
    hyper: &AdamHyper,
    t: u64,
    master: &mut [f32],
    momentum: &mut [f32],
    variance: &mut [f32],
    grad: &[f16],
    param16: &mut [f16],
) -> Result<()> {
    let n = master.len();
    if momentum.len() != n || variance.len() != n || grad.len() != n || param16.len() != n {
        return Err(Error::Shape(alloc::format!("adam chunk of {n} with mismatched state lengths")));
    }
    if t == 0 {
        return Err(Error::Domain("adam step counter starts at 1"));
    }
    let (c1, c2) = hyper.corrections(t);
    for i in 0..n {
        let g = grad[i].to_f32();
        let m = hyper.beta1 * momentum[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * variance[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m / c1;
        let v_hat = v / c2;
        let p = master[i] - hyper.lr * m_hat / (libm::sqrtf(v_hat) + hyper.eps);
        momentum[i] = m;
        variance[i] = v;
        master[i] = p;
        param16[i] = f16::from_f32(p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_step() {
        let h = AdamHyper { lr: 0.1, ..Default::default() };
        let (mut p, mut m, mut v, mut p16) = (vec![1.0f32], vec![0.0f32], vec![0.0f32], vec![f16::ZERO]);
        adam_update_chunk(&h, 1, &mut p, &mut m, &mut v, &[f16::ONE], &mut p16).unwrap();
        assert!((m[0] - 0.1).abs() < 1e-7);
        assert!((v[0] - 0.001).abs() < 1e-7);
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] as f64 - expected).abs() < 1e-6, "{}", p[0]);
        assert_eq!(p16[0], f16::from_f32(p[0]));
    }

    #[test]
    fn step_zero_rejected() {
        let h = AdamHyper::default();
        let mut a = vec![0.0f32];
        let mut b = vec![0.0f32];
        let mut c = vec![0.0f32];
        let mut d = vec![f16::ZERO];
        assert!(adam_update_chunk(&h, 0, &mut a, &mut b, &mut c, &[f16::ONE], &mut d).is_err());
        assert!(AdamHyper { beta1: 1.0, ..h }.validate().is_err());
    }
}
