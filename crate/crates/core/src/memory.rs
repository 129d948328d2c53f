//! Memory requirements of a transformer-shaped model under mixed-precision Adam.
//!
//! All byte counts are exact integers computed in 128-bit arithmetic. Batch
//! size may be fractional; quantities that scale with it are evaluated in
//! floating point and rounded up to whole bytes.

use crate::config::ModelConfig;

/// Bytes per parameter held by each model-state category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelStateBreakdown {
    pub fp16_param: u32,
    pub fp16_grad: u32,
    pub fp32_momentum: u32,
    pub fp32_variance: u32,
    pub fp32_master_param: u32,
    pub fp32_grad: u32,
}

impl ModelStateBreakdown {
    pub const MIXED_PRECISION_ADAM: ModelStateBreakdown = ModelStateBreakdown {
        fp16_param: 2,
        fp16_grad: 2,
        fp32_momentum: 4,
        fp32_variance: 4,
        fp32_master_param: 4,
        fp32_grad: 4,
    };

    pub fn total(&self) -> u32 {
        self.fp16_param
            + self.fp16_grad
            + self.fp32_momentum
            + self.fp32_variance
            + self.fp32_master_param
            + self.fp32_grad
    }

    /// Optimizer-side bytes (everything except the fp16 parameter and gradient).
    pub fn optimizer(&self) -> u32 {
        self.total() - self.fp16_param - self.fp16_grad
    }
}

pub const BYTES_PER_PARAM: u128 = 20;
pub const BYTES_PER_ACTIVATION: u128 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub params: u128,
    pub model_state_bytes: u128,
    pub act_ckpt_bytes: u128,
    pub full_activation_bytes: u128,
    pub mswm_bytes: u128,
    pub awm_bytes: u128,
}

/// `12 * nl * hd^2`.
pub fn param_count(cfg: &ModelConfig) -> u128 {
    12 * cfg.nl as u128 * cfg.hd as u128 * cfg.hd as u128
}

/// `240 * nl * hd^2`, i.e. 20 bytes per parameter.
pub fn model_state_bytes(cfg: &ModelConfig) -> u128 {
    BYTES_PER_PARAM * param_count(cfg)
}

/// `ceil(bsz * numer / denom)`; exact when `bsz` is integral.
fn batch_scaled_ceil(bsz: f64, numer: u128, denom: u128) -> u128 {
    if bsz == libm::trunc(bsz) && bsz < u64::MAX as f64 {
        (bsz as u128 * numer).div_ceil(denom)
    } else {
        libm::ceil(bsz * numer as f64 / denom as f64) as u128
    }
}

/// `2 * bsz * seq * hd * nl / ci` bytes, rounded up.
pub fn activation_checkpoint_bytes(cfg: &ModelConfig) -> u128 {
    let numer = 2 * cfg.seq as u128 * cfg.hd as u128 * cfg.nl as u128;
    batch_scaled_ceil(cfg.bsz, numer, cfg.ci as u128)
}

/// Activation elements of one transformer block per sample: `seq * (16 hd + 2 heads seq)`.
fn block_activation_elements_per_sample(cfg: &ModelConfig) -> u128 {
    let seq = cfg.seq as u128;
    seq * (16 * cfg.hd as u128 + 2 * cfg.attn_heads as u128 * seq)
}

/// Activations held without checkpointing, in bytes (2 bytes per element).
pub fn full_activation_bytes(cfg: &ModelConfig) -> u128 {
    let numer = BYTES_PER_ACTIVATION * cfg.nl as u128 * block_activation_elements_per_sample(cfg);
    batch_scaled_ceil(cfg.bsz, numer, 1)
}

/// Model-state working memory: fp16 parameter and gradient of the `hd -> 4hd` linear, `16 hd^2`.
pub fn mswm_bytes(cfg: &ModelConfig) -> u128 {
    16 * cfg.hd as u128 * cfg.hd as u128
}

/// Activation elements between two consecutive checkpoints.
pub fn awm_elements(cfg: &ModelConfig) -> u128 {
    let numer = cfg.ci as u128 * block_activation_elements_per_sample(cfg);
    batch_scaled_ceil(cfg.bsz, numer, 1)
}

/// Activation working memory in bytes (2 bytes per element).
pub fn awm_bytes(cfg: &ModelConfig) -> u128 {
    let numer = BYTES_PER_ACTIVATION * cfg.ci as u128 * block_activation_elements_per_sample(cfg);
    batch_scaled_ceil(cfg.bsz, numer, 1)
}

pub fn memory_report(cfg: &ModelConfig) -> MemoryReport {
    let params = param_count(cfg);
    MemoryReport {
        params,
        model_state_bytes: BYTES_PER_PARAM * params,
        act_ckpt_bytes: activation_checkpoint_bytes(cfg),
        full_activation_bytes: full_activation_bytes(cfg),
        mswm_bytes: mswm_bytes(cfg),
        awm_bytes: awm_bytes(cfg),
    }
}
