//! Arithmetic intensity and the efficiency/bandwidth relation for one device,
//! assuming no overlap between compute and data movement.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::memory::param_count;

/// Achievable per-device peak used when a cluster profile does not say otherwise.
pub const DEFAULT_PEAK_TP: f64 = 70e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AitKind {
    ParamGrad,
    OptimizerStates,
    ActivationCkpt,
}

impl AitKind {
    pub const ALL: [AitKind; 3] = [AitKind::ParamGrad, AitKind::OptimizerStates, AitKind::ActivationCkpt];

    pub fn name(self) -> &'static str {
        match self {
            AitKind::ParamGrad => "param",
            AitKind::OptimizerStates => "opt",
            AitKind::ActivationCkpt => "act",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyPoint {
    pub bandwidth: f64,
    pub ait: f64,
    pub peak_tp: f64,
    pub efficiency: f64,
}

/// Flops per iteration: forward `2 * bsz * seq * params`, backward twice
/// that, plus one recompute forward.
pub fn compute_per_iter(cfg: &ModelConfig) -> f64 {
    8.0 * cfg.bsz * cfg.seq as f64 * param_count(cfg) as f64
}

/// Flops per byte moved for the given state.
pub fn ait(kind: AitKind, cfg: &ModelConfig) -> f64 {
    let tokens = cfg.seq as f64 * cfg.bsz;
    match kind {
        AitKind::ParamGrad => tokens,
        AitKind::OptimizerStates => tokens / 4.0,
        AitKind::ActivationCkpt => 24.0 * cfg.hd as f64 * cfg.ci as f64,
    }
}

/// `ait * bw / (ait * bw + peak_tp)`.
pub fn efficiency(ait: f64, bw: f64, peak_tp: f64) -> Result<f64> {
    if !(ait > 0.0) {
        return Err(Error::Domain("ait must be positive"));
    }
    if !(peak_tp > 0.0) {
        return Err(Error::Domain("peak_tp must be positive"));
    }
    if !(bw >= 0.0) {
        return Err(Error::Domain("bandwidth must be non-negative"));
    }
    if bw == f64::INFINITY {
        return Ok(1.0);
    }
    let moved = ait * bw;
    Ok(moved / (moved + peak_tp))
}

/// Bandwidth needed to reach `target_eff`: `eff / (1 - eff) * peak_tp / ait`.
pub fn required_bandwidth(ait: f64, peak_tp: f64, target_eff: f64) -> Result<f64> {
    if !(target_eff > 0.0 && target_eff < 1.0) {
        return Err(Error::Domain("target efficiency must lie in (0, 1)"));
    }
    if !(ait > 0.0) {
        return Err(Error::Domain("ait must be positive"));
    }
    if !(peak_tp > 0.0) {
        return Err(Error::Domain("peak_tp must be positive"));
    }
    Ok(target_eff / (1.0 - target_eff) * peak_tp / ait)
}

/// `points` log-spaced values from `min` to `max`, both endpoints exact.
pub fn log_space(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && min.is_finite() && max.is_finite()) {
        return Err(Error::Domain("log grid needs 0 < min < max"));
    }
    if points < 2 {
        return Err(Error::Domain("log grid needs at least two points"));
    }
    let (lo, hi) = (libm::log(min), libm::log(max));
    let step = (hi - lo) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| libm::exp(lo + step * i as f64)).collect();
    grid[0] = min;
    grid[points - 1] = max;
    Ok(grid)
}

/// One row per `(cfg, bw)` pair, configs in the outer loop.
pub fn efficiency_sweep(
    kind: AitKind,
    cfgs: &[ModelConfig],
    peak_tp: f64,
    bws: &[f64],
) -> Result<Vec<EfficiencyPoint>> {
    if cfgs.is_empty() || bws.is_empty() {
        return Err(Error::Domain("sweep grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(cfgs.len() * bws.len());
    for cfg in cfgs {
        let a = ait(kind, cfg);
        for &bw in bws {
            rows.push(EfficiencyPoint { bandwidth: bw, ait: a, peak_tp, efficiency: efficiency(a, bw, peak_tp)? });
        }
    }
    Ok(rows)
}
