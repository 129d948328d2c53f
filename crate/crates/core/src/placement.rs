//! Placement strategies: where each model-state category lives, whether it
//! is partitioned, and what that means for capacity, bandwidth and the
//! largest trainable model.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::config::{ClusterConfig, ModelConfig};
use crate::efficiency::{ait, efficiency, required_bandwidth, AitKind};
use crate::error::{Error, Result};
use crate::memory::{awm_bytes, mswm_bytes, param_count};
use crate::tier::TierKind;

/// Declaration order is the deterministic tie-break order used by [`recommend`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    DataParallel,
    Zero2,
    ZeroOffload,
    ThreeD,
    Zero3,
    ZeroInfCpu,
    ZeroInfNvme,
}

/// Device/partitioning row of one strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatePlacement {
    pub opt_grad_tiers: &'static [TierKind],
    pub opt_grad_partitioned: bool,
    pub param_tiers: &'static [TierKind],
    pub params_partitioned: bool,
}

use TierKind::{Device, Host, Nvme};

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::DataParallel,
        Strategy::Zero2,
        Strategy::ZeroOffload,
        Strategy::ThreeD,
        Strategy::Zero3,
        Strategy::ZeroInfCpu,
        Strategy::ZeroInfNvme,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DataParallel => "data-parallel",
            Strategy::Zero2 => "zero-2",
            Strategy::ZeroOffload => "zero-offload",
            Strategy::ThreeD => "3d",
            Strategy::Zero3 => "zero-3",
            Strategy::ZeroInfCpu => "zero-inf-cpu",
            Strategy::ZeroInfNvme => "zero-inf-nvme",
        }
    }

    pub fn placement(self) -> StatePlacement {
        let (og, ogp, p, pp): (&'static [TierKind], bool, &'static [TierKind], bool) = match self {
            Strategy::DataParallel => (&[Device], false, &[Device], false),
            Strategy::Zero2 => (&[Device], true, &[Device], false),
            Strategy::ZeroOffload => (&[Host, Device], true, &[Device], false),
            Strategy::ThreeD => (&[Device], true, &[Device], true),
            Strategy::Zero3 => (&[Device], true, &[Device], true),
            Strategy::ZeroInfCpu => (&[Host, Device], true, &[Host, Device], true),
            Strategy::ZeroInfNvme => (&[Nvme, Host, Device], true, &[Nvme, Host, Device], true),
        };
        StatePlacement { opt_grad_tiers: og, opt_grad_partitioned: ogp, param_tiers: p, params_partitioned: pp }
    }

    /// Home tier of the optimizer states.
    pub fn optimizer_tier(self) -> TierKind {
        match self {
            Strategy::DataParallel | Strategy::Zero2 | Strategy::ThreeD | Strategy::Zero3 => Device,
            Strategy::ZeroOffload | Strategy::ZeroInfCpu => Host,
            Strategy::ZeroInfNvme => Nvme,
        }
    }

    /// Home tier of the fp16 parameters.
    pub fn param_tier(self, opts: &PlannerOptions) -> TierKind {
        match self {
            Strategy::ZeroInfCpu => Host,
            Strategy::ZeroInfNvme => opts.nvme_param_tier,
            _ => Device,
        }
    }

    /// Slowest tier the strategy keeps model states in.
    pub fn slowest_tier(self, opts: &PlannerOptions) -> TierKind {
        self.optimizer_tier().max(self.param_tier(opts))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerOptions {
    /// Where ZeroInfNvme keeps fp16 parameters: `Nvme` (everything on NVMe)
    /// or `Host` (fp16 parameters staged in host memory).
    pub nvme_param_tier: TierKind,
    /// Tiles per large linear operator; divides the model-state working memory.
    pub tiling_factor: u64,
    /// Fixed per-device framework reserve on top of working memory.
    pub overhead_bytes: u64,
    /// Shape used by [`max_model_params`]: `nl`, `seq`, `bsz`, `attn_heads`
    /// and `ci` are kept, `hd` follows from the parameter count.
    pub template: ModelConfig,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            nvme_param_tier: Nvme,
            tiling_factor: 1,
            overhead_bytes: 2_000_000_000,
            template: ModelConfig { nl: 40, hd: 1, attn_heads: 16, seq: 1024, bsz: 1.0, ci: 1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierDemand {
    pub tier: TierKind,
    /// Bytes needed per device (Device) or per node (Host, Nvme).
    pub demand: u128,
    pub capacity: u128,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub strategy: Strategy,
    pub fits: bool,
    pub tiers: [TierDemand; 3],
    pub working_memory_bytes: u128,
    pub working_memory_ok: bool,
    /// Tier with the highest demand/capacity ratio.
    pub binding_constraint: TierKind,
    pub predicted_efficiency: f64,
}

/// Effective bandwidth for fetching parameters into device memory from
/// `source`. A broadcast from the owner is capped by one PCIe link; an
/// allgather of partitioned parameters uses every link in parallel.
pub fn effective_param_bandwidth(cluster: &ClusterConfig, source: TierKind, partitioned: bool) -> f64 {
    let world = cluster.world_size() as f64;
    let nodes = cluster.nodes as f64;
    let source_per_node = match source {
        Device => {
            let fabric = cluster.device_device_bw;
            return if partitioned { world * fabric } else { fabric };
        }
        Host => cluster.host_bw_per_node,
        Nvme => cluster.nvme_bw_per_node,
    };
    if partitioned {
        (world * cluster.pcie_bw_shared()).min(nodes * source_per_node)
    } else {
        cluster.pcie_bw_per_device.min(source_per_node)
    }
}

/// Model-state bytes per tier: per device for Device, per node for Host/Nvme.
fn model_state_demand(strategy: Strategy, psi: f64, cluster: &ClusterConfig, opts: &PlannerOptions) -> [f64; 3] {
    let world = cluster.world_size() as f64;
    let nodes = cluster.nodes as f64;
    match strategy {
        Strategy::DataParallel => [20.0 * psi, 0.0, 0.0],
        Strategy::Zero2 => [2.0 * psi + 18.0 * psi / world, 0.0, 0.0],
        Strategy::ZeroOffload => [2.0 * psi, 18.0 * psi / nodes, 0.0],
        Strategy::ThreeD | Strategy::Zero3 => [20.0 * psi / world, 0.0, 0.0],
        Strategy::ZeroInfCpu => [0.0, 20.0 * psi / nodes, 0.0],
        Strategy::ZeroInfNvme => match opts.nvme_param_tier {
            Host => [0.0, 2.0 * psi / nodes, 18.0 * psi / nodes],
            _ => [0.0, 0.0, 20.0 * psi / nodes],
        },
    }
}

fn capacities(cluster: &ClusterConfig) -> [u128; 3] {
    [
        cluster.device_mem_bytes as u128,
        cluster.host_mem_bytes_per_node as u128,
        cluster.nvme_bytes_per_node as u128,
    ]
}

fn ceil_bytes(x: f64) -> u128 {
    libm::ceil(x) as u128
}

/// Device working memory for the template at a real-valued hidden size.
fn template_working_memory(hd: f64, opts: &PlannerOptions) -> f64 {
    let t = &opts.template;
    let mswm = 16.0 * hd * hd / opts.tiling_factor.max(1) as f64;
    let awm = 2.0 * t.bsz * t.seq as f64 * t.ci as f64 * (16.0 * hd + 2.0 * t.attn_heads as f64 * t.seq as f64);
    mswm + awm + opts.overhead_bytes as f64
}

fn cfg_working_memory(cfg: &ModelConfig, opts: &PlannerOptions) -> u128 {
    mswm_bytes(cfg).div_ceil(opts.tiling_factor.max(1) as u128) + awm_bytes(cfg) + opts.overhead_bytes as u128
}

fn assemble(
    strategy: Strategy,
    psi: f64,
    working: u128,
    cluster: &ClusterConfig,
    opts: &PlannerOptions,
    predicted_efficiency: f64,
) -> FeasibilityReport {
    let states = model_state_demand(strategy, psi, cluster, opts);
    let caps = capacities(cluster);
    let mut tiers = [TierDemand { tier: Device, demand: 0, capacity: 0 }; 3];
    for (i, tier) in TierKind::ALL.into_iter().enumerate() {
        let mut demand = ceil_bytes(states[i]);
        if tier == Device {
            demand += working;
        }
        tiers[i] = TierDemand { tier, demand, capacity: caps[i] };
    }
    let working_memory_ok = working <= caps[0];
    let fits = working_memory_ok && tiers.iter().all(|t| t.demand <= t.capacity);
    let binding_constraint = tiers
        .iter()
        .max_by(|a, b| {
            let ra = a.demand as f64 / a.capacity as f64;
            let rb = b.demand as f64 / b.capacity as f64;
            ra.total_cmp(&rb).then(b.tier.cmp(&a.tier))
        })
        .map(|t| t.tier)
        .unwrap_or(Device);
    FeasibilityReport {
        strategy,
        fits,
        tiers,
        working_memory_bytes: working,
        working_memory_ok,
        binding_constraint,
        predicted_efficiency,
    }
}

/// Per-device bandwidth available to each state under `strategy`; `None`
/// means the state never leaves device memory.
fn state_bandwidths(strategy: Strategy, cluster: &ClusterConfig, opts: &PlannerOptions) -> [Option<f64>; 3] {
    let world = cluster.world_size() as f64;
    let dpn = cluster.devices_per_node as f64;
    let param = match strategy.param_tier(opts) {
        Device => cluster.device_device_bw,
        tier => (effective_param_bandwidth(cluster, tier, true) / world).min(cluster.device_device_bw),
    };
    let optimizer = match strategy.optimizer_tier() {
        Device => None,
        Host => Some(cluster.host_bw_per_node / dpn),
        Nvme => Some(cluster.nvme_bw_per_node / dpn),
    };
    let ckpt = match strategy {
        Strategy::ZeroInfCpu | Strategy::ZeroInfNvme => Some(cluster.pcie_bw_shared()),
        _ => None,
    };
    [Some(param), optimizer, ckpt]
}

/// Lowest efficiency across the three states, each bounded by its own bandwidth.
pub fn predicted_efficiency(cfg: &ModelConfig, cluster: &ClusterConfig, strategy: Strategy, opts: &PlannerOptions) -> f64 {
    let bws = state_bandwidths(strategy, cluster, opts);
    AitKind::ALL
        .into_iter()
        .zip(bws)
        .map(|(kind, bw)| match bw {
            None => 1.0,
            Some(bw) => efficiency(ait(kind, cfg), bw, cluster.peak_tp_per_device).unwrap_or(0.0),
        })
        .fold(1.0, f64::min)
}

pub fn feasibility(
    cfg: &ModelConfig,
    cluster: &ClusterConfig,
    strategy: Strategy,
    opts: &PlannerOptions,
) -> FeasibilityReport {
    let psi = param_count(cfg) as f64;
    let working = cfg_working_memory(cfg, opts);
    let eff = predicted_efficiency(cfg, cluster, strategy, opts);
    assemble(strategy, psi, working, cluster, opts, eff)
}

fn fits_template(psi: u128, cluster: &ClusterConfig, strategy: Strategy, opts: &PlannerOptions) -> bool {
    let psi = psi as f64;
    let hd = libm::sqrt(psi / (12.0 * opts.template.nl as f64));
    let working = ceil_bytes(template_working_memory(hd, opts));
    assemble(strategy, psi, working, cluster, opts, 0.0).fits
}

/// Largest parameter count that fits, found by bisection over the parameter
/// count with the template's shape. Returns 0 when not even one parameter fits.
pub fn max_model_params(cluster: &ClusterConfig, strategy: Strategy, opts: &PlannerOptions) -> u128 {
    if !fits_template(1, cluster, strategy, opts) {
        return 0;
    }
    let mut lo: u128 = 1;
    let mut hi: u128 = 2;
    while fits_template(hi, cluster, strategy, opts) {
        lo = hi;
        hi *= 2;
        if hi > 1 << 80 {
            return lo;
        }
    }
    for _ in 0..64 {
        if hi - lo <= 1 {
            break;
        }
        let mid = lo + (hi - lo) / 2;
        if fits_template(mid, cluster, strategy, opts) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Every strategy's feasibility, best first: fitting strategies, then higher
/// predicted efficiency, then faster slowest tier, then declaration order.
pub fn recommend(cfg: &ModelConfig, cluster: &ClusterConfig, opts: &PlannerOptions) -> Vec<FeasibilityReport> {
    let mut reports: Vec<FeasibilityReport> =
        Strategy::ALL.into_iter().map(|s| feasibility(cfg, cluster, s, opts)).collect();
    reports.sort_by(|a, b| {
        b.fits
            .cmp(&a.fits)
            .then(b.predicted_efficiency.total_cmp(&a.predicted_efficiency))
            .then(a.strategy.slowest_tier(opts).cmp(&b.strategy.slowest_tier(opts)))
            .then(a.strategy.cmp(&b.strategy))
    });
    reports
}

/// Reference workload for [`future_hardware_table`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthReference {
    /// Config whose optimizer-state intensity sets the slow-memory requirement.
    pub optimizer_cfg: ModelConfig,
    pub optimizer_efficiency: f64,
    /// Config whose parameter/gradient intensity sets the device-device requirement.
    pub param_cfg: ModelConfig,
    pub param_efficiency: f64,
}

impl Default for BandwidthReference {
    fn default() -> Self {
        BandwidthReference {
            optimizer_cfg: ModelConfig::new(1, 1).with_batch(2.0),
            optimizer_efficiency: 0.9,
            param_cfg: ModelConfig::new(1, 1).with_batch(1.0),
            param_efficiency: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardwareRow {
    pub multiplier: f64,
    pub peak_per_device: f64,
    pub slow_memory_per_device: f64,
    pub slow_memory_aggregate: f64,
    pub device_device: f64,
}

/// Bandwidth requirements for devices `k` times faster than the cluster's
/// peak. Requirements are linear in peak, so each row is `k` times the base.
pub fn future_hardware_table(
    cluster: &ClusterConfig,
    multipliers: &[f64],
    reference: &BandwidthReference,
) -> Result<Vec<HardwareRow>> {
    if multipliers.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::Domain("hardware multipliers must be positive"));
    }
    let peak = cluster.peak_tp_per_device;
    let world = cluster.world_size() as f64;
    let aggregate = required_bandwidth(
        ait(AitKind::OptimizerStates, &reference.optimizer_cfg),
        peak,
        reference.optimizer_efficiency,
    )?;
    let d2d = required_bandwidth(ait(AitKind::ParamGrad, &reference.param_cfg), peak, reference.param_efficiency)?;
    let per_device = aggregate / world;
    Ok(multipliers
        .iter()
        .map(|&k| HardwareRow {
            multiplier: k,
            peak_per_device: k * peak,
            slow_memory_per_device: k * per_device,
            slow_memory_aggregate: k * aggregate,
            device_device: k * d2d,
        })
        .collect())
}
