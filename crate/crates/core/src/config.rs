//! Model and cluster descriptions shared by every model in the crate.

use alloc::format;

use crate::error::{Error, Result};

/// Shape of a transformer-style model and its per-device batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Transformer layer count.
    pub nl: u64,
    /// Hidden dimension.
    pub hd: u64,
    pub attn_heads: u64,
    /// Sequence length in tokens.
    pub seq: u64,
    /// Per-device batch size. Fractional values are allowed.
    pub bsz: f64,
    /// Transformer blocks per activation checkpoint.
    pub ci: u64,
}

impl ModelConfig {
    /// A config with `seq = 1024`, `bsz = 1`, `attn_heads = 16`, `ci = 1`.
    pub fn new(nl: u64, hd: u64) -> Self {
        ModelConfig { nl, hd, attn_heads: 16, seq: 1024, bsz: 1.0, ci: 1 }
    }

    pub fn with_batch(mut self, bsz: f64) -> Self {
        self.bsz = bsz;
        self
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = seq;
        self
    }

    pub fn with_heads(mut self, heads: u64) -> Self {
        self.attn_heads = heads;
        self
    }

    pub fn with_ci(mut self, ci: u64) -> Self {
        self.ci = ci;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nl", self.nl),
            ("hd", self.hd),
            ("attn_heads", self.attn_heads),
            ("seq", self.seq),
            ("ci", self.ci),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.bsz > 0.0) || !self.bsz.is_finite() {
            return Err(Error::InvalidConfig(format!("bsz must be > 0, got {}", self.bsz)));
        }
        if self.ci > self.nl {
            return Err(Error::InvalidConfig(format!(
                "ci ({}) must not exceed nl ({})",
                self.ci, self.nl
            )));
        }
        Ok(())
    }
}

/// Capacities and bandwidths of a homogeneous cluster. Bytes and bytes/s are
/// decimal; compute is flops/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub nodes: u64,
    pub devices_per_node: u64,
    pub device_mem_bytes: u64,
    pub host_mem_bytes_per_node: u64,
    pub nvme_bytes_per_node: u64,
    /// Exclusive PCIe bandwidth of one device when it is the only one transferring.
    pub pcie_bw_per_device: f64,
    /// Aggregate host-memory bandwidth one node can push over its shared PCIe links.
    pub host_bw_per_node: f64,
    pub nvme_bw_per_node: f64,
    pub device_device_bw: f64,
    /// Achievable (not theoretical) peak compute of one device.
    pub peak_tp_per_device: f64,
}

impl ClusterConfig {
    /// A DGX-2-like profile: 16 x 32 GB devices per node, 1.5 TB host and
    /// 28 TB NVMe per node, 12 GB/s exclusive PCIe, 48 GB/s shared host and
    /// 25 GB/s NVMe per node, 300 GB/s device fabric, 70 TFlops per device.
    pub fn dgx2(nodes: u64) -> Self {
        ClusterConfig {
            nodes,
            devices_per_node: 16,
            device_mem_bytes: 32_000_000_000,
            host_mem_bytes_per_node: 1_500_000_000_000,
            nvme_bytes_per_node: 28_000_000_000_000,
            pcie_bw_per_device: 12e9,
            host_bw_per_node: 48e9,
            nvme_bw_per_node: 25e9,
            device_device_bw: 300e9,
            peak_tp_per_device: 70e12,
        }
    }

    pub fn world_size(&self) -> u64 {
        self.nodes * self.devices_per_node
    }

    /// Per-device PCIe bandwidth when every device on the node transfers at once.
    pub fn pcie_bw_shared(&self) -> f64 {
        let share = self.host_bw_per_node / self.devices_per_node as f64;
        if share < self.pcie_bw_per_device {
            share
        } else {
            self.pcie_bw_per_device
        }
    }

    /// Per-device share of the node's NVMe bandwidth.
    pub fn nvme_bw_shared(&self) -> f64 {
        self.nvme_bw_per_node / self.devices_per_node as f64
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("nodes", self.nodes),
            ("devices_per_node", self.devices_per_node),
            ("device_mem", self.device_mem_bytes),
            ("host_mem_per_node", self.host_mem_bytes_per_node),
            ("nvme_per_node", self.nvme_bytes_per_node),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("pcie_bw", self.pcie_bw_per_device),
            ("host_bw_per_node", self.host_bw_per_node),
            ("nvme_bw_per_node", self.nvme_bw_per_node),
            ("d2d_bw", self.device_device_bw),
            ("peak_tp", self.peak_tp_per_device),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig::dgx2(1)
    }
}
