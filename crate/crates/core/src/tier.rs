use core::fmt;
use core::str::FromStr;

/// A storage level. Declaration order is the speed order, fastest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TierKind {
    Device,
    Host,
    Nvme,
}

impl TierKind {
    pub const ALL: [TierKind; 3] = [TierKind::Device, TierKind::Host, TierKind::Nvme];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TierKind::Device => "device",
            TierKind::Host => "host",
            TierKind::Nvme => "nvme",
        }
    }
}

impl fmt::Display for TierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TierKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "device" | "gpu" => Ok(TierKind::Device),
            "host" | "cpu" => Ok(TierKind::Host),
            "nvme" => Ok(TierKind::Nvme),
            _ => Err(crate::Error::InvalidConfig(alloc::format!("unknown tier `{s}`"))),
        }
    }
}
