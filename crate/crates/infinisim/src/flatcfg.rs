//! Flat `[section] key = value` configuration files.
//!
//! ```text
//! # 1-node cluster with a smaller NVMe array
//! [cluster]
//! nodes = 1
//! nvme_per_node = 8T        # decimal: 8 * 10^12 bytes
//! nvme_bw_per_node = 12.5G  # bytes/s
//!
//! [layer.0]
//! in = 8
//! out = 16
//! act = relu
//! ```
//!
//! Integers accept `_` separators, numbers accept a decimal suffix
//! `K`, `M`, `G` or `T`. Everything after `#` is a comment. Values may be
//! wrapped in double quotes. Every key is checked against a fixed schema;
//! unknown sections and keys are errors that carry the line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use infinisim_core::adam::AdamHyper;
use infinisim_core::config::{ClusterConfig, ModelConfig};
use infinisim_core::mlp::Activation;
use infinisim_core::tier::TierKind;

use crate::train::{LayerSpec, ModelSpec, Placement};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// File the error came from, when known.
    pub source: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        ConfigError { source: None, line: Some(line), message: message.into() }
    }

    fn general(message: impl Into<String>) -> Self {
        ConfigError { source: None, line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.source, self.line) {
            (Some(p), Some(l)) => write!(f, "{}:{l}: {}", p.display(), self.message),
            (Some(p), None) => write!(f, "{}: {}", p.display(), self.message),
            (None, Some(l)) => write!(f, "line {l}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub const MODEL_KEYS: &[&str] = &["nl", "hd", "heads", "seq", "bsz", "ci", "tied"];
pub const CLUSTER_KEYS: &[&str] = &[
    "nodes",
    "devices_per_node",
    "device_mem",
    "host_mem_per_node",
    "nvme_per_node",
    "pcie_bw",
    "host_bw_per_node",
    "nvme_bw_per_node",
    "d2d_bw",
    "peak_tp",
    "nvme_root",
];
pub const RUN_KEYS: &[&str] = &[
    "steps",
    "seed",
    "ranks",
    "tier",
    "param_tier",
    "grad_tier",
    "opt_tier",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch",
    "chunk_elems",
];
pub const LAYER_KEYS: &[&str] = &["in", "out", "tiles", "act"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Section {
    /// Line of the `[header]`.
    pub line: usize,
    pub entries: BTreeMap<String, Entry>,
}

impl Section {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.entries
            .get(key)
            .map(|e| parse_u64(&e.value).map_err(|m| ConfigError::at(e.line, format!("`{key}`: {m}"))))
            .transpose()
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.entries
            .get(key)
            .map(|e| parse_f64(&e.value).map_err(|m| ConfigError::at(e.line, format!("`{key}`: {m}"))))
            .transpose()
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.entries
            .get(key)
            .map(|e| e.value.parse::<T>().map_err(|err| ConfigError::at(e.line, format!("`{key}`: {err}"))))
            .transpose()
    }

    fn require_u64(&self, name: &str, key: &str) -> Result<u64, ConfigError> {
        self.u64(key)?.ok_or_else(|| ConfigError::at(self.line, format!("[{name}] is missing `{key}`")))
    }
}

/// A parsed document. Sections keep their header text, e.g. `layer.3`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlatConfig {
    pub sections: BTreeMap<String, Section>,
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> Result<&str, String> {
    match (v.starts_with('"'), v.len() >= 2 && v.ends_with('"')) {
        (true, true) => Ok(&v[1..v.len() - 1]),
        (true, false) => Err("unterminated string".into()),
        _ => Ok(v),
    }
}

fn allowed_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "model" => Some(MODEL_KEYS),
        "cluster" => Some(CLUSTER_KEYS),
        "run" => Some(RUN_KEYS),
        s if s.strip_prefix("layer.").is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit())) => {
            Some(LAYER_KEYS)
        }
        _ => None,
    }
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = FlatConfig::default();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(line, "section header is missing `]`"))?
                    .trim();
                if allowed_keys(name).is_none() {
                    return Err(ConfigError::at(line, format!("unknown section [{name}]")));
                }
                if doc.sections.contains_key(name) {
                    return Err(ConfigError::at(line, format!("section [{name}] appears twice")));
                }
                doc.sections.insert(name.to_string(), Section { line, entries: BTreeMap::new() });
                current = Some(name.to_string());
                continue;
            }
            let (key, value) =
                body.split_once('=').ok_or_else(|| ConfigError::at(line, format!("expected `key = value`, got `{body}`")))?;
            let key = key.trim();
            let value = unquote(value.trim()).map_err(|m| ConfigError::at(line, m))?;
            let name = current.as_deref().ok_or_else(|| ConfigError::at(line, format!("key `{key}` outside any section")))?;
            if !allowed_keys(name).is_some_and(|keys| keys.contains(&key)) {
                return Err(ConfigError::at(line, format!("unknown key `{key}` in [{name}]")));
            }
            let section = doc.sections.get_mut(name).expect("section was inserted");
            if section.entries.contains_key(key) {
                return Err(ConfigError::at(line, format!("duplicate key `{key}` in [{name}]")));
            }
            section.entries.insert(key.to_string(), Entry { value: value.to_string(), line });
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: Some(path.to_path_buf()),
            line: None,
            message: format!("cannot read: {e}"),
        })?;
        Self::parse(&text).map_err(|e| ConfigError { source: Some(path.to_path_buf()), ..e })
    }

    /// Later documents override earlier ones key by key.
    pub fn merge(mut self, other: FlatConfig) -> Self {
        for (name, sec) in other.sections {
            let into = self.sections.entry(name).or_insert_with(|| Section { line: sec.line, ..Default::default() });
            into.entries.extend(sec.entries);
        }
        self
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    /// `[model]` as a transformer shape. `nl` and `hd` are required.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let s = self.section("model").ok_or_else(|| ConfigError::general("missing [model] section"))?;
        let mut cfg = ModelConfig::new(s.require_u64("model", "nl")?, s.require_u64("model", "hd")?);
        if let Some(v) = s.u64("heads")? {
            cfg.attn_heads = v;
        }
        if let Some(v) = s.u64("seq")? {
            cfg.seq = v;
        }
        if let Some(v) = s.f64("bsz")? {
            cfg.bsz = v;
        }
        if let Some(v) = s.u64("ci")? {
            cfg.ci = v;
        }
        cfg.validate().map_err(|e| ConfigError::at(s.line, e.to_string()))?;
        Ok(cfg)
    }

    /// `[cluster]` over the 1-node default profile; a missing section gives the default.
    pub fn cluster_config(&self) -> Result<ClusterConfig, ConfigError> {
        let mut c = ClusterConfig::default();
        let Some(s) = self.section("cluster") else {
            return Ok(c);
        };
        let ints: [(&str, &mut u64); 5] = [
            ("nodes", &mut c.nodes),
            ("devices_per_node", &mut c.devices_per_node),
            ("device_mem", &mut c.device_mem_bytes),
            ("host_mem_per_node", &mut c.host_mem_bytes_per_node),
            ("nvme_per_node", &mut c.nvme_bytes_per_node),
        ];
        for (key, slot) in ints {
            if let Some(v) = s.u64(key)? {
                *slot = v;
            }
        }
        let rates: [(&str, &mut f64); 5] = [
            ("pcie_bw", &mut c.pcie_bw_per_device),
            ("host_bw_per_node", &mut c.host_bw_per_node),
            ("nvme_bw_per_node", &mut c.nvme_bw_per_node),
            ("d2d_bw", &mut c.device_device_bw),
            ("peak_tp", &mut c.peak_tp_per_device),
        ];
        for (key, slot) in rates {
            if let Some(v) = s.f64(key)? {
                *slot = v;
            }
        }
        c.validate().map_err(|e| ConfigError::at(s.line, e.to_string()))?;
        Ok(c)
    }

    pub fn nvme_root(&self) -> Option<PathBuf> {
        self.section("cluster").and_then(|s| s.str("nvme_root")).map(PathBuf::from)
    }

    /// `[layer.N]` sections (numbered 0.., without gaps) plus `[model] tied`.
    pub fn model_spec(&self, seed: u64) -> Result<ModelSpec, ConfigError> {
        let mut numbered: BTreeMap<usize, &Section> = BTreeMap::new();
        for (name, sec) in &self.sections {
            if let Some(n) = name.strip_prefix("layer.") {
                let n = n.parse::<usize>().map_err(|e| ConfigError::at(sec.line, format!("layer index: {e}")))?;
                if numbered.insert(n, sec).is_some() {
                    return Err(ConfigError::at(sec.line, format!("layer {n} defined twice")));
                }
            }
        }
        if numbered.is_empty() {
            return Err(ConfigError::general("no [layer.N] sections"));
        }
        let mut layers = Vec::with_capacity(numbered.len());
        for (expect, (&n, sec)) in numbered.iter().enumerate() {
            if n != expect {
                return Err(ConfigError::at(sec.line, format!("layers must be numbered 0..; found layer.{n}, expected layer.{expect}")));
            }
            let name = format!("layer.{n}");
            let in_dim = to_usize(sec.require_u64(&name, "in")?, sec.line)?;
            let out_dim = to_usize(sec.require_u64(&name, "out")?, sec.line)?;
            let tiles = to_usize(sec.u64("tiles")?.unwrap_or(1), sec.line)?;
            let act: Activation = sec.parse("act")?.unwrap_or(Activation::Identity);
            layers.push(LayerSpec::tiled(in_dim, out_dim, tiles, act));
        }
        let tied_pairs = match self.section("model").and_then(|s| s.raw("tied")) {
            Some(e) => parse_tied(&e.value).map_err(|m| ConfigError::at(e.line, format!("`tied`: {m}")))?,
            None => Vec::new(),
        };
        let spec = ModelSpec { layers, tied_pairs, seed };
        spec.validate().map_err(|e| ConfigError::general(e.to_string()))?;
        Ok(spec)
    }

    /// `[run]` keys with their defaults.
    pub fn run_options(&self) -> Result<RunOptions, ConfigError> {
        let mut r = RunOptions::default();
        let Some(s) = self.section("run") else {
            return Ok(r);
        };
        if let Some(v) = s.u64("steps")? {
            r.steps = to_usize(v, s.line)?;
        }
        if let Some(v) = s.u64("seed")? {
            r.seed = v;
        }
        if let Some(v) = s.u64("ranks")? {
            r.ranks = to_usize(v, s.line)?;
        }
        if let Some(v) = s.u64("batch")? {
            r.batch = to_usize(v, s.line)?;
        }
        if let Some(v) = s.u64("chunk_elems")? {
            r.chunk_elems = to_usize(v, s.line)?;
        }
        let tier: Option<TierKind> = s.parse("tier")?;
        if let Some(t) = tier {
            r.placement = Placement::uniform(t);
        }
        if let Some(t) = s.parse("param_tier")? {
            r.placement.param_tier = t;
        }
        if let Some(t) = s.parse("grad_tier")? {
            r.placement.grad_tier = t;
        }
        if let Some(t) = s.parse("opt_tier")? {
            r.placement.opt_tier = t;
        }
        let floats: [(&str, &mut f32); 4] =
            [("lr", &mut r.hyper.lr), ("beta1", &mut r.hyper.beta1), ("beta2", &mut r.hyper.beta2), ("eps", &mut r.hyper.eps)];
        for (key, slot) in floats {
            if let Some(v) = s.f64(key)? {
                *slot = v as f32;
            }
        }
        r.hyper.validate().map_err(|e| ConfigError::at(s.line, e.to_string()))?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub seed: u64,
    pub ranks: usize,
    pub placement: Placement,
    pub batch: usize,
    pub chunk_elems: usize,
    pub hyper: AdamHyper,
}

impl Default for RunOptions {
    fn default() -> Self {
        let t = crate::train::TrainConfig::default();
        RunOptions {
            steps: t.steps,
            seed: 7,
            ranks: t.world,
            placement: t.placement,
            batch: t.batch,
            chunk_elems: t.chunk_elems,
            hyper: t.hyper,
        }
    }
}

fn to_usize(v: u64, line: usize) -> Result<usize, ConfigError> {
    usize::try_from(v).map_err(|_| ConfigError::at(line, format!("{v} does not fit in usize")))
}

fn split_suffix(v: &str) -> (&str, f64) {
    let scale = match v.as_bytes().last() {
        Some(b'K') => 1e3,
        Some(b'M') => 1e6,
        Some(b'G') => 1e9,
        Some(b'T') => 1e12,
        _ => return (v, 1.0),
    };
    (&v[..v.len() - 1], scale)
}

/// `1_000`, `32G`, `1.5T`. Fractional results are rejected.
pub fn parse_u64(v: &str) -> Result<u64, String> {
    let cleaned: String = v.trim().chars().filter(|&c| c != '_').collect();
    let (num, scale) = split_suffix(&cleaned);
    if scale == 1.0 {
        return num.parse::<u64>().map_err(|e| format!("`{v}` is not a non-negative integer ({e})"));
    }
    // Exact for plain integers: multiply in integer arithmetic.
    if let Ok(n) = num.parse::<u64>() {
        return n.checked_mul(scale as u64).ok_or_else(|| format!("`{v}` overflows"));
    }
    let x = num.parse::<f64>().map_err(|_| format!("`{v}` is not a number"))? * scale;
    if !(x >= 0.0) || x.fract() != 0.0 || x >= u64::MAX as f64 {
        return Err(format!("`{v}` is not a non-negative integer"));
    }
    Ok(x as u64)
}

/// `70e12`, `12G`, `1_000.5`.
pub fn parse_f64(v: &str) -> Result<f64, String> {
    let cleaned: String = v.trim().chars().filter(|&c| c != '_').collect();
    let (num, scale) = split_suffix(&cleaned);
    let x = num.parse::<f64>().map_err(|_| format!("`{v}` is not a number"))?;
    if !x.is_finite() {
        return Err(format!("`{v}` is not finite"));
    }
    Ok(x * scale)
}

/// `1-2, 3-4` or `1:2`.
pub fn parse_tied(v: &str) -> Result<Vec<(usize, usize)>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (a, b) = p.split_once(['-', ':']).ok_or_else(|| format!("expected `a-b`, got `{p}`"))?;
            let a = a.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))?;
            let b = b.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))?;
            Ok((a, b))
        })
        .collect()
}
