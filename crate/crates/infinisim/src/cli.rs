//! The `infinisim` command: `plan`, `sweep`, `simulate` and `train`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 no strategy fits,
//! 3 digest mismatch, 4 storage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use infinisim_core::config::{ClusterConfig, ModelConfig};
use infinisim_core::efficiency::{ait, efficiency_sweep, log_space, required_bandwidth, AitKind};
use infinisim_core::memory::{memory_report, param_count};
use infinisim_core::overlap::{
    plan_prefetch, simulate, simulate_backward, stage_costs, trace_schedule, LayerOp, PrefetchDepths, SimOptions,
    StageCosts, Timeline,
};
use infinisim_core::placement::{max_model_params, recommend, FeasibilityReport, PlannerOptions, Strategy};
use infinisim_core::tier::TierKind;

use crate::flatcfg::{parse_f64, parse_u64, ConfigError, FlatConfig, RunOptions};
use crate::store::{resolve_nvme_root, IoMode, StoreConfig, TierStore};
use crate::train::{continue_training, run_training, Batch, ModelSpec, PartitionedModel, TrainConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_MISMATCH: u8 = 3;
pub const EXIT_STORAGE: u8 = 4;

/// Name of the run manifest written next to NVMe shards.
pub const MANIFEST: &str = "infinisim.manifest";

const UNITS: &str = "\
Units: memory sizes in bytes, bandwidths in bytes/s, compute in flops/s.
Numbers accept `_` separators and decimal suffixes K, M, G, T (10^3..10^12).

Config files hold `[section] key = value` lines with `#` comments:
  [model]    nl, hd, heads, seq, bsz, ci; tied = \"a-b, ...\" for train
  [cluster]  nodes, devices_per_node, device_mem (bytes), host_mem_per_node (bytes),
             nvme_per_node (bytes), pcie_bw, host_bw_per_node, nvme_bw_per_node,
             d2d_bw (bytes/s), peak_tp (flops/s), nvme_root (path)
  [run]      steps, seed, ranks, tier, param_tier, grad_tier, opt_tier,
             lr, beta1, beta2, eps, batch, chunk_elems
  [layer.N]  in, out, tiles, act (identity|relu|gelu)
Unknown keys are rejected. A missing [cluster] means one 16-device node
(32 GB devices, 1.5 TB host, 28 TB NVMe, 12 GB/s PCIe, 48 GB/s host and
25 GB/s NVMe per node, 300 GB/s fabric, 70 TFlops).

Exit codes: 0 ok, 1 usage/config, 2 infeasible plan, 3 digest mismatch, 4 storage.";

#[derive(Debug, Parser)]
#[command(name = "infinisim", version, about = "Memory, bandwidth and overlap models for offloaded training, plus a desk-scale trainer", after_help = UNITS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Memory report and per-strategy feasibility for a model on a cluster.
    Plan(PlanArgs),
    /// Efficiency over a log-spaced bandwidth grid, as CSV.
    Sweep(SweepArgs),
    /// Event timeline of one forward (or backward) pass.
    Simulate(SimulateArgs),
    /// Train a small layered model with partitioned, offloaded states.
    Train(TrainArgs),
}

fn num_f64(s: &str) -> Result<f64, String> {
    parse_f64(s)
}

fn num_u64(s: &str) -> Result<u64, String> {
    parse_u64(s)
}

fn tier_arg(s: &str) -> Result<TierKind, String> {
    s.parse::<TierKind>().map_err(|e| e.to_string())
}

fn depths_arg(s: &str) -> Result<PrefetchDepths, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [nc, cg, gg] => PrefetchDepths::new(nc, cg, gg).map_err(|e| e.to_string()),
        _ => Err(format!("expected nc,cg,gg, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Model config with a [model] section.
    #[arg(long)]
    pub model: PathBuf,
    /// Cluster config with a [cluster] section (default: one DGX-2-like node).
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    /// Report a single strategy (data-parallel, zero-2, zero-offload, 3d, zero-3, zero-inf-cpu, zero-inf-nvme).
    #[arg(long)]
    pub strategy: Option<String>,
    /// Also write the feasibility table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Tiles per large linear operator.
    #[arg(long, default_value_t = 1)]
    pub tiling_factor: u64,
    /// Per-device framework reserve in bytes.
    #[arg(long, value_parser = num_u64, default_value = "2G")]
    pub overhead: u64,
    /// Where zero-inf-nvme keeps fp16 parameters (host or nvme).
    #[arg(long, value_parser = tier_arg, default_value = "nvme")]
    pub nvme_param_tier: TierKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// Parameters and gradients.
    Param,
    /// Optimizer states.
    Opt,
    /// Activation checkpoints.
    Act,
}

impl SweepKind {
    fn ait_kind(self) -> AitKind {
        match self {
            SweepKind::Param => AitKind::ParamGrad,
            SweepKind::Opt => AitKind::OptimizerStates,
            SweepKind::Act => AitKind::ActivationCkpt,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Lowest bandwidth, bytes/s.
    #[arg(long, value_parser = num_f64)]
    pub bw_min: f64,
    /// Highest bandwidth, bytes/s.
    #[arg(long, value_parser = num_f64)]
    pub bw_max: f64,
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Peak compute per device, flops/s.
    #[arg(long, value_parser = num_f64, default_value = "70e12")]
    pub peak: f64,
    /// Model config; the flags below override its [model] keys.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub hd: Option<u64>,
    #[arg(long)]
    pub seq: Option<u64>,
    #[arg(long, value_parser = num_f64)]
    pub bsz: Option<f64>,
    #[arg(long)]
    pub ci: Option<u64>,
    /// Efficiency for the required-bandwidth line on stderr.
    #[arg(long, default_value_t = 0.9)]
    pub target_eff: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Transformer [model] or [layer.N] layers; not needed with --synthetic.
    #[arg(long, required_unless_present = "synthetic")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    /// Prefetch depths nc,cg,gg with nc >= cg >= gg >= 1.
    #[arg(long, value_parser = depths_arg, default_value = "3,2,1")]
    pub depths: PrefetchDepths,
    /// Run every stage back to back.
    #[arg(long)]
    pub no_overlap: bool,
    /// Home tier of the parameters.
    #[arg(long, value_parser = tier_arg, default_value = "nvme")]
    pub tier: TierKind,
    /// N operators with unit cost in every stage instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub synthetic: Option<usize>,
    /// Simulate the backward pass (adds reduce-scatter and gradient offload).
    #[arg(long)]
    pub backward: bool,
    /// Cap on parameter bytes in flight.
    #[arg(long, value_parser = num_u64)]
    pub prefetch_budget: Option<u64>,
    /// Write activation checkpoints to host memory during forward.
    #[arg(long)]
    pub ckpt_offload: bool,
    /// Write the event timeline CSV here.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config with [layer.N] sections and an optional [run] section.
    #[arg(long, required_unless_present = "resume")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    /// Simulated data-parallel ranks.
    #[arg(long, conflicts_with = "resume")]
    pub ranks: Option<usize>,
    /// Tier for every model state.
    #[arg(long, value_parser = tier_arg, conflicts_with = "resume")]
    pub tier: Option<TierKind>,
    /// Steps to run (with --resume: further steps).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    pub batch: Option<usize>,
    /// Optimizer chunk size in elements.
    #[arg(long, conflicts_with = "resume")]
    pub chunk: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub lr: Option<f32>,
    /// File holding the digest this run must reproduce.
    #[arg(long)]
    pub baseline_digest: Option<PathBuf>,
    /// Write the final digest here.
    #[arg(long)]
    pub digest_out: Option<PathBuf>,
    /// Directory for NVMe shards (overrides INFINISIM_NVME_ROOT and [cluster] nvme_root).
    #[arg(long)]
    pub nvme_root: Option<PathBuf>,
    /// Continue from the manifest and shards under the NVMe root.
    #[arg(long)]
    pub resume: bool,
    /// Complete every I/O request before returning.
    #[arg(long)]
    pub sync_io: bool,
    /// Write the loss CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<infinisim_core::Error> for CliError {
    fn from(e: infinisim_core::Error) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        let code = match e {
            crate::Error::Store(_) => EXIT_STORAGE,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<crate::store::StoreError> for CliError {
    fn from(e: crate::store::StoreError) -> Self {
        CliError { code: EXIT_STORAGE, message: e.to_string() }
    }
}

fn write_err(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: EXIT_STORAGE, message: format!("{}: {e}", path.display()) }
}

fn emit(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| write_err(p, e)),
        None => stdout.write_all(text.as_bytes()).map_err(|e| write_err(Path::new("<stdout>"), e)),
    }
}

fn load_docs(paths: &[Option<&Path>]) -> Result<FlatConfig, CliError> {
    let mut doc = FlatConfig::default();
    for p in paths.iter().flatten() {
        doc = doc.merge(FlatConfig::load(p)?);
    }
    Ok(doc)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                EXIT_CONFIG
            } else {
                let _ = stdout.write_all(text.as_bytes());
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(&a, stdout, stderr),
        Command::Sweep(a) => cmd_sweep(&a, stdout, stderr),
        Command::Simulate(a) => cmd_simulate(&a, stdout, stderr),
        Command::Train(a) => cmd_train(&a, stdout, stderr),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

fn gb(bytes: u128) -> String {
    format!("{:.1}", bytes as f64 / 1e9)
}

/// The text report printed by `plan`.
pub fn plan_report(cfg: &ModelConfig, cluster: &ClusterConfig, rows: &[(FeasibilityReport, u128)]) -> String {
    let m = memory_report(cfg);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "model: nl={} hd={} heads={} seq={} bsz={} ci={}",
        cfg.nl, cfg.hd, cfg.attn_heads, cfg.seq, cfg.bsz, cfg.ci
    );
    let lines = [
        ("parameters", m.params),
        ("model states (bytes)", m.model_state_bytes),
        ("activation checkpoints (bytes)", m.act_ckpt_bytes),
        ("full activations (bytes)", m.full_activation_bytes),
        ("model state working memory (bytes)", m.mswm_bytes),
        ("activation working memory (bytes)", m.awm_bytes),
    ];
    for (name, v) in lines {
        let _ = writeln!(out, "  {name:<36}{:>12.3e}", v as f64);
    }
    let _ = writeln!(
        out,
        "cluster: {} node(s) x {} devices, {} GB device, {} GB host/node, {} GB nvme/node",
        cluster.nodes,
        cluster.devices_per_node,
        gb(cluster.device_mem_bytes as u128),
        gb(cluster.host_mem_bytes_per_node as u128),
        gb(cluster.nvme_bytes_per_node as u128),
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<14} {:>5} {:>21} {:>21} {:>21} {:>8} {:>10} {:>11}",
        "strategy", "fits", "device GB (need/cap)", "host GB/node", "nvme GB/node", "binding", "efficiency", "max params"
    );
    for (r, max) in rows {
        let tiers: Vec<String> = r.tiers.iter().map(|t| format!("{}/{}", gb(t.demand), gb(t.capacity))).collect();
        let _ = writeln!(
            out,
            "{:<14} {:>5} {:>21} {:>21} {:>21} {:>8} {:>10.3} {:>11.3e}",
            r.strategy.name(),
            r.fits,
            tiers[0],
            tiers[1],
            tiers[2],
            r.binding_constraint.name(),
            r.predicted_efficiency,
            *max as f64
        );
    }
    let _ = writeln!(out);
    match rows.iter().find(|(r, _)| r.fits) {
        Some((r, _)) => {
            let _ = writeln!(out, "recommendation: {}", r.strategy.name());
        }
        None => {
            let _ = writeln!(out, "recommendation: none (no strategy fits)");
        }
    }
    out
}

pub fn plan_csv(rows: &[(FeasibilityReport, u128)]) -> String {
    let mut out = String::from(
        "strategy,fits,device_bytes,device_capacity,host_bytes,host_capacity,nvme_bytes,nvme_capacity,\
         working_memory_bytes,working_memory_ok,binding,predicted_efficiency,max_params\n",
    );
    for (r, max) in rows {
        let _ = write!(out, "{},{}", r.strategy.name(), r.fits);
        for t in &r.tiers {
            let _ = write!(out, ",{},{}", t.demand, t.capacity);
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            r.working_memory_bytes,
            r.working_memory_ok,
            r.binding_constraint.name(),
            r.predicted_efficiency,
            max
        );
    }
    out
}

fn cmd_plan(a: &PlanArgs, stdout: &mut dyn Write, _stderr: &mut dyn Write) -> Result<u8, CliError> {
    let doc = load_docs(&[Some(&a.model), a.cluster.as_deref()])?;
    let cfg = doc.model_config()?;
    let cluster = doc.cluster_config()?;
    if a.tiling_factor == 0 {
        return Err(CliError::config("--tiling-factor must be >= 1"));
    }
    if a.nvme_param_tier == TierKind::Device {
        return Err(CliError::config("--nvme-param-tier must be host or nvme"));
    }
    let opts = PlannerOptions {
        nvme_param_tier: a.nvme_param_tier,
        tiling_factor: a.tiling_factor,
        overhead_bytes: a.overhead,
        ..PlannerOptions::default()
    };
    let mut reports = recommend(&cfg, &cluster, &opts);
    if let Some(name) = &a.strategy {
        let s: Strategy = name.parse()?;
        reports.retain(|r| r.strategy == s);
    }
    let rows: Vec<(FeasibilityReport, u128)> =
        reports.into_iter().map(|r| (r, max_model_params(&cluster, r.strategy, &opts))).collect();
    emit(None, &plan_report(&cfg, &cluster, &rows), stdout)?;
    if let Some(p) = &a.csv {
        emit(Some(p), &plan_csv(&rows), stdout)?;
    }
    Ok(if rows.iter().any(|(r, _)| r.fits) { EXIT_OK } else { EXIT_INFEASIBLE })
}

fn cmd_sweep(a: &SweepArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<u8, CliError> {
    let mut cfg = match &a.model {
        Some(p) => {
            let doc = FlatConfig::load(p)?;
            // Only the per-token shape matters here; `nl` and `hd` fall back to a large model.
            let s = doc.section("model");
            let mut c = ModelConfig::new(128, 8192);
            if let Some(s) = s {
                let pick = |k: &str| s.u64(k);
                if let Some(v) = pick("nl")? {
                    c.nl = v;
                }
                if let Some(v) = pick("hd")? {
                    c.hd = v;
                }
                if let Some(v) = pick("heads")? {
                    c.attn_heads = v;
                }
                if let Some(v) = pick("seq")? {
                    c.seq = v;
                }
                if let Some(v) = pick("ci")? {
                    c.ci = v;
                }
                if let Some(v) = s.f64("bsz")? {
                    c.bsz = v;
                }
            }
            c
        }
        None => ModelConfig::new(128, 8192),
    };
    if let Some(v) = a.hd {
        cfg.hd = v;
    }
    if let Some(v) = a.seq {
        cfg.seq = v;
    }
    if let Some(v) = a.bsz {
        cfg.bsz = v;
    }
    if let Some(v) = a.ci {
        cfg.ci = v;
    }
    cfg.nl = cfg.nl.max(cfg.ci);
    cfg.validate()?;
    if !(a.bw_min < a.bw_max) || a.points < 2 {
        return Err(CliError::config(format!(
            "need bw-min < bw-max and points >= 2 (got {} .. {}, {} points)",
            a.bw_min, a.bw_max, a.points
        )));
    }
    let kind = a.kind.ait_kind();
    let grid = log_space(a.bw_min, a.bw_max, a.points)?;
    let rows = efficiency_sweep(kind, &[cfg], a.peak, &grid)?;
    let mut out = String::from("ait,bw_bytes_per_s,peak_flops,efficiency\n");
    for r in &rows {
        let _ = writeln!(out, "{},{},{},{}", r.ait, r.bandwidth, r.peak_tp, r.efficiency);
    }
    emit(a.out.as_deref(), &out, stdout)?;
    let need = required_bandwidth(ait(kind, &cfg), a.peak, a.target_eff)?;
    let _ = writeln!(stderr, "required_bw at efficiency {}: {:.2e} B/s", a.target_eff, need);
    Ok(EXIT_OK)
}

/// Operators for `simulate`: layer sections give the toy model, otherwise a
/// transformer with `nl` layers of `12 * hd^2` parameters each.
fn model_layers(doc: &FlatConfig, run: &RunOptions) -> Result<(Vec<LayerOp>, u64), CliError> {
    if doc.sections.keys().any(|k| k.starts_with("layer.")) {
        let spec: ModelSpec = doc.model_spec(run.seed)?;
        let fetch: Vec<_> = (0..spec.layers.len())
            .map(|i| std::iter::once(crate::train::param_key(spec.owner(i))).collect())
            .collect();
        let mut ops = spec.layer_ops(&fetch);
        for op in &mut ops {
            op.compute_flops *= run.batch as f64;
        }
        let ckpt = 2 * run.batch as u64 * spec.in_dim() as u64;
        return Ok((ops, ckpt));
    }
    let cfg = doc.model_config()?;
    let per_layer = 12 * cfg.hd as u128 * cfg.hd as u128;
    let tokens = cfg.bsz * cfg.seq as f64;
    let ops = (0..cfg.nl)
        .map(|i| LayerOp {
            name: format!("layer{i}"),
            fetch: vec![format!("layer{i}")],
            param_bytes: (2 * per_layer) as u64,
            compute_flops: 2.0 * tokens * per_layer as f64,
        })
        .collect();
    debug_assert_eq!(per_layer * cfg.nl as u128, param_count(&cfg));
    let ckpt = (2.0 * tokens * cfg.hd as f64) as u64;
    Ok((ops, ckpt))
}

pub fn timeline_csv(tl: &Timeline, names: &[String]) -> String {
    let mut out = String::from("op,stage,lane,start_s,end_s\n");
    for e in &tl.events {
        let _ = writeln!(out, "{},{},{},{},{}", names[e.pos], e.stage.name(), e.lane.name(), e.start, e.end);
    }
    out
}

fn cmd_simulate(a: &SimulateArgs, stdout: &mut dyn Write, _stderr: &mut dyn Write) -> Result<u8, CliError> {
    let doc = load_docs(&[a.model.as_deref(), a.cluster.as_deref()])?;
    let cluster = doc.cluster_config()?;
    let (layers, ckpt_bytes) = match a.synthetic {
        Some(0) => return Err(CliError::config("--synthetic needs at least one operator")),
        Some(n) => {
            let ops = (0..n)
                .map(|i| LayerOp {
                    name: format!("op{i}"),
                    fetch: vec![format!("op{i}")],
                    param_bytes: 1,
                    compute_flops: 1.0,
                })
                .collect();
            (ops, 0)
        }
        None => model_layers(&doc, &doc.run_options()?)?,
    };
    let (fwd, bwd) = trace_schedule(&layers)?;
    let seq = if a.backward { bwd } else { fwd };
    let plan = plan_prefetch(&seq, a.depths)?;
    let costs: Vec<StageCosts> = seq
        .ops
        .iter()
        .map(|op| match a.synthetic {
            Some(_) => {
                let mut c = StageCosts::uniform(1.0);
                if a.tier != TierKind::Nvme {
                    c.nc = 0.0;
                }
                if a.tier == TierKind::Device {
                    c.cg = 0.0;
                    c.grad_offload = 0.0;
                }
                c
            }
            None => {
                let mut c = stage_costs(&cluster, a.tier, op, ckpt_bytes);
                if a.backward {
                    // backward is twice the forward flops plus one recompute
                    c.compute *= 3.0;
                }
                c
            }
        })
        .collect();
    let opts = SimOptions { overlap: !a.no_overlap, prefetch_budget: a.prefetch_budget, ckpt_offload: a.ckpt_offload };
    let tl = if a.backward { simulate_backward(&seq, &plan, &costs, opts)? } else { simulate(&seq, &plan, &costs, opts)? };
    if let Some(p) = &a.timeline {
        let names: Vec<String> = seq.ops.iter().map(|o| o.name.clone()).collect();
        emit(Some(p), &timeline_csv(&tl, &names), stdout)?;
    }
    let summary = format!("total_s,serial_s,speedup\n{},{},{}\n", tl.total_time, tl.serial_time, tl.speedup());
    emit(None, &summary, stdout)?;
    Ok(EXIT_OK)
}

/// Flat config that reproduces a run: layers, ties and `[run]` with
/// `steps` set to the number of completed steps.
pub fn manifest_text(spec: &ModelSpec, run: &RunOptions, completed: u64) -> String {
    let mut out = String::from("# written by infinisim train\n[model]\n");
    if !spec.tied_pairs.is_empty() {
        let pairs: Vec<String> = spec.tied_pairs.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        let _ = writeln!(out, "tied = \"{}\"", pairs.join(", "));
    }
    for (i, l) in spec.layers.iter().enumerate() {
        let _ = writeln!(out, "\n[layer.{i}]\nin = {}\nout = {}\ntiles = {}\nact = {}", l.in_dim, l.out_dim, l.tiles, l.activation.name());
    }
    let p = run.placement;
    let h = run.hyper;
    let _ = writeln!(
        out,
        "\n[run]\nsteps = {completed}\nseed = {}\nranks = {}\nparam_tier = {}\ngrad_tier = {}\nopt_tier = {}\n\
         lr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nbatch = {}\nchunk_elems = {}",
        spec.seed, run.ranks, p.param_tier, p.grad_tier, p.opt_tier, h.lr, h.beta1, h.beta2, h.eps, run.batch, run.chunk_elems
    );
    out
}

fn read_digest(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: cannot read digest: {e}", path.display())))?;
    let t = text.trim();
    Ok(t.strip_prefix("digest=").unwrap_or(t).trim().to_ascii_lowercase())
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<u8, CliError> {
    let mut doc = load_docs(&[a.model.as_deref(), a.cluster.as_deref()])?;
    let cluster = doc.cluster_config()?;
    let default_root = std::env::temp_dir().join(format!("infinisim-{}", std::process::id()));
    let config_root = doc.nvme_root();
    let root = resolve_nvme_root(a.nvme_root.as_deref(), config_root.as_deref(), &default_root);
    let scratch = root == default_root;
    let manifest = root.join(MANIFEST);

    if a.resume {
        if scratch {
            return Err(CliError::config("--resume needs an NVMe root (--nvme-root, INFINISIM_NVME_ROOT or [cluster] nvme_root)"));
        }
        let saved = FlatConfig::load(&manifest)?;
        // The manifest's model and run settings replace any given by --model.
        doc.sections.retain(|k, _| k == "cluster");
        doc = doc.merge(saved);
    }
    let mut run = doc.run_options()?;
    if let Some(v) = a.ranks {
        run.ranks = v;
    }
    if let Some(t) = a.tier {
        run.placement = crate::train::Placement::uniform(t);
    }
    if let Some(v) = a.seed {
        run.seed = v;
    }
    if let Some(v) = a.batch {
        run.batch = v;
    }
    if let Some(v) = a.chunk {
        run.chunk_elems = v;
    }
    if let Some(v) = a.lr {
        run.hyper.lr = v;
    }
    run.hyper.validate()?;
    let completed = if a.resume { run.steps as u64 } else { 0 };
    let steps = if a.resume { a.steps.unwrap_or(0) } else { a.steps.unwrap_or(run.steps) };
    if run.ranks == 0 || run.batch == 0 || run.chunk_elems == 0 {
        return Err(CliError::config("ranks, batch and chunk_elems must be >= 1"));
    }
    let spec = doc.model_spec(run.seed)?;

    let io = if a.sync_io { IoMode::Sync } else { IoMode::Async { workers: 4 } };
    let store_cfg = StoreConfig::new(&root)
        .with_capacity(TierKind::Device, cluster.device_mem_bytes)
        .with_capacity(TierKind::Host, cluster.host_mem_bytes_per_node)
        .with_capacity(TierKind::Nvme, cluster.nvme_bytes_per_node)
        .with_io(io);
    let store = TierStore::create(store_cfg)?;
    let cfg = TrainConfig {
        world: run.ranks,
        placement: run.placement,
        steps,
        batch: run.batch,
        hyper: run.hyper,
        chunk_elems: run.chunk_elems,
    };

    let result = (|| -> Result<(Vec<f64>, String, u64), CliError> {
        if a.resume {
            let mut model = PartitionedModel::attach(spec.clone(), run.ranks, run.placement, completed, &store)?;
            let batch = Batch::synthetic(spec.seed, run.batch, spec.in_dim(), spec.out_dim());
            let (losses, peak) = continue_training(&mut model, &cfg, &batch, &store)?;
            Ok((losses, model.digest(&store)?, peak))
        } else {
            let (_, report) = run_training(&spec, &cfg, &store)?;
            Ok((report.losses, report.digest, report.peak_device_bytes))
        }
    })();
    let outcome = result.and_then(|(losses, digest, peak)| {
        let all_nvme = [run.placement.param_tier, run.placement.grad_tier, run.placement.opt_tier]
            .iter()
            .all(|&t| t == TierKind::Nvme);
        if all_nvme && !scratch {
            let text = manifest_text(&spec, &run, completed + steps as u64);
            let tmp = root.join(format!("{MANIFEST}.tmp"));
            std::fs::write(&tmp, text).map_err(|e| write_err(&tmp, e))?;
            std::fs::rename(&tmp, &manifest).map_err(|e| write_err(&manifest, e))?;
        }
        Ok((losses, digest, peak))
    });
    drop(store);
    if scratch {
        let _ = std::fs::remove_dir_all(&root);
    }
    let (losses, digest, peak) = outcome?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", completed + i as u64 + 1, l);
    }
    emit(a.out.as_deref(), &csv, stdout)?;
    let _ = writeln!(stderr, "peak_device_bytes={peak}");
    let _ = writeln!(stderr, "digest={digest}");
    if let Some(p) = &a.digest_out {
        emit(Some(p), &format!("{digest}\n"), stdout)?;
    }
    if let Some(p) = &a.baseline_digest {
        let expected = read_digest(p)?;
        if expected != digest {
            return Err(CliError {
                code: EXIT_MISMATCH,
                message: format!("digest mismatch: expected {expected}, got {digest}"),
            });
        }
        let _ = writeln!(stderr, "digest matches {}", p.display());
    }
    Ok(EXIT_OK)
}
