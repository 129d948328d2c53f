//! Operator traces, prefetch planning and a deterministic timeline simulator.
//!
//! Fetching a parameter takes up to three transfers: NVMe to host (`nc`),
//! host to device (`cg`) and the device allgather (`gg`). With prefetch
//! depths `(d_nc, d_cg, d_gg)` the start of operator `i` issues `nc` for
//! `i + d_nc`, `cg` for `i + d_cg` and `gg` for `i + d_gg`. In the backward
//! pass each operator's gradients are reduce-scattered and then offloaded
//! while later operators compute.
//!
//! Stages run on four lanes (NVMe, PCIe, device fabric, compute). Each lane
//! serves its stages one at a time in issue order. Because that order is
//! fixed up front, start times follow a max-plus recurrence, which keeps
//! the simulation deterministic and monotone in every stage cost.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::tier::TierKind;

/// One layer of a model as seen by the tracer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOp {
    pub name: String,
    /// Parameter keys the layer reads. Shared keys may appear in several layers.
    pub fetch: Vec<String>,
    /// fp16 bytes of all fetched parameters.
    pub param_bytes: u64,
    pub compute_flops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Op {
    pub id: usize,
    pub name: String,
    pub fetch: Vec<String>,
    pub param_bytes: u64,
    pub compute_flops: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSequence {
    pub direction: Direction,
    pub ops: Vec<Op>,
}

impl OperatorSequence {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.ops.iter().map(|o| o.id).collect()
    }
}

/// Forward sequence in layer order and the reversed backward sequence.
/// Re-tracing a changed spec is how a changed workflow gets picked up.
pub fn trace_schedule(layers: &[LayerOp]) -> Result<(OperatorSequence, OperatorSequence)> {
    if layers.is_empty() {
        return Err(Error::EmptyModel);
    }
    for l in layers {
        if l.param_bytes == 0 || !(l.compute_flops > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "layer `{}` needs positive parameter bytes and flops",
                l.name
            )));
        }
    }
    let ops: Vec<Op> = layers
        .iter()
        .enumerate()
        .map(|(id, l)| Op {
            id,
            name: l.name.clone(),
            fetch: l.fetch.clone(),
            param_bytes: l.param_bytes,
            compute_flops: l.compute_flops,
        })
        .collect();
    let mut backward = ops.clone();
    backward.reverse();
    Ok((
        OperatorSequence { direction: Direction::Forward, ops },
        OperatorSequence { direction: Direction::Backward, ops: backward },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchDepths {
    pub nc: usize,
    pub cg: usize,
    pub gg: usize,
}

impl Default for PrefetchDepths {
    fn default() -> Self {
        PrefetchDepths { nc: 3, cg: 2, gg: 1 }
    }
}

impl PrefetchDepths {
    pub fn new(nc: usize, cg: usize, gg: usize) -> Result<Self> {
        let d = PrefetchDepths { nc, cg, gg };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc >= self.cg && self.cg >= self.gg && self.gg >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidDepths { nc: self.nc, cg: self.cg, gg: self.gg })
        }
    }

    fn of(&self, stage: Stage) -> usize {
        match stage {
            Stage::Nc => self.nc,
            Stage::Cg => self.cg,
            _ => self.gg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Nc,
    Cg,
    Gg,
    Compute,
    ReduceScatter,
    GradOffload,
    CkptOffload,
}

impl Stage {
    pub const FETCH: [Stage; 3] = [Stage::Nc, Stage::Cg, Stage::Gg];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Nc => "nc",
            Stage::Cg => "cg",
            Stage::Gg => "gg",
            Stage::Compute => "compute",
            Stage::ReduceScatter => "reduce_scatter",
            Stage::GradOffload => "grad_offload",
            Stage::CkptOffload => "ckpt_offload",
        }
    }

    pub fn lane(self) -> Lane {
        match self {
            Stage::Nc => Lane::Nvme,
            Stage::Cg | Stage::GradOffload | Stage::CkptOffload => Lane::Pcie,
            Stage::Gg | Stage::ReduceScatter => Lane::Fabric,
            Stage::Compute => Lane::Compute,
        }
    }

    fn is_transfer(self) -> bool {
        self != Stage::Compute
    }

    /// Position among stages issued at the same slot.
    fn rank(self) -> u8 {
        match self {
            Stage::Compute => 0,
            Stage::ReduceScatter => 1,
            Stage::GradOffload | Stage::CkptOffload => 2,
            Stage::Nc => 3,
            Stage::Cg => 4,
            Stage::Gg => 5,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Lane {
    Nvme,
    Pcie,
    Fabric,
    Compute,
}

impl Lane {
    pub const ALL: [Lane; 4] = [Lane::Nvme, Lane::Pcie, Lane::Fabric, Lane::Compute];

    pub fn name(self) -> &'static str {
        match self {
            Lane::Nvme => "nvme",
            Lane::Pcie => "pcie",
            Lane::Fabric => "fabric",
            Lane::Compute => "compute",
        }
    }
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Issue schedule for one sequence. `issues[i]` lists `(stage, target position)`
/// pairs issued when the operator at position `i` starts; `eager` lists those
/// issued at time zero, in dependency order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchPlan {
    pub depths: PrefetchDepths,
    pub len: usize,
    pub eager: Vec<(Stage, usize)>,
    pub issues: Vec<Vec<(Stage, usize)>>,
}

impl PrefetchPlan {
    /// Position whose start issues `stage` for `target`; `None` means time zero.
    pub fn trigger(&self, stage: Stage, target: usize) -> Option<usize> {
        target.checked_sub(self.depths.of(stage))
    }
}

pub fn plan_prefetch(seq: &OperatorSequence, depths: PrefetchDepths) -> Result<PrefetchPlan> {
    depths.validate()?;
    let n = seq.len();
    let mut eager = Vec::new();
    for target in 0..n {
        for stage in Stage::FETCH {
            if target < depths.of(stage) {
                eager.push((stage, target));
            }
        }
    }
    let issues = (0..n)
        .map(|i| {
            Stage::FETCH
                .into_iter()
                .filter_map(|s| {
                    let t = i + depths.of(s);
                    (t < n).then_some((s, t))
                })
                .collect()
        })
        .collect();
    Ok(PrefetchPlan { depths, len: n, eager, issues })
}

/// Seconds spent in each stage of one operator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageCosts {
    pub nc: f64,
    pub cg: f64,
    pub gg: f64,
    pub compute: f64,
    pub reduce_scatter: f64,
    pub grad_offload: f64,
    pub ckpt_offload: f64,
}

impl StageCosts {
    pub fn uniform(c: f64) -> Self {
        StageCosts { nc: c, cg: c, gg: c, compute: c, reduce_scatter: c, grad_offload: c, ckpt_offload: c }
    }

    pub fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Nc => self.nc,
            Stage::Cg => self.cg,
            Stage::Gg => self.gg,
            Stage::Compute => self.compute,
            Stage::ReduceScatter => self.reduce_scatter,
            Stage::GradOffload => self.grad_offload,
            Stage::CkptOffload => self.ckpt_offload,
        }
    }

    pub fn set(&mut self, stage: Stage, v: f64) {
        match stage {
            Stage::Nc => self.nc = v,
            Stage::Cg => self.cg = v,
            Stage::Gg => self.gg = v,
            Stage::Compute => self.compute = v,
            Stage::ReduceScatter => self.reduce_scatter = v,
            Stage::GradOffload => self.grad_offload = v,
            Stage::CkptOffload => self.ckpt_offload = v,
        }
    }
}

/// Transfer and compute times of `op` for parameters homed on `tier`.
/// `ckpt_bytes` is the activation checkpoint written per operator when
/// checkpoints are offloaded to host memory.
pub fn stage_costs(cluster: &ClusterConfig, tier: TierKind, op: &Op, ckpt_bytes: u64) -> StageCosts {
    let world = cluster.world_size() as f64;
    let full = op.param_bytes as f64;
    let shard = full / world;
    let pcie = cluster.pcie_bw_shared();
    let nvme = cluster.nvme_bw_shared();
    let fabric = if world > 1.0 { full * (world - 1.0) / world / cluster.device_device_bw } else { 0.0 };
    let (nc, cg, offload) = match tier {
        TierKind::Device => (0.0, 0.0, 0.0),
        TierKind::Host => (0.0, shard / pcie, shard / pcie),
        TierKind::Nvme => (shard / nvme, shard / pcie, shard / pcie.min(nvme)),
    };
    StageCosts {
        nc,
        cg,
        gg: fabric,
        compute: op.compute_flops / cluster.peak_tp_per_device,
        reduce_scatter: fabric,
        grad_offload: offload,
        ckpt_offload: ckpt_bytes as f64 / pcie,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    /// `false` runs every stage back to back.
    pub overlap: bool,
    /// Caps gathered parameter bytes in flight; fetches wait for earlier
    /// operators to finish when exceeded.
    pub prefetch_budget: Option<u64>,
    /// Adds a checkpoint write to the PCIe lane after each forward compute.
    pub ckpt_offload: bool,
}

impl SimOptions {
    pub fn overlapped() -> Self {
        SimOptions { overlap: true, ..Default::default() }
    }

    pub fn serial() -> Self {
        SimOptions { overlap: false, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Operator id (layer index).
    pub op: usize,
    /// Position within the simulated sequence.
    pub pos: usize,
    pub stage: Stage,
    pub lane: Lane,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub total_time: f64,
    /// Sum of every stage cost: the fully serialized time.
    pub serial_time: f64,
}

impl Timeline {
    pub fn speedup(&self) -> f64 {
        if self.total_time > 0.0 {
            self.serial_time / self.total_time
        } else {
            1.0
        }
    }

    /// Busy time per lane, indexed like [`Lane::ALL`].
    pub fn lane_loads(&self) -> [f64; 4] {
        let mut loads = [0.0; 4];
        for e in &self.events {
            loads[e.lane as usize] += e.end - e.start;
        }
        loads
    }

    pub fn events_on(&self, lane: Lane) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.lane == lane)
    }
}

struct Task {
    pos: usize,
    stage: Stage,
    dur: f64,
    slot: i64,
    deps: Vec<usize>,
    trigger: Option<usize>,
}

fn build_tasks(
    seq: &OperatorSequence,
    plan: &PrefetchPlan,
    costs: &[StageCosts],
    opts: &SimOptions,
    backward: bool,
) -> Vec<Task> {
    let n = seq.len();
    let mut tasks: Vec<Task> = Vec::with_capacity(n * 6);
    // compute task index per position, filled as positions are built
    let mut compute_idx: Vec<usize> = Vec::with_capacity(n);
    let d = plan.depths;

    // Budget: the latest earlier operator that must finish before fetching `j`.
    let wait_for = |j: usize| -> Option<usize> {
        let budget = opts.prefetch_budget?;
        let mut inflight = seq.ops[j].param_bytes;
        for k in (0..j).rev() {
            inflight = inflight.saturating_add(seq.ops[k].param_bytes);
            if inflight > budget {
                return Some(k);
            }
        }
        None
    };

    // Fetch tasks reference compute tasks of earlier positions only, so build
    // compute tasks in a first pass with placeholder deps.
    for (j, c) in costs.iter().enumerate().take(n) {
        compute_idx.push(tasks.len());
        tasks.push(Task {
            pos: j,
            stage: Stage::Compute,
            dur: c.compute,
            slot: j as i64,
            deps: Vec::new(),
            trigger: None,
        });
    }
    for j in 0..n {
        let budget_dep = wait_for(j);
        let mut prev: Option<usize> = None;
        let mut min_slot = budget_dep.map(|k| k as i64).unwrap_or(i64::MIN);
        for stage in Stage::FETCH {
            let slot = (j as i64 - d.of(stage) as i64).max(min_slot);
            min_slot = slot;
            let mut deps = Vec::new();
            if let Some(p) = prev {
                deps.push(p);
            } else if let Some(k) = budget_dep {
                deps.push(compute_idx[k]);
            }
            let idx = tasks.len();
            tasks.push(Task {
                pos: j,
                stage,
                dur: costs[j].get(stage),
                slot,
                deps,
                trigger: plan.trigger(stage, j).map(|t| compute_idx[t]),
            });
            prev = Some(idx);
        }
        tasks[compute_idx[j]].deps.push(prev.expect("three fetch stages"));
        if backward {
            let rs = tasks.len();
            tasks.push(Task {
                pos: j,
                stage: Stage::ReduceScatter,
                dur: costs[j].reduce_scatter,
                slot: j as i64 + 1,
                deps: alloc::vec![compute_idx[j]],
                trigger: None,
            });
            tasks.push(Task {
                pos: j,
                stage: Stage::GradOffload,
                dur: costs[j].grad_offload,
                slot: j as i64 + 2,
                deps: alloc::vec![rs],
                trigger: None,
            });
        } else if opts.ckpt_offload {
            tasks.push(Task {
                pos: j,
                stage: Stage::CkptOffload,
                dur: costs[j].ckpt_offload,
                slot: j as i64 + 1,
                deps: alloc::vec![compute_idx[j]],
                trigger: None,
            });
        }
    }
    tasks
}

fn run(seq: &OperatorSequence, plan: &PrefetchPlan, costs: &[StageCosts], opts: &SimOptions, backward: bool) -> Result<Timeline> {
    if seq.is_empty() {
        return Err(Error::EmptyModel);
    }
    if costs.len() != seq.len() || plan.len != seq.len() {
        return Err(Error::Shape(alloc::format!(
            "{} operators, {} cost rows, plan for {}",
            seq.len(),
            costs.len(),
            plan.len
        )));
    }
    if costs.iter().any(|c| Stage::FETCH.iter().chain(&[Stage::Compute, Stage::ReduceScatter, Stage::GradOffload, Stage::CkptOffload]).any(|&s| !(c.get(s) >= 0.0))) {
        return Err(Error::Domain("stage costs must be non-negative"));
    }
    let tasks = build_tasks(seq, plan, costs, opts, backward);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&i| (tasks[i].slot, tasks[i].stage.rank(), tasks[i].pos));

    let mut start = alloc::vec![f64::NAN; tasks.len()];
    let mut end = alloc::vec![f64::NAN; tasks.len()];
    let mut lane_free = [0.0f64; 4];
    let mut clock = 0.0f64;
    for &i in &order {
        let t = &tasks[i];
        let s = if opts.overlap {
            let mut s = lane_free[t.stage.lane() as usize];
            for &d in &t.deps {
                if end[d].is_nan() {
                    return Err(Error::Shape(String::from("dependency scheduled out of order")));
                }
                s = s.max(end[d]);
            }
            if let Some(trig) = t.trigger {
                if start[trig].is_nan() {
                    return Err(Error::Shape(String::from("issue trigger scheduled out of order")));
                }
                s = s.max(start[trig]);
            }
            s
        } else {
            clock
        };
        start[i] = s;
        end[i] = s + t.dur;
        lane_free[t.stage.lane() as usize] = end[i];
        clock = end[i];
    }

    let serial_time: f64 = order.iter().map(|&i| tasks[i].dur).sum();
    let total_time = end.iter().cloned().fold(0.0, f64::max);
    let events = order
        .iter()
        .filter(|&&i| !(tasks[i].stage.is_transfer() && tasks[i].dur == 0.0))
        .map(|&i| {
            let t = &tasks[i];
            Event { op: seq.ops[t.pos].id, pos: t.pos, stage: t.stage, lane: t.stage.lane(), start: start[i], end: end[i] }
        })
        .collect();
    Ok(Timeline { events, total_time, serial_time })
}

/// Forward pass: fetch stages plus compute (plus checkpoint writes if enabled).
pub fn simulate(seq: &OperatorSequence, plan: &PrefetchPlan, costs: &[StageCosts], opts: SimOptions) -> Result<Timeline> {
    run(seq, plan, costs, &opts, false)
}

/// Backward pass: fetch stages, compute, reduce-scatter and gradient offload.
pub fn simulate_backward(
    seq: &OperatorSequence,
    plan: &PrefetchPlan,
    costs: &[StageCosts],
    opts: SimOptions,
) -> Result<Timeline> {
    run(seq, plan, costs, &opts, true)
}

/// Checks that no lane runs two stages at once and that every operator's
/// stages respect `nc -> cg -> gg -> compute -> reduce_scatter -> grad_offload`
/// (and `compute -> ckpt_offload`). Missing stages are skipped.
pub fn verify_timeline(tl: &Timeline) -> core::result::Result<(), String> {
    let eps = 1e-9 * tl.total_time.max(1e-30);
    for lane in Lane::ALL {
        let mut evs: Vec<&Event> = tl.events_on(lane).collect();
        evs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        for w in evs.windows(2) {
            if w[1].start + eps < w[0].end {
                return Err(alloc::format!(
                    "lane {lane}: {}#{} [{}, {}] overlaps {}#{} [{}, {}]",
                    w[0].stage, w[0].op, w[0].start, w[0].end, w[1].stage, w[1].op, w[1].start, w[1].end
                ));
            }
        }
    }
    let chain = [Stage::Nc, Stage::Cg, Stage::Gg, Stage::Compute, Stage::ReduceScatter, Stage::GradOffload];
    let mut positions: Vec<usize> = tl.events.iter().map(|e| e.pos).collect();
    positions.sort_unstable();
    positions.dedup();
    for pos in positions {
        let find = |s: Stage| tl.events.iter().find(|e| e.pos == pos && e.stage == s);
        let mut last: Option<&Event> = None;
        for s in chain {
            if let Some(e) = find(s) {
                if let Some(prev) = last {
                    if e.start + eps < prev.end {
                        return Err(alloc::format!(
                            "op {}: {} starts at {} before {} ends at {}",
                            e.op, e.stage, e.start, prev.stage, prev.end
                        ));
                    }
                }
                last = Some(e);
            }
        }
        if let (Some(c), Some(k)) = (find(Stage::Compute), find(Stage::CkptOffload)) {
            if k.start + eps < c.end {
                return Err(alloc::format!("op {}: checkpoint write before compute ends", c.op));
            }
        }
    }
    if tl.events.iter().any(|e| e.end > tl.total_time + eps) {
        return Err(String::from("event ends after total time"));
    }
    Ok(())
}
