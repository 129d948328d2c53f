//! End-to-end acceptance checks. Each criterion runs in order, is timed
//! against its budget and prints a single PASS/FAIL line; any failure makes
//! the process exit nonzero.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{check_tiling, randomized_store_ops, stage_costs_from, tick_forward};
use half::f16;
use infinisim::baseline::{run_baseline, DenseModel};
use infinisim::store::{IoMode, StoreConfig, TierStore};
use infinisim::train::{run_training, Batch, LayerSpec, ModelSpec, Placement, TrainConfig};
use infinisim_core::adam::{adam_update_chunk, AdamHyper};
use infinisim_core::efficiency::{ait, efficiency, required_bandwidth, AitKind};
use infinisim_core::memory::param_count;
use infinisim_core::mlp::Activation;
use infinisim_core::overlap::{
    plan_prefetch, simulate, simulate_backward, trace_schedule, verify_timeline, LayerOp, OperatorSequence,
    PrefetchDepths, SimOptions, StageCosts,
};
use infinisim_core::placement::{
    effective_param_bandwidth, future_hardware_table, max_model_params, BandwidthReference, PlannerOptions, Strategy,
};
use infinisim_core::tiling::{max_hidden_under_fragmentation, AllocationModel};
use infinisim_core::{ClusterConfig, ModelConfig, TierKind};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn within(x: f64, target: f64, tol: f64) -> bool {
    ((x - target) / target).abs() <= tol
}

fn params_fidelity() {
    let p = param_count(&ModelConfig::new(125, 8192)) as f64;
    assert!((0.99e11..=1.01e11).contains(&p), "100B row: {p:e}");
    let p = param_count(&ModelConfig::new(128, 25_600)) as f64;
    assert!((0.99e12..=1.01e12).contains(&p), "1T row: {p:e}");
}

fn efficiency_anchors() {
    let e = efficiency(1024.0, 70e9, 70e12).unwrap();
    assert!(e >= 0.50, "param ait 1024 at 70 GB/s: {e}");
    let e = efficiency(49_152.0, 2e9, 70e12).unwrap();
    assert!(e >= 0.50, "activation ait at hd=2K: {e}");
    let bw = required_bandwidth(196_608.0, 70e12, 0.5).unwrap();
    assert!(bw < 1e9, "activation ait at hd=8K: {bw:e}");
    let bw = required_bandwidth(512.0, 70e12, 0.9).unwrap();
    assert!((1.0e12..=1.5e12).contains(&bw), "optimizer states: {bw:e}");
}

fn four_times_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let cfg = ModelConfig::new(1 + rng.next_u64() % 200, 64 * (1 + rng.next_u64() % 1024))
            .with_seq(1 + rng.next_u64() % 8192)
            .with_batch((1 + rng.next_u64() % 64) as f64);
        let peak = 1e12 * (1 + rng.next_u64() % 500) as f64;
        let eff = (1 + rng.next_u64() % 98) as f64 / 100.0;
        let opt = required_bandwidth(ait(AitKind::OptimizerStates, &cfg), peak, eff).unwrap();
        let param = required_bandwidth(ait(AitKind::ParamGrad, &cfg), peak, eff).unwrap();
        assert_eq!(opt, 4.0 * param, "{cfg:?} peak {peak} eff {eff}");
    }
}

fn hardware_scaling() {
    let rows = future_hardware_table(&ClusterConfig::dgx2(32), &[1.0, 10.0, 100.0], &BandwidthReference::default())
        .unwrap();
    let base = rows[0];
    for (row, k) in rows.iter().zip([1.0, 10.0, 100.0]) {
        assert_eq!(row.slow_memory_per_device, k * base.slow_memory_per_device);
        assert_eq!(row.slow_memory_aggregate, k * base.slow_memory_aggregate);
        assert_eq!(row.device_device, k * base.device_device);
        assert_eq!(row.peak_per_device, k * base.peak_per_device);
    }
    assert!(within(base.slow_memory_per_device, 3e9, 0.25), "{:e}", base.slow_memory_per_device);
    assert!(within(base.slow_memory_aggregate, 1.5e12, 0.25), "{:e}", base.slow_memory_aggregate);
    assert!(within(base.device_device, 70e9, 0.25), "{:e}", base.device_device);
}

fn model_size_ladder() {
    let cluster = ClusterConfig::dgx2(1);
    let opts = PlannerOptions::default();
    let max = |s| max_model_params(&cluster, s, &opts) as f64;
    let dp = max(Strategy::DataParallel);
    assert!(within(dp, 1.4e9, 0.25), "data-parallel {dp:e}");
    for s in [Strategy::Zero2, Strategy::ZeroOffload] {
        assert!(within(max(s), 1.3e10, 0.35), "{s:?} {:e}", max(s));
    }
    assert!(within(max(Strategy::ZeroInfCpu), 1e11, 0.35), "cpu {:e}", max(Strategy::ZeroInfCpu));
    assert!(within(max(Strategy::ZeroInfNvme), 1e12, 0.40), "nvme {:e}", max(Strategy::ZeroInfNvme));
    let ladder = [
        Strategy::DataParallel,
        Strategy::Zero2,
        Strategy::ZeroOffload,
        Strategy::ThreeD,
        Strategy::Zero3,
        Strategy::ZeroInfCpu,
        Strategy::ZeroInfNvme,
    ];
    for w in ladder.windows(2) {
        assert!(max(w[1]) >= max(w[0]), "{:?} < {:?}", w[1], w[0]);
    }
    assert!(max(Strategy::ZeroInfNvme) / dp >= 400.0);
}

fn partitioned_bandwidth() {
    assert_eq!(effective_param_bandwidth(&ClusterConfig::dgx2(1), TierKind::Host, true), 48e9);
    assert!(effective_param_bandwidth(&ClusterConfig::dgx2(64), TierKind::Host, true) >= 3e12);
    for nodes in [1, 2, 8, 64, 512] {
        assert_eq!(effective_param_bandwidth(&ClusterConfig::dgx2(nodes), TierKind::Host, false), 12e9);
    }
}

fn sequence(n: usize) -> (OperatorSequence, OperatorSequence) {
    let layers: Vec<LayerOp> = (0..n)
        .map(|i| LayerOp { name: format!("op{i}"), fetch: vec![format!("p{i}")], param_bytes: 1, compute_flops: 1.0 })
        .collect();
    trace_schedule(&layers).unwrap()
}

fn overlap_simulator() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let n = 1 + (rng.next_u32() % 24) as usize;
        let gg = 1 + (rng.next_u32() % 4) as usize;
        let cg = gg + (rng.next_u32() % 3) as usize;
        let depths = PrefetchDepths::new(cg + (rng.next_u32() % 3) as usize, cg, gg).unwrap();
        let (fwd, bwd) = sequence(n);
        let tl = if case % 2 == 0 {
            let ticks: Vec<[u64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.next_u64() % 6)).collect();
            let costs: Vec<StageCosts> = ticks.iter().map(|&c| stage_costs_from(c)).collect();
            let plan = plan_prefetch(&fwd, depths).unwrap();
            let tl = simulate(&fwd, &plan, &costs, SimOptions::overlapped()).unwrap();
            assert_eq!(tl.total_time, tick_forward(&ticks, depths).1 as f64, "case {case}");
            tl
        } else {
            let mut r = || (rng.next_u32() % 3000) as f64 / 1000.0;
            let costs: Vec<StageCosts> = (0..n)
                .map(|_| StageCosts {
                    nc: r(),
                    cg: r(),
                    gg: r(),
                    compute: r(),
                    reduce_scatter: r(),
                    grad_offload: r(),
                    ckpt_offload: r(),
                })
                .collect();
            let plan = plan_prefetch(&bwd, depths).unwrap();
            let opts = SimOptions { ckpt_offload: true, ..SimOptions::overlapped() };
            simulate_backward(&bwd, &plan, &costs, opts).unwrap()
        };
        let eps = 1e-9 * tl.serial_time.max(1.0);
        assert!(tl.total_time <= tl.serial_time + eps, "case {case}");
        let bound = tl.lane_loads().into_iter().fold(0.0, f64::max);
        assert!(tl.total_time + eps >= bound, "case {case}");
        verify_timeline(&tl).unwrap();
    }

    let n = 64;
    let depths = PrefetchDepths::new(3, 2, 1).unwrap();
    let (fwd, _) = sequence(n);
    let plan = plan_prefetch(&fwd, depths).unwrap();
    let tl = simulate(&fwd, &plan, &vec![stage_costs_from([1; 4]); n], SimOptions::overlapped()).unwrap();
    assert_eq!(tl.total_time, tick_forward(&vec![[1; 4]; n], depths).1 as f64);
    let s = tl.speedup();
    assert!((3.5..=4.0).contains(&s), "balanced speedup {s}");
}

fn tiling_equivalence() {
    for (in_dim, out_dim, batch) in [(8, 32, 3), (20, 48, 5), (64, 112, 2)] {
        for t in [1, 2, 3, 4, 7, 16] {
            let c = check_tiling::<f64>(in_dim, out_dim, batch, t, t as u64);
            assert!(c.worst() < 1e-12, "f64 {in_dim}x{out_dim} T={t}: {}", c.worst());
            let c = check_tiling::<f32>(in_dim, out_dim, batch, t, t as u64);
            assert!(c.worst() < 1e-5, "f32 {in_dim}x{out_dim} T={t}: {}", c.worst());
            let share = c.untiled_bytes.div_ceil(t as u64);
            assert!(c.forward_peak <= share + c.pool_buffer, "T={t}: peak {} vs {share}", c.forward_peak);
        }
    }
    let chunk = 2_000_000_000u64;
    let model = AllocationModel::with_fp32_states();
    let c = model.largest_coefficient() as f64;
    assert!(model.largest_allocation(8192, 1) <= chunk as u128);
    for t in [1u64, 2, 4, 7, 16] {
        let hd = max_hidden_under_fragmentation(chunk, t, &model) as f64;
        let law = (chunk as f64 * t as f64 / c).sqrt();
        assert!((hd - law.floor()).abs() <= 1.0, "T={t}: {hd} vs {law}");
    }
}

fn three_layer(seed: u64) -> ModelSpec {
    ModelSpec {
        layers: vec![
            LayerSpec::linear(8, 16, Activation::Relu),
            LayerSpec::linear(16, 16, Activation::Relu),
            LayerSpec::linear(16, 4, Activation::Identity),
        ],
        tied_pairs: vec![],
        seed,
    }
}

fn tied_tiled(seed: u64) -> ModelSpec {
    ModelSpec {
        layers: vec![
            LayerSpec::tiled(8, 16, 4, Activation::Relu),
            LayerSpec::linear(16, 16, Activation::Relu),
            LayerSpec::linear(16, 16, Activation::Relu),
            LayerSpec::linear(16, 4, Activation::Identity),
        ],
        tied_pairs: vec![(1, 2)],
        seed,
    }
}

fn train(spec: &ModelSpec, cfg: &TrainConfig) -> (Vec<f64>, String) {
    let dir = tempfile::tempdir().unwrap();
    let store = TierStore::create(StoreConfig::new(dir.path()).with_io(IoMode::Async { workers: 4 })).unwrap();
    let (_, report) = run_training(spec, cfg, &store).unwrap();
    (report.losses, report.digest)
}

fn placement_invariance() {
    for spec in [three_layer(7), tied_tiled(7)] {
        let base = TrainConfig { steps: 50, ..TrainConfig::default() };
        let (losses, digest) = run_baseline(&spec, base.steps, base.batch, &base.hyper).unwrap();
        assert!(losses[49] < 0.5 * losses[0], "baseline did not halve: {} -> {}", losses[0], losses[49]);
        let (l1, d1) = train(&spec, &TrainConfig { world: 1, placement: Placement::uniform(TierKind::Device), ..base.clone() });
        let (l4, d4) = train(&spec, &TrainConfig { world: 4, placement: Placement::uniform(TierKind::Nvme), ..base });
        assert_eq!(d1, d4, "world 1 device vs world 4 nvme");
        assert_eq!(d1, digest, "vs baseline");
        assert_eq!(l1, l4);
    }
}

fn chunk_invariance() {
    let spec = tied_tiled(5);
    let base = TrainConfig { world: 3, steps: 4, placement: Placement::uniform(TierKind::Host), ..TrainConfig::default() };
    let digests: Vec<String> =
        [1, 3, 64, usize::MAX].iter().map(|&c| train(&spec, &TrainConfig { chunk_elems: c, ..base.clone() }).1).collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]), "{digests:?}");

    // p=1, g=1, lr=0.1: m_hat = v_hat = 1 so p = 1 - 0.1/(1 + eps)
    let h = AdamHyper { lr: 0.1, ..AdamHyper::default() };
    let (mut p, mut m, mut v, mut p16) = (vec![1.0f32], vec![0.0f32], vec![0.0f32], vec![f16::ZERO]);
    adam_update_chunk(&h, 1, &mut p, &mut m, &mut v, &[f16::ONE], &mut p16).unwrap();
    assert!((p[0] as f64 - 0.9).abs() < 1e-6, "{}", p[0]);
    assert_eq!(p16[0], f16::from_f32(p[0]));
}

fn store_properties() {
    let rejected = randomized_store_ops(2024, 10_000, IoMode::Async { workers: 4 });
    assert!(rejected > 0, "capacity limits never exercised");
}

fn gradient_check() {
    let spec = ModelSpec {
        layers: vec![
            LayerSpec::linear(8, 16, Activation::GeluApprox),
            LayerSpec::linear(16, 16, Activation::GeluApprox),
            LayerSpec::linear(16, 4, Activation::Identity),
        ],
        tied_pairs: vec![],
        seed: 7,
    };
    let model = DenseModel::<f64>::from_seed(&spec).unwrap();
    let batch = Batch::synthetic(7, 5, 8, 4);
    let x: Vec<f64> = batch.inputs.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = batch.targets.iter().map(|&v| v as f64).collect();
    let (_, grads, _) = model.gradients(&x, &t, 5);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (&o, (gw, gb)) in &grads {
        for (which, g) in [(0, gw), (1, gb)] {
            for (i, &gi) in g.iter().enumerate() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                for (m, d) in [(&mut plus, h), (&mut minus, -h)] {
                    let p = m.params.get_mut(&o).unwrap();
                    if which == 0 {
                        p.0[i] += d
                    } else {
                        p.1[i] += d
                    }
                }
                let fd = (plus.loss(&x, &t, 5) - minus.loss(&x, &t, 5)) / (2.0 * h);
                worst = worst.max((fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-8));
            }
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

type Check = fn();

const CRITERIA: [(&str, Check, Option<u64>); 12] = [
    ("parameter counts", params_fidelity, Some(1)),
    ("efficiency anchors", efficiency_anchors, Some(1)),
    ("optimizer bandwidth is 4x parameter bandwidth", four_times_law, None),
    ("future hardware scaling", hardware_scaling, Some(1)),
    ("max model size ladder", model_size_ladder, Some(5)),
    ("partitioned parameter bandwidth", partitioned_bandwidth, None),
    ("overlap simulator", overlap_simulator, Some(10)),
    ("tiling equivalence", tiling_equivalence, Some(10)),
    ("placement invariance", placement_invariance, Some(30)),
    ("chunk invariance", chunk_invariance, Some(5)),
    ("tier store properties", store_properties, Some(30)),
    ("gradient check", gradient_check, Some(5)),
];

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check, budget)) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let verdict = match (outcome, budget) {
            (Err(e), _) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("FAIL: {msg}")
            }
            (Ok(()), Some(s)) if took > Duration::from_secs(*s) => format!("FAIL: over the {s} s budget"),
            (Ok(()), _) => "PASS".to_string(),
        };
        if verdict != "PASS" {
            failed += 1;
        }
        println!("criterion {:>2} {name} ({:.2} s) ... {verdict}", i + 1, took.as_secs_f64());
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
