//! Mixed-precision training of small layered models with every model state
//! partitioned across simulated ranks and offloaded to a chosen tier.
//!
//! Per parameter tile the store holds five partitioned states: the fp16
//! working copy (`.p16`), the fp16 gradient (`.g16`) and the fp32 master,
//! momentum and variance (`.master`, `.m`, `.v`). A step gathers each layer
//! right before use, computes in fp32, rounds every per-sample weight
//! gradient to fp16 and sums those exactly in f64. Exact sums make the result
//! independent of how samples are grouped into ranks, so any world size and
//! any placement produce the same bits as the monolithic reference in
//! [`crate::baseline`].

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use half::f16;
use infinisim_core::adam::{adam_update_chunk, AdamHyper};
use infinisim_core::mlp::{linear_backward, linear_forward, mse, mse_grad, take_columns, Activation};
use infinisim_core::overlap::{plan_prefetch, trace_schedule, LayerOp, OperatorSequence, PrefetchDepths, PrefetchPlan};
use infinisim_core::tiling::row_splits;
use infinisim_core::{DType, TierKind, TypedArray};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::partition::{allgather, partition, reduce_scatter, PartitionedTensor};
use crate::store::TierStore;
use crate::Error;

/// Exact f64 accumulation of fp16 values holds below this many summands.
pub const MAX_SUMMANDS: usize = 1 << 13;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-block tiles; 1 is a plain linear layer.
    pub tiles: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, tiles: 1, activation }
    }

    pub fn tiled(in_dim: usize, out_dim: usize, tiles: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, tiles, activation }
    }

    pub fn rows(&self) -> Vec<Range<usize>> {
        row_splits(self.out_dim, self.tiles).expect("validated spec")
    }

    pub fn param_len(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// `(a, b)`: layer `b` uses the parameters of layer `a`.
    pub tied_pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.layers.is_empty() {
            return Err(Error::Spec("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Spec(format!("layer {i} has a zero dimension")));
            }
            row_splits(l.out_dim, l.tiles).map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::Spec(format!(
                    "layer {i} takes {} inputs but layer {} produces {}",
                    l.in_dim,
                    i - 1,
                    self.layers[i - 1].out_dim
                )));
            }
        }
        let mut consumers = BTreeSet::new();
        for &(a, b) in &self.tied_pairs {
            let n = self.layers.len();
            if a >= n || b >= n || a == b {
                return Err(Error::Spec(format!("tied pair {a}:{b} is out of range")));
            }
            let (la, lb) = (&self.layers[a], &self.layers[b]);
            if (la.in_dim, la.out_dim, la.tiles) != (lb.in_dim, lb.out_dim, lb.tiles) {
                return Err(Error::Spec(format!("tied layers {a} and {b} differ in shape")));
            }
            if !consumers.insert(b) {
                return Err(Error::Spec(format!("layer {b} is tied twice")));
            }
        }
        if self.tied_pairs.iter().any(|&(a, _)| consumers.contains(&a)) {
            return Err(Error::Spec("a tied layer cannot own parameters for another".into()));
        }
        Ok(())
    }

    /// Layer whose parameters `layer` computes with.
    pub fn owner(&self, layer: usize) -> usize {
        self.tied_pairs.iter().find(|p| p.1 == layer).map_or(layer, |p| p.0)
    }

    pub fn param_key(&self, layer: usize) -> String {
        param_key(self.owner(layer))
    }

    /// Layers that own parameters, in order.
    pub fn owners(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.owner(l) == l).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Operator list for the prefetch planner: fp16 bytes of each layer's
    /// fetch set and its forward flops per sample.
    pub fn layer_ops(&self, fetch: &[BTreeSet<String>]) -> Vec<LayerOp> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let keys: Vec<String> = fetch[i].iter().cloned().collect();
                let bytes: usize = keys
                    .iter()
                    .filter_map(|k| key_layer(k))
                    .map(|o| 2 * self.layers[o].param_len())
                    .sum();
                LayerOp {
                    name: format!("layer{i}"),
                    fetch: keys,
                    param_bytes: bytes.max(1) as u64,
                    compute_flops: (2 * l.in_dim * l.out_dim) as f64,
                }
            })
            .collect()
    }
}

pub fn param_key(owner: usize) -> String {
    format!("layer{owner}")
}

fn key_layer(key: &str) -> Option<usize> {
    key.strip_prefix("layer")?.parse().ok()
}

pub fn tile_key(key: &str, tile: usize) -> String {
    format!("{key}.tile{tile}")
}

/// Seeded uniform(-1/sqrt(in), 1/sqrt(in)) fp32 weights and biases of one layer.
pub fn init_layer(seed: u64, layer: usize, spec: &LayerSpec) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let bound = 1.0 / (spec.in_dim as f32).sqrt();
    let mut draw = || {
        let u = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
        (2.0 * u - 1.0) * bound
    };
    let w: Vec<f32> = (0..spec.out_dim * spec.in_dim).map(|_| draw()).collect();
    let b: Vec<f32> = (0..spec.out_dim).map(|_| draw()).collect();
    (w, b)
}

/// Tile `rows` of a layer in stored order: weight rows, then bias rows.
pub fn tile_slice<T: Copy>(w: &[T], b: &[T], in_dim: usize, rows: &Range<usize>) -> Vec<T> {
    let mut out = w[rows.start * in_dim..rows.end * in_dim].to_vec();
    out.extend_from_slice(&b[rows.clone()]);
    out
}

/// Where each model state lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub param_tier: TierKind,
    pub grad_tier: TierKind,
    pub opt_tier: TierKind,
}

impl Placement {
    pub fn uniform(tier: TierKind) -> Self {
        Placement { param_tier: tier, grad_tier: tier, opt_tier: tier }
    }
}

/// Partitioned states of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileState {
    pub rows: Range<usize>,
    pub len: usize,
    pub p16: PartitionedTensor,
    pub g16: PartitionedTensor,
    pub master: PartitionedTensor,
    pub m: PartitionedTensor,
    pub v: PartitionedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub owner: usize,
    pub tiles: Vec<TileState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InitReport {
    /// Largest full (unpartitioned) layer held during initialization.
    pub peak_full_param_bytes: u64,
}

/// A model whose states exist only as shards in a [`TierStore`].
#[derive(Debug, Clone)]
pub struct PartitionedModel {
    pub spec: ModelSpec,
    pub world: usize,
    pub placement: Placement,
    pub params: BTreeMap<String, ParamGroup>,
    /// Parameter keys each layer may read.
    pub fetch: Vec<BTreeSet<String>>,
    pub forward: OperatorSequence,
    pub backward: OperatorSequence,
    pub plan: PrefetchPlan,
    /// Completed optimizer steps.
    pub step: u64,
}

fn state_tensor(key: &str, suffix: &str, len: usize, dtype: DType, world: usize, tier: TierKind) -> PartitionedTensor {
    PartitionedTensor::new(&format!("{key}.{suffix}"), len, dtype, world, tier)
}

impl PartitionedModel {
    fn describe(spec: &ModelSpec, world: usize, placement: Placement) -> BTreeMap<String, ParamGroup> {
        spec.owners()
            .into_iter()
            .map(|o| {
                let key = param_key(o);
                let l = &spec.layers[o];
                let tiles = l
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(t, rows)| {
                        let tk = tile_key(&key, t);
                        let len = rows.len() * (l.in_dim + 1);
                        TileState {
                            rows,
                            len,
                            p16: state_tensor(&tk, "p16", len, DType::F16, world, placement.param_tier),
                            g16: state_tensor(&tk, "g16", len, DType::F16, world, placement.grad_tier),
                            master: state_tensor(&tk, "master", len, DType::F32, world, placement.opt_tier),
                            m: state_tensor(&tk, "m", len, DType::F32, world, placement.opt_tier),
                            v: state_tensor(&tk, "v", len, DType::F32, world, placement.opt_tier),
                        }
                    })
                    .collect();
                (key, ParamGroup { owner: o, tiles })
            })
            .collect()
    }

    fn own_fetch_sets(spec: &ModelSpec) -> Vec<BTreeSet<String>> {
        (0..spec.layers.len())
            .map(|l| {
                let mut s = BTreeSet::new();
                if spec.owner(l) == l {
                    s.insert(param_key(l));
                }
                s
            })
            .collect()
    }

    fn build(spec: ModelSpec, world: usize, placement: Placement, fetch: Vec<BTreeSet<String>>, step: u64) -> Result<Self, Error> {
        let params = Self::describe(&spec, world, placement);
        let (forward, backward) = trace_schedule(&spec.layer_ops(&fetch))?;
        let plan = plan_prefetch(&forward, PrefetchDepths::default())?;
        Ok(PartitionedModel { spec, world, placement, params, fetch, forward, backward, plan, step })
    }

    /// Generates each layer from the seed, partitions it straight away and
    /// drops the full copy before the next layer is generated. Tied layers
    /// get no parameters of their own and must be registered as consumers of
    /// their owner's key.
    pub fn init(spec: ModelSpec, world: usize, placement: Placement, store: &TierStore) -> Result<(Self, InitReport), Error> {
        spec.validate()?;
        if world == 0 {
            return Err(Error::Spec("world size must be at least 1".into()));
        }
        let fetch = Self::own_fetch_sets(&spec);
        let model = Self::build(spec, world, placement, fetch, 0)?;
        let mut report = InitReport::default();
        for group in model.params.values() {
            let l = &model.spec.layers[group.owner];
            let (w, b) = init_layer(model.spec.seed, group.owner, l);
            report.peak_full_param_bytes = report.peak_full_param_bytes.max(4 * (w.len() + b.len()) as u64);
            for tile in &group.tiles {
                let master = tile_slice(&w, &b, l.in_dim, &tile.rows);
                let p16: Vec<f16> = master.iter().map(|&x| f16::from_f32(x)).collect();
                partition(store, &tile.p16.key, &TypedArray::F16(p16), world, tile.p16.tier)?;
                partition(store, &tile.g16.key, &TypedArray::zeros(DType::F16, tile.len), world, tile.g16.tier)?;
                partition(store, &tile.m.key, &TypedArray::zeros(DType::F32, tile.len), world, tile.m.tier)?;
                partition(store, &tile.v.key, &TypedArray::zeros(DType::F32, tile.len), world, tile.v.tier)?;
                partition(store, &tile.master.key, &TypedArray::F32(master), world, tile.master.tier)?;
            }
        }
        Ok((model, report))
    }

    /// Reattaches to states already in `store` (for example NVMe shards left
    /// by an earlier run). Shards are validated when first read.
    pub fn attach(spec: ModelSpec, world: usize, placement: Placement, step: u64, store: &TierStore) -> Result<Self, Error> {
        spec.validate()?;
        let mut fetch = Self::own_fetch_sets(&spec);
        for &(a, b) in &spec.tied_pairs {
            fetch[b].insert(param_key(a));
        }
        let model = Self::build(spec, world, placement, fetch, step)?;
        for g in model.params.values() {
            for t in &g.tiles {
                for pt in [&t.p16, &t.g16, &t.master, &t.m, &t.v] {
                    for r in 0..world {
                        if !store.contains(&pt.shard_key(r), pt.tier) {
                            return Err(crate::store::StoreError::KeyNotFound { tier: pt.tier, key: pt.shard_key(r) }.into());
                        }
                    }
                }
            }
        }
        Ok(model)
    }

    /// Lets `consumer` read parameter `key`, then re-plans the prefetch schedule.
    pub fn register_external_param(&mut self, key: &str, consumer: usize) -> Result<(), Error> {
        if !self.params.contains_key(key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        if consumer >= self.spec.layers.len() {
            return Err(Error::Spec(format!("no layer {consumer}")));
        }
        if self.fetch[consumer].insert(key.to_string()) {
            let (f, b) = trace_schedule(&self.spec.layer_ops(&self.fetch))?;
            self.plan = plan_prefetch(&f, self.plan.depths)?;
            self.forward = f;
            self.backward = b;
        }
        Ok(())
    }

    /// Registers every tied pair's owner key with its consumer.
    pub fn register_tied(&mut self) -> Result<(), Error> {
        for (a, b) in self.spec.tied_pairs.clone() {
            self.register_external_param(&param_key(a), b)?;
        }
        Ok(())
    }

    fn checked_key(&self, layer: usize) -> Result<String, Error> {
        let key = self.spec.param_key(layer);
        if self.fetch[layer].contains(&key) {
            Ok(key)
        } else {
            Err(Error::MissingParam { layer, key })
        }
    }

    /// Gathers the fp16 copy of one tile widened to fp32, split into `(w, b)`.
    fn gather_tile(&self, store: &TierStore, tile: &TileState, in_dim: usize) -> Result<(Vec<f32>, Vec<f32>), Error> {
        let (full, _) = allgather(store, &tile.p16)?;
        let TypedArray::F16(h) = full else {
            return Err(Error::Shape(format!("`{}` is not fp16", tile.p16.key)));
        };
        let mut w: Vec<f32> = h.iter().map(|x| x.to_f32()).collect();
        let b = w.split_off(tile.rows.len() * in_dim);
        Ok((w, b))
    }

    /// Gathered fp32 bytes of the largest tile any layer fetches at once.
    pub fn largest_gathered_bytes(&self) -> u64 {
        self.params
            .values()
            .flat_map(|g| g.tiles.iter().map(|t| 4 * t.len as u64))
            .max()
            .unwrap_or(0)
    }

    /// Activation bytes held through a step for `batch` samples, plus the
    /// largest pair of per-layer gradient buffers used in backward.
    pub fn activation_bytes(&self, batch: usize) -> u64 {
        let stored: usize = self.spec.in_dim() + self.spec.layers.iter().map(|l| 2 * l.out_dim).sum::<usize>();
        let transient = self.spec.layers.iter().map(|l| l.in_dim + l.out_dim).max().unwrap_or(0);
        (4 * batch * (stored + transient)) as u64
    }

    /// One training step on `batch`. Returns the mean loss before the update.
    pub fn train_step(&mut self, store: &TierStore, batch: &Batch, hyper: &AdamHyper, chunk_elems: usize) -> Result<f64, Error> {
        let n = batch.len();
        let spec = &self.spec;
        if n == 0 || batch.inputs.len() != n * spec.in_dim() || batch.targets.len() != n * spec.out_dim() {
            return Err(Error::Shape("batch does not match the model".into()));
        }
        let uses = (0..spec.layers.len())
            .map(|o| (0..spec.layers.len()).filter(|&l| spec.owner(l) == o).count())
            .max()
            .unwrap_or(1);
        if n * uses > MAX_SUMMANDS {
            return Err(Error::Shape(format!("batch of {n} is too large for exact gradient sums")));
        }
        let world = self.world;
        let samples: Vec<Vec<usize>> = (0..world).map(|r| (r..n).step_by(world).collect()).collect();
        let nl = spec.layers.len();

        // a[l] is the input of layer l per rank; z[l] the pre-activation.
        let mut acts: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(nl + 1); world];
        let mut pre: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(nl); world];
        let _act_res = store.reserve(TierKind::Device, self.activation_bytes(n))?;
        for r in 0..world {
            acts[r].push(rows_of(&batch.inputs, spec.in_dim(), &samples[r]));
        }

        for l in 0..nl {
            let key = self.checked_key(l)?;
            let layer = &spec.layers[l];
            let group = &self.params[&key];
            let mut z: Vec<Vec<f32>> = (0..world).map(|r| vec![0.0; samples[r].len() * layer.out_dim]).collect();
            for tile in &group.tiles {
                let _res = store.reserve(TierKind::Device, 4 * tile.len as u64)?;
                let (w, b) = self.gather_tile(store, tile, layer.in_dim)?;
                for r in 0..world {
                    let m = samples[r].len();
                    let yt = linear_forward(&w, &b, &acts[r][l], m, layer.in_dim);
                    scatter_columns(&mut z[r], &yt, m, layer.out_dim, &tile.rows);
                }
            }
            for r in 0..world {
                let a: Vec<f32> = z[r].iter().map(|&v| layer.activation.apply(v)).collect();
                pre[r].push(std::mem::take(&mut z[r]));
                acts[r].push(a);
            }
        }

        // Loss and output gradient per sample; losses summed in sample order.
        let out = spec.out_dim();
        let mut losses = vec![0.0f64; n];
        let mut grads: Vec<Vec<f32>> = Vec::with_capacity(world);
        for r in 0..world {
            let y = &acts[r][nl];
            let mut g = Vec::with_capacity(y.len());
            for (j, &s) in samples[r].iter().enumerate() {
                let ys = &y[j * out..(j + 1) * out];
                let ts = &batch.targets[s * out..(s + 1) * out];
                losses[s] = mse(ys, ts) as f64;
                g.extend(mse_grad(ys, ts));
            }
            grads.push(g);
        }
        let loss = losses.iter().sum::<f64>() / n as f64;

        // Backward. A key's gradient is reduce-scattered after its last user.
        let mut accum: BTreeMap<String, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
        for l in (0..nl).rev() {
            let key = self.checked_key(l)?;
            let layer = &spec.layers[l];
            let group = &self.params[&key];
            let acc = accum
                .entry(key.clone())
                .or_insert_with(|| (0..world).map(|_| group.tiles.iter().map(|t| vec![0.0; t.len]).collect()).collect());
            let mut gz: Vec<Vec<f32>> = Vec::with_capacity(world);
            for r in 0..world {
                gz.push(grads[r].iter().zip(&pre[r][l]).map(|(&g, &z)| g * layer.activation.derivative(z)).collect());
            }
            let mut gx: Vec<Vec<f32>> = (0..world).map(|r| vec![0.0; samples[r].len() * layer.in_dim]).collect();
            for (t, tile) in group.tiles.iter().enumerate() {
                let _res = store.reserve(TierKind::Device, 4 * tile.len as u64)?;
                let (w, _) = self.gather_tile(store, tile, layer.in_dim)?;
                for r in 0..world {
                    let m = samples[r].len();
                    let gt = take_columns(&gz[r], m, layer.out_dim, tile.rows.clone());
                    linear_backward(&w, &acts[r][l], &gt, m, layer.in_dim, &mut gx[r]);
                    accumulate_sample_grads(&mut acc[r][t], &gt, &acts[r][l], m, layer.in_dim, tile.rows.len());
                }
            }
            grads = gx;
            let last_user = (0..nl).find(|&u| spec.owner(u) == spec.owner(l)).unwrap();
            if l == last_user {
                let contribs = accum.remove(&key).unwrap();
                self.scatter_grads(store, &key, contribs, n)?;
            }
        }
        self.chunked_adam_step(store, hyper, chunk_elems)?;
        Ok(loss)
    }

    fn scatter_grads(&self, store: &TierStore, key: &str, contribs: Vec<Vec<Vec<f64>>>, n: usize) -> Result<(), Error> {
        let group = &self.params[key];
        for (t, tile) in group.tiles.iter().enumerate() {
            let per_rank: Vec<TypedArray> = contribs.iter().map(|c| TypedArray::F64(c[t].clone())).collect();
            let shards = reduce_scatter(&per_rank, self.world)?;
            let mut tickets = Vec::with_capacity(self.world);
            for (r, shard) in shards.into_iter().enumerate() {
                let TypedArray::F64(sum) = shard else { unreachable!("f64 in, f64 out") };
                let g16: Vec<f16> = sum.iter().map(|&s| f16::from_f64(s / n as f64)).collect();
                tickets.push(store.write(&tile.g16.shard_key(r), TypedArray::F16(g16), tile.g16.tier)?);
            }
            store.flush(&tickets)?;
        }
        Ok(())
    }

    /// Adam over every owned shard, streaming `chunk_elems` elements at a time
    /// from the optimizer and gradient tiers and writing the new master,
    /// momentum, variance and fp16 copy back as it goes.
    pub fn chunked_adam_step(&mut self, store: &TierStore, hyper: &AdamHyper, chunk_elems: usize) -> Result<(), Error> {
        hyper.validate()?;
        let chunk = chunk_elems.max(1);
        let t = self.step + 1;
        for group in self.params.values() {
            for tile in &group.tiles {
                for r in 0..self.world {
                    adam_shard(store, hyper, t, tile, r, chunk)?;
                }
            }
        }
        self.step = t;
        Ok(())
    }

    /// Full fp32 master values per tile, keyed `layerN.tileT`.
    pub fn masters(&self, store: &TierStore) -> Result<BTreeMap<String, Vec<f32>>, Error> {
        let mut out = BTreeMap::new();
        for (key, g) in &self.params {
            for (t, tile) in g.tiles.iter().enumerate() {
                let (full, _) = allgather(store, &tile.master)?;
                let TypedArray::F32(v) = full else {
                    return Err(Error::Shape(format!("`{}` is not fp32", tile.master.key)));
                };
                out.insert(tile_key(key, t), v);
            }
        }
        Ok(out)
    }

    pub fn digest(&self, store: &TierStore) -> Result<String, Error> {
        Ok(digest_masters(&self.masters(store)?))
    }
}

fn adam_shard(store: &TierStore, hyper: &AdamHyper, t: u64, tile: &TileState, r: usize, chunk: usize) -> Result<(), Error> {
    let len = tile.master.shard_len;
    let mut w_master = store.begin_write(&tile.master.shard_key(r), tile.master.tier, DType::F32, len)?;
    let mut w_m = store.begin_write(&tile.m.shard_key(r), tile.m.tier, DType::F32, len)?;
    let mut w_v = store.begin_write(&tile.v.shard_key(r), tile.v.tier, DType::F32, len)?;
    let mut w_p = store.begin_write(&tile.p16.shard_key(r), tile.p16.tier, DType::F16, len)?;
    let mut start = 0;
    while start < len {
        let c = chunk.min(len - start);
        let tickets = [
            store.read_range(&tile.master.shard_key(r), tile.master.tier, start, c)?,
            store.read_range(&tile.m.shard_key(r), tile.m.tier, start, c)?,
            store.read_range(&tile.v.shard_key(r), tile.v.tier, start, c)?,
            store.read_range(&tile.g16.shard_key(r), tile.g16.tier, start, c)?,
        ];
        store.flush(&tickets)?;
        let f32s = |i: usize| match tickets[i].take_data()? {
            TypedArray::F32(v) => Ok(v),
            other => Err(Error::Shape(format!("`{}` holds {}", tickets[i].key(), other.dtype().name()))),
        };
        let (mut p, mut m, mut v) = (f32s(0)?, f32s(1)?, f32s(2)?);
        let TypedArray::F16(g) = tickets[3].take_data()? else {
            return Err(Error::Shape(format!("`{}` is not fp16", tickets[3].key())));
        };
        let mut p16 = vec![f16::ZERO; c];
        adam_update_chunk(hyper, t, &mut p, &mut m, &mut v, &g, &mut p16)?;
        w_master.append(&TypedArray::F32(p))?;
        w_m.append(&TypedArray::F32(m))?;
        w_v.append(&TypedArray::F32(v))?;
        w_p.append(&TypedArray::F16(p16))?;
        start += c;
    }
    w_master.commit()?;
    w_m.commit()?;
    w_v.commit()?;
    w_p.commit()?;
    Ok(())
}

/// Adds each sample's weight and bias gradient, rounded to fp16, into `acc`
/// (weight rows then bias rows). `g` is `m x rows`, `x` is `m x in_dim`.
pub fn accumulate_sample_grads(acc: &mut [f64], g: &[f32], x: &[f32], m: usize, in_dim: usize, rows: usize) {
    let wlen = rows * in_dim;
    for s in 0..m {
        let xs = &x[s * in_dim..(s + 1) * in_dim];
        for o in 0..rows {
            let go = g[s * rows + o];
            for i in 0..in_dim {
                acc[o * in_dim + i] += f16::from_f32(go * xs[i]).to_f64();
            }
            acc[wlen + o] += f16::from_f32(go).to_f64();
        }
    }
}

fn rows_of(m: &[f32], width: usize, rows: &[usize]) -> Vec<f32> {
    rows.iter().flat_map(|&s| m[s * width..(s + 1) * width].iter().copied()).collect()
}

fn scatter_columns(dst: &mut [f32], src: &[f32], batch: usize, width: usize, cols: &Range<usize>) {
    let k = cols.len();
    for n in 0..batch {
        dst[n * width + cols.start..n * width + cols.end].copy_from_slice(&src[n * k..(n + 1) * k]);
    }
}

/// SHA-256 over keys in sorted order, each followed by its fp32 values (LE).
pub fn digest_masters(masters: &BTreeMap<String, Vec<f32>>) -> String {
    let mut h = Sha256::new();
    for (key, values) in masters {
        h.update((key.len() as u64).to_le_bytes());
        h.update(key.as_bytes());
        h.update((values.len() as u64).to_le_bytes());
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Inputs and regression targets, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.in_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `samples` inputs uniform in [-1, 1) with targets from a seeded random
    /// linear map.
    pub fn synthetic(seed: u64, samples: usize, in_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let mut unit = || (rng.next_u32() >> 8) as f32 / (1u32 << 23) as f32 - 1.0;
        let inputs: Vec<f32> = (0..samples * in_dim).map(|_| unit()).collect();
        let scale = 1.0 / (in_dim as f32).sqrt();
        let teacher: Vec<f32> = (0..out_dim * in_dim).map(|_| unit() * scale).collect();
        let mut targets = Vec::with_capacity(samples * out_dim);
        for s in 0..samples {
            let x = &inputs[s * in_dim..(s + 1) * in_dim];
            for o in 0..out_dim {
                let w = &teacher[o * in_dim..(o + 1) * in_dim];
                targets.push(w.iter().zip(x).map(|(a, b)| a * b).sum::<f32>());
            }
        }
        Batch { inputs, targets, in_dim, out_dim }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub world: usize,
    pub placement: Placement,
    pub steps: usize,
    pub batch: usize,
    pub hyper: AdamHyper,
    pub chunk_elems: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            world: 1,
            placement: Placement::uniform(TierKind::Device),
            steps: 50,
            batch: 16,
            hyper: AdamHyper { lr: 1e-2, ..AdamHyper::default() },
            chunk_elems: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub init_digest: String,
    pub digest: String,
    pub init: InitReport,
    /// Device-tier peak during the training steps.
    pub peak_device_bytes: u64,
}

/// Initializes `spec` in `store`, registers tied parameters and trains for
/// `cfg.steps` full-batch steps on the synthetic task.
pub fn run_training(spec: &ModelSpec, cfg: &TrainConfig, store: &TierStore) -> Result<(PartitionedModel, TrainReport), Error> {
    let (mut model, init) = PartitionedModel::init(spec.clone(), cfg.world, cfg.placement, store)?;
    model.register_tied()?;
    let init_digest = model.digest(store)?;
    let batch = Batch::synthetic(spec.seed, cfg.batch, spec.in_dim(), spec.out_dim());
    let (losses, peak) = continue_training(&mut model, cfg, &batch, store)?;
    let digest = model.digest(store)?;
    Ok((model, TrainReport { losses, init_digest, digest, init, peak_device_bytes: peak }))
}

/// Runs `cfg.steps` more steps; returns the losses and the device peak.
pub fn continue_training(model: &mut PartitionedModel, cfg: &TrainConfig, batch: &Batch, store: &TierStore) -> Result<(Vec<f64>, u64), Error> {
    store.reset_peaks();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        losses.push(model.train_step(store, batch, &cfg.hyper, cfg.chunk_elems)?);
    }
    Ok((losses, store.stats().tier(TierKind::Device).peak))
}
