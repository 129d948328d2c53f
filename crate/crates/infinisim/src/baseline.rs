//! The training model kept whole in plain vectors.
//!
//! [`DenseModel`] is a generic dense network used for gradient checks.
//! [`Monolithic`] repeats the mixed-precision step of
//! [`crate::train::PartitionedModel`] without partitioning, tiling or a
//! store; the two must produce identical losses and master weights.

use std::collections::BTreeMap;

use half::f16;
use infinisim_core::adam::{adam_update_chunk, AdamHyper};
use infinisim_core::mlp::{linear_backward, linear_forward, mse, mse_grad};
use num_traits::Float;

use crate::train::{accumulate_sample_grads, digest_masters, init_layer, param_key, tile_key, tile_slice, Batch, ModelSpec};
use crate::Error;

/// Weights and biases per owning layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel<F> {
    pub spec: ModelSpec,
    pub params: BTreeMap<usize, (Vec<F>, Vec<F>)>,
}

/// Per-layer inputs (`acts[l]`) and pre-activations (`pre[l]`); `acts[nl]` is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub acts: Vec<Vec<F>>,
    pub pre: Vec<Vec<F>>,
}

impl<F: Float> DenseModel<F> {
    pub fn from_seed(spec: &ModelSpec) -> Result<Self, Error> {
        spec.validate()?;
        let conv = |v: Vec<f32>| v.into_iter().map(|x| F::from(x).unwrap()).collect::<Vec<F>>();
        let params = spec
            .owners()
            .into_iter()
            .map(|o| {
                let (w, b) = init_layer(spec.seed, o, &spec.layers[o]);
                (o, (conv(w), conv(b)))
            })
            .collect();
        Ok(DenseModel { spec: spec.clone(), params })
    }

    pub fn forward(&self, x: &[F], batch: usize) -> ForwardTrace<F> {
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.spec.layers.len());
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let (w, b) = &self.params[&self.spec.owner(l)];
            let z = linear_forward(w, b, &acts[l], batch, layer.in_dim);
            acts.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(z);
        }
        ForwardTrace { acts, pre }
    }

    /// Mean over samples of the per-sample squared error.
    pub fn loss(&self, x: &[F], t: &[F], batch: usize) -> F {
        let y = self.forward(x, batch).acts.pop().unwrap();
        let out = self.spec.out_dim();
        let mut total = F::zero();
        for s in 0..batch {
            total = total + mse(&y[s * out..(s + 1) * out], &t[s * out..(s + 1) * out]);
        }
        total / F::from(batch).unwrap()
    }

    /// Loss, parameter gradients per owner and the input gradient.
    #[allow(clippy::type_complexity)]
    pub fn gradients(&self, x: &[F], t: &[F], batch: usize) -> (F, BTreeMap<usize, (Vec<F>, Vec<F>)>, Vec<F>) {
        let tr = self.forward(x, batch);
        let nl = self.spec.layers.len();
        let out = self.spec.out_dim();
        let inv = F::one() / F::from(batch).unwrap();
        let mut loss = F::zero();
        let mut g = Vec::with_capacity(batch * out);
        for s in 0..batch {
            let (ys, ts) = (&tr.acts[nl][s * out..(s + 1) * out], &t[s * out..(s + 1) * out]);
            loss = loss + mse(ys, ts);
            g.extend(mse_grad(ys, ts).into_iter().map(|v| v * inv));
        }
        let mut grads: BTreeMap<usize, (Vec<F>, Vec<F>)> = BTreeMap::new();
        for l in (0..nl).rev() {
            let layer = &self.spec.layers[l];
            let o = self.spec.owner(l);
            let gz: Vec<F> = g.iter().zip(&tr.pre[l]).map(|(&gv, &z)| gv * layer.activation.derivative(z)).collect();
            let mut gx = vec![F::zero(); batch * layer.in_dim];
            let (gw, gb) = linear_backward(&self.params[&o].0, &tr.acts[l], &gz, batch, layer.in_dim, &mut gx);
            let entry = grads.entry(o).or_insert_with(|| (vec![F::zero(); gw.len()], vec![F::zero(); gb.len()]));
            entry.0.iter_mut().zip(&gw).for_each(|(a, &b)| *a = *a + b);
            entry.1.iter_mut().zip(&gb).for_each(|(a, &b)| *a = *a + b);
            g = gx;
        }
        (loss * inv, grads, g)
    }
}

/// Mixed-precision reference trainer: fp16 working weights, fp32 master and
/// Adam states, all in memory. Arrays use the layer layout `[w rows, b rows]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monolithic {
    pub spec: ModelSpec,
    pub p16: BTreeMap<usize, Vec<f16>>,
    pub master: BTreeMap<usize, Vec<f32>>,
    pub m: BTreeMap<usize, Vec<f32>>,
    pub v: BTreeMap<usize, Vec<f32>>,
    pub step: u64,
}

impl Monolithic {
    pub fn new(spec: &ModelSpec) -> Result<Self, Error> {
        spec.validate()?;
        let mut me = Monolithic {
            spec: spec.clone(),
            p16: BTreeMap::new(),
            master: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        };
        for o in spec.owners() {
            let (mut w, b) = init_layer(spec.seed, o, &spec.layers[o]);
            w.extend(b);
            me.p16.insert(o, w.iter().map(|&x| f16::from_f32(x)).collect());
            me.m.insert(o, vec![0.0; w.len()]);
            me.v.insert(o, vec![0.0; w.len()]);
            me.master.insert(o, w);
        }
        Ok(me)
    }

    fn weights(&self, o: usize) -> (Vec<f32>, Vec<f32>) {
        let l = &self.spec.layers[o];
        let mut w: Vec<f32> = self.p16[&o].iter().map(|x| x.to_f32()).collect();
        let b = w.split_off(l.out_dim * l.in_dim);
        (w, b)
    }

    pub fn step(&mut self, batch: &Batch, hyper: &AdamHyper) -> Result<f64, Error> {
        let n = batch.len();
        let nl = self.spec.layers.len();
        let weights: BTreeMap<usize, (Vec<f32>, Vec<f32>)> =
            self.spec.owners().into_iter().map(|o| (o, self.weights(o))).collect();
        let mut acts = vec![batch.inputs.clone()];
        let mut pre = Vec::with_capacity(nl);
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let (w, b) = &weights[&self.spec.owner(l)];
            let z = linear_forward(w, b, &acts[l], n, layer.in_dim);
            acts.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(z);
        }
        let out = self.spec.out_dim();
        let mut loss = 0.0f64;
        let mut g = Vec::with_capacity(n * out);
        for s in 0..n {
            let (ys, ts) = (&acts[nl][s * out..(s + 1) * out], &batch.targets[s * out..(s + 1) * out]);
            loss += mse(ys, ts) as f64;
            g.extend(mse_grad(ys, ts));
        }
        let mut acc: BTreeMap<usize, Vec<f64>> =
            self.master.iter().map(|(&o, v)| (o, vec![0.0; v.len()])).collect();
        for l in (0..nl).rev() {
            let layer = &self.spec.layers[l];
            let o = self.spec.owner(l);
            let gz: Vec<f32> = g.iter().zip(&pre[l]).map(|(&gv, &z)| gv * layer.activation.derivative(z)).collect();
            let mut gx = vec![0.0f32; n * layer.in_dim];
            linear_backward(&weights[&o].0, &acts[l], &gz, n, layer.in_dim, &mut gx);
            accumulate_sample_grads(acc.get_mut(&o).unwrap(), &gz, &acts[l], n, layer.in_dim, layer.out_dim);
            g = gx;
        }
        let t = self.step + 1;
        for (o, sum) in acc {
            let grad: Vec<f16> = sum.iter().map(|&s| f16::from_f64(s / n as f64)).collect();
            adam_update_chunk(
                hyper,
                t,
                self.master.get_mut(&o).unwrap(),
                self.m.get_mut(&o).unwrap(),
                self.v.get_mut(&o).unwrap(),
                &grad,
                self.p16.get_mut(&o).unwrap(),
            )?;
        }
        self.step = t;
        Ok(loss / n as f64)
    }

    /// Master values cut into the same tiles and keys the partitioned model uses.
    pub fn masters(&self) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for (&o, flat) in &self.master {
            let l = &self.spec.layers[o];
            let (w, b) = flat.split_at(l.out_dim * l.in_dim);
            for (t, rows) in l.rows().iter().enumerate() {
                out.insert(tile_key(&param_key(o), t), tile_slice(w, b, l.in_dim, rows));
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        digest_masters(&self.masters())
    }
}

/// Losses and final digest of `steps` reference steps on the synthetic task.
pub fn run_baseline(spec: &ModelSpec, steps: usize, batch: usize, hyper: &AdamHyper) -> Result<(Vec<f64>, String), Error> {
    let mut m = Monolithic::new(spec)?;
    let data = Batch::synthetic(spec.seed, batch, spec.in_dim(), spec.out_dim());
    let losses = (0..steps).map(|_| m.step(&data, hyper)).collect::<Result<Vec<_>, _>>()?;
    Ok((losses, m.digest()))
}
