//! Flat op program executed by the forward/backward interpreter.
//!
//! A [`ModelGraph`](crate::model_graph::ModelGraph) lowers into a
//! [`Program`]: a topologically ordered list of primitive ops, each producing
//! one value, plus the parameter and buffer layout they reference.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom, BN_MOMENTUM};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    FusionWeight,
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    /// Roles that receive weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::HeadWeight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub name: String,
    pub len: usize,
    pub init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { channels: usize },
    /// Repeats a single-channel input across `channels`.
    Replicate { channels: usize },
    Conv { geom: ConvGeom, weight: usize, bias: Option<usize> },
    BatchNorm { scale: usize, shift: usize, mean: usize, var: usize },
    Silu,
    Add,
    Concat,
    MaxPool { k: usize },
    Upsample,
    Fuse { weights: usize, eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Program {
    pub nodes: Vec<OpNode>,
    pub outputs: Vec<usize>,
    pub params: Vec<ParamSpec>,
    pub buffers: Vec<BufferSpec>,
}

impl Program {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<usize>) -> usize {
        self.nodes.push(OpNode { op, inputs });
        self.nodes.len() - 1
    }

    pub(crate) fn add_param(&mut self, name: String, shape: Vec<usize>, role: ParamRole) -> usize {
        self.params.push(ParamSpec { name, shape, role });
        self.params.len() - 1
    }

    pub(crate) fn add_buffer(&mut self, name: String, len: usize, init: f64) -> usize {
        self.buffers.push(BufferSpec { name, len, init });
        self.buffers.len() - 1
    }
}

/// Learnable parameters and non-learnable buffers, aligned with a program.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Vec<T>>,
    pub buffers: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn zeros(prog: &Program) -> Self {
        Self {
            params: prog.params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            buffers: prog.buffers.iter().map(|b| vec![T::of(b.init); b.len]).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect();
        ParamStore {
            params: self.params.iter().map(conv).collect(),
            buffers: self.buffers.iter().map(conv).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Cache<T> {
    None,
    Bn { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T>, count: usize },
    Pool(Vec<u32>),
}

/// Values of every node from one forward pass, kept for backward.
pub struct Trace<T> {
    pub values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    mode: Mode,
}

impl<T: Real> Trace<T> {
    pub fn outputs<'a>(&'a self, prog: &'a Program) -> impl Iterator<Item = &'a Tensor<T>> + 'a {
        prog.outputs.iter().map(move |&i| &self.values[i])
    }

    /// Folds the batch statistics of a training pass into the running buffers.
    pub fn update_running_stats(&self, prog: &Program, store: &mut ParamStore<T>) {
        let m = T::of(BN_MOMENTUM);
        for (node, cache) in prog.nodes.iter().zip(&self.caches) {
            if let (Op::BatchNorm { mean, var, .. }, Cache::Bn { mean: bm, var: bv, count, .. }) =
                (&node.op, cache)
            {
                let unbias = if *count > 1 {
                    T::of(*count as f64 / (*count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &b) in store.buffers[*mean].iter_mut().zip(bm) {
                    *r = (T::one() - m) * *r + m * b;
                }
                for (r, &b) in store.buffers[*var].iter_mut().zip(bv) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
            }
        }
    }
}

pub fn forward<T: Real>(
    prog: &Program,
    store: &ParamStore<T>,
    input: Tensor<T>,
    mode: Mode,
) -> Result<Trace<T>> {
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(prog.nodes.len());
    let mut caches = Vec::with_capacity(prog.nodes.len());
    let mut input = Some(input);
    for (idx, node) in prog.nodes.iter().enumerate() {
        let arg = |i: usize| &values[node.inputs[i]];
        let (value, cache) = match &node.op {
            Op::Input { channels } => {
                let x = input.take().ok_or_else(|| shape_err("program has two inputs"))?;
                if x.shape.len() != 4 || x.shape[1] != *channels {
                    return Err(shape_err(format!(
                        "input shape {:?} does not have {channels} channels",
                        x.shape
                    )));
                }
                (x, Cache::None)
            }
            Op::Replicate { channels } => {
                let x = arg(0);
                let (n, _, h, w) = x.nchw();
                let mut data = Vec::with_capacity(n * channels * h * w);
                for b in 0..n {
                    for _ in 0..*channels {
                        data.extend_from_slice(x.item(b));
                    }
                }
                (Tensor::from_vec(&[n, *channels, h, w], data), Cache::None)
            }
            Op::Conv { geom, weight, bias } => {
                let x = arg(0);
                if x.shape[1] != geom.cin {
                    return Err(shape_err(format!(
                        "node {idx}: conv expects {} channels, got {}",
                        geom.cin, x.shape[1]
                    )));
                }
                let b = bias.map(|b| store.params[b].as_slice());
                (kernels::conv2d(x, &store.params[*weight], b, geom), Cache::None)
            }
            Op::BatchNorm { scale, shift, mean, var } => {
                let x = arg(0);
                match mode {
                    Mode::Train => {
                        let (y, xhat, inv_std, stats) =
                            kernels::batch_norm_train(x, &store.params[*scale], &store.params[*shift]);
                        (
                            y,
                            Cache::Bn {
                                xhat,
                                inv_std,
                                mean: stats.mean,
                                var: stats.var,
                                count: stats.count,
                            },
                        )
                    }
                    Mode::Eval => (
                        kernels::batch_norm_eval(
                            x,
                            &store.params[*scale],
                            &store.params[*shift],
                            &store.buffers[*mean],
                            &store.buffers[*var],
                        ),
                        Cache::None,
                    ),
                }
            }
            Op::Silu => (kernels::silu(arg(0)), Cache::None),
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                if a.shape != b.shape {
                    return Err(shape_err(format!("node {idx}: add {:?} + {:?}", a.shape, b.shape)));
                }
                let data = a.data.iter().zip(&b.data).map(|(&p, &q)| p + q).collect();
                (Tensor::from_vec(&a.shape, data), Cache::None)
            }
            Op::Concat => {
                let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
                check_spatial(idx, &xs)?;
                (kernels::concat_channels(&xs), Cache::None)
            }
            Op::MaxPool { k } => {
                let (y, arg) = kernels::max_pool(arg(0), *k);
                (y, Cache::Pool(arg))
            }
            Op::Upsample => (kernels::upsample2x(arg(0)), Cache::None),
            Op::Fuse { weights, eps } => {
                let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
                if xs.iter().any(|x| x.shape != xs[0].shape) {
                    return Err(shape_err(format!("node {idx}: fusion inputs differ in shape")));
                }
                (kernels::weighted_fusion(&xs, &store.params[*weights], *eps), Cache::None)
            }
        };
        values.push(value);
        caches.push(cache);
    }
    Ok(Trace { values, caches, mode })
}

fn check_spatial<T: Real>(idx: usize, xs: &[&Tensor<T>]) -> Result<()> {
    let (n, _, h, w) = xs[0].nchw();
    for x in xs {
        let (n2, _, h2, w2) = x.nchw();
        if (n, h, w) != (n2, h2, w2) {
            return Err(shape_err(format!("node {idx}: concat spatial mismatch")));
        }
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Reverse pass. `output_grads` aligns with `prog.outputs`. Returns one
/// gradient vector per parameter.
pub fn backward<T: Real>(
    prog: &Program,
    store: &ParamStore<T>,
    trace: &Trace<T>,
    output_grads: Vec<Tensor<T>>,
) -> Result<Vec<Vec<T>>> {
    if output_grads.len() != prog.outputs.len() {
        return Err(shape_err("one gradient per program output required"));
    }
    let mut grads: Vec<Option<Tensor<T>>> = (0..prog.nodes.len()).map(|_| None).collect();
    for (&o, g) in prog.outputs.iter().zip(output_grads) {
        if g.shape != trace.values[o].shape {
            return Err(shape_err(format!(
                "output gradient {:?} vs value {:?}",
                g.shape, trace.values[o].shape
            )));
        }
        accumulate(&mut grads[o], g);
    }
    let mut pgrads: Vec<Vec<T>> = prog.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let add_p = |pg: &mut Vec<Vec<T>>, i: usize, g: Vec<T>| {
        for (a, b) in pg[i].iter_mut().zip(g) {
            *a = *a + b;
        }
    };
    for idx in (0..prog.nodes.len()).rev() {
        let Some(dy) = grads[idx].take() else { continue };
        let node = &prog.nodes[idx];
        let x = |i: usize| &trace.values[node.inputs[i]];
        match &node.op {
            Op::Input { .. } => {}
            Op::Replicate { channels } => {
                let (n, _, h, w) = dy.nchw();
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, 1, h, w]);
                for b in 0..n {
                    for c in 0..*channels {
                        for i in 0..hw {
                            dx.data[b * hw + i] = dx.data[b * hw + i] + dy.item(b)[c * hw + i];
                        }
                    }
                }
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::Conv { geom, weight, bias } => {
                let src = node.inputs[0];
                let need_dx = !matches!(prog.nodes[src].op, Op::Input { .. });
                let g = kernels::conv2d_backward(
                    x(0),
                    &store.params[*weight],
                    &dy,
                    geom,
                    bias.is_some(),
                    need_dx,
                );
                add_p(&mut pgrads, *weight, g.dw);
                if let (Some(b), Some(db)) = (bias, g.db) {
                    add_p(&mut pgrads, *b, db);
                }
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[src], dx);
                }
            }
            Op::BatchNorm { scale, shift, mean, var } => {
                let (dx, ds, db) = match (&trace.caches[idx], trace.mode) {
                    (Cache::Bn { xhat, inv_std, .. }, Mode::Train) => {
                        kernels::batch_norm_train_backward(&dy, xhat, inv_std, &store.params[*scale])
                    }
                    _ => kernels::batch_norm_eval_backward(
                        x(0),
                        &dy,
                        &store.params[*scale],
                        &store.buffers[*mean],
                        &store.buffers[*var],
                    ),
                };
                add_p(&mut pgrads, *scale, ds);
                add_p(&mut pgrads, *shift, db);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::Silu => {
                let dx = kernels::silu_backward(x(0), &dy);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::Add => {
                accumulate(&mut grads[node.inputs[1]], dy.clone());
                accumulate(&mut grads[node.inputs[0]], dy);
            }
            Op::Concat => {
                let chans: Vec<usize> = node.inputs.iter().map(|&i| trace.values[i].shape[1]).collect();
                for (&i, g) in node.inputs.iter().zip(kernels::split_channels(&dy, &chans)) {
                    accumulate(&mut grads[i], g);
                }
            }
            Op::MaxPool { .. } => {
                let Cache::Pool(arg) = &trace.caches[idx] else {
                    unreachable!("max pool without cache")
                };
                let dx = kernels::max_pool_backward(&x(0).shape, arg, &dy);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::Upsample => {
                accumulate(&mut grads[node.inputs[0]], kernels::upsample2x_backward(&dy));
            }
            Op::Fuse { weights, eps } => {
                let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &trace.values[i]).collect();
                let (dxs, dw) = kernels::weighted_fusion_backward(
                    &xs,
                    &store.params[*weights],
                    *eps,
                    &trace.values[idx],
                    &dy,
                );
                add_p(&mut pgrads, *weights, dw);
                for (&i, g) in node.inputs.iter().zip(dxs) {
                    accumulate(&mut grads[i], g);
                }
            }
        }
    }
    Ok(pgrads)
}
