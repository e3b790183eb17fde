//! Parameter initialization regimes, looked up by name.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use crate::error::{config_err, Error, Result};
use crate::model_graph::CompiledModel;
use crate::nn::{ParamRole, ParamStore, Program};
use crate::tensor::Real;

pub struct InitContext<'a> {
    pub seed: u64,
    /// Source checkpoint for regimes that remap existing weights.
    pub weights: Option<&'a Path>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InitReport {
    pub mapped: usize,
    pub fresh: usize,
    pub mapped_names: Vec<String>,
}

pub trait InitRegime: Send + Sync {
    fn name(&self) -> &'static str;
    fn init(&self, model: &CompiledModel, ctx: &InitContext) -> Result<(ParamStore<f32>, InitReport)>;
}

/// Fan-in scaled uniform weights, unit norm scales and fusion weights, zero
/// shifts; head biases start at the objectness/class priors.
pub struct ScratchInit;

/// Copies every same-named, same-shaped tensor from a checkpoint of any
/// graph and initializes the rest from scratch.
pub struct TransferInit;

pub fn scratch_params<T: Real>(model: &CompiledModel, seed: u64) -> ParamStore<T> {
    let prog = &model.program;
    let mut store = ParamStore::zeros(prog);
    let cfg = &model.graph.config;
    let no = cfg.outputs_per_anchor();
    for (i, (spec, values)) in prog.params.iter().zip(&mut store.params).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        match spec.role {
            ParamRole::ConvWeight | ParamRole::HeadWeight => {
                let fan_in = (spec.len() / spec.shape[0]).max(1) as f64;
                let gain = if spec.role == ParamRole::ConvWeight { 6.0 } else { 1.0 };
                let bound = (gain / fan_in).sqrt();
                for v in values.iter_mut() {
                    *v = T::of(rng.random_range(-bound..bound));
                }
            }
            ParamRole::NormScale | ParamRole::FusionWeight => values.iter_mut().for_each(|v| *v = T::one()),
            ParamRole::ConvBias | ParamRole::NormShift => {}
            ParamRole::HeadBias => {
                let stride = head_stride(model, &spec.name).unwrap_or(8) as f64;
                let cells = (cfg.input_size as f64 / stride).powi(2).max(1.0);
                let obj = (8.0 / cells).ln();
                let cls = (0.6 / (cfg.num_classes as f64 - 0.99)).ln();
                for (c, v) in values.iter_mut().enumerate() {
                    *v = T::of(match c % no {
                        4 => obj,
                        k if k >= 5 => cls,
                        _ => 0.0,
                    });
                }
            }
        }
    }
    store
}

fn head_stride(model: &CompiledModel, param: &str) -> Option<usize> {
    let node = param.strip_suffix(".bias")?;
    model.graph.nodes.iter().find(|n| n.name == node).map(|n| n.feature_stride)
}

impl InitRegime for ScratchInit {
    fn name(&self) -> &'static str {
        "scratch"
    }

    fn init(&self, model: &CompiledModel, ctx: &InitContext) -> Result<(ParamStore<f32>, InitReport)> {
        let store = scratch_params(model, ctx.seed);
        Ok((store, InitReport { mapped: 0, fresh: model.program.params.len(), mapped_names: Vec::new() }))
    }
}

/// Moves every tensor whose name and shape agree from `src` into `dst`.
pub fn remap(src_prog: &Program, src: &ParamStore<f32>, dst_prog: &Program, dst: &mut ParamStore<f32>) -> InitReport {
    let mut report = InitReport::default();
    for (spec, values) in dst_prog.params.iter().zip(&mut dst.params) {
        match src_prog.param_index(&spec.name) {
            Some(j) if src_prog.params[j].shape == spec.shape => {
                values.copy_from_slice(&src.params[j]);
                report.mapped += 1;
                report.mapped_names.push(spec.name.clone());
            }
            _ => report.fresh += 1,
        }
    }
    for (spec, values) in dst_prog.buffers.iter().zip(&mut dst.buffers) {
        if let Some(j) = src_prog.buffers.iter().position(|b| b.name == spec.name && b.len == spec.len) {
            values.copy_from_slice(&src.buffers[j]);
        }
    }
    report
}

impl InitRegime for TransferInit {
    fn name(&self) -> &'static str {
        "transfer"
    }

    fn init(&self, model: &CompiledModel, ctx: &InitContext) -> Result<(ParamStore<f32>, InitReport)> {
        let path = ctx.weights.ok_or_else(|| config_err("transfer initialization needs a weights checkpoint"))?;
        let ck = Checkpoint::load(path)?;
        let src = ck.graph.compile()?;
        let mut store = scratch_params(model, ctx.seed);
        let report = remap(&src.program, &ck.store, &model.program, &mut store);
        if report.mapped == 0 {
            return Err(Error::Load(format!("{}: no tensor matches the target graph", path.display())));
        }
        Ok((store, report))
    }
}

pub struct InitRegistry {
    regimes: Vec<Box<dyn InitRegime>>,
}

impl InitRegistry {
    pub fn empty() -> Self {
        Self { regimes: Vec::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ScratchInit));
        r.register(Box::new(TransferInit));
        r
    }

    /// Later registrations shadow earlier ones of the same name.
    pub fn register(&mut self, regime: Box<dyn InitRegime>) {
        self.regimes.retain(|r| r.name() != regime.name());
        self.regimes.push(regime);
    }

    pub fn get(&self, name: &str) -> Option<&dyn InitRegime> {
        self.regimes.iter().find(|r| r.name() == name).map(|r| r.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.regimes.iter().map(|r| r.name()).collect()
    }
}

pub fn init_params(model: &CompiledModel, regime: &str, ctx: &InitContext) -> Result<(ParamStore<f32>, InitReport)> {
    let registry = InitRegistry::with_builtins();
    let r = registry
        .get(regime)
        .ok_or_else(|| config_err(format!("unknown init regime {regime:?}; registered: {}", registry.names().join(", "))))?;
    r.init(model, ctx)
}
