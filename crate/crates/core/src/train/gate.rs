//! Finite-difference check of the full network + composite loss on the tiny
//! probe detector, run before any training.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::init::scratch_params;
use crate::anchors::{assign_batch, default_anchors, AnchorSet, DEFAULT_RATIO_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::loss::{check_gradients, loss_and_gradient, objectness_targets, GradCheckOptions, GradCheckReport, LossConfig};
use crate::model_graph::{CompiledModel, ModelGraph};
use crate::nn::{Mode, ParamStore};
use crate::tensor::Tensor;

pub const GATE_TOLERANCE: f64 = 1e-3;
pub const GATE_SEEDS: [u64; 3] = [0, 1, 2];

pub fn gate_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions { epsilon: 1e-5, coordinates: 200, seed, floor: 1e-4 }
}

struct Probe {
    model: CompiledModel,
    anchors: AnchorSet,
    images: Tensor<f64>,
    gts: Vec<Vec<BBox>>,
}

fn probe(seed: u64) -> Result<Probe> {
    let model = ModelGraph::gradient_probe(2).compile()?;
    let levels: Vec<_> = model.graph.heads.iter().map(|h| h.0).collect();
    let anchors = default_anchors(&levels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|_| rng.random_range(0.0..1.0)).collect());
    let mut gts = Vec::new();
    for n in [2, 1] {
        gts.push(
            (0..n)
                .map(|_| {
                    let (w, h) = (rng.random_range(0.25..0.6), rng.random_range(0.25..0.6));
                    BBox::new(rng.random_range(0..2), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), w, h)
                })
                .collect(),
        );
    }
    Ok(Probe { model, anchors, images, gts })
}

/// Runs the check for one seed and returns the worst coordinate.
pub fn check_probe(seed: u64) -> Result<GradCheckReport> {
    let p = probe(seed)?;
    let mut store: ParamStore<f64> = scratch_params(&p.model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // break the symmetric defaults so every role carries a distinct gradient
    for (spec, v) in p.model.program.params.iter().zip(&mut store.params) {
        if !matches!(spec.role, crate::nn::ParamRole::ConvWeight | crate::nn::ParamRole::HeadWeight) {
            v.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
    }
    let cfg = LossConfig::default();
    let grids = p.model.graph.grid_sizes(p.model.input_size());
    let assigned = assign_batch(&p.gts, &p.anchors, &grids, DEFAULT_RATIO_THRESHOLD);
    if assigned.assignments.is_empty() {
        return Err(Error::Numeric("probe produced no target assignments".into()));
    }
    let (trace, preds) = p.model.forward(&store, p.images.clone(), Mode::Train)?;
    let frozen = objectness_targets(&preds, &assigned.assignments, &p.anchors)?;
    let (_, dpreds) = loss_and_gradient(&preds, &assigned.assignments, &p.anchors, &cfg, Some(&frozen))?;
    let analytic: Vec<f64> = p.model.backward(&store, &trace, &dpreds)?.into_iter().flatten().collect();
    let theta = store.flatten();
    let mut probe_store = store.clone();
    let f = |t: &[f64]| -> Result<f64> {
        probe_store.set_flat(t);
        let (_, preds) = p.model.forward(&probe_store, p.images.clone(), Mode::Train)?;
        Ok(loss_and_gradient(&preds, &assigned.assignments, &p.anchors, &cfg, Some(&frozen))?.0.total)
    };
    check_gradients(f, &theta, &analytic, gate_options(seed))
}

/// Checks every gate seed; fails if any exceeds the tolerance.
pub fn gradient_gate() -> Result<Vec<GradCheckReport>> {
    let reports = GATE_SEEDS.iter().map(|&s| check_probe(s)).collect::<Result<Vec<_>>>()?;
    if let Some((s, r)) = GATE_SEEDS.iter().zip(&reports).find(|(_, r)| !(r.max_rel_error < GATE_TOLERANCE)) {
        return Err(Error::Numeric(format!(
            "gradient gate failed for seed {s}: relative error {:.3e} at coordinate {} (analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error, r.worst_coordinate, r.analytic, r.numeric
        )));
    }
    Ok(reports)
}

/// Runs the gate once per process.
pub fn ensure_gradient_gate() -> Result<()> {
    static GATE: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    GATE.get_or_init(|| gradient_gate().map(|_| ()).map_err(|e| e.to_string())).clone().map_err(Error::Numeric)
}
