//! Desk-scale reference run: synthetic two-class scenes at 1.0-3.0 km,
//! scratch training on the near ranges, then scoring the correlated test
//! split and the unseen far range.
//!
//! Knobs come from the environment: `WIDTH`, `SIZE`, `EPOCHS`, `BATCH`,
//! `IMAGES`, `BASE_PX`, `SEED`, `LR`, `BOXW`, `OBJW`, `CLSW`.

use std::env;
use std::time::Instant;

use tirdet::augment::AugProfile;
use tirdet::data::{generate_synthetic, partition, Archetype, ProtocolKind, SplitProtocol, SyntheticSceneConfig};
use tirdet::model_graph::{build_graph, ModelConfig};
use tirdet::train::{evaluate_pool, scratch_params, TrainConfig, Trainer};

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> tirdet::Result<()> {
    let size: usize = knob("SIZE", 128);
    let width: f64 = knob("WIDTH", 0.25);
    let epochs: usize = knob("EPOCHS", 30);
    let batch: usize = knob("BATCH", 8);
    let images: usize = knob("IMAGES", 200);
    let base: f64 = knob("BASE_PX", 20.0);
    let seed: u64 = knob("SEED", 0);

    let scene = SyntheticSceneConfig {
        image_size: size,
        class_names: vec!["T72".into(), "SUV".into()],
        archetypes: vec![Archetype::Tank, Archetype::Suv],
        ranges_km: vec![1.0, 1.5, 2.0, 2.5, 3.0],
        base_size_px: base,
        ..SyntheticSceneConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let manifest = generate_synthetic(&scene, images, seed, dir.path())?;
    let names = manifest.class_names.clone();
    let t1 = SplitProtocol { name: ProtocolKind::T1Correlated, train_ranges: vec![1.0, 1.5, 2.0, 2.5], test_ranges: vec![1.0, 1.5, 2.0, 2.5], ..SplitProtocol::preset("DS1", ProtocolKind::T1Correlated)? };
    let t2 = SplitProtocol { test_ranges: vec![3.0], ..SplitProtocol::preset("DS1", ProtocolKind::T2Decorrelated)? };
    let p1 = partition(&manifest, &t1, seed)?;
    let p2 = partition(&manifest, &t2, seed)?;
    let load = |idx: &[usize]| manifest.load_samples(idx, size);
    let (train, val, test1, test2) = (load(&p1.train)?, load(&p1.val)?, load(&p1.test)?, load(&p2.test)?);
    println!("train {} val {} T1 test {} T2 test {}", train.len(), val.len(), test1.len(), test2.len());

    let model = build_graph(&ModelConfig { num_classes: 2, input_size: size, width_multiple: width, ..ModelConfig::modified(2) })?.compile()?;
    println!("parameters {}", model.program.param_count());
    let mut cfg = TrainConfig { epochs, batch_size: batch, seed, ..TrainConfig::default() };
    cfg.optimizer.lr0 = knob("LR", 0.02);
    cfg.loss.weights.box_w = knob("BOXW", 0.5);
    cfg.loss.weights.obj = knob("OBJW", cfg.loss.weights.obj);
    cfg.loss.weights.cls = knob("CLSW", cfg.loss.weights.cls);
    let aug = AugProfile { mosaic: 0.0, mixup: 0.0, copy_paste: 0.0, degrees: 0.0, perspective: 0.0, scale: 0.2, ..AugProfile::default() };
    let mut t = Trainer::new(&model, cfg, aug, scratch_params(&model, seed))?;
    let start = Instant::now();
    for _ in 0..epochs {
        let loss = t.run_epoch(&train)?;
        let r = t.validate(&val, &names)?;
        println!(
            "epoch {:2} loss {:.4} (box {:.4} obj {:.4} cls {:.4}) val P {:.3} R {:.3} mAP {:.3}  {:.0}s",
            t.epoch, loss.total, loss.box_loss, loss.obj, loss.cls, r.precision, r.recall, r.map50, start.elapsed().as_secs_f64()
        );
    }
    let score = |pool: &Vec<_>| evaluate_pool(&model, t.eval_store(), &t.anchors, pool, &names, batch, 0.001, 0.45, 0.5);
    let (r1, r2) = (score(&test1)?, score(&test2)?);
    println!("T1 mAP {:.3}  T2 mAP {:.3}", r1.map50, r2.map50);
    Ok(())
}
