use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tirdet::data::{generate_synthetic, load_annotation, load_manifest, partition, DatasetManifest, ProtocolKind};
use tirdet::evaluate::{evaluate, EvalReport, GroundTruth};
use tirdet::image::GrayImage;
use tirdet::model_graph::{build_graph, count_flops, count_parameters, ModelConfig, ModelGraph};
use tirdet::postprocess::Detection;
use tirdet::train::{self, anchors_for, evaluate_pool, init_params, predict, Checkpoint, InitContext, TrainMode, Trainer};
use tirdet::Error;

use crate::config::RunConfig;
use crate::{CliError, ModeArg, ProtocolArg, VariantArg};

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Creates `dir` and proves it is writable.
fn writable_dir(dir: &Path) -> CliResult {
    let probe = dir.join(".tirdet-write-probe");
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(&probe, b""))
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| CliError::usage(format!("output directory {} is not writable: {e}", dir.display())))
}

pub fn synth(config: Option<&Path>, out: &Path, n: Option<usize>, seed: Option<u64>) -> CliResult {
    let cfg = load_config(config)?;
    let n = n.unwrap_or(cfg.data.n_images);
    if n == 0 {
        return Err(CliError::usage("empty dataset requested: --n must be at least 1"));
    }
    cfg.data.synth.validate()?;
    writable_dir(out)?;
    let m = generate_synthetic(&cfg.data.synth, n, seed.unwrap_or(cfg.train.seed), out)?;
    println!("wrote {} images ({} classes) to {}", m.entries.len(), m.num_classes(), out.display());
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub img: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<ModeArg>,
    pub weights: Option<PathBuf>,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.img {
        cfg.model.input_size = s;
        cfg.data.synth.image_size = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    match a.mode {
        Some(ModeArg::Scratch) => cfg.train.mode = TrainMode::Scratch,
        Some(ModeArg::Transfer) => cfg.train.mode = TrainMode::Transfer,
        None => {}
    }
    if a.weights.is_some() {
        cfg.train.weights = a.weights;
    }
    if a.manifest.is_some() {
        cfg.data.manifest = a.manifest;
    }
    if cfg.train.mode == TrainMode::Transfer && cfg.train.weights.is_none() {
        return Err(CliError::usage("transfer mode needs --weights <checkpoint>"));
    }
    cfg.validate()?;
    writable_dir(&a.out)?;

    let manifest = match &cfg.data.manifest {
        Some(p) => load_manifest(p)?,
        None => {
            let dir = a.out.join("data");
            generate_synthetic(&cfg.data.synth, cfg.data.n_images, cfg.train.seed, &dir)?;
            let p = dir.join("manifest.json");
            cfg.data.manifest = Some(p.clone());
            load_manifest(&p)?
        }
    };
    if manifest.num_classes() != cfg.model.num_classes {
        return Err(CliError::usage(format!(
            "model.num_classes is {} but the manifest lists {} classes",
            cfg.model.num_classes,
            manifest.num_classes()
        )));
    }
    let protocol = cfg.data.protocol(ProtocolKind::T1Correlated)?;
    let split = partition(&manifest, &protocol, cfg.train.seed)?;
    let size = cfg.model.input_size;
    let train_pool = manifest.load_samples(&split.train, size)?;
    let val_pool = manifest.load_samples(&split.val, size)?;

    let model = build_graph(&cfg.model)?.compile()?;
    let tc = cfg.effective_train();
    let ctx = InitContext { seed: tc.seed, weights: tc.weights.as_deref() };
    let (store, report) = init_params(&model, tc.mode.regime(), &ctx)?;
    if tc.mode == TrainMode::Transfer {
        println!("transfer: {} tensors mapped, {} fresh", report.mapped, report.fresh);
    }
    fs::write(a.out.join("config.toml"), cfg.to_toml()?).map_err(CliError::runtime)?;

    println!(
        "training {} images, validating on {}; {} parameters",
        train_pool.len(),
        val_pool.len(),
        model.program.param_count()
    );
    let mut trainer = Trainer::new(&model, tc, cfg.aug.clone(), store)?;
    let outcome = train::train(&mut trainer, &train_pool, &val_pool, &manifest.class_names, Some(&a.out))
        .map_err(CliError::runtime)?;
    for r in &outcome.log {
        println!(
            "epoch {:3}  lr {:.5}  loss {:.4}  P {:.3}  R {:.3}  mAP@0.5 {:.3}{}",
            r.epoch + 1,
            r.lr,
            r.loss.total,
            r.val_precision,
            r.val_recall,
            r.val_map50,
            if r.best { "  *" } else { "" }
        );
    }
    write_file_list(&a.out)?;
    println!("best mAP@0.5 {:.3}; artifacts in {}", outcome.best.best_map, a.out.display());
    Ok(())
}

fn write_file_list(dir: &Path) -> CliResult {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).map_err(CliError::runtime)? {
        let e = e.map_err(CliError::runtime)?;
        let meta = e.metadata().map_err(CliError::runtime)?;
        if meta.is_file() {
            files.push(FileEntry { path: e.file_name().to_string_lossy().into_owned(), bytes: meta.len() });
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let json = serde_json::to_string_pretty(&files).map_err(CliError::runtime)?;
    fs::write(dir.join("files.json"), json + "\n").map_err(CliError::runtime)
}

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub protocol: ProtocolArg,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// One line of a detections file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Image path as listed in the manifest, or the source file for `detect`.
    pub image: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl DetectionRecord {
    fn detection(&self) -> Detection {
        Detection { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2, confidence: self.confidence, class_id: self.class_id }
    }
}

fn read_detections(path: &Path, num_classes: usize) -> CliResult<BTreeMap<String, Vec<Detection>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, msg: e.to_string() })?;
        let ok = |v: f64| v.is_finite();
        if r.class_id >= num_classes || !(ok(r.x1) && ok(r.y1) && ok(r.x2) && ok(r.y2)) || !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Parse { path: path.into(), line: i + 1, msg: "detection out of range".into() }.into());
        }
        out.entry(r.image.clone()).or_default().push(r.detection());
    }
    Ok(out)
}

enum Scorer {
    Model { model: tirdet::model_graph::CompiledModel, ck: Box<Checkpoint> },
    Fixture(BTreeMap<String, Vec<Detection>>),
}

fn score(scorer: &Scorer, manifest: &DatasetManifest, idx: &[usize], cfg: &RunConfig) -> CliResult<EvalReport> {
    let e = &cfg.eval;
    match scorer {
        Scorer::Model { model, ck } => {
            let pool = manifest.load_samples(idx, model.input_size())?;
            let anchors = anchors_for(model)?;
            Ok(evaluate_pool(
                model,
                &ck.store,
                &anchors,
                &pool,
                &manifest.class_names,
                cfg.train.batch_size.clamp(1, 16),
                e.conf_threshold,
                e.nms_iou,
                e.iou,
            )?)
        }
        Scorer::Fixture(by_image) => {
            let mut dets = Vec::with_capacity(idx.len());
            let mut gts = Vec::with_capacity(idx.len());
            for &i in idx {
                let img = GrayImage::load_png(&manifest.image_path(i))?;
                let boxes = load_annotation(&manifest.annotation_path(i), manifest.num_classes())?;
                let (w, h) = (img.width as f64, img.height as f64);
                gts.push(boxes.iter().map(|b| GroundTruth { bbox: b.to_pixels(w, h), class_id: b.class_id }).collect::<Vec<_>>());
                let key = manifest.entries[i].image.to_string_lossy().into_owned();
                let d: Vec<Detection> = by_image.get(&key).cloned().unwrap_or_default();
                dets.push(d.into_iter().filter(|d| d.confidence >= e.conf_threshold).collect::<Vec<_>>());
            }
            Ok(evaluate(&dets, &gts, &manifest.class_names, e.iou)?)
        }
    }
}

pub fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    cfg.eval.validate()?;
    let manifest_path = a
        .manifest
        .clone()
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| CliError::usage("no manifest: pass --manifest or set data.manifest"))?;
    let manifest = load_manifest(&manifest_path)?;

    let (scorer, ck_seed) = match (&a.checkpoint, &a.detections) {
        (Some(p), _) => {
            let ck = if a.config.is_some() {
                let expected: ModelGraph = build_graph(&cfg.model)?;
                Checkpoint::load_for(p, &expected)?
            } else {
                Checkpoint::load(p)?
            };
            if !ck.class_names.is_empty() && ck.class_names != manifest.class_names {
                return Err(CliError::usage(format!(
                    "checkpoint classes {:?} differ from manifest classes {:?}",
                    ck.class_names, manifest.class_names
                )));
            }
            let seed = ck.config.seed;
            (Scorer::Model { model: ck.graph.compile()?, ck: Box::new(ck) }, Some(seed))
        }
        (None, Some(p)) => (Scorer::Fixture(read_detections(p, manifest.num_classes())?), None),
        (None, None) => return Err(CliError::usage("pass --checkpoint or --detections")),
    };
    let seed = a.seed.or(a.config.as_ref().map(|_| cfg.train.seed)).or(ck_seed).unwrap_or(0);

    let kinds: &[(ProtocolKind, &str)] = match a.protocol {
        ProtocolArg::T1 => &[(ProtocolKind::T1Correlated, "T1")],
        ProtocolArg::T2 => &[(ProtocolKind::T2Decorrelated, "T2")],
        ProtocolArg::Both => &[(ProtocolKind::T1Correlated, "T1"), (ProtocolKind::T2Decorrelated, "T2")],
    };
    let mut reports = Vec::new();
    for &(kind, label) in kinds {
        let protocol = cfg.data.protocol(kind)?;
        let split = partition(&manifest, &protocol, seed)?;
        if split.test.is_empty() {
            return Err(CliError::usage(format!("no test entries for protocol {label}")));
        }
        let r = score(&scorer, &manifest, &split.test, &cfg)?;
        if let Some(out) = &a.out {
            writable_dir(&out.join(label))?;
            r.write(&out.join(label))?;
        }
        reports.push((label, split.test.len(), r));
    }
    print_table(&reports);
    if let Some(out) = &a.out {
        let summary: BTreeMap<&str, serde_json::Value> = reports
            .iter()
            .map(|(l, n, r)| {
                (*l, serde_json::json!({ "images": n, "map50": r.map50, "precision": r.precision, "recall": r.recall }))
            })
            .collect();
        let json = serde_json::to_string_pretty(&summary).map_err(CliError::runtime)?;
        fs::write(out.join("summary.json"), json + "\n").map_err(CliError::runtime)?;
    }
    Ok(())
}

fn print_table(reports: &[(&str, usize, EvalReport)]) {
    let mut head = format!("{:<12}", "class");
    for (label, n, _) in reports {
        head.push_str(&format!("{:>16}", format!("{label} ({n})")));
    }
    println!("{head}");
    let names = reports.first().map(|r| r.2.class_names()).unwrap_or_default();
    for (c, name) in names.iter().enumerate() {
        let mut line = format!("{name:<12}");
        for (_, _, r) in reports {
            let m = &r.classes[c];
            line.push_str(&if m.n_gt == 0 { format!("{:>16}", "-") } else { format!("{:>16.3}", m.ap) });
        }
        println!("{line}");
    }
    for (title, get) in [
        ("mAP@0.5", (|r: &EvalReport| r.map50) as fn(&EvalReport) -> f64),
        ("precision", |r| r.precision),
        ("recall", |r| r.recall),
    ] {
        let mut line = format!("{title:<12}");
        for (_, _, r) in reports {
            line.push_str(&format!("{:>16.3}", get(r)));
        }
        println!("{line}");
    }
}

fn source_images(source: &Path) -> CliResult<Vec<PathBuf>> {
    if source.is_file() {
        return Ok(vec![source.to_path_buf()]);
    }
    if !source.is_dir() {
        return Err(CliError::usage(format!("source {} does not exist", source.display())));
    }
    let mut v: Vec<PathBuf> = fs::read_dir(source)
        .map_err(|e| CliError::usage(format!("{}: {e}", source.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(CliError::usage(format!("no PNG images in {}", source.display())));
    }
    Ok(v)
}

/// Outlines each box at full intensity with a dark inner border.
fn annotate(img: &GrayImage, dets: &[Detection]) -> GrayImage {
    let mut out = img.clone();
    let (w, h) = (img.width as i64, img.height as i64);
    for d in dets {
        for (inset, v) in [(0i64, 1.0f32), (1, 0.0)] {
            let x1 = (d.x1.floor() as i64 + inset).clamp(0, w - 1);
            let y1 = (d.y1.floor() as i64 + inset).clamp(0, h - 1);
            let x2 = (d.x2.ceil() as i64 - 1 - inset).clamp(0, w - 1);
            let y2 = (d.y2.ceil() as i64 - 1 - inset).clamp(0, h - 1);
            if x2 < x1 || y2 < y1 {
                continue;
            }
            for x in x1..=x2 {
                out.set(x as usize, y1 as usize, v);
                out.set(x as usize, y2 as usize, v);
            }
            for y in y1..=y2 {
                out.set(x1 as usize, y as usize, v);
                out.set(x2 as usize, y as usize, v);
            }
        }
    }
    out
}

pub fn detect(checkpoint: &Path, source: &Path, out: &Path, conf: Option<f64>, nms_iou: Option<f64>) -> CliResult {
    if !checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let defaults = crate::config::EvalSection::default();
    let (conf, nms_iou) = (conf.unwrap_or(defaults.detect_conf), nms_iou.unwrap_or(defaults.nms_iou));
    if !(0.0..=1.0).contains(&conf) || !(nms_iou > 0.0 && nms_iou < 1.0) {
        return Err(CliError::usage("--conf must lie in [0, 1] and --nms-iou in (0, 1)"));
    }
    let images = source_images(source)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.graph.compile()?;
    let anchors = anchors_for(&model)?;
    writable_dir(out)?;
    let mut jsonl = Vec::new();
    let mut total = 0;
    for path in &images {
        let img = GrayImage::load_png(path)?;
        let dets = predict(&model, &ck.store, &anchors, &[&img], conf, nms_iou)?.remove(0);
        total += dets.len();
        for d in &dets {
            let rec = DetectionRecord {
                image: path.to_string_lossy().into_owned(),
                x1: d.x1,
                y1: d.y1,
                x2: d.x2,
                y2: d.y2,
                confidence: d.confidence,
                class_id: d.class_id,
                class: ck.class_names.get(d.class_id).cloned(),
            };
            writeln!(jsonl, "{}", serde_json::to_string(&rec).map_err(CliError::runtime)?).map_err(CliError::runtime)?;
        }
        let name = path.file_name().map(PathBuf::from).unwrap_or_else(|| "image.png".into());
        annotate(&img, &dets).save_png(&out.join(name))?;
    }
    fs::write(out.join("detections.jsonl"), jsonl).map_err(CliError::runtime)?;
    println!("{total} detections in {} images; written to {}", images.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct LevelInfo {
    level: String,
    stride: usize,
    grid: usize,
    outputs: usize,
}

#[derive(Serialize)]
struct NodeInfo {
    name: String,
    shape: (usize, usize, usize),
    parameters: usize,
}

#[derive(Serialize)]
struct Inspection {
    neck: String,
    input_size: usize,
    parameters: usize,
    gflops: f64,
    levels: Vec<LevelInfo>,
    nodes: Vec<NodeInfo>,
}

pub fn inspect(config: Option<&Path>, variant: Option<VariantArg>, classes: Option<usize>, img: Option<usize>, json: bool) -> CliResult {
    let mut mc = load_config(config)?.model;
    if let Some(v) = variant {
        let keep = ModelConfig { ..mc.clone() };
        mc = match v {
            VariantArg::Baseline => ModelConfig::baseline(keep.num_classes),
            VariantArg::Modified => ModelConfig::modified(keep.num_classes),
        };
        mc.input_size = keep.input_size;
    }
    if let Some(n) = classes {
        mc.num_classes = n;
    }
    if let Some(s) = img {
        mc.input_size = s;
    }
    let g = build_graph(&mc)?;
    let shapes = g.shapes(mc.input_size);
    let breakdown = g.parameter_breakdown();
    let info = Inspection {
        neck: mc.neck_kind.clone(),
        input_size: mc.input_size,
        parameters: count_parameters(&g),
        gflops: count_flops(&g, mc.input_size)? as f64 / 1e9,
        levels: g
            .grid_sizes(mc.input_size)
            .into_iter()
            .zip(&g.heads)
            .map(|((l, grid), &(_, node))| LevelInfo { level: l.to_string(), stride: l.stride(), grid, outputs: g.node(node).channels_out })
            .collect(),
        nodes: g
            .nodes
            .iter()
            .zip(shapes)
            .zip(breakdown)
            .map(|((n, shape), (_, p))| NodeInfo { name: n.name.clone(), shape, parameters: p })
            .collect(),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&info).map_err(CliError::runtime)?);
        return Ok(());
    }
    println!("neck        {}", info.neck);
    println!("input       {0}x{0}", info.input_size);
    println!("parameters  {}", info.parameters);
    println!("GFLOPs      {:.2}", info.gflops);
    for l in &info.levels {
        println!("head {:<3}    stride {:>2}  grid {:>3}x{:<3}  outputs {}", l.level, l.stride, l.grid, l.grid, l.outputs);
    }
    println!();
    println!("{:<28} {:>18} {:>10}", "node", "shape (c,h,w)", "params");
    for n in &info.nodes {
        println!("{:<28} {:>18} {:>10}", n.name, format!("{}x{}x{}", n.shape.0, n.shape.1, n.shape.2), n.parameters);
    }
    Ok(())
}
