//! `flakescan`: evaluation, dataset tooling, rule detection, scanning and the
//! catalog server.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flakescan_catalog::{spawn_api, ScanManager, Store, StoreSink};
use flakescan_core::losses::{roi_loss, BoxDelta, CategoryDistribution, LossBreakdown, LossWeights, MaskPair, RoiSample};
use flakescan_core::metrics::{
    map_at, per_image_confusion, precision_recall, ConfusionCounts, EvalImage, GroupBy, IouGeometry, MapReport,
    MatchCriteria, PrScores,
};
use flakescan_core::BBox;
use flakescan_dataset::augment::{augment, AugmentConfig};
use flakescan_dataset::{
    dataset_stats, emit_training_plan, export_labeltool, import_labeltool, parse_coco, serialize_coco,
    split_dataset, DatasetIndex, ImageEntry, PlanOverrides, SourceWeights,
};
use flakescan_dataset::labeltool::{parse_labeltool, serialize_labeltool};
use flakescan_protocol::server::serve_forever;
use flakescan_protocol::{Backend, ClientConfig, InferenceClient, ReplayBackend, RuleBackend};
use flakescan_scanner::{plan_tiles, replay_fixture, run_scan, ScanConfig, ScanControl, SyntheticSource};
use flakescan_vision::{detect_rule_based, generate_chip, ChipSpec, IlluminationSetting, OpticsConfig, RuleParams};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "flakescan", version, about = "Find and catalog 2D-material flakes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against ground truth (both COCO files).
    Eval(EvalArgs),
    /// Multitask loss of ROI predictions against targets.
    Loss(LossArgs),
    /// Convert, split and summarize datasets; emit training plans.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Write randomly augmented copies of a COCO dataset.
    Augment(AugmentArgs),
    /// Run the rule-based detector on images.
    DetectRule(DetectRuleArgs),
    /// Scan a synthetic chip and record flakes in a catalog.
    Scan(ScanArgs),
    /// Run an inference server or the catalog API.
    Serve {
        #[command(subcommand)]
        command: ServeCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// COCO or labeling-tool document, told apart by the top-level JSON type.
fn load_dataset(path: &Path) -> Result<DatasetIndex> {
    let bytes = read(path)?;
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace()).copied();
    if first == Some(b'[') {
        return Ok(import_labeltool(&parse_labeltool(&bytes)?)?);
    }
    let parsed = parse_coco(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    for e in &parsed.skipped {
        log::warn!("{}: skipped {e}", path.display());
    }
    Ok(parsed.index)
}

// ---------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Use mask IoU instead of box IoU.
    #[arg(long)]
    mask: bool,
    /// Count a detection as correct only if the thickness class matches too.
    #[arg(long)]
    require_thickness: bool,
    /// AP classes: material or material_thickness category.
    #[arg(long, value_enum, default_value_t = Group::Material)]
    group_by: Group,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Material,
    Category,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    criteria: MatchCriteria,
    images: usize,
    unmatched_prediction_images: Vec<String>,
    ap: MapReport,
    confusion: ConfusionCounts,
    scores: PrScores,
}

/// Pair prediction images with ground-truth images by file name.
fn eval_images(gt: &DatasetIndex, pred: &DatasetIndex) -> (Vec<EvalImage>, Vec<String>) {
    let by_name: HashMap<&str, &ImageEntry> = pred.images.iter().map(|i| (i.file_name.as_str(), i)).collect();
    let pred_anns = pred.annotations_by_image();
    let gt_anns = gt.annotations_by_image();
    let images = gt
        .images
        .iter()
        .map(|img| {
            let dets = by_name
                .get(img.file_name.as_str())
                .and_then(|p| pred_anns.get(&p.id))
                .map(|v| v.iter().map(|a| a.to_detection()).collect())
                .unwrap_or_default();
            let gts = gt_anns.get(&img.id).map(|v| v.iter().map(|a| (*a).clone()).collect()).unwrap_or_default();
            EvalImage {
                width: img.width,
                height: img.height,
                gts,
                dets,
            }
        })
        .collect();
    let gt_names: std::collections::HashSet<&str> = gt.images.iter().map(|i| i.file_name.as_str()).collect();
    let orphans = pred
        .images
        .iter()
        .filter(|i| !gt_names.contains(i.file_name.as_str()))
        .map(|i| i.file_name.clone())
        .collect();
    (images, orphans)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_else(|| "n/a".into())
}

fn eval(a: EvalArgs) -> Result<()> {
    let gt = load_dataset(&a.gt)?;
    let pred = load_dataset(&a.pred)?;
    let criteria = MatchCriteria {
        iou_threshold: a.iou,
        require_thickness: a.require_thickness,
        geometry: if a.mask { IouGeometry::Mask } else { IouGeometry::Box },
        ..Default::default()
    };
    let (images, orphans) = eval_images(&gt, &pred);
    for o in &orphans {
        log::warn!("prediction image {o} has no ground truth; ignored");
    }
    let group = match a.group_by {
        Group::Material => GroupBy::Material,
        Group::Category => GroupBy::Category,
    };
    let ap = map_at(&images, &criteria, group)?;
    let confusion = per_image_confusion(&images, &criteria)?;
    let report = EvalReport {
        criteria,
        images: images.len(),
        unmatched_prediction_images: orphans,
        ap,
        confusion,
        scores: precision_recall(&confusion),
    };
    let json = serde_json::to_vec_pretty(&report)?;
    if let Some(out) = &a.out {
        write(out, &json)?;
    }
    match a.format {
        Format::Json => println!("{}", String::from_utf8(json)?),
        Format::Text => {
            println!("images: {}  IoU >= {}", report.images, a.iou);
            for (class, ap) in &report.ap.per_class {
                println!("AP[{class}] = {ap:.6}");
            }
            for class in &report.ap.without_ground_truth {
                println!("AP[{class}] = n/a (no ground truth)");
            }
            println!("mAP = {}", report.ap.map.map(|m| format!("{m:.6}")).unwrap_or_else(|| "n/a".into()));
            let c = report.confusion;
            println!("TP {}  FP {}  FN {}  TN {}", c.tp, c.fp, c.fn_, c.tn);
            println!("precision {}  recall {}", fmt_opt(report.scores.precision), fmt_opt(report.scores.recall));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- loss

#[derive(Args)]
struct LossArgs {
    /// JSON array of {"class_probs": [..], "box": [4], "mask": [..]}.
    #[arg(long)]
    pred: PathBuf,
    /// JSON array of {"class": k, "box": [4], "mask": [0/1, ..]}.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Deserialize)]
struct RoiPrediction {
    class_probs: Vec<f64>,
    #[serde(rename = "box")]
    boxes: [f64; 4],
    mask: Vec<f64>,
}

#[derive(Deserialize)]
struct RoiTarget {
    class: usize,
    #[serde(rename = "box")]
    boxes: [f64; 4],
    mask: Vec<u8>,
}

#[derive(Serialize)]
struct LossOutput {
    per_roi: Vec<LossBreakdown>,
    mean: LossBreakdown,
}

fn loss(a: LossArgs) -> Result<()> {
    let preds: Vec<RoiPrediction> = read_json(&a.pred)?;
    let targets: Vec<RoiTarget> = read_json(&a.gt)?;
    if preds.len() != targets.len() || preds.is_empty() {
        bail!("{} predictions for {} targets", preds.len(), targets.len());
    }
    let w = LossWeights {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
    };
    let mut per_roi = Vec::with_capacity(preds.len());
    for (i, (p, t)) in preds.into_iter().zip(targets).enumerate() {
        let side = (p.mask.len() as f64).sqrt().round() as usize;
        let sample = RoiSample {
            class_probs: CategoryDistribution::new(p.class_probs)?,
            true_class: t.class,
            boxes: BoxDelta {
                predicted: p.boxes,
                target: t.boxes,
            },
            mask: MaskPair::new(side, p.mask, t.mask)?,
        };
        per_roi.push(roi_loss(&sample, &w).with_context(|| format!("roi {i}"))?);
    }
    let n = per_roi.len() as f64;
    let mean = LossBreakdown {
        l_cls: per_roi.iter().map(|b| b.l_cls).sum::<f64>() / n,
        l_box: per_roi.iter().map(|b| b.l_box).sum::<f64>() / n,
        l_mask: per_roi.iter().map(|b| b.l_mask).sum::<f64>() / n,
        l_total: per_roi.iter().map(|b| b.l_total).sum::<f64>() / n,
        clipped: per_roi.iter().any(|b| b.clipped),
    };
    println!("{}", serde_json::to_string_pretty(&LossOutput { per_roi, mean })?);
    Ok(())
}

// ---------------------------------------------------------------- dataset

#[derive(Subcommand)]
enum DatasetCommand {
    /// Convert between COCO and the labeling-tool format.
    Convert {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DataFormat::Coco)]
        format: DataFormat,
    },
    /// Split images into train and test sets.
    Split {
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes train.json and test.json here.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Image and object counts per material.
    Stats {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Emit the staged fine-tuning schedule.
    Plan {
        /// coco or coco+2dmat
        #[arg(long, default_value = "coco")]
        source: String,
        #[arg(long)]
        epochs: Option<u32>,
        /// Four comma-separated learning rates.
        #[arg(long, value_delimiter = ',')]
        lr: Option<Vec<f64>>,
        #[arg(long)]
        iterations_per_epoch: Option<u32>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Coco,
    Labeltool,
}

fn dataset(cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Convert { input, out, format } => {
            let idx = load_dataset(&input)?;
            let bytes = match format {
                DataFormat::Coco => serialize_coco(&idx)?,
                DataFormat::Labeltool => serialize_labeltool(&export_labeltool(&idx)?)?,
            };
            write(&out, &bytes)?;
            println!("{} images, {} annotations -> {}", idx.images.len(), idx.annotations.len(), out.display());
        }
        DatasetCommand::Split {
            input,
            fraction,
            seed,
            out_dir,
        } => {
            let idx = load_dataset(&input)?;
            let s = split_dataset(&idx, fraction, seed)?;
            write(&out_dir.join("train.json"), &serialize_coco(&s.train)?)?;
            write(&out_dir.join("test.json"), &serialize_coco(&s.test)?)?;
            println!(
                "train {} images / {} objects, test {} images / {} objects (seed {seed})",
                s.train.images.len(),
                s.train.annotations.len(),
                s.test.images.len(),
                s.test.annotations.len()
            );
        }
        DatasetCommand::Stats { input, format } => {
            let s = dataset_stats(&load_dataset(&input)?);
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&s)?),
                Format::Text => {
                    println!("{:<10} {:>8} {:>8}", "material", "images", "objects");
                    for (m, c) in &s.per_material {
                        println!("{:<10} {:>8} {:>8}", m.to_string(), c.images, c.annotations);
                    }
                    if s.untagged_images > 0 {
                        println!("{:<10} {:>8}", "untagged", s.untagged_images);
                    }
                    println!("{:<10} {:>8} {:>8}", "total", s.total.images, s.total.annotations);
                }
            }
        }
        DatasetCommand::Plan {
            source,
            epochs,
            lr,
            iterations_per_epoch,
            out,
        } => {
            let source: SourceWeights = source.parse()?;
            let plan = emit_training_plan(
                source,
                &PlanOverrides {
                    epochs_per_stage: epochs,
                    learning_rates: lr,
                    iterations_per_epoch,
                    ..Default::default()
                },
            )?;
            let json = serde_json::to_string_pretty(&plan)?;
            match out {
                Some(p) => write(&p, json.as_bytes())?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- augment

#[derive(Args)]
struct AugmentArgs {
    /// COCO file describing the input images.
    #[arg(long)]
    coco: PathBuf,
    /// Directory holding the images named in the COCO file.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON augmentation config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Augmented copies per input image.
    #[arg(long, default_value_t = 1)]
    copies: u32,
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let cfg: AugmentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AugmentConfig::default(),
    };
    cfg.validate()?;
    let idx = load_dataset(&a.coco)?;
    let by_image = idx.annotations_by_image();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut out = DatasetIndex {
        chip_id: idx.chip_id.clone(),
        ..Default::default()
    };
    let mut ann_id = 1;
    for img in &idx.images {
        let path = a.images.join(&img.file_name);
        let pixels = image::open(&path).with_context(|| format!("opening {}", path.display()))?.to_rgb8();
        let anns: Vec<_> = by_image.get(&img.id).map(|v| v.iter().map(|x| (*x).clone()).collect()).unwrap_or_default();
        let stem = Path::new(&img.file_name).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for k in 0..a.copies {
            // one independent stream per image and copy
            let seed = a.seed ^ img.id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).rotate_left(32);
            let aug = augment(&pixels, &anns, &cfg, seed)?;
            let id = out.images.len() as u64 + 1;
            let name = format!("{stem}_aug{k}.png");
            aug.image.save(a.out.join(&name)).with_context(|| format!("writing {name}"))?;
            let mut entry = ImageEntry::new(id, name, aug.image.width(), aug.image.height());
            entry.material = img.material;
            out.images.push(entry);
            for mut r in aug.annotations {
                r.id = ann_id;
                r.image_id = id;
                ann_id += 1;
                out.annotations.push(r);
            }
        }
    }
    write(&a.out.join("annotations.json"), &serialize_coco(&out)?)?;
    println!("{} images, {} annotations -> {}", out.images.len(), out.annotations.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- detect-rule

#[derive(Args)]
struct DetectRuleArgs {
    /// JSON rule parameters.
    #[arg(long)]
    params: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

fn detect_rule(a: DetectRuleArgs) -> Result<()> {
    let params: RuleParams = read_json(&a.params)?;
    params.validate()?;
    let mut out = BTreeMap::new();
    for path in &a.images {
        let img = image::open(path).with_context(|| format!("opening {}", path.display()))?.to_rgb8();
        let dets = detect_rule_based(&img, &params)?;
        log::info!("{}: {} detections", path.display(), dets.len());
        out.insert(path.display().to_string(), dets);
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

// ---------------------------------------------------------------- scan

#[derive(Args, Clone)]
struct ChipArgs {
    /// JSON chip spec; the default is a 1 cm² WTe₂ chip.
    #[arg(long)]
    chip: Option<PathBuf>,
    /// Seed for flake placement.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Field of view edge, µm.
    #[arg(long, default_value_t = 256.0)]
    fov: f64,
    #[arg(long, default_value_t = flakescan_scanner::DEFAULT_OVERLAP)]
    overlap: f64,
}

impl ChipArgs {
    fn spec(&self) -> Result<ChipSpec> {
        match &self.chip {
            Some(p) => read_json(p),
            None => Ok(ChipSpec::default()),
        }
    }

    fn optics(&self) -> OpticsConfig {
        OpticsConfig {
            fov_um: [self.fov, self.fov],
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    chip: ChipArgs,
    /// Inference server base URL.
    #[arg(long)]
    detector: String,
    /// Catalog directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scan_id: Option<String>,
    /// Model tag requested from the detector.
    #[arg(long, default_value = "replay")]
    model: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Tiles in flight; 1 runs sequentially.
    #[arg(long, default_value_t = 2)]
    pipeline: usize,
    /// Lamp intensity, nominal 220.
    #[arg(long)]
    illumination: Option<f64>,
    /// Zero all simulated stage latencies.
    #[arg(long)]
    no_latency: bool,
    /// Where to write the JSON report; defaults to <out>/reports/<scan>.json.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn scan(a: ScanArgs) -> Result<()> {
    let spec = a.chip.spec()?;
    let scene = generate_chip(&spec, a.chip.seed)?;
    let optics = a.chip.optics();
    optics.validate()?;
    let plan = plan_tiles(BBox::new(0.0, 0.0, scene.extent_um[0], scene.extent_um[1]), optics.fov_um, a.chip.overlap)?;
    let mut cfg = ScanConfig {
        scan_id: a.scan_id.clone().unwrap_or_else(|| format!("{}-{}", scene.chip_id, a.chip.seed)),
        model: a.model,
        threshold: a.threshold,
        pipeline_depth: a.pipeline,
        ..Default::default()
    };
    if a.no_latency {
        cfg.latency = flakescan_scanner::LatencyModel::zero();
    }
    cfg.validate()?;
    log::info!(
        "chip {} with {} flakes, {} tiles",
        scene.chip_id,
        scene.flakes.len(),
        plan.len()
    );
    let mut source = SyntheticSource::new(scene, optics);
    if let Some(i) = a.illumination {
        source.illumination = IlluminationSetting::with_intensity(i);
    }
    let client = InferenceClient::new(ClientConfig::new(a.detector))?;
    let store = Arc::new(Store::open(&a.out)?);
    let control = ScanControl::new(plan.len(), cfg.threshold);
    let report = run_scan(&source, &plan, &client, &mut StoreSink::new(Arc::clone(&store)), &control, &cfg)?;
    let path = a
        .report
        .unwrap_or_else(|| a.out.join("reports").join(format!("{}.json", report.scan_id)));
    write(&path, &serde_json::to_vec_pretty(&report)?)?;
    println!("{}", report.summary());
    println!("report: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------- serve

#[derive(Subcommand)]
enum ServeCommand {
    /// Inference server replaying a synthetic chip's ground truth, or running
    /// the rule-based detector when --rule-params is given.
    Detector {
        #[command(flatten)]
        chip: ChipArgs,
        #[arg(long, default_value = "127.0.0.1:8500")]
        addr: String,
        #[arg(long)]
        rule_params: Option<PathBuf>,
        /// Inference time the replay backend reports, ms.
        #[arg(long, default_value_t = 200.0)]
        reported_ms: f64,
        /// Real delay per replayed request, ms.
        #[arg(long, default_value_t = 0)]
        sleep_ms: u64,
    },
    /// Catalog HTTP API, optionally serving a static UI.
    Catalog {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8600")]
        addr: String,
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

fn serve(cmd: ServeCommand) -> Result<()> {
    match cmd {
        ServeCommand::Detector {
            chip,
            addr,
            rule_params,
            reported_ms,
            sleep_ms,
        } => {
            let backend: Arc<dyn Backend> = match rule_params {
                Some(p) => {
                    let params: RuleParams = read_json(&p)?;
                    params.validate()?;
                    Arc::new(RuleBackend { params })
                }
                None => {
                    let scene = generate_chip(&chip.spec()?, chip.seed)?;
                    let optics = chip.optics();
                    let plan =
                        plan_tiles(BBox::new(0.0, 0.0, scene.extent_um[0], scene.extent_um[1]), optics.fov_um, chip.overlap)?;
                    let fixture = replay_fixture(&scene, &plan, &optics);
                    log::info!("replaying {} flakes over {} tiles", scene.flakes.len(), plan.len());
                    Arc::new(ReplayBackend::from_annotations(fixture).with_latency(sleep_ms, reported_ms))
                }
            };
            println!("inference server ({}) on {addr}", backend.model_tag());
            serve_forever(&addr, backend)?;
        }
        ServeCommand::Catalog { catalog, addr, ui } => {
            let store = Arc::new(Store::open(&catalog)?);
            let scans = Arc::new(ScanManager::new(Arc::clone(&store)));
            let handle = spawn_api(&addr, store, scans, ui)?;
            println!("catalog API on {}", handle.url());
            // The WAL is synced per write, so being killed here loses nothing.
            loop {
                std::thread::park();
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Eval(a) => eval(a),
        Command::Loss(a) => loss(a),
        Command::Dataset { command } => dataset(command),
        Command::Augment(a) => augment_cmd(a),
        Command::DetectRule(a) => detect_rule(a),
        Command::Scan(a) => scan(a),
        Command::Serve { command } => serve(command),
    }
}
