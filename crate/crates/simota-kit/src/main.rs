//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input validation failure, 3 numeric failure.
//! Config precedence: CLI flags > config file > built-in defaults; every
//! output JSON embeds the fully-resolved configuration. All outputs are
//! byte-identical across reruns with the same inputs and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use simota_kit::assign::{
    cost_matrix, one_to_one_assign, ot_compare, simota_assign, single_center_assign,
    Assignment, SimotaDiagnostics,
};
use simota_kit::assign::multi3x3_assign;
use simota_kit::config::{load_scene, save_scene, RunConfig};
use simota_kit::error::Error;
use simota_kit::eval::{coco_thresholds, mean_ap_scenes, MapReport};
use simota_kit::geometry::LabeledBox;
use simota_kit::grid::{build_anchors, decode_indexed};
use simota_kit::postprocess::Detection;
use simota_kit::rng::SplitMix64;
use simota_kit::scene::Scene;
use simota_kit::synthfit::{
    fit, init_predictions, make_scene, roadmap_report, steps_to_threshold, AssignerKind,
    FitConfig, FitTrace,
};

/// Loss threshold the roadmap's steps-to-threshold column uses.
const ROADMAP_LOSS_THRESHOLD: f64 = 0.05;

#[derive(Parser)]
#[command(name = "simota-kit", version, about = "Anchor-free detection pipeline toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Augmentation preset (overrides the config's augment block).
    #[arg(long, global = true, value_parser = ["small", "large"])]
    preset: Option<String>,
    /// Worker threads (fallback: SIMOTA_KIT_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a label assigner on a scene and write the assignment report.
    Assign {
        #[arg(long)]
        scene: PathBuf,
        /// single_center | multi3x3 | simota | one_to_one
        #[arg(long)]
        assigner: Option<String>,
        #[arg(long, default_value = "assign_report.json")]
        out: PathBuf,
    },
    /// Compare SimOTA against the Sinkhorn-OT solution on one scene.
    OtCompare {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "ot_compare.json")]
        out: PathBuf,
    },
    /// Apply an augmentation op to scene files (4 for mosaic, 2 for mixup).
    Augment {
        /// mosaic | mixup | flip | jitter
        #[arg(long)]
        op: String,
        #[arg(long)]
        out: PathBuf,
        /// Input scene JSON files.
        scenes: Vec<PathBuf>,
    },
    /// Gradient-descent a prediction tensor on one scene.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        assigner: Option<String>,
        #[arg(long, default_value = "fit_report.json")]
        out: PathBuf,
        /// Also dump the per-step loss trace as CSV.
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Fit every assigner over a set of seeded synthetic scenes.
    Roadmap {
        /// Number of seeded scenes (seeds seed..seed+count).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate detection JSON files against scenes: pass alternating
    /// SCENE.json DETS.json pairs.
    Eval {
        #[arg(long, default_value = "eval_report.json")]
        out: PathBuf,
        /// CSV of PR points at IoU 0.50.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        files: Vec<PathBuf>,
    },
    /// Generate synthetic scenes.
    MakeScenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericFailure(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::cli_defaults(),
    };
    if let Some(preset) = &cli.preset {
        let seed = cfg.augment.seed;
        cfg.augment = match preset.as_str() {
            "large" => simota_kit::augment::AugConfig::large_preset(),
            _ => simota_kit::augment::AugConfig::small_preset(),
        };
        cfg.augment.seed = seed;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.fit.seed = seed;
        cfg.augment.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cli: &Cli) {
    let threads = cli.threads.or_else(|| {
        std::env::var("SIMOTA_KIT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads(&cli);
    let cfg = resolve_config(&cli)?;
    match &cli.cmd {
        Cmd::Assign { scene, assigner, out } => cmd_assign(&cfg, scene, assigner.as_deref(), out),
        Cmd::OtCompare { scene, out } => cmd_ot_compare(&cfg, scene, out),
        Cmd::Augment { op, out, scenes } => cmd_augment(&cfg, op, out, scenes),
        Cmd::Fit { scene, assigner, out, trace_csv } => {
            cmd_fit(&cfg, scene, assigner.as_deref(), out, trace_csv.as_deref())
        }
        Cmd::Roadmap { seeds, out } => cmd_roadmap(&cfg, *seeds, out),
        Cmd::Eval { out, pr_csv, files } => cmd_eval(&cfg, files, out, pr_csv.as_deref()),
        Cmd::MakeScenes { out, count, objects, size, classes } => {
            cmd_make_scenes(&cfg, out, *count, *objects, *size, *classes)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Deterministic synthetic predictions for assignment-only commands: the
/// same near-gt initialization the fit harness starts from.
fn synth_predictions(
    cfg: &RunConfig,
    scene: &Scene,
) -> Result<(Vec<simota_kit::grid::AnchorPoint>, Vec<simota_kit::grid::DecodedPrediction>), Error> {
    let spec = cfg.fpn.to_spec()?;
    let anchors = build_anchors(&spec);
    let mut rng = SplitMix64::new(cfg.seed);
    let preds = init_predictions(scene, &anchors, cfg.num_classes, cfg.fit.init_noise, &mut rng);
    let decoded = preds
        .iter()
        .zip(&anchors)
        .enumerate()
        .map(|(j, (p, a))| decode_indexed(p, a, j))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((anchors, decoded))
}

#[derive(Serialize)]
struct AssignReport<'a> {
    config: &'a RunConfig,
    scene_id: String,
    assigner: String,
    num_anchors: usize,
    num_gts: usize,
    num_fg: usize,
    k_values: Vec<usize>,
    per_gt_positives: Vec<Vec<usize>>,
    /// `(anchor, gt)` pairs for positive anchors.
    positives: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<SimotaDiagnostics>,
}

fn assignment_pairs(a: &Assignment) -> Vec<(usize, usize)> {
    a.anchor_labels
        .iter()
        .enumerate()
        .filter_map(|(j, l)| l.map(|g| (j, g)))
        .collect()
}

fn cmd_assign(
    cfg: &RunConfig,
    scene_path: &Path,
    assigner: Option<&str>,
    out: &Path,
) -> Result<(), Error> {
    let scene = load_scene(scene_path)?;
    let kind = match assigner {
        Some(s) => AssignerKind::parse(s)?,
        None => cfg.fit.assigner,
    };
    let spec = cfg.fpn.to_spec()?;
    let (assignment, diagnostics) = match kind {
        AssignerKind::SingleCenter => {
            let anchors = build_anchors(&spec);
            (single_center_assign(&scene.gts, &anchors, &spec).0, None)
        }
        AssignerKind::Multi3x3 => {
            let anchors = build_anchors(&spec);
            (multi3x3_assign(&scene.gts, &anchors, &spec).0, None)
        }
        AssignerKind::Simota => {
            let (anchors, decoded) = synth_predictions(cfg, &scene)?;
            let cm = cost_matrix(&decoded, &anchors, &scene.gts, &cfg.assigner)?;
            let (a, d) = simota_assign(&cm, &cfg.assigner);
            (a, Some(d))
        }
        AssignerKind::OneToOne => {
            let (anchors, decoded) = synth_predictions(cfg, &scene)?;
            let cm = cost_matrix(&decoded, &anchors, &scene.gts, &cfg.assigner)?;
            (one_to_one_assign(&cm)?, None)
        }
    };
    let report = AssignReport {
        config: cfg,
        scene_id: scene.id.clone(),
        assigner: kind.name().to_string(),
        num_anchors: assignment.anchor_labels.len(),
        num_gts: scene.gts.len(),
        num_fg: assignment.num_fg(),
        k_values: assignment.k_values.clone(),
        per_gt_positives: assignment.per_gt_positives.clone(),
        positives: assignment_pairs(&assignment),
        diagnostics,
    };
    write_json(out, &report)?;
    println!(
        "assign: {} gts, {} positives -> {}",
        report.num_gts,
        report.num_fg,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct OtCompareReport<'a> {
    config: &'a RunConfig,
    scene_id: String,
    comparison: simota_kit::assign::OtComparison,
}

fn cmd_ot_compare(cfg: &RunConfig, scene_path: &Path, out: &Path) -> Result<(), Error> {
    let scene = load_scene(scene_path)?;
    let (anchors, decoded) = synth_predictions(cfg, &scene)?;
    let cm = cost_matrix(&decoded, &anchors, &scene.gts, &cfg.assigner)?;
    let (comparison, simota_us, sinkhorn_us) = ot_compare(&cm, &cfg.assigner)?;
    // Wall times go to stdout only; the report file stays reproducible.
    println!("simota: {simota_us} us, sinkhorn: {sinkhorn_us} us");
    println!(
        "agreement: {:.4}, sinkhorn residual: {:.3e} (converged: {})",
        comparison.agreement_rate, comparison.sinkhorn_violation, comparison.sinkhorn_converged
    );
    let report = OtCompareReport {
        config: cfg,
        scene_id: scene.id.clone(),
        comparison,
    };
    write_json(out, &report)?;
    Ok(())
}

#[derive(Serialize)]
struct AugmentReport<'a> {
    config: &'a RunConfig,
    op: String,
    inputs: Vec<String>,
    transforms: Vec<simota_kit::augment::RecordedTransform>,
    /// `(input scene index, input gt index)` per output gt.
    provenance: Vec<(usize, usize)>,
}

fn cmd_augment(cfg: &RunConfig, op: &str, out_dir: &Path, scene_paths: &[PathBuf]) -> Result<(), Error> {
    let need = match op {
        "mosaic" => 4,
        "mixup" => 2,
        "flip" | "jitter" => 1,
        other => return Err(Error::invalid(format!("unknown augment op '{other}'"))),
    };
    if scene_paths.len() != need {
        return Err(Error::invalid(format!(
            "op '{op}' needs exactly {need} scene(s), got {}",
            scene_paths.len()
        )));
    }
    let scenes = scene_paths
        .iter()
        .map(|p| load_scene(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = SplitMix64::new(cfg.augment.seed);
    let (scene, transforms, provenance) = match op {
        "mosaic" => {
            let out_size = (scenes[0].height(), scenes[0].width());
            let r = simota_kit::augment::mosaic(&scenes, out_size, &cfg.augment, &mut rng)?;
            (r.scene, r.transforms.to_vec(), r.provenance)
        }
        "mixup" => {
            let r = simota_kit::augment::mixup(&scenes[0], &scenes[1], &cfg.augment, &mut rng)?;
            (r.scene, r.transforms.to_vec(), r.provenance)
        }
        "flip" => {
            let r = simota_kit::augment::hflip(&scenes[0], &mut rng, &cfg.augment);
            let provenance = (0..r.scene.gts.len()).map(|k| (0, k)).collect();
            (r.scene, vec![r.transform], provenance)
        }
        _ => {
            let r = simota_kit::augment::color_jitter(&scenes[0], &mut rng, &cfg.augment);
            let provenance = (0..r.scene.gts.len()).map(|k| (0, k)).collect();
            (r.scene, Vec::new(), provenance)
        }
    };
    std::fs::create_dir_all(out_dir)?;
    save_scene(&scene, &out_dir.join(format!("{op}.json")))?;
    let report = AugmentReport {
        config: cfg,
        op: op.to_string(),
        inputs: scenes.iter().map(|s| s.id.clone()).collect(),
        transforms,
        provenance,
    };
    write_json(&out_dir.join(format!("{op}_transforms.json")), &report)?;
    println!(
        "augment {op}: {} gts -> {}",
        scene.gts.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: &'a RunConfig,
    scene_id: String,
    assigner: String,
    steps: usize,
    final_loss: simota_kit::losses::LossBreakdown,
    steps_to_threshold: usize,
    loss_threshold: f64,
    num_fg_final: usize,
    eval: MapReport,
    detections: Vec<Detection>,
}

fn write_trace_csv(path: &Path, trace: &FitTrace) -> Result<(), Error> {
    let mut csv = String::from("step,cls,obj,reg,total\n");
    for (i, b) in trace.steps.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{},{}\n", i, b.cls, b.obj, b.reg, b.total));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn cmd_fit(
    cfg: &RunConfig,
    scene_path: &Path,
    assigner: Option<&str>,
    out: &Path,
    trace_csv: Option<&Path>,
) -> Result<(), Error> {
    let scene = load_scene(scene_path)?;
    let spec = cfg.fpn.to_spec()?;
    let mut fit_cfg = cfg.fit;
    if let Some(s) = assigner {
        fit_cfg.assigner = AssignerKind::parse(s)?;
    }
    let trace = fit(&scene, &spec, &fit_cfg, &cfg.assigner, &cfg.loss, cfg.num_classes)?;
    if let Some(p) = trace_csv {
        write_trace_csv(p, &trace)?;
    }
    let final_loss = *trace.steps.last().expect("steps >= 1");
    let report = FitReport {
        config: cfg,
        scene_id: scene.id.clone(),
        assigner: fit_cfg.assigner.name().to_string(),
        steps: trace.steps.len(),
        final_loss,
        steps_to_threshold: steps_to_threshold(&trace, ROADMAP_LOSS_THRESHOLD),
        loss_threshold: ROADMAP_LOSS_THRESHOLD,
        num_fg_final: trace.num_fg_final,
        eval: trace.eval.clone(),
        detections: trace.detections.clone(),
    };
    write_json(out, &report)?;
    println!(
        "fit {}: final loss {:.4}, AP@0.5 {:.3} -> {}",
        report.assigner, final_loss.total, report.eval.ap50, out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RoadmapReport<'a> {
    config: &'a RunConfig,
    loss_threshold: f64,
    seeds: usize,
    rows: Vec<simota_kit::synthfit::RoadmapRow>,
}

fn cmd_roadmap(cfg: &RunConfig, seeds: Option<usize>, out_dir: &Path) -> Result<(), Error> {
    let count = seeds.unwrap_or(cfg.scene_gen.count);
    let spec = cfg.fpn.to_spec()?;
    let scenes: Vec<Scene> = (0..count)
        .map(|i| {
            make_scene(
                cfg.seed.wrapping_add(i as u64),
                cfg.scene_gen.n_objects,
                cfg.scene_gen.size,
                cfg.num_classes,
            )
        })
        .collect();
    let rows = roadmap_report(
        &scenes,
        &spec,
        &cfg.fit,
        &cfg.assigner,
        &cfg.loss,
        cfg.num_classes,
        ROADMAP_LOSS_THRESHOLD,
    )?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv =
        String::from("assigner,mean_final_loss,mean_ap50,mean_steps_to_threshold,seeds_reaching_threshold\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.assigner, r.mean_final_loss, r.mean_ap50, r.mean_steps_to_threshold,
            r.seeds_reaching_threshold
        ));
    }
    std::fs::write(out_dir.join("roadmap.csv"), csv)?;
    let report = RoadmapReport {
        config: cfg,
        loss_threshold: ROADMAP_LOSS_THRESHOLD,
        seeds: count,
        rows,
    };
    write_json(&out_dir.join("roadmap.json"), &report)?;
    println!("roadmap over {count} seeds -> {}", out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config: &'a RunConfig,
    scenes: Vec<String>,
    report: MapReport,
}

fn cmd_eval(
    cfg: &RunConfig,
    files: &[PathBuf],
    out: &Path,
    pr_csv: Option<&Path>,
) -> Result<(), Error> {
    if files.is_empty() || files.len() % 2 != 0 {
        return Err(Error::invalid(
            "eval expects alternating SCENE.json DETS.json pairs",
        ));
    }
    let mut ids = Vec::new();
    let mut pairs: Vec<(Vec<Detection>, Vec<LabeledBox>)> = Vec::new();
    for chunk in files.chunks(2) {
        let scene = load_scene(&chunk[0])?;
        let text = std::fs::read_to_string(&chunk[1])
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", chunk[1].display())))?;
        let dets: Vec<Detection> = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("detections {}: {e}", chunk[1].display())))?;
        ids.push(scene.id.clone());
        pairs.push((dets, scene.gts));
    }
    let borrowed: Vec<(&[Detection], &[LabeledBox])> = pairs
        .iter()
        .map(|(d, g)| (d.as_slice(), g.as_slice()))
        .collect();
    let report = mean_ap_scenes(&borrowed, &coco_thresholds());
    if let Some(p) = pr_csv {
        // PR points of every class at IoU 0.50.
        let mut csv = String::from("class,recall,precision\n");
        for &(class, _) in &report.per_class_ap50 {
            let one: Vec<(Vec<Detection>, Vec<LabeledBox>)> = pairs
                .iter()
                .map(|(d, g)| {
                    (
                        d.iter().filter(|x| x.class_id == class).copied().collect(),
                        g.iter().filter(|x| x.class_id == class).copied().collect(),
                    )
                })
                .collect();
            let ob: Vec<(&[Detection], &[LabeledBox])> = one
                .iter()
                .map(|(d, g)| (d.as_slice(), g.as_slice()))
                .collect();
            let dets_flat: Vec<Detection> = ob.iter().flat_map(|(d, _)| d.iter().copied()).collect();
            let gts_flat: Vec<LabeledBox> = ob.iter().flat_map(|(_, g)| g.iter().copied()).collect();
            let flags = simota_kit::eval::match_detections(&dets_flat, &gts_flat, 0.5);
            let curve = simota_kit::eval::average_precision(
                &flags,
                gts_flat.len(),
            );
            for (r, pr) in curve.points {
                csv.push_str(&format!("{class},{r},{pr}\n"));
            }
        }
        std::fs::write(p, csv)?;
    }
    let out_report = EvalReport {
        config: cfg,
        scenes: ids,
        report,
    };
    write_json(out, &out_report)?;
    println!(
        "eval: mAP {:.4}, AP50 {:.4}, AP75 {:.4} -> {}",
        out_report.report.map, out_report.report.ap50, out_report.report.ap75,
        out.display()
    );
    Ok(())
}

fn cmd_make_scenes(
    cfg: &RunConfig,
    out_dir: &Path,
    count: Option<usize>,
    objects: Option<usize>,
    size: Option<usize>,
    classes: Option<usize>,
) -> Result<(), Error> {
    let count = count.unwrap_or(cfg.scene_gen.count);
    let objects = objects.unwrap_or(cfg.scene_gen.n_objects);
    let size = size.unwrap_or(cfg.scene_gen.size);
    let classes = classes.unwrap_or(cfg.num_classes);
    if size < 32 {
        return Err(Error::invalid("scene size must be at least 32"));
    }
    if classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    std::fs::create_dir_all(out_dir)?;
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let scene = make_scene(seed, objects, size, classes);
        save_scene(&scene, &out_dir.join(format!("scene-{seed}.json")))?;
    }
    println!("wrote {count} scenes -> {}", out_dir.display());
    Ok(())
}
