use std::path::{Path, PathBuf};

use detinv::analysis::{
    central_anchor, context_frequency, evaluate_ap, instance_recall, invert_all, scale_sweep, transfer_matrix_from,
};
use detinv::attribution::{
    attribute, extremal_mask, AttributionRequest, ExtremalConfig, FeatureLayer, HeadTarget, Method, RegComponent,
};
use detinv::detector::{Arch, Detector};
use detinv::image::Image;
use detinv::inversion::{invert_disentangled, invert_layout, visualize_single_anchor, InversionConfig, LossSubset, Trace};
use detinv::layout::{AnnotationFile, CategoryEntry, ImageEntry, Layout};
use detinv::shapes::{generate_dataset, load_split, DatasetManifest, Split};
use detinv::train::train;
use serde::Serialize;

use crate::config::RunConfig;
use crate::plots;
use crate::run::RunDir;
use crate::{Cli, CliError, Command, LayoutArgs};

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_model(rd: &mut RunDir, path: &Path) -> Result<Detector, CliError> {
    rd.input(path)?;
    Detector::load(path).map(|(d, _)| d).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_annotations(path: &Path) -> Result<AnnotationFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let file: AnnotationFile = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
    let errors = file.validate();
    if !errors.is_empty() {
        let list: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
        return Err(CliError::Config(format!("{}: {}", path.display(), list.join("; "))));
    }
    Ok(file)
}

/// Layouts of an annotation file with categories mapped onto the model's.
fn model_layouts(det: &Detector, file: &AnnotationFile) -> Result<Vec<(ImageEntry, Layout)>, CliError> {
    let mut by_id = std::collections::HashMap::new();
    for c in &file.categories {
        let idx = det
            .config
            .categories
            .iter()
            .position(|n| *n == c.name)
            .ok_or_else(|| CliError::Config(format!("category {:?} is unknown to the model", c.name)))?;
        by_id.insert(c.id, idx);
    }
    let layouts = file.layouts().map_err(CliError::Config)?;
    Ok(layouts
        .into_iter()
        .map(|(im, mut l)| {
            for d in &mut l.instances {
                d.category = by_id[&(d.category as u64 + 1)];
            }
            (im, l)
        })
        .collect())
}

fn pick_layout(det: &Detector, path: &Path, image_id: Option<u64>) -> Result<(ImageEntry, Layout), CliError> {
    let file = read_annotations(path)?;
    let all = model_layouts(det, &file)?;
    match image_id {
        None => all.into_iter().next().ok_or_else(|| CliError::Config(format!("{}: no images", path.display()))),
        Some(id) => all
            .into_iter()
            .find(|(im, _)| im.id == id)
            .ok_or_else(|| CliError::Config(format!("{}: image id {id} not found", path.display()))),
    }
}

fn layout_file(det: &Detector, entries: &[(ImageEntry, Layout)], with_scores: bool) -> AnnotationFile {
    let mut f = AnnotationFile {
        categories: det.config.categories.iter().enumerate().map(|(i, n)| CategoryEntry { id: i as u64 + 1, name: n.clone() }).collect(),
        ..AnnotationFile::default()
    };
    for (im, l) in entries {
        f.push_layout(im.clone(), l, with_scores);
    }
    f
}

fn category(det: &Detector, name: &str) -> Result<usize, CliError> {
    det.config.categories.iter().position(|c| c == name).ok_or_else(|| {
        CliError::Config(format!("unknown category {name:?}; the model knows {:?}", det.config.categories))
    })
}

fn checked_inversion(cfg: &InversionConfig, det: &Detector) -> Result<(), CliError> {
    cfg.validate(&det.config.postprocess).map_err(|e| CliError::Config(format!("inversion: {e}")))
}

fn jobs(cli_jobs: Option<usize>) -> Result<(), CliError> {
    let n = match cli_jobs {
        Some(n) => Some(n),
        None => match std::env::var("DETINV_JOBS") {
            Ok(v) => Some(v.parse().map_err(|_| CliError::Config(format!("DETINV_JOBS={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

fn out_root(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out.or_else(|| std::env::var_os("DETINV_OUT").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Execute one parsed command; returns the run directory (none for pure validation).
pub fn run(cli: Cli, args: Vec<String>) -> Result<Option<PathBuf>, CliError> {
    if let Command::ValidateLayout { file } = &cli.command {
        read_annotations(file)?;
        println!("{}: ok", file.display());
        return Ok(None);
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_master_seed(seed);
    }
    cfg.validate()?;
    jobs(cli.jobs)?;
    let mut rd = RunDir::create(&out_root(cli.out), cli.command.name(), args, cfg.clone())?;
    if let Some(p) = &cli.config {
        rd.input(p)?;
    }
    let result = dispatch(&cli.command, &cfg, &mut rd);
    let passed = rd.checks_passed();
    let path = rd.finish(result.is_ok() && passed)?;
    result?;
    if cli.check && !passed {
        return Err(CliError::Check(format!("see {}", path.join("manifest.json").display())));
    }
    Ok(Some(path))
}

fn dispatch(command: &Command, cfg: &RunConfig, rd: &mut RunDir) -> Result<(), CliError> {
    match command {
        Command::GenData { dir } => gen_data(cfg, rd, dir.as_deref()),
        Command::Train { data, arch, epochs, resume } => train_cmd(cfg, rd, data, arch == "two", *epochs, resume.as_deref()),
        Command::Invert(a) => invert_cmd(cfg, rd, a, false, None),
        Command::Invert2(a) => invert_cmd(cfg, rd, a, true, None),
        Command::Disentangle { layout, losses } => invert_cmd(cfg, rd, layout, false, Some(parse_losses(losses)?)),
        Command::SingleAnchor { model, category, anchor, side } => single_anchor_cmd(cfg, rd, model, category, *anchor, *side),
        Command::Attribute { model, image, layout, image_id, instance, target, method, layer } => {
            attribute_cmd(cfg, rd, model, image, layout, *image_id, *instance, target, method, layer)
        }
        Command::Transfer { models, layouts, limit } => transfer_cmd(cfg, rd, models, layouts, *limit),
        Command::Context { model, category, runs, anchor } => context_cmd(cfg, rd, model, category, *runs, *anchor),
        Command::ScaleSweep { model, category, runs } => sweep_cmd(cfg, rd, model, category, *runs),
        Command::ValidateLayout { .. } => unreachable!("handled before run setup"),
    }
}

fn gen_data(cfg: &RunConfig, rd: &mut RunDir, dir: Option<&Path>) -> Result<(), CliError> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| rd.file("data"));
    let written = generate_dataset(&cfg.data, &dir).map_err(runtime)?;
    for p in written {
        rd.output(&p.display().to_string());
    }
    log::info!("dataset written to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    cls: f64,
    reg: f64,
    rpn_cls: f64,
    rpn_reg: f64,
    mask: f64,
    val_ap: Option<f64>,
    val_ap50: Option<f64>,
}

fn train_cmd(cfg: &RunConfig, rd: &mut RunDir, data: &Path, two_stage: bool, epochs: Option<usize>, resume: Option<&Path>) -> Result<(), CliError> {
    let manifest_path = data.join("manifest.json");
    let raw = std::fs::read(&manifest_path).map_err(|e| CliError::Runtime(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    for name in ["manifest.json", "train.json", "val.json"] {
        rd.input(&data.join(name))?;
    }
    let train_set = load_split(&manifest.spec, data, Split::Train).map_err(runtime)?;
    let val_set = load_split(&manifest.spec, data, Split::Val).map_err(runtime)?;
    let (mut det, state) = match resume {
        Some(p) => {
            rd.input(p)?;
            let (d, s) = Detector::load(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            (d, s)
        }
        None => {
            let mut rc = cfg.clone();
            rc.data = manifest.spec.clone();
            (Detector::new(rc.detector_config(two_stage)), None)
        }
    };
    if det.config.categories != manifest.spec.category_names() {
        return Err(CliError::Config("checkpoint categories differ from the dataset's".into()));
    }
    let mut tc = cfg.train.clone();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
    let ckpt = rd.file("model.ckpt");
    let mut save_err = None;
    let logs = train(&mut det, &train_set, &val_set, &tc, state, |log, d, st| {
        log::info!("epoch {} loss {:.4} val AP50 {:?}", log.epoch, log.loss, log.val_ap50);
        if let Err(e) = d.save(&ckpt, Some(st)) {
            save_err = Some(e.to_string());
        }
    })
    .map_err(runtime)?;
    if let Some(e) = save_err {
        return Err(CliError::Runtime(e));
    }
    rd.output("model.ckpt");
    let rows: Vec<EpochRow> = logs
        .iter()
        .map(|l| EpochRow {
            epoch: l.epoch,
            loss: l.loss,
            cls: l.parts.cls,
            reg: l.parts.reg,
            rpn_cls: l.parts.rpn_cls,
            rpn_reg: l.parts.rpn_reg,
            mask: l.parts.mask,
            val_ap: l.val_ap,
            val_ap50: l.val_ap50,
        })
        .collect();
    let mut csv = String::from("epoch,loss,cls,reg,rpn_cls,rpn_reg,mask,val_ap,val_ap50\n");
    for r in &rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.epoch, r.loss, r.cls, r.reg, r.rpn_cls, r.rpn_reg, r.mask, opt(r.val_ap), opt(r.val_ap50)
        ));
    }
    rd.write("train_log.csv", csv.as_bytes())?;
    rd.write_json("train_log.json", &rows)?;
    if let Some(ap50) = logs.last().and_then(|l| l.val_ap50) {
        rd.check("val_ap50_at_least_85", ap50 >= 85.0);
    }
    Ok(())
}

fn parse_losses(s: &str) -> Result<LossSubset, CliError> {
    let mut subset = LossSubset::only(false, false, false);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "cls" => subset.cls = true,
            "reg" => subset.reg = true,
            "mask" => subset.mask = true,
            other => return Err(CliError::Config(format!("--losses: unknown term {other:?} (use cls, reg, mask)"))),
        }
    }
    if !(subset.cls || subset.reg || subset.mask) {
        return Err(CliError::Config("--losses: at least one term is required".into()));
    }
    Ok(subset)
}

fn trace_csv(rd: &mut RunDir, trace: &Trace) -> Result<(), CliError> {
    rd.write("trace.csv", trace.to_csv().as_bytes())
}

#[derive(Serialize)]
struct InversionSummary {
    success: bool,
    iterations: usize,
    target_instances: usize,
    detected_instances: usize,
    final_ious: Vec<f64>,
    ap50: f64,
    recall: f64,
}

fn invert_cmd(cfg: &RunConfig, rd: &mut RunDir, a: &LayoutArgs, two_stage: bool, subset: Option<LossSubset>) -> Result<(), CliError> {
    let det = load_model(rd, &a.model)?;
    if two_stage && det.arch() != Arch::TwoStage {
        return Err(CliError::Config("invert2 needs a two-stage model".into()));
    }
    rd.input(&a.layout)?;
    let (entry, target) = pick_layout(&det, &a.layout, a.image_id)?;
    let icfg = &cfg.inversion;
    checked_inversion(icfg, &det)?;
    let init = match &a.init {
        Some(p) => {
            rd.input(p)?;
            Some(Image::load_png_sized(p, det.config.image_width, det.config.image_height).map_err(runtime)?)
        }
        None => None,
    };
    let result = match subset {
        None => invert_layout(&det, &target, icfg, init).map_err(runtime)?,
        Some(s) => {
            let (r, report) = invert_disentangled(&det, &target, s, icfg).map_err(runtime)?;
            rd.write_json("disentangle.json", &report)?;
            rd.check("cls_met", !s.cls || report.cls_met);
            rd.check("reg_met", !s.reg || report.reg_met);
            r
        }
    };
    rd.write_png("inverted.png", &result.image)?;
    let mut boxed = result.image.clone();
    for d in &result.detected.instances {
        plots::draw_box(&mut boxed, &d.bbox, [1.0, 0.1, 0.1]);
    }
    rd.write_png("inverted_detections.png", &boxed)?;
    trace_csv(rd, &result.trace)?;
    let inv_entry = ImageEntry { file: "inverted.png".into(), ..entry };
    rd.write_json("detected.json", &layout_file(&det, &[(inv_entry, result.detected.clone())], true))?;
    let ap = evaluate_ap(std::slice::from_ref(&result.detected), std::slice::from_ref(&target), det.num_classes()).map_err(runtime)?;
    let summary = InversionSummary {
        success: result.success,
        iterations: result.iterations,
        target_instances: target.len(),
        detected_instances: result.detected.len(),
        final_ious: result.final_ious.clone(),
        ap50: ap.ap50,
        recall: instance_recall(std::slice::from_ref(&result.detected), std::slice::from_ref(&target), 0.5),
    };
    rd.write_json("result.json", &summary)?;
    if subset.is_none() {
        rd.check("layout_reproduced", result.success);
    }
    Ok(())
}

fn anchor_config(cfg: &RunConfig) -> InversionConfig {
    InversionConfig { iterations: cfg.analysis.anchor_iterations, ..cfg.inversion.clone() }
}

#[derive(Serialize)]
struct AnchorSummary {
    category: String,
    anchor_row: usize,
    anchor: detinv::geometry::BBox,
    probability: f64,
    success: bool,
    detected_instances: usize,
}

fn single_anchor_cmd(cfg: &RunConfig, rd: &mut RunDir, model: &Path, name: &str, anchor: Option<usize>, side: Option<f64>) -> Result<(), CliError> {
    let det = load_model(rd, model)?;
    let c = category(&det, name)?;
    let icfg = anchor_config(cfg);
    checked_inversion(&icfg, &det)?;
    let row = anchor.unwrap_or_else(|| central_anchor(&det, side.unwrap_or(cfg.analysis.context_anchor_side)));
    let vis = visualize_single_anchor(&det, row, c, &icfg).map_err(runtime)?;
    rd.write_png("visualization.png", &vis.image)?;
    let mut csv = String::from("iteration,probability\n");
    for (i, p) in vis.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{p:.6}\n"));
    }
    rd.write("trace.csv", csv.as_bytes())?;
    let entry = ImageEntry { id: 1, file: "visualization.png".into(), width: det.config.image_width, height: det.config.image_height };
    rd.write_json("detected.json", &layout_file(&det, &[(entry, vis.detected.clone())], true))?;
    rd.write_json(
        "result.json",
        &AnchorSummary { category: name.into(), anchor_row: row, anchor: vis.anchor, probability: vis.probability, success: vis.success, detected_instances: vis.detected.len() },
    )?;
    rd.check("anchor_probability_reached", vis.success);
    Ok(())
}

fn parse_target(det: &Detector, s: &str, instance_category: usize) -> Result<HeadTarget, CliError> {
    match s.split_once(':') {
        None if s == "cls" => Ok(HeadTarget::Class(instance_category)),
        Some(("cls", name)) => Ok(HeadTarget::Class(category(det, name)?)),
        Some(("reg", r)) => RegComponent::parse(r)
            .map(HeadTarget::Reg)
            .ok_or_else(|| CliError::Config(format!("--target: unknown regression output {r:?} (use dx, dy, dw, dh)"))),
        _ => Err(CliError::Config(format!("--target: expected cls[:<category>] or reg:dx|dy|dw|dh, got {s:?}"))),
    }
}

fn parse_layer(s: &str) -> Result<FeatureLayer, CliError> {
    match s {
        "head" => Ok(FeatureLayer::Head),
        "roi" => Ok(FeatureLayer::Roi),
        n => n.parse().map(FeatureLayer::Backbone).map_err(|_| CliError::Config(format!("--layer: expected head, roi or an index, got {n:?}"))),
    }
}

#[derive(Serialize)]
struct AttributionSummary {
    method: String,
    target: HeadTarget,
    layer: FeatureLayer,
    candidate_row: usize,
    region: detinv::geometry::BBox,
    mass_inside_box: f64,
    normalized: bool,
    extremal: Option<ExtremalSummary>,
}

#[derive(Serialize)]
struct ExtremalSummary {
    area: f64,
    mean_area: f64,
    original: f64,
    preserved: f64,
    retention: f64,
    retention_hard: f64,
    converged: bool,
}

#[allow(clippy::too_many_arguments)]
fn attribute_cmd(
    cfg: &RunConfig,
    rd: &mut RunDir,
    model: &Path,
    image_path: &Path,
    layout: &Path,
    image_id: Option<u64>,
    instance: usize,
    target: &str,
    method: &str,
    layer: &str,
) -> Result<(), CliError> {
    let det = load_model(rd, model)?;
    rd.input(image_path)?;
    rd.input(layout)?;
    let image = Image::load_png_sized(image_path, det.config.image_width, det.config.image_height).map_err(runtime)?;
    let (_, l) = pick_layout(&det, layout, image_id)?;
    let inst = l
        .instances
        .get(instance)
        .ok_or_else(|| CliError::Config(format!("--instance {instance}: the layout has {} instances", l.len())))?;
    let head_target = parse_target(&det, target, inst.category)?;
    let layer = parse_layer(layer)?;
    let method = match method {
        "gradcam" => Method::GradCam,
        "normgrad" => Method::NormGrad,
        _ => Method::ExtremalMask,
    };
    let req = AttributionRequest::for_instance(&det, &image, inst.bbox, head_target, layer).map_err(runtime)?;
    let npix = (det.config.image_width * det.config.image_height) as f64;
    let area = inst.mask.as_ref().map(|m| 0.5 * m.area() as f64 / npix).unwrap_or(cfg.extremal.area);
    let ecfg = ExtremalConfig { area, ..cfg.extremal.clone() };
    let (map, extremal) = if method == Method::ExtremalMask {
        let r = extremal_mask(&det, &req, &ecfg).map_err(runtime)?;
        let s = ExtremalSummary {
            area,
            mean_area: r.mean_area,
            original: r.original,
            preserved: r.preserved,
            retention: r.retention,
            retention_hard: r.retention_hard,
            converged: r.converged,
        };
        rd.check("retention_at_least_0.8", r.retention >= 0.8);
        rd.check("area_within_10pct", r.converged);
        let trace: String = r.trace.iter().enumerate().map(|(i, v)| format!("{i},{v}\n")).collect();
        rd.write("trace.csv", format!("iteration,loss\n{trace}").as_bytes())?;
        (r.mask, Some(s))
    } else {
        (attribute(&det, &req, method, &ecfg).map_err(runtime)?, None)
    };
    rd.write_png("map.png", &plots::map_image(&map))?;
    let mut over = plots::overlay(&image, &map);
    plots::draw_box(&mut over, &inst.bbox, [0.1, 1.0, 0.1]);
    rd.write_png("overlay.png", &over)?;
    rd.write_json("map.json", &map)?;
    let summary = AttributionSummary {
        method: format!("{method:?}"),
        target: head_target,
        layer,
        candidate_row: req.row,
        region: req.region,
        mass_inside_box: map.mass_inside(&inst.bbox),
        normalized: map.normalized,
        extremal,
    };
    rd.write_json("attribution.json", &summary)?;
    Ok(())
}

fn transfer_cmd(cfg: &RunConfig, rd: &mut RunDir, models: &[PathBuf], layouts: &Path, limit: Option<usize>) -> Result<(), CliError> {
    let mut dets = Vec::new();
    for m in models {
        dets.push(load_model(rd, m)?);
    }
    rd.input(layouts)?;
    for d in &dets {
        checked_inversion(&cfg.inversion, d)?;
    }
    let file = read_annotations(layouts)?;
    let n = limit.unwrap_or(cfg.analysis.transfer_layouts);
    let targets: Vec<Layout> = model_layouts(&dets[0], &file)?.into_iter().take(n).map(|(_, l)| l).collect();
    let refs: Vec<&Detector> = dets.iter().collect();
    let mut images = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        log::info!("inverting {} layouts with {}", targets.len(), models[i].display());
        let res = invert_all(d, &targets, &cfg.inversion);
        for (k, r) in res.iter().enumerate() {
            match r {
                Ok(r) => rd.write_png(&format!("inverted/model{i}/{k:04}.png"), &r.image)?,
                Err(e) => log::warn!("model {i} layout {k}: inversion failed: {e}"),
            }
        }
        images.push(res);
    }
    let m = transfer_matrix_from(&refs, &targets, &images).map_err(runtime)?;
    let mut csv = String::from("source,judge,ap50,ap,recall\n");
    for i in 0..dets.len() {
        for j in 0..dets.len() {
            csv.push_str(&format!("{i},{j},{:.3},{:.3},{:.4}\n", m.ap50[i][j], m.ap[i][j], m.recall[i][j]));
        }
    }
    rd.write("transfer.csv", csv.as_bytes())?;
    rd.write_json("transfer.json", &m)?;
    rd.write_png("transfer_heatmap.png", &plots::heatmap(&m.ap50, 100.0, 32))?;
    rd.check("diagonal_is_row_maximum", m.diagonal_dominant().iter().all(|&b| b));
    Ok(())
}

fn context_cmd(cfg: &RunConfig, rd: &mut RunDir, model: &Path, name: &str, runs: Option<usize>, anchor: Option<usize>) -> Result<(), CliError> {
    let det = load_model(rd, model)?;
    let c = category(&det, name)?;
    let icfg = anchor_config(cfg);
    checked_inversion(&icfg, &det)?;
    let row = anchor.unwrap_or_else(|| central_anchor(&det, cfg.analysis.context_anchor_side));
    let n = runs.unwrap_or(cfg.analysis.context_runs);
    let report = context_frequency(&det, c, row, n, &icfg).map_err(runtime)?;
    let freqs = report.table.frequencies();
    let mut csv = String::from("category,frequency,occurrences,above,below,left,right,positions\n");
    for (k, f) in freqs.iter().enumerate() {
        let q = &report.table.positions[k];
        csv.push_str(&format!(
            "{},{f:.4},{},{},{},{},{},{}\n",
            det.config.categories[k],
            report.table.occurrences[k],
            q.above(),
            q.below(),
            q.left(),
            q.right(),
            q.total()
        ));
    }
    rd.write("context.csv", csv.as_bytes())?;
    rd.write_json("context.json", &report)?;
    let partner = cfg
        .data
        .motifs
        .iter()
        .find(|m| m.source == name)
        .and_then(|m| det.config.categories.iter().position(|c| *c == m.target).map(|p| (p, m.above_prob)));
    rd.write_png("context_bars.png", &plots::bar_chart(&freqs, partner.map(|p| p.0), 16, 100))?;
    if let Some((p, above)) = partner {
        let others = freqs.iter().enumerate().filter(|&(k, _)| k != p && k != c).map(|(_, f)| *f).fold(0.0, f64::max);
        rd.check("partner_at_least_twice_others", freqs[p] > 0.0 && freqs[p] >= 2.0 * others);
        let af = report.table.positions[p].above_fraction();
        rd.check("partner_above_fraction_within_0.1", af.is_some_and(|f| (f - above).abs() <= 0.1));
    }
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, rd: &mut RunDir, model: &Path, name: &str, runs: Option<usize>) -> Result<(), CliError> {
    let det = load_model(rd, model)?;
    let c = category(&det, name)?;
    let icfg = anchor_config(cfg);
    checked_inversion(&icfg, &det)?;
    let results = scale_sweep(&det, c, runs.unwrap_or(cfg.analysis.sweep_runs), &icfg).map_err(runtime)?;
    let mut csv = String::from("bucket,covered,anchor_row,runs,success_rate,mean_iou,mean_probability\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.bucket,
            r.covered(),
            r.anchor_row.map(|a| a.to_string()).unwrap_or_default(),
            r.runs,
            r.success_rate,
            r.mean_iou,
            r.mean_probability
        ));
        if !r.covered() {
            log::warn!("scale bucket {} is not covered by the model's anchors; skipped", r.bucket);
        }
        for (k, v) in r.visualizations.iter().enumerate() {
            rd.write_png(&format!("sweep/bucket{}_{k:02}.png", r.bucket), &v.image)?;
        }
    }
    rd.write("scale_sweep.csv", csv.as_bytes())?;
    rd.write_json("scale_sweep.json", &results)?;
    for r in results.iter().filter(|r| r.covered()) {
        rd.check(&format!("bucket{}_success_at_least_0.8", r.bucket), r.success_rate >= 0.8);
    }
    Ok(())
}
