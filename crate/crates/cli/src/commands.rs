use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use edgedet::compress::{calibrate, prune_channels, quantize_graph, PruneOptions};
use edgedet::engine::{synthetic_scene, TensorBuf};
use edgedet::ir::{build_yolov5n, count_macs, count_params, fold_batchnorm, YoloConfig};
use edgedet::metrics::{evaluate, pr_curve_csv, pr_curve_svg, EvalReport, PerImage};
use edgedet::planner::{
    analyze_report, analyze_report_with_frame, estimate_flash, frame_buffer_bytes, Budgets,
};
use edgedet::postprocess::{parse_jsonl, write_jsonl, Detection, DetectionRecord};
use rayon::prelude::*;
use serde_json::json;

use crate::args::{Cli, Command, DetectArgs, ModelArgs};
use crate::bench::bench;
use crate::config::{FileConfig, Overrides, RunConfig};
use crate::dataset::{list_images, load_manifest, open_dataset, Splits};
use crate::imageio::{annotated_svg, encode_png, letterbox, load_rgb, tensor_to_rgb};
use crate::pipeline::{load_model, save_model, Detector};
use crate::CliError;

/// Offset separating synthetic calibration seeds from other seeded scenes.
const CALIBRATION_SEED_OFFSET: u64 = 0xCA11_0000;

struct Ctx<'a> {
    file: FileConfig,
    json: bool,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn resolve(&mut self, o: Overrides) -> Result<RunConfig, CliError> {
        RunConfig::resolve(std::mem::take(&mut self.file), o)
    }

    fn emit(&mut self, text: &str) -> Result<(), CliError> {
        self.out
            .write_all(text.as_bytes())
            .map_err(CliError::io("<stdout>"))
    }

    fn emit_json(&mut self, v: &serde_json::Value) -> Result<(), CliError> {
        let s = serde_json::to_string_pretty(v).expect("json value");
        self.emit(&format!("{s}\n"))
    }
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, data).map_err(CliError::io(path))
}

fn model_overrides(m: &ModelArgs, d: Option<&DetectArgs>) -> Overrides {
    let mut o = m.overrides();
    if let Some(d) = d {
        d.apply(&mut o);
    }
    o
}

pub(crate) fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut ctx = Ctx {
        file,
        json: cli.json,
        out,
    };
    match cli.command {
        Command::Build { model, fold, out } => cmd_build(&mut ctx, &model, fold, &out),
        Command::Analyze {
            model,
            ram_budget,
            flash_budget,
            frame,
        } => {
            let mut o = model_overrides(&model, None);
            o.ram_budget = ram_budget;
            o.flash_budget = flash_budget;
            cmd_analyze(&mut ctx, o, frame)
        }
        Command::Quantize {
            model,
            calibration_dir,
            synthetic,
            seed,
            out,
        } => {
            let mut o = model_overrides(&model, None);
            o.calibration_dir = calibration_dir;
            o.seed = seed;
            cmd_quantize(&mut ctx, o, synthetic, &out)
        }
        Command::Prune { model, ratio, out } => {
            cmd_prune(&mut ctx, model_overrides(&model, None), ratio, &out)
        }
        Command::Infer {
            model,
            detect,
            image,
            out,
            svg,
        } => cmd_infer(
            &mut ctx,
            model_overrides(&model, Some(&detect)),
            &image,
            out,
            svg,
        ),
        Command::Eval {
            model,
            detect,
            dataset,
            predictions,
            manifest,
            out_dir,
        } => {
            let uses_model = model.model.is_some() || model.random_weights.is_some();
            if predictions.is_some() && uses_model {
                return Err(CliError::Usage(
                    "pass either --predictions or a model, not both".into(),
                ));
            }
            let mut o = model_overrides(&model, Some(&detect));
            o.dataset = dataset;
            o.manifest = manifest;
            o.out_dir = out_dir;
            cmd_eval(&mut ctx, o, predictions)
        }
        Command::Bench {
            model,
            detect,
            image,
            runs,
        } => cmd_bench(
            &mut ctx,
            model_overrides(&model, Some(&detect)),
            image,
            runs,
        ),
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let cfg = ctx.resolve(Overrides {
                seed,
                ..Overrides::default()
            })?;
            cmd_synth(&mut ctx, &out, count, size, cfg.seed)
        }
    }
}

fn cmd_build(ctx: &mut Ctx, m: &ModelArgs, fold: bool, out: &Path) -> Result<(), CliError> {
    if m.model.is_some() {
        return Err(CliError::Usage(
            "build creates a model; --model is not accepted".into(),
        ));
    }
    let cfg = ctx.resolve(m.overrides())?;
    let seed = cfg.random_weights.unwrap_or(cfg.seed);
    let mut g = build_yolov5n(&YoloConfig::new(cfg.num_classes, cfg.input_size).with_seed(seed))?;
    if fold {
        g = fold_batchnorm(&g)?;
    }
    let id = save_model(&g, out)?;
    let (params, macs) = (count_params(&g), count_macs(&g)?);
    if ctx.json {
        ctx.emit_json(&json!({
            "path": out, "model_id": id, "seed": seed, "input_size": cfg.input_size,
            "num_classes": cfg.num_classes, "params": params, "macs": macs,
        }))
    } else {
        ctx.emit(&format!(
            "wrote {}\nseed     {seed}\nparams   {params}\nmacs     {macs}\nmodel    {id}\n",
            out.display()
        ))
    }
}

fn cmd_analyze(ctx: &mut Ctx, o: Overrides, frame: Option<usize>) -> Result<(), CliError> {
    let cfg = ctx.resolve(o)?;
    let model = load_model(&cfg)?;
    let budgets = Budgets {
        ram_bytes: cfg.ram_budget,
        flash_bytes: cfg.flash_budget,
    };
    let report =
        analyze_report_with_frame(&model.graph, &budgets, frame.map_or(0, frame_buffer_bytes))?;
    if ctx.json {
        ctx.emit(&format!("{}\n", report.to_json()))?;
    } else {
        ctx.emit(&report.render_text())?;
    }
    if report.fits() {
        Ok(())
    } else {
        Err(CliError::NoFit)
    }
}

fn calibration_inputs(
    cfg: &RunConfig,
    synthetic: Option<usize>,
    size: usize,
) -> Result<(Vec<TensorBuf>, String), CliError> {
    if let Some(n) = synthetic {
        if n == 0 {
            return Err(CliError::Usage(
                "--synthetic needs at least one scene".into(),
            ));
        }
        let seeds = (0..n as u64).map(|k| cfg.seed.wrapping_add(CALIBRATION_SEED_OFFSET + k));
        let inputs = seeds.map(|s| synthetic_scene(s, size)).collect();
        return Ok((inputs, format!("{n} synthetic scenes (seed {})", cfg.seed)));
    }
    let dir = cfg
        .calibration_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("pass --calibration-dir DIR or --synthetic N".into()))?;
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "calibration directory {} contains no PNG or PPM images",
            dir.display()
        )));
    }
    let inputs = files
        .iter()
        .map(|p| Ok(letterbox(&load_rgb(p)?, size).0))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((
        inputs,
        format!("{} images from {}", files.len(), dir.display()),
    ))
}

fn cmd_quantize(
    ctx: &mut Ctx,
    o: Overrides,
    synthetic: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = ctx.resolve(o)?;
    let model = load_model(&cfg)?;
    if model.graph.is_quantized() {
        return Err(CliError::Usage("model is already quantized".into()));
    }
    let folded = fold_batchnorm(&model.graph)?;
    let size = folded.metadata.input_size;
    let (inputs, source) = calibration_inputs(&cfg, synthetic, size)?;
    let cal = calibrate(&folded, &inputs)?;
    let q = quantize_graph(&folded, &cal)?;
    let id = save_model(&q, out)?;
    let (flash_float, flash_int8) = (estimate_flash(&folded), estimate_flash(&q));
    if ctx.json {
        ctx.emit_json(&json!({
            "path": out, "model_id": id, "calibration": source,
            "calibration_inputs": inputs.len(), "tensors": q.tensors.len(),
            "flash_float_bytes": flash_float, "flash_int8_bytes": flash_int8,
        }))
    } else {
        ctx.emit(&format!(
            "wrote {}\ncalibration  {source}\ntensors      {}\nflash        {flash_float} B float -> {flash_int8} B int8 ({:.3}x)\nmodel        {id}\n",
            out.display(),
            q.tensors.len(),
            flash_int8 as f64 / flash_float as f64
        ))
    }
}

fn cmd_prune(ctx: &mut Ctx, o: Overrides, ratio: f64, out: &Path) -> Result<(), CliError> {
    let cfg = ctx.resolve(o)?;
    let model = load_model(&cfg)?;
    if model.graph.is_quantized() {
        return Err(CliError::Usage(
            "pruning works on float models; prune before quantizing".into(),
        ));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(CliError::Usage(format!(
            "prune ratio {ratio} is outside [0, 1)"
        )));
    }
    let (pruned, report) = prune_channels(&model.graph, &PruneOptions::backbone(ratio))?;
    let budgets = Budgets::default();
    let ram_before = analyze_report(&model.graph, &budgets)?.ram_bytes;
    let ram_after = analyze_report(&pruned, &budgets)?.ram_bytes;
    let id = save_model(&pruned, out)?;
    if ctx.json {
        return ctx.emit_json(&json!({
            "path": out, "model_id": id, "report": report,
            "flash_reduction": report.flash_reduction(),
            "params_reduction": report.params_reduction(),
            "ram_before_bytes": ram_before, "ram_after_bytes": ram_after,
        }));
    }
    let mut s = format!("wrote {}\n", out.display());
    let _ = writeln!(s, "ratio     {ratio}");
    let _ = writeln!(
        s,
        "layers    {} pruned, {} skipped, {} channels removed",
        report.layers.len(),
        report.skipped.len(),
        report.channels_removed()
    );
    let _ = writeln!(
        s,
        "params    {} -> {} (-{:.2}%)",
        report.params_before,
        report.params_after,
        100.0 * report.params_reduction()
    );
    let _ = writeln!(
        s,
        "flash     {} B -> {} B (-{:.2}%)",
        report.flash_before,
        report.flash_after,
        100.0 * report.flash_reduction()
    );
    let _ = writeln!(
        s,
        "ram       {ram_before} B -> {ram_after} B ({:+} B)",
        ram_after as i64 - ram_before as i64
    );
    for l in &report.layers {
        let _ = writeln!(
            s,
            "  pruned  {:<24} {} -> {}",
            l.node, l.channels_before, l.channels_after
        );
    }
    for k in &report.skipped {
        let _ = writeln!(s, "  skipped {:<24} {}", k.node, k.reason);
    }
    let _ = writeln!(s, "model     {id}");
    ctx.emit(&s)
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_infer(
    ctx: &mut Ctx,
    o: Overrides,
    image: &Path,
    out: Option<PathBuf>,
    svg: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = ctx.resolve(o)?;
    let files = if image.is_dir() {
        list_images(image)?
    } else {
        vec![image.to_path_buf()]
    };
    if svg.is_some() && files.len() != 1 {
        return Err(CliError::Usage("--svg needs a single input image".into()));
    }
    let model = load_model(&cfg)?;
    let classes = cfg.class_names(model.graph.metadata.num_classes)?;
    let det = Detector::new(model.graph, cfg.conf_thresh, cfg.nms_iou)?;
    let mut records = Vec::new();
    for path in &files {
        let img = load_rgb(path)?;
        let dets = det.detect_image(&img)?;
        let id = image_id(path);
        records.extend(dets.iter().map(|d| DetectionRecord::new(&id, d)));
        if let Some(svg) = &svg {
            write_file(svg, annotated_svg(&img, &dets, &classes))?;
        }
    }
    let text = write_jsonl(&records);
    match out {
        Some(p) => write_file(&p, text),
        None => ctx.emit(&text),
    }
}

fn cmd_eval(ctx: &mut Ctx, o: Overrides, predictions: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = ctx.resolve(o)?;
    let root = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset: pass --dataset DIR".into()))?;
    let splits = cfg.manifest.as_deref().map(load_manifest).transpose()?;
    let ds = open_dataset(root)?;
    let truths = ds.truths()?;
    let mut preds: PerImage<Detection> = truths.keys().map(|k| (k.clone(), Vec::new())).collect();
    let classes = match predictions {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
            for r in parse_jsonl(&text)? {
                let slot = preds.get_mut(&r.image).ok_or_else(|| {
                    CliError::Data(format!(
                        "{}: prediction for image `{}` which is not in the dataset",
                        path.display(),
                        r.image
                    ))
                })?;
                slot.push(r.detection());
            }
            cfg.class_names(cfg.num_classes)?
        }
        None => {
            let model = load_model(&cfg)?;
            let classes = cfg.class_names(model.graph.metadata.num_classes)?;
            let det = Detector::new(model.graph, cfg.conf_thresh, cfg.nms_iou)?;
            let found: Vec<(String, Vec<Detection>)> = ds
                .items
                .par_iter()
                .map(|it| Ok((it.id.clone(), det.detect_image(&load_rgb(&it.image)?)?)))
                .collect::<Result<_, CliError>>()?;
            preds.extend(found);
            classes
        }
    };
    let report = evaluate(&preds, &truths, &classes)?;
    if let Some(dir) = &cfg.out_dir {
        write_eval_outputs(dir, &report)?;
    }
    if ctx.json {
        let report_json: serde_json::Value =
            serde_json::from_str(&report.to_json()).expect("report json");
        ctx.emit_json(&json!({
            "dataset": root, "images": ds.items.len(), "splits": splits, "report": report_json,
        }))
    } else {
        ctx.emit(&render_eval(&report, ds.items.len(), splits))
    }
}

fn render_eval(report: &EvalReport, images: usize, splits: Option<Splits>) -> String {
    let mut s = String::new();
    if let Some(sp) = splits {
        let _ = writeln!(s, "splits  {sp}");
    }
    let _ = writeln!(s, "images  {images}");
    s.push_str(&report.render_text());
    match report.conf_threshold {
        Some(t) => {
            let _ = writeln!(s, "operating point: confidence >= {t}");
        }
        None => s.push_str("operating point: none (no predictions)\n"),
    }
    s
}

fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_file(&dir.join("report.txt"), report.render_text())?;
    write_file(&dir.join("report.json"), report.to_json())?;
    write_file(&dir.join("pr_curve.csv"), pr_curve_csv(report))?;
    for curve in &report.curves {
        let ap50 = report.row(&curve.class).map_or(0.0, |r| r.ap50);
        let name: String = curve
            .class
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        write_file(
            &dir.join(format!("pr_{name}.svg")),
            pr_curve_svg(curve, ap50),
        )?;
    }
    Ok(())
}

fn cmd_bench(
    ctx: &mut Ctx,
    o: Overrides,
    image: Option<PathBuf>,
    runs: usize,
) -> Result<(), CliError> {
    let cfg = ctx.resolve(o)?;
    let model = load_model(&cfg)?;
    let size = model.graph.metadata.input_size;
    let img = match &image {
        Some(p) => load_rgb(p)?,
        None => tensor_to_rgb(&synthetic_scene(cfg.seed, size))?,
    };
    let det = Detector::new(model.graph, cfg.conf_thresh, cfg.nms_iou)?;
    let result = bench(&det, &model.id, &img, runs)?;
    if ctx.json {
        ctx.emit_json(&serde_json::to_value(&result).expect("bench json"))
    } else {
        ctx.emit(&result.render_text())
    }
}

fn cmd_synth(
    ctx: &mut Ctx,
    out: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<(), CliError> {
    if size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut written = BTreeMap::new();
    for k in 0..count as u64 {
        let path = out.join(format!("scene_{k:04}.png"));
        let img = tensor_to_rgb(&synthetic_scene(seed.wrapping_add(k), size))?;
        write_file(&path, encode_png(&img))?;
        written.insert(k, path);
    }
    if ctx.json {
        ctx.emit_json(
            &json!({ "seed": seed, "size": size, "files": written.values().collect::<Vec<_>>() }),
        )
    } else {
        let mut s = String::new();
        for p in written.values() {
            let _ = writeln!(s, "{}", p.display());
        }
        ctx.emit(&s)
    }
}
