use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use glasseg::apps::{correct_depth, read_depth, write_depth, write_point_cloud_ply, CameraIntrinsics};
use glasseg::datakit::io::{read_gray, read_mask, read_raw_thermal, read_rgb, write_dataset, write_gray_png, write_mask_png, write_rgb_png};
use glasseg::datakit::{dataset_stats, normalize_thermal, synth_dataset, BinaryMask, Manifest, ManifestEntry};
use glasseg::metrics::{evaluate_split, render_table, MetricsReport, BINARY_THRESHOLD};
use glasseg::nnet::ModelConfig;
use glasseg::trainer::eval::round_to_multiple;
use glasseg::trainer::{evaluate_model, load_model, predict_probability, train as run_training, TrainConfig, TrainOptions};
use serde::Serialize;

use crate::config::{config_error, RunConfig};
use crate::plot::bar_chart;

pub const CACHE_ENV: &str = "GLASSEG_CACHE";

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("{what} {} does not exist", path.display())))
    }
}

fn entries_of<'a>(manifest: &'a Manifest, split: Option<&str>) -> Vec<&'a ManifestEntry> {
    match split {
        Some(s) => manifest.split(s),
        None => manifest.entries.iter().collect(),
    }
}

/// `report.json` for the first row, `report.txt` holding the table, and the
/// table on stdout.
fn write_reports(out: &Path, rows: &[(String, MetricsReport)]) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    rows[0].1.write_json(&out.join("report.json"))?;
    let table = render_table(rows);
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<PathBuf>) -> anyhow::Result<()> {
    let manifest = Manifest::read(&cfg.manifest(None)?)?;
    if manifest.split(&cfg.data.train_split).is_empty() {
        return Err(config_error(format!(
            "the manifest has no entries in split `{}` (data.train_split)",
            cfg.data.train_split
        )));
    }
    if let Some(r) = &resume {
        require_file(r, "resume checkpoint")?;
    }
    let pretrained_dir = if cfg.model.pretrained {
        let dir = std::env::var_os(CACHE_ENV).ok_or_else(|| {
            config_error(format!(
                "model.pretrained is true but {CACHE_ENV} is not set; point it at the backbone weight directory or set model.pretrained = false"
            ))
        })?;
        Some(PathBuf::from(dir))
    } else {
        None
    };
    let train_set = manifest.load_split(&cfg.data.train_split)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    log::info!(
        "training {} on {} samples for {} epochs",
        cfg.model.variant_name(),
        train_set.len(),
        cfg.train.total_epochs
    );
    let outcome = run_training(
        &cfg.model,
        &cfg.train,
        &train_set,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            pretrained_dir,
        },
    )?;
    let model = match &outcome.best_checkpoint {
        Some(best) => load_model(best)?,
        None => outcome.model,
    };
    let mut test_set = manifest.load_split(&cfg.data.test_split)?;
    if test_set.is_empty() {
        log::warn!("split `{}` is empty; reporting on the training split", cfg.data.test_split);
        test_set = train_set;
    }
    let report = evaluate_model(&model, &test_set, &cfg.eval)?;
    write_reports(out, &[(cfg.model.variant_name(), report)])
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
}

pub fn eval(cfg: &RunConfig, out: &Path, args: EvalArgs) -> anyhow::Result<()> {
    let manifest = Manifest::read(&cfg.manifest(args.manifest.as_deref())?)?;
    let split = args.split.unwrap_or_else(|| cfg.data.test_split.clone());
    let entries = manifest.split(&split);
    if entries.is_empty() {
        return Err(config_error(format!("the manifest has no entries in split `{split}`")));
    }
    let (label, report) = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), None) => {
            require_file(ckpt, "checkpoint")?;
            let model = load_model(ckpt)?;
            let samples = entries.iter().map(|e| e.load()).collect::<glasseg::Result<Vec<_>>>()?;
            (model.config().variant_name(), evaluate_model(&model, &samples, &cfg.eval)?)
        }
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(config_error(format!("predictions directory {} does not exist", dir.display())));
            }
            let mut preds = Vec::with_capacity(entries.len());
            let mut gts = Vec::with_capacity(entries.len());
            for e in &entries {
                let mask = e
                    .mask
                    .as_ref()
                    .with_context(|| format!("{} has no ground-truth mask", e.rgb.display()))?;
                let stem = e.rgb.file_stem().unwrap_or_default().to_string_lossy();
                preds.push(read_gray(&dir.join(format!("{stem}.png")))?);
                gts.push(read_mask(mask)?);
            }
            ("predictions".to_string(), evaluate_split(&preds, &gts, &cfg.eval)?)
        }
        _ => return Err(config_error("eval needs exactly one of --checkpoint or --predictions")),
    };
    write_reports(out, &[(label, report)])
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub rgb: Option<PathBuf>,
    pub thermal: Option<PathBuf>,
}

pub fn predict(out: &Path, args: PredictArgs) -> anyhow::Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let model = load_model(&args.checkpoint)?;
    let kind = model.config().input_kind;
    let rgb_path = match (&args.rgb, kind.needs_rgb()) {
        (Some(p), true) => Some(p),
        (None, true) => return Err(config_error(format!("the {kind} checkpoint needs an RGB image (--rgb)"))),
        _ => None,
    };
    let thermal_path = match (&args.thermal, kind.needs_thermal()) {
        (Some(p), true) => Some(p),
        (None, true) => return Err(config_error(format!("the {kind} checkpoint needs a thermal image (--thermal)"))),
        _ => None,
    };
    for p in rgb_path.iter().chain(thermal_path.iter()) {
        require_file(p, "input image")?;
    }
    let rgb = rgb_path.map(|p| read_rgb(p)).transpose()?;
    let mut thermal = thermal_path.map(|p| normalize_thermal(&read_raw_thermal(p)?)).transpose()?;
    if let (Some(r), Some(t)) = (&rgb, &mut thermal) {
        if r.dims() != t.dims() {
            let (h, w) = r.dims();
            *t = t.resize_bilinear(h, w);
        }
    }
    let prob = predict_probability(&model, rgb.as_ref(), thermal.as_ref())?;
    let stem = rgb_path
        .or(thermal_path)
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prediction".into());
    fs::create_dir_all(out)?;
    let prob_path = out.join(format!("{stem}_prob.png"));
    let mask_path = out.join(format!("{stem}_mask.png"));
    write_gray_png(&prob, &prob_path)?;
    let mask = BinaryMask::threshold(&prob, BINARY_THRESHOLD as f32);
    write_mask_png(&mask, &mask_path)?;
    println!("{}\n{}", prob_path.display(), mask_path.display());
    Ok(())
}

pub fn stats(cfg: &RunConfig, out: &Path, manifest: Option<PathBuf>, split: Option<String>) -> anyhow::Result<()> {
    let manifest = Manifest::read(&cfg.manifest(manifest.as_deref())?)?;
    let masks = entries_of(&manifest, split.as_deref())
        .into_iter()
        .filter_map(|e| e.mask.as_deref())
        .map(read_mask)
        .collect::<glasseg::Result<Vec<_>>>()?;
    if masks.is_empty() {
        return Err(config_error("the selected manifest entries have no masks"));
    }
    let stats = dataset_stats(&masks)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    let area: Vec<f64> = stats.area_ratio_histogram.counts.iter().map(|&c| c as f64).collect();
    write_rgb_png(&bar_chart(&area), &out.join("area_histogram.png"))?;
    let max_components = stats.component_histogram.keys().copied().max().unwrap_or(0);
    let components: Vec<f64> = (0..=max_components)
        .map(|k| stats.component_histogram.get(&k).copied().unwrap_or(0) as f64)
        .collect();
    write_rgb_png(&bar_chart(&components), &out.join("component_histogram.png"))?;
    write_gray_png(&stats.location_map(), &out.join("location_map.png"))?;
    println!("{} masks; outputs in {}", stats.n_images, out.display());
    Ok(())
}

pub struct SynthArgs {
    pub count: usize,
    pub size: (usize, usize),
    pub max_regions: usize,
    pub test_fraction: f64,
}

pub fn synth(seed: u64, out: &Path, args: SynthArgs) -> anyhow::Result<()> {
    if args.count == 0 || args.size.0 == 0 || args.size.1 == 0 {
        return Err(config_error("synth needs a positive --count and --size"));
    }
    if !(0.0..1.0).contains(&args.test_fraction) {
        return Err(config_error("--test-fraction must lie in [0, 1)"));
    }
    let samples = synth_dataset(seed, args.count, args.size, args.max_regions);
    let n_test = (args.count as f64 * args.test_fraction).round() as usize;
    let n_train = args.count - n_test;
    write_dataset(out, &samples, |i| if i < n_train { "train".into() } else { "test".into() })?;

    let mut cfg = RunConfig::default();
    cfg.data.manifest = Some(PathBuf::from("manifest.csv"));
    cfg.model = ModelConfig::tiny();
    let m = cfg.model.size_multiple();
    cfg.train = TrainConfig {
        batch_size: 4.min(n_train.max(1)),
        total_epochs: 10,
        lr_switch_epoch: 8,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    cfg.train.augment.crop_size = (round_to_multiple(args.size.0, m), round_to_multiple(args.size.1, m));
    fs::write(out.join("glasseg.toml"), cfg.to_toml())?;
    println!("{} samples ({n_train} train, {n_test} test) in {}", args.count, out.display());
    Ok(())
}

pub struct CorrectDepthArgs {
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub intrinsics: String,
    pub ply: bool,
}

#[derive(Serialize)]
struct CorrectionSummary<'a> {
    input: &'a Path,
    output: &'a Path,
    components: &'a [glasseg::apps::ComponentFit],
}

pub fn correct(out: &Path, args: CorrectDepthArgs) -> anyhow::Result<()> {
    require_file(&args.depth, "depth map")?;
    require_file(&args.mask, "mask")?;
    let k = parse_intrinsics(&args.intrinsics)?;
    let depth = read_depth(&args.depth)?;
    let mask = read_mask(&args.mask)?;
    let result = correct_depth(&depth, &mask, &k)?;
    for c in result.failed() {
        log::warn!("component {} left unchanged: {}", c.label, c.failure.as_deref().unwrap_or(""));
    }
    fs::create_dir_all(out)?;
    let stem = args.depth.file_stem().unwrap_or_default().to_string_lossy();
    let ext = args.depth.extension().unwrap_or_default().to_string_lossy();
    let output = out.join(format!("{stem}_corrected.{ext}"));
    write_depth(&result.depth, &output)?;
    let summary = CorrectionSummary {
        input: &args.depth,
        output: &output,
        components: &result.components,
    };
    fs::write(out.join("correction.json"), serde_json::to_string_pretty(&summary)?)?;
    if args.ply {
        let n = write_point_cloud_ply(&result.depth, &k, Some(&mask), &out.join(format!("{stem}_corrected.ply")))?;
        log::info!("wrote {n} points");
    }
    println!("{}", output.display());
    Ok(())
}

fn parse_intrinsics(text: &str) -> anyhow::Result<CameraIntrinsics> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| config_error(format!("--intrinsics `{text}` is not four numbers fx,fy,cx,cy")))?;
    match v[..] {
        [fx, fy, cx, cy] => CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| config_error(e.to_string())),
        _ => Err(config_error(format!("--intrinsics `{text}` is not four numbers fx,fy,cx,cy"))),
    }
}

pub fn parse_size(text: &str) -> Result<(usize, usize), String> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{text}` is not HEIGHTxWIDTH"))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("`{text}` is not HEIGHTxWIDTH"));
    Ok((parse(h)?, parse(w)?))
}
