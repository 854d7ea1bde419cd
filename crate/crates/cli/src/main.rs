use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use roadlabel::config::FeatureSource;
use roadlabel::features::{FeatureProvider, FileFeatures, ToyExtractor};
use roadlabel::fusion::{binarize, crf_refine, fuse};
use roadlabel::ingest::{load_rgb, write_atomic, FrameSample, Sequence};
use roadlabel::lidar_label::save_points_csv;
use roadlabel::metrics::{format_table, MetricsReport};
use roadlabel::pipeline::{
    ablation_configs, fit_frame, full_config, AblationConfig, FrameOutput, FrameSummary,
    LidarVariant, Pipeline, ProvenanceCounts,
};
use roadlabel::synth::{write_sequence, SceneParams};
use roadlabel::{Execution, LabelImage, Mask, SequenceConfig};

/// Trajectory-based road autolabeling.
#[derive(Parser, Debug)]
#[command(name = "roadlabel", version)]
struct Cli {
    /// Pipeline configuration (YAML or JSON). A run manifest works too.
    #[arg(long, global = true, env = "ROADLABEL_CONFIG")]
    config: Option<PathBuf>,

    /// Override a configuration value by dotted key, e.g. `--set camera.patch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Size of the worker pool.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, short, global = true, default_value = "roadlabel-out")]
    output: PathBuf,

    /// Also write per-ring fit tables, per-point labels and trajectory masks.
    #[arg(long, global = true)]
    dump_debug: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence with ground truth into the output directory.
    Synth {
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene parameters (YAML); unspecified fields keep their defaults.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Fit the trajectory to every frame and write trajectory masks.
    Fit(Input),
    /// Produce camera, lidar and fused labels plus final masks.
    Label(Input),
    /// Fuse saved camera and lidar labels and refine them to masks.
    Fuse {
        /// Directory of `<frame>/camera.png` and `<frame>/lidar.png` labels, as written by `label`.
        #[arg(long)]
        labels: PathBuf,
        /// Directory of `<frame>.png` camera images; enables CRF refinement.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Score predicted masks against ground-truth masks.
    Eval {
        /// Directory of predicted `<frame>.png` masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth `<frame>.png` masks.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run every ablation configuration against ground truth.
    Ablate(Input),
    /// Label, write masks and evaluate when ground truth is present.
    All(Input),
}

#[derive(Args, Debug)]
struct Input {
    /// Sequence directory.
    #[arg(long, short)]
    input: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg.replace('\n', " ")
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("starting worker pool")?;
    }
    match &cli.command {
        Command::Synth {
            frames,
            seed,
            scene,
        } => synth(cli, *frames, *seed, scene.as_deref()),
        Command::Fit(input) => fit(cli, &input.input),
        Command::Label(input) => label(cli, &input.input, false),
        Command::All(input) => label(cli, &input.input, true),
        Command::Ablate(input) => ablate(cli, &input.input),
        Command::Fuse { labels, images } => fuse_labels(cli, labels, images.as_deref()),
        Command::Eval { pred, gt } => eval(cli, pred, gt),
    }
}

/// Explicit `--config` (or `ROADLABEL_CONFIG`), else `<input>/config.yaml`,
/// else defaults; `--set` overrides apply last.
fn resolve_config(cli: &Cli, input: Option<&Path>) -> Result<(SequenceConfig, String)> {
    let (mut cfg, source) = match (&cli.config, input.map(|i| i.join("config.yaml"))) {
        (Some(p), _) => (SequenceConfig::load(p)?, p.display().to_string()),
        (None, Some(p)) if p.exists() => (SequenceConfig::load(&p)?, p.display().to_string()),
        _ => (SequenceConfig::default(), "defaults".to_string()),
    };
    cfg.apply_overrides(&cli.set)?;
    info!("configuration from {source}, hash {}", &cfg.hash()[..12]);
    Ok((cfg, source))
}

fn check_output(output: &Path, input: &Path) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(output) == canon(input) {
        bail!(
            "output directory {} must differ from the input",
            output.display()
        );
    }
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(path, |tmp| {
        std::fs::write(tmp, text).map_err(|e| roadlabel::Error::Io {
            path: tmp.to_path_buf(),
            source: e,
        })
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// `frames` holds one record per processed frame, each with a `status`.
fn manifest(
    cli: &Cli,
    command: &str,
    input: Option<&Path>,
    cfg: &SequenceConfig,
    source: &str,
    frames: Value,
    extra: Value,
) -> Value {
    let mut m = json!({
        "tool": "roadlabel",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "input": input.map(|p| p.display().to_string()),
        "output": cli.output.display().to_string(),
        "config_source": source,
        "config_hash": cfg.hash(),
        "config": cfg,
        "dump_debug": cli.dump_debug,
        "frames": frames,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    m
}

fn synth(cli: &Cli, frames: usize, seed: u64, scene: Option<&Path>) -> Result<()> {
    let mut params = match scene {
        Some(p) => SceneParams::load(p)?,
        None => SceneParams::default(),
    };
    params.noise_seed = seed;
    std::fs::create_dir_all(&cli.output)
        .with_context(|| format!("creating {}", cli.output.display()))?;
    let generated = write_sequence(&params, frames, &cli.output, Execution::default())?;
    let cfg = params.pipeline_config();
    let ids: Vec<Value> = generated
        .iter()
        .map(|f| json!({ "frame_id": f.sample.frame_id, "status": "ok" }))
        .collect();
    let m = manifest(
        cli,
        "synth",
        None,
        &cfg,
        "scene",
        json!(ids),
        json!({ "scene": params }),
    );
    write_json(&cli.output.join("manifest.json"), &m)?;
    info!("wrote {frames} frames to {}", cli.output.display());
    Ok(())
}

struct Loaded {
    seq: Sequence,
    cfg: SequenceConfig,
    source: String,
}

fn open(cli: &Cli, input: &Path) -> Result<Loaded> {
    let (cfg, source) = resolve_config(cli, Some(input))?;
    let seq = Sequence::open(input, &cfg)
        .with_context(|| format!("opening sequence {}", input.display()))?;
    if seq.frames.is_empty() {
        bail!(
            "no frames in {} after synchronization and sampling",
            input.display()
        );
    }
    info!("{} frames selected", seq.frames.len());
    Ok(Loaded { seq, cfg, source })
}

fn load_samples(l: &Loaded) -> Result<Vec<FrameSample>> {
    let results = l
        .cfg
        .execution
        .map_slice(&l.seq.frames, |p| l.seq.load_frame(p));
    Ok(results.into_iter().collect::<roadlabel::Result<_>>()?)
}

fn provider(l: &Loaded) -> Box<dyn FeatureProvider> {
    match l.cfg.camera.features {
        FeatureSource::File => Box::new(FileFeatures {
            dir: l.seq.features_dir(),
            patch_size: l.cfg.camera.patch_size,
            expected_dim: None,
        }),
        FeatureSource::Toy => Box::new(ToyExtractor {
            patch_size: l.cfg.camera.patch_size,
        }),
    }
}

/// Ground truth for every frame, or `None` when any frame lacks it.
fn ground_truth(l: &Loaded) -> Result<Option<Vec<Mask>>> {
    let mut out = Vec::new();
    for p in &l.seq.frames {
        match l.seq.ground_truth(&p.frame_id)? {
            Some(m) => out.push(m),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Fails when no frame produced labels; the manifest is written first.
fn check_skipped(frames: &[FrameSummary]) -> Result<()> {
    let skipped = frames.iter().filter(|f| !f.status.is_ok()).count();
    if skipped == frames.len() {
        bail!("all {skipped} frames were skipped; see manifest.json");
    }
    if skipped > 0 {
        warn!("{skipped} of {} frames skipped", frames.len());
    }
    Ok(())
}

fn fit(cli: &Cli, input: &Path) -> Result<()> {
    let l = open(cli, input)?;
    check_output(&cli.output, input)?;
    let out = &cli.output;
    ensure_dirs(out, &["trajectory"])?;
    if cli.dump_debug {
        ensure_dirs(out, &["debug"])?;
    }
    let results = l
        .cfg
        .execution
        .map_slice(&l.seq.frames, |p| -> Result<Value> {
            let sample = l.seq.load_frame(p)?;
            let geo = fit_frame(&sample, &l.cfg, l.cfg.execution);
            geo.trajectory
                .save_png(&out.join("trajectory").join(format!("{}.png", p.frame_id)))?;
            if cli.dump_debug {
                geo.fit.save_debug_csv(
                    &geo.scan,
                    &out.join("debug").join(format!("{}_rings.csv", p.frame_id)),
                )?;
            }
            let mut failures = BTreeMap::new();
            for r in &geo.fit.rings {
                if let Some(f) = r.failure {
                    *failures.entry(f.to_string()).or_insert(0usize) += 1;
                }
            }
            Ok(json!({
                "frame_id": p.frame_id,
                "status": "ok",
                "valid_rings": geo.fit.valid_count(),
                "trajectory_pixels": geo.trajectory.count(),
                "ring_failures": failures,
            }))
        });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    for s in &summaries {
        info!(
            "{}: {} valid rings",
            s["frame_id"].as_str().unwrap_or(""),
            s["valid_rings"]
        );
    }
    let m = manifest(
        cli,
        "fit",
        Some(input),
        &l.cfg,
        &l.source,
        json!(summaries),
        json!({}),
    );
    write_json(&out.join("manifest.json"), &m)
}

fn ensure_dirs(out: &Path, dirs: &[&str]) -> Result<()> {
    for d in dirs {
        std::fs::create_dir_all(out.join(d))
            .with_context(|| format!("creating {}", out.join(d).display()))?;
    }
    Ok(())
}

/// Writes the per-frame artifacts of `label` and `all`.
fn write_frame(out: &Path, o: &FrameOutput, dump_debug: bool) -> roadlabel::Result<()> {
    let dir = out.join("labels").join(&o.frame_id);
    std::fs::create_dir_all(&dir).map_err(|e| roadlabel::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    if let Some(c) = &o.camera {
        c.save_png(&dir, "camera")?;
    }
    if let Some(l) = o.lidar.get(&LidarVariant::HeightGradient) {
        l.save_png(&dir, "lidar")?;
    }
    if let Some(f) = &o.fused {
        f.save_png(&dir, "fused")?;
    }
    for (_, mask) in &o.masks {
        mask.save_png(&out.join("masks").join(format!("{}.png", o.frame_id)))?;
    }
    if dump_debug {
        let d = out.join("debug");
        o.geometry.fit.save_debug_csv(
            &o.geometry.scan,
            &d.join(format!("{}_rings.csv", o.frame_id)),
        )?;
        save_points_csv(&o.points, &d.join(format!("{}_points.csv", o.frame_id)))?;
        o.geometry
            .trajectory
            .save_png(&d.join(format!("{}_trajectory.png", o.frame_id)))?;
    }
    Ok(())
}

fn label(cli: &Cli, input: &Path, evaluate: bool) -> Result<()> {
    let l = open(cli, input)?;
    check_output(&cli.output, input)?;
    let out = &cli.output;
    ensure_dirs(out, &["labels", "masks"])?;
    if cli.dump_debug {
        ensure_dirs(out, &["debug"])?;
    }
    let samples = load_samples(&l)?;
    let gt = if evaluate {
        let gt = ground_truth(&l)?;
        if gt.is_none() {
            warn!("ground truth missing for some frames; skipping evaluation");
        }
        gt
    } else {
        None
    };
    let features = provider(&l);
    let config = full_config();
    let pipeline = Pipeline::new(l.cfg.clone(), features.as_ref());
    let dump = cli.dump_debug;
    let result = pipeline.run_with(
        &samples,
        std::slice::from_ref(&config),
        gt.as_deref(),
        &|o| write_frame(out, o, dump),
    )?;
    let mut extra = json!({ "mask_config": config.name });
    if let Some(report) = result.reports.first() {
        write_json(&out.join("metrics.json"), &serde_json::to_value(report)?)?;
        let table = format_table(&result.reports);
        write_text(&out.join("metrics.txt"), &table)?;
        print!("{table}");
        extra["micro"] = serde_json::to_value(report.micro)?;
    }
    let command = if evaluate { "all" } else { "label" };
    let m = manifest(
        cli,
        command,
        Some(input),
        &l.cfg,
        &l.source,
        serde_json::to_value(&result.frames)?,
        extra,
    );
    write_json(&out.join("manifest.json"), &m)?;
    check_skipped(&result.frames)
}

fn ablate(cli: &Cli, input: &Path) -> Result<()> {
    let l = open(cli, input)?;
    check_output(&cli.output, input)?;
    let Some(gt) = ground_truth(&l)? else {
        bail!(
            "ablation needs ground truth for every frame in {}",
            l.seq.root.join("gt").display()
        );
    };
    let samples = load_samples(&l)?;
    let features = provider(&l);
    let configs: Vec<AblationConfig> = ablation_configs();
    let out = &cli.output;
    let dump = cli.dump_debug;
    if dump {
        ensure_dirs(out, &["debug"])?;
    }
    let result = Pipeline::new(l.cfg.clone(), features.as_ref()).run_with(
        &samples,
        &configs,
        Some(&gt),
        &|o| {
            if dump {
                let d = out.join("debug");
                o.geometry.fit.save_debug_csv(
                    &o.geometry.scan,
                    &d.join(format!("{}_rings.csv", o.frame_id)),
                )?;
            }
            Ok(())
        },
    )?;
    let table = format_table(&result.reports);
    print!("{table}");
    write_text(&out.join("ablation.txt"), &table)?;
    write_json(
        &out.join("ablation.json"),
        &serde_json::to_value(&result.reports)?,
    )?;
    let m = manifest(
        cli,
        "ablate",
        Some(input),
        &l.cfg,
        &l.source,
        serde_json::to_value(&result.frames)?,
        json!({ "configs": configs.iter().map(|c| c.name.clone()).collect::<Vec<_>>() }),
    );
    write_json(&out.join("manifest.json"), &m)?;
    check_skipped(&result.frames)
}

fn fuse_labels(cli: &Cli, labels: &Path, images: Option<&Path>) -> Result<()> {
    let (cfg, source) = resolve_config(cli, None)?;
    cfg.validate()?;
    check_output(&cli.output, labels)?;
    let mut ids = Vec::new();
    for entry in
        std::fs::read_dir(labels).with_context(|| format!("reading {}", labels.display()))?
    {
        let path = entry
            .with_context(|| format!("reading {}", labels.display()))?
            .path();
        if path.is_dir() {
            ids.push(
                path.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no frame directories in {}", labels.display());
    }
    let out = &cli.output;
    ensure_dirs(out, &["fused", "masks"])?;
    let results = cfg.execution.map_slice(&ids, |id| -> Result<Value> {
        let dir = labels.join(id);
        let (camera, lidar) = match (dir.join("camera.png").exists(), dir.join("lidar.png").exists()) {
            (true, true) => (LabelImage::load_png(&dir, "camera")?, LabelImage::load_png(&dir, "lidar")?),
            (c, _) => {
                let missing = if c { "lidar.png" } else { "camera.png" };
                warn!("skipping frame {id}: no {missing}");
                return Ok(json!({ "frame_id": id, "status": "skipped", "reason": format!("no {missing} in {}", dir.display()) }));
            }
        };
        let fused = fuse(&camera, &lidar)?;
        fused.image.save_png(&out.join("fused"), id)?;
        let mask = match images {
            Some(d) => crf_refine(&fused.image, &load_rgb(&d.join(format!("{id}.png")))?, &cfg.crf, cfg.execution)?,
            None => binarize(&fused.image, cfg.binarize_threshold),
        };
        mask.save_png(&out.join("masks").join(format!("{id}.png")))?;
        Ok(json!({ "frame_id": id, "status": "ok", "provenance": ProvenanceCounts::of(&fused) }))
    });
    let frames = results.into_iter().collect::<Result<Vec<_>>>()?;
    let m = manifest(
        cli,
        "fuse",
        Some(labels),
        &cfg,
        &source,
        json!(frames),
        json!({ "crf": images.is_some() }),
    );
    write_json(&out.join("manifest.json"), &m)?;
    if frames.iter().all(|f| f["status"] != "ok") {
        bail!(
            "no frame in {} has both camera and lidar labels",
            labels.display()
        );
    }
    Ok(())
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn eval(cli: &Cli, pred: &Path, gt: &Path) -> Result<()> {
    let preds = mask_files(pred)?;
    let gts = mask_files(gt)?;
    let ids: Vec<&String> = preds.keys().filter(|k| gts.contains_key(*k)).collect();
    if ids.is_empty() {
        bail!(
            "no predicted mask in {} has a ground-truth mask in {}",
            pred.display(),
            gt.display()
        );
    }
    let missing = gts.len() - ids.len();
    if missing > 0 {
        warn!("{missing} ground-truth masks have no prediction");
    }
    let masks: Vec<(String, Mask, Mask)> = ids
        .iter()
        .map(|id| {
            Ok((
                (*id).clone(),
                Mask::load_png(&preds[*id])?,
                Mask::load_png(&gts[*id])?,
            ))
        })
        .collect::<Result<_>>()?;
    let name = pred
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pred".into());
    let report =
        MetricsReport::from_masks(name, masks.iter().map(|(id, p, g)| (id.as_str(), p, g)))?;
    std::fs::create_dir_all(&cli.output)
        .with_context(|| format!("creating {}", cli.output.display()))?;
    let table = format_table(std::slice::from_ref(&report));
    print!("{table}");
    write_text(&cli.output.join("metrics.txt"), &table)?;
    write_json(
        &cli.output.join("metrics.json"),
        &serde_json::to_value(&report)?,
    )?;
    Ok(())
}
