use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lim3d_core::backbone::{BlockKind, Topology};
use lim3d_core::image::GrayImage;
use lim3d_core::pc_io::{
    load_frame, save_frame, save_labels, FrameFormat, RangeProjection, SequenceLayout,
};
use lim3d_core::pseudo::{crb_select, entropy_partition, ClassCount, IGNORE_LABEL};
use lim3d_core::reflec::{augment, featurize, ReflecConfig};
use lim3d_core::sparse_conv::{cost, CostReport, LayerSpec, Rulebook};
use lim3d_core::strfd::{
    calibrate_beta, frame_redundancy, plan_from_redundancy, RedundancySource, SamplingPlan,
    SequenceRedundancy, StrfdConfig,
};
use lim3d_core::synth::{synth_sequence, SceneSpec, SYNTH_CLASSES};
use lim3d_core::teacher::{run_toy_pipeline, ToyConfig, ToyModel, ToyReport};
use lim3d_core::voxel::{voxelize, Reducer};

const TOOL: &str = "lim3d";

#[derive(Parser, Debug)]
#[command(name = TOOL, version, about = "LiDAR segmentation toolkit: frame sampling, reflectivity features, sparse cost accounting and pseudo-labels")]
struct Cli {
    /// Worker threads; LIM3D_THREADS takes precedence when set.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Choose frames to annotate from inter-frame redundancy.
    Sample(SampleArgs),
    /// Append reflectivity histogram channels to a frame.
    Featurize(FeaturizeArgs),
    /// Emit voxel pseudo-labels for a frame from a trained toy model.
    Pseudo(PseudoArgs),
    /// Parameter and multiply-add counts of a network.
    Cost(CostArgs),
    /// Train and evaluate the three-stage pipeline on synthetic scenes.
    TrainToy(TrainArgs),
    /// Write a synthetic labeled sequence.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Gray,
    Range,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("budget").required(true).args(["beta", "target_fraction"])))]
struct SampleArgs {
    /// A sequence directory, or a root holding several.
    #[arg(long)]
    seq_dir: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
    /// Calibrate beta so this share of all frames is kept.
    #[arg(long)]
    target_fraction: Option<f64>,
    #[arg(long, default_value_t = 20)]
    subset_size: usize,
    #[arg(long, value_enum, default_value_t = Source::Gray)]
    source: Source,
    /// Range mapped to white when rendering range images.
    #[arg(long, default_value_t = 80.0)]
    max_range: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Histogram settings as JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PseudoArgs {
    /// Model written by `train-toy --save-model`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frame: PathBuf,
    /// Highest-entropy share of voxels marked unreliable, in percent.
    #[arg(long, default_value_t = 20.0)]
    unreliable_percent: f64,
    /// Share of each class and range band kept reliable; 1 keeps the entropy split as is.
    #[arg(long, default_value_t = 1.0)]
    crb_keep: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    MiniBackbone,
    MiniBackboneStandard,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("net").required(true).args(["topology", "preset"])))]
struct CostArgs {
    /// Topology JSON, or a JSON list of layers.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Input channels of the preset.
    #[arg(long, default_value_t = 34)]
    input_channels: usize,
    #[arg(long, default_value_t = SYNTH_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = 10_000)]
    active_sites: u64,
    /// Active (site, tap) pairs; every tap counts when omitted.
    #[arg(long)]
    neighbor_pairs: Option<u64>,
    /// Take active sites and pairs from this frame on the toy grid.
    #[arg(long, conflicts_with_all = ["active_sites", "neighbor_pairs"])]
    frame: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Base configuration as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Comma-separated subset of 1,2,3.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<u8>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Disable the negative memory bank.
    #[arg(long)]
    no_bank: bool,
    /// Weight the contrastive term by lambda_c squared.
    #[arg(long)]
    literal_gate: bool,
    /// Use standard convolutions instead of separable blocks.
    #[arg(long)]
    standard: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scene {
    Mixed,
    Static,
    Moving,
    TwoRegime,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Root directory; the sequence goes to `<out>/<sequence>`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "00")]
    sequence: String,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, value_enum, default_value_t = Scene::Mixed)]
    scene: Scene,
    /// Meters per frame for moving segments.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Leading stationary frames of the two-regime scene.
    #[arg(long)]
    static_frames: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
}

fn provenance<T: Serialize>(config: &T, seed: u64) -> Result<Provenance> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Provenance {
        tool: TOOL,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hex::encode(Sha256::digest(&bytes)),
        seed,
    })
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    lim3d_core::Error::Validation(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(lim3d_core::Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(lim3d_core::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(lim3d_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

/// `<path>.meta.json`, next to an artifact whose own format has no room for metadata.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn sequence_layouts(dir: &Path) -> Result<Vec<SequenceLayout>> {
    if !dir.is_dir() {
        return Err(lim3d_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("sequence directory {} does not exist", dir.display()),
        ))
        .into());
    }
    if dir.join("image").is_dir() || dir.join("velodyne").is_dir() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "seq".into());
        let root = dir.parent().map(Path::to_path_buf).unwrap_or_default();
        return Ok(vec![SequenceLayout::new(root, name)]);
    }
    let names = lim3d_core::pc_io::list_sequences(dir)
        .with_context(|| format!("listing {}", dir.display()))?;
    if names.is_empty() {
        return Err(invalid(format!("no sequences found in {}", dir.display())));
    }
    Ok(names
        .into_iter()
        .map(|n| SequenceLayout::new(dir, n))
        .collect())
}

fn sequence_images(
    layout: &SequenceLayout,
    source: Source,
    max_range: f64,
) -> Result<Vec<GrayImage>> {
    match source {
        Source::Gray => {
            let files = layout
                .image_files()
                .with_context(|| format!("listing images in {}", layout.image_dir().display()))?;
            files
                .iter()
                .map(|p| GrayImage::load_pgm(p).with_context(|| format!("reading {}", p.display())))
                .collect()
        }
        Source::Range => {
            let files = layout.frame_files().with_context(|| {
                format!("listing frames in {}", layout.velodyne_dir().display())
            })?;
            let proj = RangeProjection::default();
            files
                .iter()
                .map(|p| {
                    let pc = load_frame(p, FrameFormat::KittiBin)
                        .with_context(|| format!("reading {}", p.display()))?;
                    Ok(proj.project(&pc)?.to_gray(max_range))
                })
                .collect()
        }
    }
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    provenance: Provenance,
    beta: f64,
    subset_size: usize,
    source: &'a str,
    frames: usize,
    selected: usize,
}

fn cmd_sample(a: &SampleArgs, seed: u64) -> Result<()> {
    if !(a.max_range > 0.0) {
        return Err(invalid("--max-range must be > 0"));
    }
    let layouts = sequence_layouts(&a.seq_dir)?;
    let mut seqs = Vec::with_capacity(layouts.len());
    for l in &layouts {
        let images = sequence_images(l, a.source, a.max_range)?;
        if images.is_empty() {
            return Err(invalid(format!(
                "sequence {} has no frames",
                l.dir().display()
            )));
        }
        seqs.push(SequenceRedundancy {
            id: l.sequence.clone(),
            redundancy: frame_redundancy(&images)?,
        });
    }
    let source = match a.source {
        Source::Gray => RedundancySource::GrayscaleImage,
        Source::Range => RedundancySource::RangeImage,
    };
    let (beta, plan): (f64, SamplingPlan) = match (a.beta, a.target_fraction) {
        (Some(beta), _) => {
            let cfg = StrfdConfig {
                subset_size: a.subset_size,
                beta,
                redundancy_source: source,
            };
            (beta, plan_from_redundancy(&seqs, &cfg)?)
        }
        (None, Some(f)) => {
            StrfdConfig {
                subset_size: a.subset_size,
                beta: 0.0,
                redundancy_source: source,
            }
            .validate()?;
            calibrate_beta(&seqs, a.subset_size, f)?
        }
        (None, None) => unreachable!("clap requires one of --beta and --target-fraction"),
    };
    let frames: usize = seqs.iter().map(|s| s.redundancy.len()).sum();
    write_json(&a.out, &plan)?;
    let cfg = serde_json::json!({
        "beta": beta, "target_fraction": a.target_fraction, "subset_size": a.subset_size,
        "source": format!("{:?}", a.source).to_lowercase(), "max_range": a.max_range,
    });
    write_json(
        &sidecar(&a.out),
        &SampleMeta {
            provenance: provenance(&cfg, seed)?,
            beta,
            subset_size: a.subset_size,
            source: if matches!(a.source, Source::Gray) {
                "gray"
            } else {
                "range"
            },
            frames,
            selected: plan.total(),
        },
    )?;
    log::info!("kept {} of {frames} frames at beta {beta:.4}", plan.total());
    println!(
        "{} of {frames} frames selected (beta {beta:.4})",
        plan.total()
    );
    Ok(())
}

#[derive(Serialize)]
struct FeatureMeta {
    provenance: Provenance,
    input: String,
    points: usize,
    /// Channels in the feature file.
    dim: usize,
    /// Per-point channels once appended to x, y, z and intensity.
    augmented_dim: usize,
    config: ReflecConfig,
}

fn cmd_featurize(a: &FeaturizeArgs, seed: u64) -> Result<()> {
    let cfg: ReflecConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ReflecConfig::default(),
    };
    cfg.validate()?;
    let pc = load_frame(&a.input, FrameFormat::KittiBin)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let feats = featurize(&pc, &cfg)?;
    let augmented = augment(&pc, &feats)?;
    fs::write(&a.out, feats.to_le_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    write_json(
        &sidecar(&a.out),
        &FeatureMeta {
            provenance: provenance(&cfg, seed)?,
            input: a.input.display().to_string(),
            points: pc.len(),
            dim: feats.dim(),
            augmented_dim: augmented.feature_dim(),
            config: cfg,
        },
    )?;
    println!("{} points, {} channels appended", pc.len(), feats.dim());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(default, skip_deserializing)]
    provenance: Option<serde_json::Value>,
    model: ToyModel,
}

#[derive(Serialize)]
struct PseudoMeta {
    provenance: Provenance,
    frame: String,
    points: usize,
    voxels: usize,
    dropped_points: usize,
    reliable_voxels: usize,
    unreliable_voxels: usize,
    ignored_points: usize,
    /// Reliable voxels per class and unreliable voxels per predicted class.
    per_class: Vec<ClassCount>,
}

fn cmd_pseudo(a: &PseudoArgs, seed: u64) -> Result<()> {
    if !(0.0..=100.0).contains(&a.unreliable_percent) {
        return Err(invalid(format!(
            "--unreliable-percent must lie in [0, 100], got {}",
            a.unreliable_percent
        )));
    }
    let file: ModelFile = read_json(&a.model)?;
    let pc = load_frame(&a.frame, FrameFormat::KittiBin)
        .with_context(|| format!("reading {}", a.frame.display()))?;
    let (preds, vox) = file.model.predict_frame(&pc)?;
    let pls = crb_select(
        &entropy_partition(&preds, 100.0 - a.unreliable_percent)?,
        &preds,
        a.crb_keep,
    )?;
    let voxel_labels = pls.hard_labels();
    let point_labels: Vec<u32> = vox
        .point_sites
        .iter()
        .map(|s| s.map_or(IGNORE_LABEL, |i| voxel_labels[i]))
        .collect();
    save_labels(&a.out, &point_labels).with_context(|| format!("writing {}", a.out.display()))?;
    let cfg = serde_json::json!({
        "model": a.model.display().to_string(), "unreliable_percent": a.unreliable_percent, "crb_keep": a.crb_keep,
    });
    let meta = PseudoMeta {
        provenance: provenance(&cfg, seed)?,
        frame: a.frame.display().to_string(),
        points: pc.len(),
        voxels: preds.len(),
        dropped_points: vox.dropped,
        reliable_voxels: pls.reliable.len(),
        unreliable_voxels: pls.unreliable.len(),
        ignored_points: point_labels.iter().filter(|&&l| l == IGNORE_LABEL).count(),
        per_class: pls.class_counts(&preds),
    };
    write_json(&sidecar(&a.out), &meta)?;
    println!(
        "{} voxels: {} reliable, {} unreliable",
        meta.voxels, meta.reliable_voxels, meta.unreliable_voxels
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NetworkFile {
    Topology(Topology),
    Layers(Vec<LayerSpec>),
    Wrapped { layers: Vec<LayerSpec> },
}

#[derive(Serialize)]
struct LayerCost {
    layer: LayerSpec,
    cost: CostReport,
    /// Same layer with a standard spatial kernel, for layers that have a separable form.
    standard_equivalent: Option<CostReport>,
    param_ratio: Option<f64>,
    mult_add_ratio: Option<f64>,
}

#[derive(Serialize)]
struct CostOutput {
    provenance: Provenance,
    active_sites: u64,
    neighbor_pairs: Option<u64>,
    layers: Vec<LayerCost>,
    total: CostReport,
    standard_total: CostReport,
    param_ratio: Option<f64>,
    mult_add_ratio: Option<f64>,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

fn cmd_cost(a: &CostArgs, seed: u64) -> Result<()> {
    let layers: Vec<LayerSpec> = match (&a.topology, a.preset) {
        (Some(p), _) => match read_json::<NetworkFile>(p)? {
            NetworkFile::Topology(t) => {
                t.validate()?;
                t.layers()
            }
            NetworkFile::Layers(l) | NetworkFile::Wrapped { layers: l } => l,
        },
        (None, Some(preset)) => {
            let block = match preset {
                Preset::MiniBackbone => BlockKind::Sdsc,
                Preset::MiniBackboneStandard => BlockKind::Standard,
            };
            let t = Topology::mini(a.input_channels, a.classes, block);
            t.validate()?;
            t.layers()
        }
        (None, None) => unreachable!("clap requires --topology or --preset"),
    };
    let (sites, pairs) = match &a.frame {
        Some(p) => {
            let pc = load_frame(p, FrameFormat::KittiBin)
                .with_context(|| format!("reading {}", p.display()))?;
            let v = voxelize(&pc, &ToyConfig::default().grid, Reducer::Mean)?;
            let k = layers.iter().map(LayerSpec::kernel_size).max().unwrap_or(1);
            let rb = Rulebook::build(&v.tensor, k)?;
            (v.tensor.len() as u64, Some(rb.pair_count() as u64))
        }
        None => (a.active_sites, a.neighbor_pairs),
    };
    let pairs_for = |l: &LayerSpec| if l.kernel_size() > 1 { pairs } else { None };
    let mut rows = Vec::with_capacity(layers.len());
    let mut total = CostReport::default();
    let mut standard_total = CostReport::default();
    for l in &layers {
        let c = cost(l, sites, pairs_for(l));
        let std = l
            .standard_equivalent()
            .map(|s| cost(&s, sites, pairs_for(&s)));
        total = total + c;
        standard_total = standard_total + std.unwrap_or(c);
        rows.push(LayerCost {
            layer: *l,
            cost: c,
            standard_equivalent: std,
            param_ratio: std.and_then(|s| ratio(s.trainable_params, c.trainable_params)),
            mult_add_ratio: std.and_then(|s| ratio(s.mult_adds, c.mult_adds)),
        });
    }
    let cfg =
        serde_json::json!({ "layers": layers, "active_sites": sites, "neighbor_pairs": pairs });
    let out = CostOutput {
        provenance: provenance(&cfg, seed)?,
        active_sites: sites,
        neighbor_pairs: pairs,
        layers: rows,
        total,
        standard_total,
        param_ratio: ratio(standard_total.trainable_params, total.trainable_params),
        mult_add_ratio: ratio(standard_total.mult_adds, total.mult_adds),
    };
    match &a.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    provenance: Provenance,
    report: &'a ToyReport,
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let mut cfg: ToyConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    };
    cfg.seed = seed;
    if let Some(f) = a.labeled_fraction {
        cfg.labeled_fraction = f;
    }
    if let Some(s) = &a.stages {
        cfg.stages = s.clone();
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    if a.no_bank {
        cfg.use_bank = false;
    }
    if a.literal_gate {
        cfg.literal_gate = true;
    }
    if a.standard {
        cfg.block = BlockKind::Standard;
    }
    let (report, model) = run_toy_pipeline(&cfg)?;
    let prov = provenance(&cfg, seed)?;
    if let Some(p) = &a.report {
        write_json(
            p,
            &ReportFile {
                provenance: provenance(&cfg, seed)?,
                report: &report,
            },
        )?;
    }
    if let Some(p) = &a.save_model {
        write_json(
            p,
            &serde_json::json!({ "provenance": prov, "model": model }),
        )?;
    }
    println!(
        "mIoU {:.4} (teacher {:.4}, untrained {:.4}) with {} of {} frames labeled",
        report.miou,
        report.teacher_miou,
        report.baseline_miou,
        report.labeled_frames.len(),
        cfg.train_frames
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthMeta {
    provenance: Provenance,
    frames: usize,
    scene: SceneSpec,
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    if a.frames == 0 {
        return Err(invalid("--frames must be >= 1"));
    }
    if !a.speed.is_finite() || a.speed < 0.0 {
        return Err(invalid("--speed must be a finite value >= 0"));
    }
    let scene = match a.scene {
        Scene::Mixed => SceneSpec::mixed(),
        Scene::Static => SceneSpec::static_scene(),
        Scene::Moving => SceneSpec::moving(a.speed),
        Scene::TwoRegime => {
            let s = a.static_frames.unwrap_or(a.frames / 2).min(a.frames);
            SceneSpec::two_regime(s, a.frames - s, a.speed)
        }
    };
    let layout = SequenceLayout::new(&a.out, &a.sequence);
    for d in [
        layout.velodyne_dir(),
        layout.labels_dir(),
        layout.image_dir(),
    ] {
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    }
    let frames = synth_sequence(&scene, a.frames, seed);
    for (i, (pc, img)) in frames.iter().enumerate() {
        save_frame(&layout.frame_path(i), pc)?;
        save_labels(&layout.label_path(i), pc.labels().unwrap_or(&[]))?;
        img.to_gray(scene.sensor_range)
            .save_pgm(&layout.image_path(i))?;
    }
    write_json(
        &layout.dir().join("scene.json"),
        &SynthMeta {
            provenance: provenance(&(&scene, a.frames), seed)?,
            frames: a.frames,
            scene,
        },
    )?;
    println!("wrote {} frames to {}", a.frames, layout.dir().display());
    Ok(())
}

fn init(cli: &Cli) -> Result<()> {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            2 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let threads = match std::env::var("LIM3D_THREADS") {
        Ok(v) if !v.is_empty() => Some(v.parse::<usize>().map_err(|_| {
            invalid(format!(
                "LIM3D_THREADS must be a positive integer, got {v:?}"
            ))
        })?),
        _ => cli.threads,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(invalid("thread count must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init(cli)?;
    match &cli.command {
        Command::Sample(a) => cmd_sample(a, cli.seed),
        Command::Featurize(a) => cmd_featurize(a, cli.seed),
        Command::Pseudo(a) => cmd_pseudo(a, cli.seed),
        Command::Cost(a) => cmd_cost(a, cli.seed),
        Command::TrainToy(a) => cmd_train(a, cli.seed),
        Command::Synth(a) => cmd_synth(a, cli.seed),
    }
}

/// 2 for bad input, 3 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<lim3d_core::Error>())
        .is_some_and(lim3d_core::Error::is_validation);
    if validation {
        2
    } else {
        3
    }
}

/// The error chain on one line, without causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
