//! `keynet`: train, extract, match, evaluate and inspect checkpoints.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keynet::checkpoint::Checkpoint;
use keynet::eval::{self, EvalConfig, EvalReport, FileFeatures, ModelFeatures};
use keynet::geometry::{project_points, read_homographies, Homography};
use keynet::io::{self, MatchRecord};
use keynet::keypoints::ExtractionConfig;
use keynet::matching::{match_descriptors, match_geometric};
use keynet::train::{train_loop, Corpus, RunOptions, TrainConfig};
use keynet::Error;

#[derive(Parser, Debug)]
#[command(name = "keynet", version, about = "Self-supervised keypoint detector and descriptor", after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a directory of images.
    #[command(after_long_help = config_help())]
    Train(TrainArgs),
    /// Write a keypoint file (points, scores, descriptors) per image.
    Extract(ExtractArgs),
    /// Match two keypoint files by descriptors.
    Match(MatchArgs),
    /// Evaluate a pair manifest with a checkpoint or precomputed keypoint files.
    Eval(EvalArgs),
    /// Print the header and tensor inventory of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images (png/jpeg, searched recursively).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Glob pattern of input images, e.g. 'data/*.png'.
    #[arg(long)]
    images: String,
    #[arg(long)]
    out: PathBuf,
    /// Heatmap detection threshold.
    #[arg(long, default_value_t = 0.021)]
    threshold: f64,
    #[arg(long, default_value_t = 4.0)]
    nms_radius: f64,
    /// Disable radius suppression.
    #[arg(long)]
    no_nms: bool,
    /// Keep the best K detections; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    top_k: usize,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Keypoint file of the first image.
    #[arg(long)]
    a: PathBuf,
    /// Keypoint file of the second image.
    #[arg(long)]
    b: PathBuf,
    /// Homography file mapping the first image into the second (`path#k`
    /// selects the k-th matrix); identity when omitted.
    #[arg(long)]
    homography: Option<String>,
    /// Accepted pairs must be strictly closer than this after projection.
    #[arg(long, default_value_t = 4.0)]
    theta_dist: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Pair manifest: `image_a image_b <homography|points|dense|identity> <gt_path|-> [split]`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<image stem>.kpt` files.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Correct-match threshold in pixels; repeat for several.
    #[arg(long = "threshold-px")]
    threshold_px: Vec<f64>,
    /// TOML file with an `[eval]` table or bare eval keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    coverage_radius: Option<f64>,
    #[arg(long)]
    theta_desc: Option<f64>,
    #[arg(long)]
    theta_keypoint: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Also write match visualizations for every pair.
    #[arg(long)]
    plots: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (TOML, dotted keys are tables) and defaults:\n");
    for (k, v) in TrainConfig::default_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::UnknownFilter(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Extract(a) => run_extract(a),
        Command::Match(a) => run_match(a),
        Command::Eval(a) => run_eval(a),
        Command::InspectCheckpoint(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run_train(a: TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if !a.corpus.is_dir() {
        return Err(Failure::Usage(format!("corpus directory {} does not exist", a.corpus.display())));
    }
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let corpus = Corpus::from_dir(&a.corpus, cfg.crop_size)?;
    let opts = RunOptions { out_dir: a.out.clone(), resume: a.resume.clone(), epoch_checkpoints: true };
    let summary = train_loop(&corpus, &cfg, &opts)?;
    println!(
        "trained {} steps ({} epochs of {} steps); outputs in {}",
        summary.steps,
        summary.epochs,
        summary.steps_per_epoch,
        a.out.display()
    );
    if let Some(b) = summary.best_validation {
        println!("best validation harmonic mean {b:.4}");
    }
    Ok(())
}

fn run_extract(a: ExtractArgs) -> CliResult {
    require_file(&a.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ExtractionConfig {
        inference_threshold: a.threshold,
        nms_radius: a.nms_radius,
        nms: !a.no_nms,
        top_k: a.top_k,
        ..Default::default()
    };
    cfg.validate()?;
    let mut paths: Vec<PathBuf> = glob::glob(&a.images)
        .map_err(|e| Failure::Usage(format!("bad image pattern: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Usage(format!("no images match `{}`", a.images)));
    }
    std::fs::create_dir_all(&a.out)?;
    for p in &paths {
        let img = io::load_image(p)?;
        if img.width() % 8 != 0 || img.height() % 8 != 0 {
            log::warn!(
                "{}: {}x{} is not divisible by 8; using the centred crop",
                p.display(),
                img.width(),
                img.height()
            );
        }
        let f = eval::extract_features(&ck.network, &img, &cfg)?;
        let id = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        io::write_keypoints(&FileFeatures::path_for(&a.out, p), &id, &f.points, Some(&f.descriptors))?;
        println!("{}: {} keypoints", p.display(), f.points.len());
    }
    Ok(())
}

fn parse_homography_arg(arg: &str) -> Result<Homography, Failure> {
    let (path, k) = match arg.rsplit_once('#') {
        Some((p, k)) => (p, k.parse::<usize>().map_err(|_| Failure::Usage(format!("bad matrix index in `{arg}`")))?),
        None => (arg, 0),
    };
    require_file(Path::new(path), "homography file")?;
    let hs = read_homographies(Path::new(path))?;
    hs.get(k).copied().ok_or_else(|| Failure::Usage(format!("{path} holds {} matrices, #{k} requested", hs.len())))
}

fn run_match(a: MatchArgs) -> CliResult {
    require_file(&a.a, "keypoint file")?;
    require_file(&a.b, "keypoint file")?;
    let fa = io::read_keypoints(&a.a)?;
    let fb = io::read_keypoints(&a.b)?;
    let h = match &a.homography {
        Some(s) => parse_homography_arg(s)?,
        None => Homography::identity(),
    };
    let (Some(da), Some(db)) = (&fa.descriptors, &fb.descriptors) else {
        return Err(Failure::Usage("both keypoint files need descriptors".into()));
    };
    let mut records = Vec::new();
    if !fa.points.is_empty() && !fb.points.is_empty() {
        let projected = project_points(&fa.points, &h)?;
        let gm = match_geometric(&projected, &fb.points)?;
        let dm = match_descriptors(da, db)?;
        for i in 0..fa.points.len() {
            let j = dm.idx[i];
            let dist = projected.points[i].dist(fb.points.points[j]);
            records.push(MatchRecord {
                i,
                j,
                similarity: dm.similarity[i],
                dist_geom: dist,
                accepted: gm.idx[i] == j && dist < a.theta_dist,
            });
        }
    }
    std::fs::write(&a.out, io::format_matches(&records))?;
    let accepted = records.iter().filter(|r| r.accepted).count();
    println!("{} matches, {accepted} accepted", records.len());
    Ok(())
}

fn eval_config(a: &EvalArgs) -> Result<EvalConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            let text = std::fs::read_to_string(p)?;
            let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Failure::Usage(e.to_string()))?;
            let table = match value.get("eval") {
                Some(toml::Value::Table(t)) => t.clone(),
                _ => value,
            };
            table.try_into().map_err(|e: toml::de::Error| Failure::Usage(format!("eval config: {e}")))?
        }
        None => EvalConfig::default(),
    };
    if !a.threshold_px.is_empty() {
        cfg.thresholds_px = a.threshold_px.clone();
    }
    if let Some(v) = a.coverage_radius {
        cfg.coverage_radius_px = v;
    }
    if let Some(v) = a.theta_desc {
        cfg.theta_desc = v;
    }
    if let Some(v) = a.theta_keypoint {
        cfg.theta_keypoint = v;
    }
    if let Some(v) = a.top_k {
        cfg.top_k = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(out: &Path, stem: &str, report: &EvalReport) -> CliResult {
    std::fs::write(out.join(format!("{stem}.json")), report.to_json()?)?;
    std::fs::write(out.join(format!("{stem}.txt")), report.to_table())?;
    Ok(())
}

fn threshold_tag(t: f64) -> String {
    format!("{t}").replace('.', "_")
}

fn run_eval(a: EvalArgs) -> CliResult {
    require_file(&a.manifest, "manifest")?;
    let cfg = eval_config(&a)?;
    let entries = eval::read_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(Failure::Usage("manifest lists no pairs".into()));
    }
    let checkpoint = match &a.checkpoint {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let report = match (&checkpoint, &a.features) {
        (Some(ck), _) => {
            let mut src = ModelFeatures::new(&ck.network, cfg.extraction());
            eval::evaluate_dataset(&entries, &mut src, &cfg)?
        }
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(Failure::Usage(format!("features directory {} does not exist", dir.display())));
            }
            eval::evaluate_dataset(&entries, &mut FileFeatures { dir: dir.clone() }, &cfg)?
        }
        (None, None) => return Err(Failure::Usage("either --checkpoint or --features is required".into())),
    };
    std::fs::create_dir_all(&a.out)?;
    write_report(&a.out, "report", &report)?;
    if cfg.thresholds_px.len() > 1 {
        for (t, &threshold) in cfg.thresholds_px.iter().enumerate() {
            let single = EvalConfig { thresholds_px: vec![threshold], ..cfg.clone() };
            let pairs = report
                .pairs
                .iter()
                .map(|p| eval::PairEntry { metrics: vec![p.metrics[t].clone()], ..p.clone() })
                .collect();
            let r = EvalReport::from_entries(single, pairs, report.skipped.clone());
            write_report(&a.out, &format!("report_{}px", threshold_tag(threshold)), &r)?;
        }
    }
    if a.plots {
        if let Some(ck) = &checkpoint {
            write_plots(&a.out.join("plots"), &entries, ck, &cfg)?;
        } else {
            log::warn!("--plots needs --checkpoint; skipping plots");
        }
    }
    print!("{}", report.to_table());
    if report.pairs.is_empty() {
        return Err(Failure::Runtime("every pair was skipped".into()));
    }
    Ok(())
}

fn write_plots(dir: &Path, entries: &[eval::ManifestEntry], ck: &Checkpoint, cfg: &EvalConfig) -> CliResult {
    std::fs::create_dir_all(dir)?;
    let eps = cfg.thresholds_px[0];
    for (n, e) in entries.iter().enumerate() {
        let drawn = (|| -> keynet::Result<()> {
            let a = io::load_image(&e.image_a)?;
            let b = io::load_image(&e.image_b)?;
            let fa = eval::extract_features(&ck.network, &a, &cfg.extraction())?.truncated(cfg.top_k);
            let fb = eval::extract_features(&ck.network, &b, &cfg.extraction())?.truncated(cfg.top_k);
            let gt = eval::load_ground_truth(&e.gt, (a.width(), a.height()), (b.width(), b.height()))?;
            let geo = eval::PairGeometry::new((a.width(), a.height()), (b.width(), b.height()), gt);
            let ms = eval::match_and_precision(
                &fa.points,
                &fa.descriptors,
                &fb.points,
                &fb.descriptors,
                &geo,
                eps,
                cfg.theta_desc,
            )?;
            eval::render_matches(&a, &b, &fa.points, &fb.points, &ms.a_to_b).save(dir.join(format!("pair_{n:04}.png")))?;
            Ok(())
        })();
        if let Err(err) = drawn {
            log::warn!("no plot for manifest line {}: {err}", e.line);
        }
    }
    Ok(())
}

fn run_inspect(a: InspectArgs) -> CliResult {
    require_file(&a.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let tensors: Vec<serde_json::Value> = ck
        .network
        .named_tensors()
        .iter()
        .map(|(n, t)| serde_json::json!({ "name": n, "len": t.len() }))
        .collect();
    let info = serde_json::json!({
        "format_version": keynet::checkpoint::FORMAT_VERSION,
        "channel_order": keynet::model::CHANNEL_ORDER,
        "network": ck.network.config,
        "parameters": ck.network.param_count(),
        "step": ck.step,
        "epoch": ck.epoch,
        "optimizer_step": ck.optimizer.as_ref().map(|o| o.step),
        "metadata": ck.metadata,
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&info).map_err(|e| Failure::Runtime(e.to_string()))?);
    Ok(())
}
