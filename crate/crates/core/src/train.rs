//! Self-supervised training: corpus handling, batch synthesis, the per-pair
//! loss with gradients, the optimizer step and the epoch loop.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, NoisePipelineConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate_pair, extract_features, EvalConfig, GroundTruth, MetricSummary, PairGeometry};
use crate::geometry::{sample_homography, warp_image, GaussianBlur, Homography, HomographyConfig, PointSet};
use crate::grid::{Heatmap, Image, Tensor3};
use crate::keypoints::{extract_windowed_max, ExtractionConfig};
use crate::losses::{
    descriptor_loss_with_grad, heatmap_loss_with_grad, keypoint_loss_with_grad, random_pairings, DescriptorLossInputs,
    LossConfig, LossReport, LossWeights,
};
use crate::matching::{estimate_targets, TargetEstimate, TargetParams};
use crate::model::{
    heatmap_backward, heatmap_from_logits, interpolate_descriptors, interpolate_descriptors_backward, Descriptors,
    ForwardOutput, Network, NetworkConfig, NetworkGrads, CELL,
};
use crate::optim::{adamw_step, AdamState, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Side of the square training crops; a multiple of 8.
    pub crop_size: usize,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    /// Multiplicative learning-rate factor per epoch after the constant phase.
    pub decay_factor_per_epoch: f64,
    /// Optimizer steps per epoch; 0 derives it from the training-set size.
    pub steps_per_epoch: usize,
    /// Stop after this many steps; 0 runs the full schedule.
    pub max_steps: usize,
    /// Accepted target pairs must be strictly closer than this.
    pub theta_dist_px: f64,
    pub drop_outside_targets: bool,
    /// Share of the corpus held out as self-warped validation pairs.
    pub validation_fraction: f64,
    pub optimizer: AdamWConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub homography: HomographyConfig,
    pub noise: NoisePipelineConfig,
    pub extraction: ExtractionConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 5e-4,
            batch_size: 16,
            crop_size: 256,
            epochs_constant: 8,
            epochs_decay: 10,
            decay_factor_per_epoch: 0.75,
            steps_per_epoch: 0,
            max_steps: 0,
            theta_dist_px: 4.0,
            drop_outside_targets: true,
            validation_fraction: 0.02,
            optimizer: AdamWConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            homography: HomographyConfig::default(),
            noise: NoisePipelineConfig::default(),
            extraction: ExtractionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_error("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be at least 1"));
        }
        if self.crop_size == 0 || self.crop_size % CELL != 0 {
            return Err(config_error("crop_size", format!("must be a positive multiple of {CELL}, got {}", self.crop_size)));
        }
        if self.epochs_constant + self.epochs_decay == 0 {
            return Err(config_error("epochs_constant", "the schedule has no epochs"));
        }
        if !(self.decay_factor_per_epoch > 0.0 && self.decay_factor_per_epoch <= 1.0) {
            return Err(config_error(
                "decay_factor_per_epoch",
                format!("must be in (0, 1], got {}", self.decay_factor_per_epoch),
            ));
        }
        if !(self.theta_dist_px.is_finite() && self.theta_dist_px > 0.0) {
            return Err(config_error("theta_dist_px", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(config_error("validation_fraction", "must be in [0, 1)"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(config_error("optimizer.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(config_error("optimizer.beta2", "must be in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(config_error("optimizer.eps", "must be positive"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(config_error("optimizer.weight_decay", "must be nonnegative"));
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.homography.validate()?;
        self.noise.validate()?;
        self.extraction.validate()?;
        self.eval.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            config_error(&key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every configuration key as `(dotted key, default value)`.
    pub fn default_keys() -> Vec<(String, String)> {
        let value = toml::Value::try_from(TrainConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        flatten_keys("", &value, &mut out);
        out
    }

    /// Learning rate for 1-based `epoch`: constant, then multiplied by the decay
    /// factor once per epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decayed = epoch.saturating_sub(self.epochs_constant);
        self.learning_rate * self.decay_factor_per_epoch.powi(decayed as i32)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }
}

fn flatten_keys(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_keys(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// splitmix64 finalizer used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_BATCH: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_INIT: u64 = 5;

#[derive(Clone, Debug)]
enum CorpusItem {
    File(PathBuf),
    Memory(Image),
}

/// Training images, either files found under a directory or in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    items: Vec<CorpusItem>,
    names: Vec<String>,
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

impl Corpus {
    /// All png/jpeg files under `root` (recursively, sorted by path) whose
    /// sides are at least `min_side`. Others are skipped with a warning.
    pub fn from_dir(root: &Path, min_side: usize) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Corpus(format!("{} is not a directory", root.display())));
        }
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if is_image_file(&p) {
                    files.push(p);
                }
            }
        }
        files.sort();
        let mut items = Vec::new();
        let mut names = Vec::new();
        for f in files {
            match image::image_dimensions(&f) {
                Ok((w, h)) if (w as usize) >= min_side && (h as usize) >= min_side => {
                    names.push(f.strip_prefix(root).unwrap_or(&f).display().to_string());
                    items.push(CorpusItem::File(f));
                }
                Ok((w, h)) => log::warn!("skipping {}: {w}x{h} is smaller than the {min_side}px crop", f.display()),
                Err(e) => log::warn!("skipping unreadable {}: {e}", f.display()),
            }
        }
        if items.is_empty() {
            return Err(Error::Corpus(format!("no usable images under {}", root.display())));
        }
        Ok(Self { items, names })
    }

    pub fn from_images(images: Vec<Image>, min_side: usize) -> Result<Self> {
        let mut items = Vec::new();
        let mut names = Vec::new();
        for (i, img) in images.into_iter().enumerate() {
            if img.width() >= min_side && img.height() >= min_side {
                items.push(CorpusItem::Memory(img));
                names.push(format!("image_{i}"));
            } else {
                log::warn!("skipping in-memory image {i}: smaller than the {min_side}px crop");
            }
        }
        if items.is_empty() {
            return Err(Error::Corpus("no usable images".into()));
        }
        Ok(Self { items, names })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn load(&self, i: usize) -> Result<Image> {
        match &self.items[i] {
            CorpusItem::File(p) => crate::io::load_image(p),
            CorpusItem::Memory(img) => Ok(img.clone()),
        }
    }

    /// `(training, validation)` indices. A positive fraction holds out at
    /// least one image whenever two or more are available.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut n_val = (fraction * n as f64).round() as usize;
        if fraction > 0.0 && n >= 2 {
            n_val = n_val.max(1);
        }
        n_val = n_val.min(n.saturating_sub(1));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SPLIT, 0)));
        let mut val = order.split_off(n - n_val);
        order.sort_unstable();
        val.sort_unstable();
        (order, val)
    }
}

/// One training batch; every pair shares `homography`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub seed: u64,
    pub homography: Homography,
    /// Corpus indices of the crops.
    pub sources: Vec<usize>,
    pub images: Vec<Image>,
    pub warped: Vec<Image>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Image order of pass `pass` over the training set.
fn pass_order(train: &[usize], seed: u64, pass: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_ORDER, pass)));
    order
}

/// Builds the batch of `step` (0-based). The result depends only on the
/// seed, step, configuration and corpus.
pub fn make_batch(corpus: &Corpus, train: &[usize], cfg: &TrainConfig, step: u64) -> Result<Batch> {
    if train.is_empty() {
        return Err(Error::Corpus("no training images".into()));
    }
    let seed = mix_seed(cfg.seed, STREAM_BATCH, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.crop_size;
    let homography = sample_homography(&cfg.homography, c, c, &mut rng)?;
    let pre_warp = if cfg.homography.warp_both {
        let scaled = cfg.homography.scaled(cfg.homography.warp_both_scale);
        Some(sample_homography(&scaled, c, c, &mut rng)?)
    } else {
        None
    };
    let pair_warp = match &pre_warp {
        Some(g) => homography.compose(g)?,
        None => homography,
    };

    let n = train.len() as u64;
    let b = cfg.batch_size as u64;
    let mut cursor = step * b;
    let mut attempts = 0u64;
    let mut batch = Batch {
        step,
        seed,
        homography,
        sources: Vec::new(),
        images: Vec::new(),
        warped: Vec::new(),
    };
    let mut order_cache: Option<(u64, Vec<usize>)> = None;
    while batch.len() < cfg.batch_size {
        if attempts >= n.max(b) * 2 {
            return Err(Error::Corpus("could not assemble a batch: too many unreadable images".into()));
        }
        let pass = cursor / n;
        if order_cache.as_ref().is_none_or(|(p, _)| *p != pass) {
            order_cache = Some((pass, pass_order(train, cfg.seed, pass)));
        }
        let idx = order_cache.as_ref().expect("filled").1[(cursor % n) as usize];
        cursor += 1;
        attempts += 1;
        let img = match corpus.load(idx) {
            Ok(img) if img.width() >= c && img.height() >= c => img,
            Ok(_) => {
                log::warn!("skipping {}: smaller than the crop", corpus.name(idx));
                continue;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", corpus.name(idx));
                continue;
            }
        };
        let x0 = rng.random_range(0..=img.width() - c);
        let y0 = rng.random_range(0..=img.height() - c);
        let crop = img.crop(x0, y0, c, c)?;
        let base = match &pre_warp {
            Some(g) => warp_image(&crop, g)?,
            None => crop.clone(),
        };
        let warped = warp_image(&crop, &pair_warp)?;
        let noisy = apply_pipeline(&base, &mut rng, &cfg.noise);
        let noisy_h = apply_pipeline(&warped, &mut rng, &cfg.noise);
        batch.sources.push(idx);
        batch.images.push(noisy);
        batch.warped.push(noisy_h);
    }
    Ok(batch)
}

/// Per-term multipliers of the pair loss gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub keypoints: f64,
    pub heatmaps: f64,
    pub gt: f64,
    pub wrong: f64,
    pub random: f64,
}

impl TermWeights {
    pub fn from_loss(w: &LossWeights) -> Self {
        Self {
            keypoints: w.detector,
            heatmaps: w.detector,
            gt: w.descriptor,
            wrong: w.descriptor,
            random: w.descriptor,
        }
    }

    pub fn zero() -> Self {
        Self { keypoints: 0.0, heatmaps: 0.0, gt: 0.0, wrong: 0.0, random: 0.0 }
    }

    fn scaled(self, detector: f64, rest: f64) -> Self {
        Self {
            keypoints: self.keypoints * detector,
            heatmaps: self.heatmaps * rest,
            gt: self.gt * rest,
            wrong: self.wrong * rest,
            random: self.random * rest,
        }
    }
}

/// The discrete choices of one pair: detections, matches, targets and random
/// pairings. Losses are differentiable once these are fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPlan {
    pub keypoints: PointSet,
    pub keypoints_h: PointSet,
    pub estimate: TargetEstimate,
    pub pairings: Option<Vec<Vec<usize>>>,
}

impl PairPlan {
    /// Detections of `I` that project inside `I_h`.
    pub fn kept_points(&self) -> PointSet {
        self.keypoints.select(&self.estimate.kept)
    }

    /// Rows entering the ground-truth descriptor term when restricted to
    /// accepted pairs.
    pub fn accepted_rows(&self) -> &[usize] {
        &self.estimate.targets.source_indices
    }
}

/// Network outputs of one image of a pair.
#[derive(Clone, Debug)]
pub struct ImageOutputs {
    pub out: ForwardOutput,
    pub heatmap: Heatmap,
}

impl ImageOutputs {
    pub fn new(out: ForwardOutput) -> Self {
        let heatmap = heatmap_from_logits(&out.logits);
        Self { out, heatmap }
    }
}

pub fn plan_pair(
    a: &ImageOutputs,
    b: &ImageOutputs,
    h: &Homography,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PairPlan> {
    let keypoints = extract_windowed_max(&a.heatmap, cfg.extraction.train_window_src);
    let keypoints_h = extract_windowed_max(&b.heatmap, cfg.extraction.train_window_warp);
    let params = TargetParams {
        theta_dist: cfg.theta_dist_px,
        width: a.heatmap.width(),
        height: a.heatmap.height(),
        drop_outside: cfg.drop_outside_targets,
    };
    let projected = crate::geometry::project_points(&keypoints, h)?;
    let (_, kept) = crate::geometry::filter_in_bounds(&projected, params.height, params.width);
    let d_proj = interpolate_descriptors(&a.out.descriptors, &keypoints.select(&kept));
    let d_h = interpolate_descriptors(&b.out.descriptors, &keypoints_h);
    let estimate = estimate_targets(&keypoints, &keypoints_h, &d_proj, &d_h, h, &params)?;
    let pairings = if estimate.geometric.idx.is_empty() {
        None
    } else {
        random_pairings(&estimate.geometric.idx, keypoints_h.len(), cfg.loss.n_random, rng)
    };
    Ok(PairPlan { keypoints, keypoints_h, estimate, pairings })
}

/// Loss components of a pair with gradients with respect to both network
/// outputs, each term scaled by `weights`.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub report: LossReport,
    pub grad_logits: Tensor3,
    pub grad_logits_h: Tensor3,
    pub grad_descriptors: Tensor3,
    pub grad_descriptors_h: Tensor3,
}

pub fn pair_loss(
    a: &ImageOutputs,
    b: &ImageOutputs,
    plan: &PairPlan,
    h: &Homography,
    loss: &LossConfig,
    blur: &GaussianBlur,
    weights: &TermWeights,
) -> Result<PairLoss> {
    let targets = &plan.estimate.targets;
    let kp = keypoint_loss_with_grad(&a.heatmap, &b.heatmap, &targets.source, &targets.warped)?;
    let hm = heatmap_loss_with_grad(&a.heatmap, &b.heatmap, h, loss.weights.heatmap, blur)?;

    let kept_points = plan.kept_points();
    let d_proj = interpolate_descriptors(&a.out.descriptors, &kept_points);
    let d_h = interpolate_descriptors(&b.out.descriptors, &plan.keypoints_h);
    let est = &plan.estimate;
    let aligned = est.geometric.idx.len() == d_proj.len() && est.descriptor.idx.len() == d_proj.len();
    let desc = if aligned {
        descriptor_loss_with_grad(
            &DescriptorLossInputs {
                d_proj: &d_proj,
                d_h: &d_h,
                geometric: &est.geometric,
                descriptor: &est.descriptor,
                accepted: loss.gt_accepted_only.then(|| plan.accepted_rows()),
                pairings: plan.pairings.as_deref(),
            },
            loss.wrong_min_dist_px,
        )?
    } else {
        Default::default()
    };

    let mut g_p = vec![0.0; a.heatmap.data().len()];
    let mut g_ph = vec![0.0; b.heatmap.data().len()];
    for i in 0..g_p.len() {
        g_p[i] = weights.keypoints * kp.grad_p[i] + weights.heatmaps * hm.grad_p[i];
        g_ph[i] = weights.keypoints * kp.grad_p_h[i] + weights.heatmaps * hm.grad_p_h[i];
    }
    let grad_logits = heatmap_backward(&a.heatmap, &g_p);
    let grad_logits_h = heatmap_backward(&b.heatmap, &g_ph);

    let field = &a.out.descriptors;
    let field_h = &b.out.descriptors;
    let mut grad_descriptors = Tensor3::zeros(field.channels, field.height, field.width);
    let mut grad_descriptors_h = Tensor3::zeros(field_h.channels, field_h.height, field_h.width);
    if aligned && !d_proj.is_empty() {
        let tw = [weights.gt, weights.wrong, weights.random];
        let combine = |parts: &[Vec<f64>; 3]| -> Vec<f64> {
            (0..parts[0].len()).map(|k| (0..3).map(|t| tw[t] * parts[t][k]).sum()).collect()
        };
        let gp = Descriptors { dim: field.channels, data: combine(&desc.grad_proj) };
        let gh = Descriptors { dim: field_h.channels, data: combine(&desc.grad_h) };
        interpolate_descriptors_backward(field, &kept_points, &gp, &mut grad_descriptors);
        interpolate_descriptors_backward(field_h, &plan.keypoints_h, &gh, &mut grad_descriptors_h);
    }

    let mut report = LossReport {
        total: 0.0,
        keypoints: kp.value,
        heatmaps: hm.value,
        gt: desc.gt,
        wrong: desc.wrong,
        random: desc.random,
        n_gt: desc.n_gt,
        n_wrong: desc.n_wrong,
        n_random_pairs: desc.n_random_pairs,
        n_mask: hm.count,
        n_targets: targets.len(),
        keypoints_skipped: kp.skipped,
    };
    report.total = weights.keypoints * report.keypoints
        + weights.heatmaps * report.heatmaps
        + weights.gt * report.gt
        + weights.wrong * report.wrong
        + weights.random * report.random;
    Ok(PairLoss { report, grad_logits, grad_logits_h, grad_descriptors, grad_descriptors_h })
}

/// Batch loss and parameter gradients. Components are averaged over the
/// batch; the keypoint term only over elements that produced targets.
pub fn batch_gradients(net: &Network, batch: &Batch, cfg: &TrainConfig) -> Result<(LossReport, NetworkGrads)> {
    batch_gradients_weighted(net, batch, cfg, &TermWeights::from_loss(&cfg.loss.weights))
}

pub fn batch_gradients_weighted(
    net: &Network,
    batch: &Batch,
    cfg: &TrainConfig,
    weights: &TermWeights,
) -> Result<(LossReport, NetworkGrads)> {
    let blur = GaussianBlur::new(&cfg.loss.blur);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(batch.seed, STREAM_BATCH, u64::MAX));
    let mut forwards = Vec::with_capacity(batch.len());
    let mut plans = Vec::with_capacity(batch.len());
    for (img, warped) in batch.images.iter().zip(&batch.warped) {
        let (out_a, cache_a) = net.forward_train(img)?;
        let (out_b, cache_b) = net.forward_train(warped)?;
        let a = ImageOutputs::new(out_a);
        let b = ImageOutputs::new(out_b);
        plans.push(plan_pair(&a, &b, &batch.homography, cfg, &mut rng)?);
        forwards.push((a, cache_a, b, cache_b));
    }
    let with_targets = plans.iter().filter(|p| !p.estimate.targets.is_empty()).count();
    let n = batch.len() as f64;
    let kp_scale = if with_targets > 0 { 1.0 / with_targets as f64 } else { 0.0 };
    let element_weights = weights.scaled(kp_scale, 1.0 / n);

    let mut grads = NetworkGrads::zeros_like(net);
    let mut report = LossReport { keypoints_skipped: with_targets == 0, ..Default::default() };
    for ((a, cache_a, b, cache_b), plan) in forwards.iter().zip(&plans) {
        let pl = pair_loss(a, b, plan, &batch.homography, &cfg.loss, &blur, &element_weights)?;
        net.backward(cache_a, Some(&pl.grad_logits), Some(&pl.grad_descriptors), &mut grads);
        net.backward(cache_b, Some(&pl.grad_logits_h), Some(&pl.grad_descriptors_h), &mut grads);
        let r = &pl.report;
        report.keypoints += kp_scale * r.keypoints;
        report.heatmaps += r.heatmaps / n;
        report.gt += r.gt / n;
        report.wrong += r.wrong / n;
        report.random += r.random / n;
        report.n_gt += r.n_gt;
        report.n_wrong += r.n_wrong;
        report.n_random_pairs += r.n_random_pairs;
        report.n_mask += r.n_mask;
        report.n_targets += r.n_targets;
    }
    report.total = weights.keypoints * report.keypoints
        + weights.heatmaps * report.heatmaps
        + weights.gt * report.gt
        + weights.wrong * report.wrong
        + weights.random * report.random;
    Ok((report, grads))
}

/// Mutable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub optimizer: AdamState,
    /// Optimizer steps completed.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_INIT, 0));
        let network = Network::new(cfg.network.clone(), &mut rng)?;
        let optimizer = AdamState::new(&network);
        Ok(Self { network, optimizer, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let optimizer = ck.optimizer.unwrap_or_else(|| AdamState::new(&ck.network));
        Self { network: ck.network, optimizer, step: ck.step }
    }
}

/// Computes the batch loss and applies one optimizer update. A non-finite
/// loss leaves the parameters untouched and returns an error.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<LossReport> {
    let (report, grads) = batch_gradients(&state.network, batch, cfg)?;
    if !report.is_finite() || grads.flat().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: batch.step,
            detail: format!(
                "batch seed {}: total {} keypoints {} heatmaps {} gt {} wrong {} random {}",
                batch.seed, report.total, report.keypoints, report.heatmaps, report.gt, report.wrong, report.random
            ),
        });
    }
    adamw_step(&mut state.network, &grads, &mut state.optimizer, &cfg.optimizer, lr);
    state.step += 1;
    Ok(report)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        batch_seed: u64,
        sources: Vec<usize>,
        #[serde(flatten)]
        loss: LossReport,
    },
    Validation {
        epoch: usize,
        step: u64,
        #[serde(flatten)]
        summary: MetricSummary,
    },
}

/// Self-warped validation pairs: centre crops warped by a seeded homography.
pub fn validation_pairs(corpus: &Corpus, val: &[usize], cfg: &TrainConfig) -> Result<Vec<(Image, Image, Homography)>> {
    let c = cfg.crop_size;
    let mut out = Vec::new();
    for &i in val {
        let img = match corpus.load(i) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping validation image {}: {e}", corpus.name(i));
                continue;
            }
        };
        let crop = img.crop((img.width() - c) / 2, (img.height() - c) / 2, c, c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_VALIDATION, i as u64));
        let h = sample_homography(&cfg.homography, c, c, &mut rng)?;
        let warped = warp_image(&crop, &h)?;
        out.push((crop, warped, h));
    }
    Ok(out)
}

/// Mean metrics at the first configured threshold over the validation pairs.
pub fn validate(net: &Network, pairs: &[(Image, Image, Homography)], cfg: &TrainConfig) -> Result<MetricSummary> {
    let extraction = cfg.eval.extraction();
    let mut metrics = Vec::with_capacity(pairs.len());
    for (a, b, h) in pairs {
        let fa = extract_features(net, a, &extraction)?;
        let fb = extract_features(net, b, &extraction)?;
        let geo = PairGeometry::new((a.width(), a.height()), (b.width(), b.height()), GroundTruth::Homography(*h));
        let m = evaluate_pair(&fa, &fb, &geo, &cfg.eval)?;
        metrics.push(m.into_iter().next().expect("at least one threshold"));
    }
    Ok(MetricSummary::from_pairs(&metrics))
}

/// Where and how a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint (parameters, optimizer state, counters).
    pub resume: Option<PathBuf>,
    /// Write `epoch_XXX.ckpt` at the end of every epoch.
    pub epoch_checkpoints: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), resume: None, epoch_checkpoints: true }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub steps_per_epoch: u64,
    pub final_state: TrainState,
    pub best_validation: Option<f64>,
    pub losses: Vec<LossReport>,
}

const BEST_KEY: &str = "best_validation_harmonic_mean";

/// Runs the schedule: writes `metrics.jsonl`, `config.toml`, per-epoch
/// checkpoints, `last.ckpt` and `best.ckpt` (by validation harmonic mean).
pub fn train_loop(corpus: &Corpus, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(opts.out_dir.join("config.toml"), cfg.to_toml_string())?;
    let (train, val) = corpus.split(cfg.validation_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::Corpus("no training images after the validation split".into()));
    }
    let steps_per_epoch =
        if cfg.steps_per_epoch > 0 { cfg.steps_per_epoch } else { train.len().div_ceil(cfg.batch_size) } as u64;
    let mut total_steps = steps_per_epoch * cfg.total_epochs() as u64;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps as u64);
    }
    let val_pairs = validation_pairs(corpus, &val, cfg)?;

    let (mut state, mut best) = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.network.config != cfg.network {
                return Err(config_error("network", "checkpoint network differs from the configuration"));
            }
            let best = ck.metadata.get(BEST_KEY).and_then(|v| v.parse::<f64>().ok());
            (TrainState::from_checkpoint(ck), best)
        }
        None => (TrainState::new(cfg)?, None),
    };
    let metrics_path = opts.out_dir.join("metrics.jsonl");
    let file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut log = BufWriter::new(file);
    let mut losses = Vec::new();

    while state.step < total_steps {
        let step = state.step;
        let epoch = (step / steps_per_epoch) as usize + 1;
        let lr = cfg.lr_at_epoch(epoch);
        let batch = make_batch(corpus, &train, cfg, step)?;
        let report = match train_step(&mut state, &batch, cfg, lr) {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                log.flush()?;
                write_diagnostic(&opts.out_dir, &state, &batch, cfg, lr)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let record = MetricsRecord::Step {
            step: step + 1,
            epoch,
            lr,
            batch_seed: batch.seed,
            sources: batch.sources.clone(),
            loss: report.clone(),
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        log::info!("step {} epoch {epoch} lr {lr:.3e} loss {:.5}", step + 1, report.total);
        losses.push(report);

        let epoch_done = state.step % steps_per_epoch == 0;
        if epoch_done || state.step == total_steps {
            let completed = (state.step / steps_per_epoch) as u64;
            let mut meta = BTreeMap::new();
            if epoch_done && !val_pairs.is_empty() {
                let summary = validate(&state.network, &val_pairs, cfg)?;
                writeln!(
                    log,
                    "{}",
                    serde_json::to_string(&MetricsRecord::Validation { epoch, step: state.step, summary: summary.clone() })?
                )?;
                if best.is_none_or(|b| summary.harmonic_mean > b) {
                    best = Some(summary.harmonic_mean);
                    meta.insert(BEST_KEY.to_string(), summary.harmonic_mean.to_string());
                    checkpoint(&state, completed, &meta).save(&opts.out_dir.join("best.ckpt"))?;
                }
            }
            if let Some(b) = best {
                meta.insert(BEST_KEY.to_string(), b.to_string());
            }
            let ck = checkpoint(&state, completed, &meta);
            if epoch_done && opts.epoch_checkpoints {
                ck.save(&opts.out_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
            ck.save(&opts.out_dir.join("last.ckpt"))?;
            log.flush()?;
        }
    }
    log.flush()?;
    Ok(TrainSummary {
        steps: state.step,
        epochs: (state.step / steps_per_epoch) as usize,
        steps_per_epoch,
        final_state: state,
        best_validation: best,
        losses,
    })
}

fn checkpoint(state: &TrainState, epoch: u64, meta: &BTreeMap<String, String>) -> Checkpoint {
    Checkpoint {
        network: state.network.clone(),
        step: state.step,
        epoch,
        optimizer: Some(state.optimizer.clone()),
        metadata: meta.clone(),
    }
}

#[derive(Serialize)]
struct PairDiagnostic {
    source: usize,
    report: Option<LossReport>,
    error: Option<String>,
}

#[derive(Serialize)]
struct Diagnostic {
    step: u64,
    batch_seed: u64,
    lr: f64,
    homography: [f64; 9],
    pairs: Vec<PairDiagnostic>,
}

/// Per-pair loss components of the failing batch, written next to the
/// metrics log.
fn write_diagnostic(dir: &Path, state: &TrainState, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<()> {
    let mut pairs = Vec::new();
    for (k, &source) in batch.sources.iter().enumerate() {
        let single = Batch {
            step: batch.step,
            seed: batch.seed,
            homography: batch.homography,
            sources: vec![source],
            images: vec![batch.images[k].clone()],
            warped: vec![batch.warped[k].clone()],
        };
        let (report, error) = match batch_gradients(&state.network, &single, cfg) {
            Ok((r, _)) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        pairs.push(PairDiagnostic { source, report, error });
    }
    let d = Diagnostic {
        step: batch.step + 1,
        batch_seed: batch.seed,
        lr,
        homography: batch.homography.to_row_major(),
        pairs,
    };
    let path = dir.join(format!("diagnostic_step_{:06}.json", batch.step + 1));
    std::fs::write(path, serde_json::to_string_pretty(&d)?)?;
    Ok(())
}
