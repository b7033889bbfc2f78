//! Pair-evaluation protocol: repeatability, descriptor matching precision,
//! coverage and their harmonic mean, aggregated over a manifest of pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{read_homographies, Homography, Point, PointSet, ValidityMask};
use crate::grid::Image;
use crate::io::{self, CorrespondenceMap};
use crate::keypoints::{extract_inference, top_k_indices, ExtractionConfig};
use crate::matching::dot;
use crate::model::{interpolate_descriptors, Descriptors, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Correct-match distances; one report block per entry.
    pub thresholds_px: Vec<f64>,
    pub coverage_radius_px: f64,
    /// Heatmap threshold used when features come from a network.
    pub theta_keypoint: f64,
    /// Minimum cosine similarity for a descriptor match.
    pub theta_desc: f64,
    pub nms: bool,
    pub nms_radius_px: f64,
    /// Keep only the best `top_k` detections per image; 0 keeps all.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds_px: vec![3.0, 5.0],
            coverage_radius_px: 25.0,
            theta_keypoint: 0.021,
            theta_desc: 0.8,
            nms: true,
            nms_radius_px: 4.0,
            top_k: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("eval.{key}"), reason: reason.into() });
        if self.thresholds_px.is_empty() {
            return bad("thresholds_px", "at least one threshold is required");
        }
        if self.thresholds_px.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("thresholds_px", "thresholds must be positive");
        }
        if !(self.coverage_radius_px.is_finite() && self.coverage_radius_px > 0.0) {
            return bad("coverage_radius_px", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.theta_keypoint) {
            return bad("theta_keypoint", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.theta_desc) {
            return bad("theta_desc", "must lie in [0, 1]");
        }
        if !(self.nms_radius_px.is_finite() && self.nms_radius_px >= 0.0) {
            return bad("nms_radius_px", "must be non-negative");
        }
        Ok(())
    }

    pub fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig {
            inference_threshold: self.theta_keypoint,
            nms: self.nms,
            nms_radius: self.nms_radius_px,
            top_k: self.top_k,
            ..ExtractionConfig::default()
        }
    }
}

/// Ground-truth relation between the two images of a pair.
#[derive(Clone, Debug)]
pub enum GroundTruth {
    Homography(Homography),
    /// Per-pixel targets for both directions.
    Dense { a_to_b: CorrespondenceMap, b_to_a: CorrespondenceMap },
}

impl GroundTruth {
    /// Dense ground truth from a forward map only. The reverse map is built by
    /// sending each valid pixel of `a` to the pixel nearest its target, keeping
    /// the closest candidate when several land on the same pixel.
    pub fn from_forward_map(a_to_b: CorrespondenceMap, width_b: usize, height_b: usize) -> Self {
        let mut best: Vec<Option<(f64, Point)>> = vec![None; width_b * height_b];
        for (i, t) in a_to_b.targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let (x, y) = (t.x.round(), t.y.round());
            if x < 0.0 || y < 0.0 || x >= width_b as f64 || y >= height_b as f64 {
                continue;
            }
            let slot = y as usize * width_b + x as usize;
            let d = t.dist2(Point::new(x, y));
            let src = Point::new((i % a_to_b.width) as f64, (i / a_to_b.width) as f64);
            if best[slot].is_none_or(|(bd, _)| d < bd) {
                best[slot] = Some((d, src));
            }
        }
        let b_to_a = CorrespondenceMap {
            width: width_b,
            height: height_b,
            targets: best.into_iter().map(|b| b.map(|(_, p)| p)).collect(),
        };
        GroundTruth::Dense { a_to_b, b_to_a }
    }

    pub fn map_a_to_b(&self, p: Point) -> Option<Point> {
        match self {
            GroundTruth::Homography(h) => h.apply(p),
            GroundTruth::Dense { a_to_b, .. } => a_to_b.lookup(p),
        }
    }

    pub fn map_b_to_a(&self, p: Point) -> Option<Point> {
        match self {
            GroundTruth::Homography(h) => h.inverse().apply(p),
            GroundTruth::Dense { b_to_a, .. } => b_to_a.lookup(p),
        }
    }

    /// The same relation with the roles of the images exchanged.
    pub fn swapped(&self) -> Self {
        match self {
            GroundTruth::Homography(h) => GroundTruth::Homography(h.inverse()),
            GroundTruth::Dense { a_to_b, b_to_a } => {
                GroundTruth::Dense { a_to_b: b_to_a.clone(), b_to_a: a_to_b.clone() }
            }
        }
    }
}

/// Sizes, ground truth and optional evaluation regions of one pair.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
    pub gt: GroundTruth,
    pub mask_a: Option<ValidityMask>,
    pub mask_b: Option<ValidityMask>,
}

impl PairGeometry {
    pub fn new(size_a: (usize, usize), size_b: (usize, usize), gt: GroundTruth) -> Self {
        Self { size_a, size_b, gt, mask_a: None, mask_b: None }
    }

    pub fn swapped(&self) -> Self {
        Self {
            size_a: self.size_b,
            size_b: self.size_a,
            gt: self.gt.swapped(),
            mask_a: self.mask_b.clone(),
            mask_b: self.mask_a.clone(),
        }
    }

    fn project(&self, p: Point, forward: bool) -> Option<Point> {
        let (q, (w, h)) = if forward {
            (self.gt.map_a_to_b(p), self.size_b)
        } else {
            (self.gt.map_b_to_a(p), self.size_a)
        };
        q.filter(|q| q.x.is_finite() && q.y.is_finite() && q.in_bounds(w, h))
    }
}

fn in_mask(mask: Option<&ValidityMask>, p: Point) -> bool {
    let Some(m) = mask else { return true };
    let (x, y) = (p.x.round(), p.y.round());
    x >= 0.0 && y >= 0.0 && (x as usize) < m.width && (y as usize) < m.height && m.get(x as usize, y as usize)
}

/// Indices of points inside an optional region mask.
pub fn restrict_to_mask(points: &PointSet, mask: Option<&ValidityMask>) -> Vec<usize> {
    (0..points.len()).filter(|&i| in_mask(mask, points.points[i])).collect()
}

/// One direction of a symmetrized metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRate {
    pub hits: usize,
    pub total: usize,
}

impl DirectionRate {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    pub value: f64,
    pub a_to_b: DirectionRate,
    pub b_to_a: DirectionRate,
    /// Some direction had no projected point inside the other image.
    pub flagged: bool,
}

fn repeat_direction(src: &PointSet, dst: &PointSet, geo: &PairGeometry, forward: bool, eps: f64) -> DirectionRate {
    let mut rate = DirectionRate { hits: 0, total: 0 };
    let eps2 = eps * eps;
    for p in &src.points {
        let Some(q) = geo.project(*p, forward) else { continue };
        rate.total += 1;
        if dst.points.iter().any(|d| d.dist2(q) <= eps2) {
            rate.hits += 1;
        }
    }
    rate
}

/// Fraction of detections re-detected within `eps` after projection, averaged
/// over both directions. Points projecting outside the other image are not
/// counted.
pub fn repeatability(ka: &PointSet, kb: &PointSet, geo: &PairGeometry, eps: f64) -> Repeatability {
    let a_to_b = repeat_direction(ka, kb, geo, true, eps);
    let b_to_a = repeat_direction(kb, ka, geo, false, eps);
    Repeatability {
        value: 0.5 * (a_to_b.rate() + b_to_a.rate()),
        a_to_b,
        b_to_a,
        flagged: a_to_b.total == 0 || b_to_a.total == 0,
    }
}

/// A descriptor nearest-neighbour match from the source to the target image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatch {
    pub source: usize,
    pub target: usize,
    pub similarity: f64,
    /// Distance between the projected source and the matched target.
    pub error_px: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub a_to_b: Vec<EvalMatch>,
    pub b_to_a: Vec<EvalMatch>,
    pub precision: f64,
    pub precision_a_to_b: f64,
    pub precision_b_to_a: f64,
    /// Some direction produced no match above the similarity threshold.
    pub flagged: bool,
}

impl MatchSet {
    /// Correctly matched keypoints of image `a` (sources of a→b matches and
    /// targets of b→a matches), without duplicates.
    pub fn correct_points_a(&self, ka: &PointSet) -> PointSet {
        Self::correct_points(ka, &self.a_to_b, &self.b_to_a)
    }

    pub fn correct_points_b(&self, kb: &PointSet) -> PointSet {
        Self::correct_points(kb, &self.b_to_a, &self.a_to_b)
    }

    fn correct_points(k: &PointSet, as_source: &[EvalMatch], as_target: &[EvalMatch]) -> PointSet {
        let mut idx: Vec<usize> = as_source
            .iter()
            .filter(|m| m.correct)
            .map(|m| m.source)
            .chain(as_target.iter().filter(|m| m.correct).map(|m| m.target))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        k.select(&idx)
    }
}

fn match_direction(
    ks: &PointSet,
    ds: &Descriptors,
    kt: &PointSet,
    dt: &Descriptors,
    geo: &PairGeometry,
    forward: bool,
    eps: f64,
    theta_desc: f64,
) -> Vec<EvalMatch> {
    let mut out = Vec::new();
    if kt.is_empty() {
        return out;
    }
    for (i, p) in ks.points.iter().enumerate() {
        let Some(q) = geo.project(*p, forward) else { continue };
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..kt.len() {
            let s = dot(ds.row(i), dt.row(j));
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        if best_sim >= theta_desc {
            let error_px = q.dist(kt.points[best]);
            out.push(EvalMatch { source: i, target: best, similarity: best_sim, error_px, correct: error_px <= eps });
        }
    }
    out
}

fn precision_of(matches: &[EvalMatch]) -> f64 {
    if matches.is_empty() {
        0.0
    } else {
        matches.iter().filter(|m| m.correct).count() as f64 / matches.len() as f64
    }
}

/// Nearest-neighbour descriptor matches with similarity at least `theta_desc`
/// from every source point that projects inside the other image; a match is
/// correct when the projected source lies within `eps` of the matched point.
/// Precision is the mean of the two directional correct/total ratios.
pub fn match_and_precision(
    ka: &PointSet,
    da: &Descriptors,
    kb: &PointSet,
    db: &Descriptors,
    geo: &PairGeometry,
    eps: f64,
    theta_desc: f64,
) -> Result<MatchSet> {
    if da.len() != ka.len() || db.len() != kb.len() {
        return Err(Error::Shape("descriptor count differs from keypoint count".into()));
    }
    if !da.is_empty() && !db.is_empty() && da.dim != db.dim {
        return Err(Error::Shape(format!("descriptor dims {} and {}", da.dim, db.dim)));
    }
    let a_to_b = match_direction(ka, da, kb, db, geo, true, eps, theta_desc);
    let b_to_a = match_direction(kb, db, ka, da, geo, false, eps, theta_desc);
    let (pab, pba) = (precision_of(&a_to_b), precision_of(&b_to_a));
    Ok(MatchSet {
        flagged: a_to_b.is_empty() || b_to_a.is_empty(),
        precision: 0.5 * (pab + pba),
        precision_a_to_b: pab,
        precision_b_to_a: pba,
        a_to_b,
        b_to_a,
    })
}

/// Fraction of pixel centres (inside `mask`, when given) within `radius` of
/// some point.
pub fn coverage(points: &PointSet, width: usize, height: usize, radius: f64, mask: Option<&ValidityMask>) -> f64 {
    let mut covered = vec![false; width * height];
    let r2 = radius * radius;
    for p in &points.points {
        let x0 = (p.x - radius).ceil().max(0.0) as usize;
        let y0 = (p.y - radius).ceil().max(0.0) as usize;
        let x1 = (p.x + radius).floor().min(width as f64 - 1.0);
        let y1 = (p.y + radius).floor().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if p.dist2(Point::new(x as f64, y as f64)) <= r2 {
                    covered[y * width + x] = true;
                }
            }
        }
    }
    let (hit, total) = match mask {
        Some(m) => (
            covered.iter().zip(&m.data).filter(|(c, m)| **c && **m).count(),
            m.count_nonzero,
        ),
        None => (covered.iter().filter(|c| **c).count(), width * height),
    };
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// `n / sum(1 / m_i)`, or 0 when any metric is 0.
pub fn harmonic_mean(metrics: &[f64]) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::Empty("harmonic mean of no metrics"));
    }
    if metrics.iter().any(|&m| m <= 0.0) {
        return Ok(0.0);
    }
    Ok(metrics.len() as f64 / metrics.iter().map(|m| 1.0 / m).sum::<f64>())
}

/// Detections and descriptors of one image in full-image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub points: PointSet,
    pub descriptors: Descriptors,
    pub width: usize,
    pub height: usize,
}

impl Features {
    /// Best `k` detections by score; `k = 0` keeps everything.
    pub fn truncated(&self, k: usize) -> Features {
        if k == 0 || self.points.len() <= k {
            return self.clone();
        }
        let idx = top_k_indices(&self.points, k);
        Features { points: self.points.select(&idx), descriptors: self.descriptors.select(&idx), width: self.width, height: self.height }
    }
}

/// Runs `net` on the largest centred crop with sides divisible by 8 and
/// reports detections in the original image frame.
pub fn extract_features(net: &Network, img: &Image, cfg: &ExtractionConfig) -> Result<Features> {
    let (crop, (x0, y0)) = io::center_crop_to_multiple(img, crate::model::CELL)?;
    let out = net.forward(&crop)?;
    let hm = crate::model::heatmap_from_logits(&out.logits);
    let pts = extract_inference(&hm, cfg);
    let descriptors = interpolate_descriptors(&out.descriptors, &pts);
    let shifted = PointSet {
        points: pts.points.iter().map(|p| Point::new(p.x + x0 as f64, p.y + y0 as f64)).collect(),
        scores: pts.scores.clone(),
    };
    Ok(Features { points: shifted, descriptors, width: img.width(), height: img.height() })
}

/// All metrics of one pair at one correct-match threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub threshold_px: f64,
    pub repeatability: f64,
    pub precision: f64,
    pub coverage: f64,
    /// Harmonic mean of repeatability, precision and coverage.
    pub harmonic_mean: f64,
    /// Harmonic mean of repeatability and precision only.
    pub harmonic_mean_rp: f64,
    pub n_keypoints_a: usize,
    pub n_keypoints_b: usize,
    pub n_matches: usize,
    pub n_correct: usize,
    pub repeatability_flagged: bool,
    pub precision_flagged: bool,
}

/// Evaluates one pair at every configured threshold.
pub fn evaluate_pair(fa: &Features, fb: &Features, geo: &PairGeometry, cfg: &EvalConfig) -> Result<Vec<PairMetrics>> {
    let fa = fa.truncated(cfg.top_k);
    let fb = fb.truncated(cfg.top_k);
    let ia = restrict_to_mask(&fa.points, geo.mask_a.as_ref());
    let ib = restrict_to_mask(&fb.points, geo.mask_b.as_ref());
    let (ka, da) = (fa.points.select(&ia), fa.descriptors.select(&ia));
    let (kb, db) = (fb.points.select(&ib), fb.descriptors.select(&ib));
    let mut out = Vec::with_capacity(cfg.thresholds_px.len());
    for &eps in &cfg.thresholds_px {
        let rep = repeatability(&ka, &kb, geo, eps);
        let ms = match_and_precision(&ka, &da, &kb, &db, geo, eps, cfg.theta_desc)?;
        let (wa, ha) = geo.size_a;
        let (wb, hb) = geo.size_b;
        let cov_a = coverage(&ms.correct_points_a(&ka), wa, ha, cfg.coverage_radius_px, geo.mask_a.as_ref());
        let cov_b = coverage(&ms.correct_points_b(&kb), wb, hb, cfg.coverage_radius_px, geo.mask_b.as_ref());
        let cov = 0.5 * (cov_a + cov_b);
        let matches = ms.a_to_b.iter().chain(&ms.b_to_a);
        out.push(PairMetrics {
            threshold_px: eps,
            repeatability: rep.value,
            precision: ms.precision,
            coverage: cov,
            harmonic_mean: harmonic_mean(&[rep.value, ms.precision, cov])?,
            harmonic_mean_rp: harmonic_mean(&[rep.value, ms.precision])?,
            n_keypoints_a: ka.len(),
            n_keypoints_b: kb.len(),
            n_matches: ms.a_to_b.len() + ms.b_to_a.len(),
            n_correct: matches.filter(|m| m.correct).count(),
            repeatability_flagged: rep.flagged,
            precision_flagged: ms.flagged,
        });
    }
    Ok(out)
}

/// Mean metrics over a group of pairs; the harmonic means are taken of the
/// averaged metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_pairs: usize,
    pub repeatability: f64,
    pub precision: f64,
    pub coverage: f64,
    pub harmonic_mean: f64,
    pub harmonic_mean_rp: f64,
}

impl MetricSummary {
    pub fn from_pairs<'a>(metrics: impl IntoIterator<Item = &'a PairMetrics>) -> Self {
        let mut n = 0usize;
        let (mut r, mut p, mut c) = (0.0, 0.0, 0.0);
        for m in metrics {
            n += 1;
            r += m.repeatability;
            p += m.precision;
            c += m.coverage;
        }
        if n == 0 {
            return Self { n_pairs: 0, repeatability: 0.0, precision: 0.0, coverage: 0.0, harmonic_mean: 0.0, harmonic_mean_rp: 0.0 };
        }
        let (r, p, c) = (r / n as f64, p / n as f64, c / n as f64);
        Self {
            n_pairs: n,
            repeatability: r,
            precision: p,
            coverage: c,
            harmonic_mean: harmonic_mean(&[r, p, c]).expect("non-empty"),
            harmonic_mean_rp: harmonic_mean(&[r, p]).expect("non-empty"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold_px: f64,
    pub overall: MetricSummary,
    pub splits: BTreeMap<String, MetricSummary>,
    /// Harmonic mean over every split's repeatability, precision and coverage.
    pub harmonic_mean_all_splits: f64,
    /// Same, over repeatability and precision only.
    pub harmonic_mean_all_splits_rp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub name: String,
    pub split: String,
    pub metrics: Vec<PairMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub summaries: Vec<ThresholdSummary>,
    pub pairs: Vec<PairEntry>,
    pub skipped: Vec<SkippedPair>,
}

impl EvalReport {
    pub fn from_entries(config: EvalConfig, pairs: Vec<PairEntry>, skipped: Vec<SkippedPair>) -> Self {
        let summaries = config
            .thresholds_px
            .iter()
            .enumerate()
            .map(|(t, &threshold_px)| {
                let overall = MetricSummary::from_pairs(pairs.iter().map(|p| &p.metrics[t]));
                let mut names: Vec<&str> = pairs.iter().map(|p| p.split.as_str()).collect();
                names.sort_unstable();
                names.dedup();
                let splits: BTreeMap<String, MetricSummary> = names
                    .into_iter()
                    .map(|s| {
                        let group = pairs.iter().filter(|p| p.split == s).map(|p| &p.metrics[t]);
                        (s.to_string(), MetricSummary::from_pairs(group))
                    })
                    .collect();
                let (all, rp) = if splits.is_empty() {
                    (0.0, 0.0)
                } else {
                    let all: Vec<f64> =
                        splits.values().flat_map(|m| [m.repeatability, m.precision, m.coverage]).collect();
                    let rp: Vec<f64> = splits.values().flat_map(|m| [m.repeatability, m.precision]).collect();
                    (harmonic_mean(&all).expect("non-empty"), harmonic_mean(&rp).expect("non-empty"))
                };
                ThresholdSummary { threshold_px, overall, splits, harmonic_mean_all_splits: all, harmonic_mean_all_splits_rp: rp }
            })
            .collect();
        Self { config, summaries, pairs, skipped }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Human-readable table: one column per split and threshold.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "theta_desc {}  theta_keypoint {}  coverage radius {} px  top_k {}",
            self.config.theta_desc, self.config.theta_keypoint, self.config.coverage_radius_px, self.config.top_k
        )
        .expect("string write");
        for t in &self.summaries {
            let mut cols: Vec<(String, &MetricSummary)> =
                t.splits.iter().map(|(k, v)| (format!("{k} {} px", t.threshold_px), v)).collect();
            cols.push((format!("all {} px", t.threshold_px), &t.overall));
            write!(s, "\n{:<26}", "metric").expect("string write");
            for (name, _) in &cols {
                write!(s, "{name:>14}").expect("string write");
            }
            s.push('\n');
            let rows: [(&str, fn(&MetricSummary) -> f64); 5] = [
                ("replication", |m| m.repeatability),
                ("accuracy (precision)", |m| m.precision),
                ("coverage", |m| m.coverage),
                ("harmonic mean", |m| m.harmonic_mean),
                ("harmonic mean (rep+prec)", |m| m.harmonic_mean_rp),
            ];
            for (label, f) in rows {
                write!(s, "{label:<26}").expect("string write");
                for (_, m) in &cols {
                    write!(s, "{:>14.4}", f(m)).expect("string write");
                }
                s.push('\n');
            }
            writeln!(
                s,
                "harmonic mean over all split metrics: {:.4} (rep+prec only: {:.4}); pairs: {}",
                t.harmonic_mean_all_splits, t.harmonic_mean_all_splits_rp, t.overall.n_pairs
            )
            .expect("string write");
        }
        if !self.skipped.is_empty() {
            writeln!(s, "\nskipped {} pair(s):", self.skipped.len()).expect("string write");
            for k in &self.skipped {
                writeln!(s, "  {}: {}", k.name, k.reason).expect("string write");
            }
        }
        s
    }
}

/// Ground-truth description as written in a manifest.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruthSpec {
    Identity,
    /// A homography file and the index of the matrix inside it.
    Homography(PathBuf, usize),
    /// Point correspondences, fitted with a normalized DLT.
    Points(PathBuf),
    Dense(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub line: usize,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub gt: GroundTruthSpec,
    pub split: String,
    pub mask_a: Option<PathBuf>,
    pub mask_b: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn name(&self) -> String {
        format!("{} {}", self.image_a.display(), self.image_b.display())
    }
}

/// Parses `image_a image_b <homography|points|dense|identity> <gt_path|-> [split]
/// [mask_a=path] [mask_b=path]` records. Relative paths resolve against
/// `base`; `path#k` selects the k-th matrix of a homography file.
pub fn parse_manifest(text: &str, base: &Path) -> std::result::Result<Vec<ManifestEntry>, String> {
    let resolve = |p: &str| if Path::new(p).is_absolute() { PathBuf::from(p) } else { base.join(p) };
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < 4 {
            return Err(format!("line {}: expected `image_a image_b gt_type gt_path [split]`", n + 1));
        }
        let gt = match t[2] {
            "identity" => GroundTruthSpec::Identity,
            "homography" => {
                let (path, index) = match t[3].rsplit_once('#') {
                    Some((p, k)) => (p, k.parse().map_err(|_| format!("line {}: bad matrix index `{k}`", n + 1))?),
                    None => (t[3], 0),
                };
                GroundTruthSpec::Homography(resolve(path), index)
            }
            "points" => GroundTruthSpec::Points(resolve(t[3])),
            "dense" => GroundTruthSpec::Dense(resolve(t[3])),
            other => return Err(format!("line {}: unknown ground-truth type `{other}`", n + 1)),
        };
        let mut entry = ManifestEntry {
            line: n + 1,
            image_a: resolve(t[0]),
            image_b: resolve(t[1]),
            gt,
            split: "all".into(),
            mask_a: None,
            mask_b: None,
        };
        for extra in &t[4..] {
            match extra.split_once('=') {
                Some(("mask_a", p)) => entry.mask_a = Some(resolve(p)),
                Some(("mask_b", p)) => entry.mask_b = Some(resolve(p)),
                Some((k, _)) => return Err(format!("line {}: unknown option `{k}`", n + 1)),
                None => entry.split = extra.to_string(),
            }
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base).map_err(|reason| Error::Parse { path: path.to_path_buf(), reason })
}

fn load_mask(path: &Path) -> Result<ValidityMask> {
    let img = io::load_image(path)?;
    Ok(ValidityMask::from_bits(img.width(), img.height(), img.data().iter().map(|&v| v > 0.5).collect()))
}

/// Resolves the ground truth of an entry for images of the given sizes.
pub fn load_ground_truth(spec: &GroundTruthSpec, size_a: (usize, usize), size_b: (usize, usize)) -> Result<GroundTruth> {
    match spec {
        GroundTruthSpec::Identity => Ok(GroundTruth::Homography(Homography::identity())),
        GroundTruthSpec::Homography(path, k) => {
            let hs = read_homographies(path)?;
            hs.get(*k).copied().map(GroundTruth::Homography).ok_or_else(|| Error::Parse {
                path: path.clone(),
                reason: format!("matrix #{k} requested, file holds {}", hs.len()),
            })
        }
        GroundTruthSpec::Points(path) => {
            let text = std::fs::read_to_string(path)?;
            let (a, b) = io::parse_correspondences(&text).map_err(|reason| Error::Parse { path: path.clone(), reason })?;
            Ok(GroundTruth::Homography(Homography::from_correspondences(&a, &b)?))
        }
        GroundTruthSpec::Dense(path) => {
            let text = std::fs::read_to_string(path)?;
            let map = io::parse_dense_map(&text).map_err(|reason| Error::Parse { path: path.clone(), reason })?;
            if (map.width, map.height) != size_a {
                return Err(Error::Shape(format!(
                    "correspondence map is {}x{}, image a is {}x{}",
                    map.width, map.height, size_a.0, size_a.1
                )));
            }
            Ok(GroundTruth::from_forward_map(map, size_b.0, size_b.1))
        }
    }
}

/// Supplies features for an image path.
pub trait FeatureSource {
    fn features(&mut self, image: &Path) -> Result<Features>;
}

/// Features computed by a network, cached per path.
pub struct ModelFeatures<'a> {
    pub network: &'a Network,
    pub extraction: ExtractionConfig,
    cache: BTreeMap<PathBuf, Features>,
}

impl<'a> ModelFeatures<'a> {
    pub fn new(network: &'a Network, extraction: ExtractionConfig) -> Self {
        Self { network, extraction, cache: BTreeMap::new() }
    }
}

impl FeatureSource for ModelFeatures<'_> {
    fn features(&mut self, image: &Path) -> Result<Features> {
        if let Some(f) = self.cache.get(image) {
            return Ok(f.clone());
        }
        let img = io::load_image(image)?;
        let f = extract_features(self.network, &img, &self.extraction)?;
        self.cache.insert(image.to_path_buf(), f.clone());
        Ok(f)
    }
}

/// Features read from `<dir>/<image file stem>.kpt` keypoint files.
pub struct FileFeatures {
    pub dir: PathBuf,
}

impl FileFeatures {
    pub fn path_for(dir: &Path, image: &Path) -> PathBuf {
        let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        dir.join(format!("{stem}.kpt"))
    }
}

impl FeatureSource for FileFeatures {
    fn features(&mut self, image: &Path) -> Result<Features> {
        let (width, height) = image::image_dimensions(image)?;
        let kf = io::read_keypoints(&Self::path_for(&self.dir, image))?;
        let path = Self::path_for(&self.dir, image);
        let descriptors = kf.descriptors.ok_or_else(|| Error::Parse {
            path,
            reason: "keypoint file has no descriptors".into(),
        })?;
        Ok(Features { points: kf.points, descriptors, width: width as usize, height: height as usize })
    }
}

/// Evaluates every manifest entry; entries whose inputs cannot be read are
/// skipped and listed in the report.
pub fn evaluate_dataset(entries: &[ManifestEntry], source: &mut dyn FeatureSource, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        match evaluate_entry(e, source, cfg) {
            Ok(metrics) => pairs.push(PairEntry { name: e.name(), split: e.split.clone(), metrics }),
            Err(err) => {
                log::warn!("skipping pair on manifest line {}: {err}", e.line);
                skipped.push(SkippedPair { name: e.name(), reason: err.to_string() });
            }
        }
    }
    Ok(EvalReport::from_entries(cfg.clone(), pairs, skipped))
}

fn evaluate_entry(e: &ManifestEntry, source: &mut dyn FeatureSource, cfg: &EvalConfig) -> Result<Vec<PairMetrics>> {
    let fa = source.features(&e.image_a)?;
    let fb = source.features(&e.image_b)?;
    let (size_a, size_b) = ((fa.width, fa.height), (fb.width, fb.height));
    let mut geo = PairGeometry::new(size_a, size_b, load_ground_truth(&e.gt, size_a, size_b)?);
    if let Some(p) = &e.mask_a {
        geo.mask_a = Some(load_mask(p)?);
    }
    if let Some(p) = &e.mask_b {
        geo.mask_b = Some(load_mask(p)?);
    }
    for (m, size, which) in [(&geo.mask_a, size_a, "a"), (&geo.mask_b, size_b, "b")] {
        if let Some(m) = m {
            if (m.width, m.height) != size {
                return Err(Error::Shape(format!("mask for image {which} does not match the image size")));
            }
        }
    }
    evaluate_pair(&fa, &fb, &geo, cfg)
}

/// Side-by-side visualization: detections in yellow, correct matches in
/// green, wrong ones in red.
pub fn render_matches(a: &Image, b: &Image, ka: &PointSet, kb: &PointSet, matches: &[EvalMatch]) -> image::RgbImage {
    let w = a.width() + b.width();
    let h = a.height().max(b.height());
    let mut canvas = image::RgbImage::new(w as u32, h as u32);
    for (img, dx) in [(a, 0), (b, a.width())] {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = (img.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                canvas.put_pixel((x + dx) as u32, y as u32, image::Rgb([v, v, v]));
            }
        }
    }
    let mut plot = |x: f64, y: f64, c: [u8; 3]| {
        let (x, y) = (x.round(), y.round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            canvas.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    };
    let off = a.width() as f64;
    for m in matches {
        let (p, q) = (ka.points[m.source], kb.points[m.target]);
        let colour = if m.correct { [0, 220, 0] } else { [220, 0, 0] };
        let steps = (p.dist(Point::new(q.x + off, q.y)).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            plot(p.x + t * (q.x + off - p.x), p.y + t * (q.y - p.y), colour);
        }
    }
    for (pts, dx) in [(ka, 0.0), (kb, off)] {
        for p in &pts.points {
            for d in -2..=2 {
                plot(p.x + dx + d as f64, p.y, [255, 210, 0]);
                plot(p.x + dx, p.y + d as f64, [255, 210, 0]);
            }
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn geo(h: Homography) -> PairGeometry {
        PairGeometry::new((64, 48), (64, 48), GroundTruth::Homography(h))
    }

    #[test]
    fn repeatability_of_projected_set_is_one() {
        let h = Homography::translation(2.5, -1.0);
        let ka = PointSet::new(vec![Point::new(10.0, 10.0), Point::new(30.0, 20.0), Point::new(5.0, 40.0)]);
        let kb = crate::geometry::project_points(&ka, &h).unwrap();
        let r = repeatability(&ka, &kb, &geo(h), 3.0);
        assert_eq!(r.value, 1.0);
        assert!(!r.flagged);
        let empty = repeatability(&ka, &PointSet::default(), &geo(h), 3.0);
        assert_eq!(empty.value, 0.0);
        assert!(empty.flagged);
    }

    #[test]
    fn identical_descriptors_give_full_precision() {
        let h = Homography::translation(1.0, 1.0);
        let ka = PointSet::new(vec![Point::new(10.0, 10.0), Point::new(40.0, 20.0)]);
        let kb = crate::geometry::project_points(&ka, &h).unwrap();
        let d = Descriptors::new(2, [unit(&[1.0, 0.1]), unit(&[0.1, 1.0])].concat()).unwrap();
        let ms = match_and_precision(&ka, &d, &kb, &d, &geo(h), 3.0, 0.8).unwrap();
        assert_eq!(ms.precision, 1.0);
        let none = match_and_precision(&ka, &d, &kb, &d, &geo(h), 3.0, 1.0 + 1e-9).unwrap();
        assert_eq!(none.precision, 0.0);
        assert!(none.flagged);
    }

    #[test]
    fn coverage_counts_lattice_points() {
        let pts = PointSet::new(vec![Point::new(50.0, 50.0)]);
        let c = coverage(&pts, 100, 100, 25.0, None);
        let mut n = 0;
        for y in 0..100i64 {
            for x in 0..100i64 {
                if (x - 50).pow(2) + (y - 50).pow(2) <= 625 {
                    n += 1;
                }
            }
        }
        assert_eq!(c, n as f64 / 10000.0);
        assert_eq!(coverage(&PointSet::default(), 10, 10, 5.0, None), 0.0);
        assert_eq!(coverage(&pts, 100, 100, 200.0, None), 1.0);
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(&[0.5, 0.5]).unwrap(), 0.5);
        let (p, r) = (0.3, 0.7);
        assert!((harmonic_mean(&[p, r]).unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.9, 0.0]).unwrap(), 0.0);
        assert!(harmonic_mean(&[]).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# pairs\na.png b.png homography H.txt#2 view\nc.png c.png identity - light mask_a=m.png\n";
        let e = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].gt, GroundTruthSpec::Homography(PathBuf::from("/data/H.txt"), 2));
        assert_eq!(e[0].split, "view");
        assert_eq!(e[1].gt, GroundTruthSpec::Identity);
        assert_eq!(e[1].mask_a, Some(PathBuf::from("/data/m.png")));
        assert!(parse_manifest("a b nope x", Path::new(".")).is_err());
    }

    #[test]
    fn reverse_dense_map_inverts_translation() {
        let (w, h) = (8, 6);
        let targets = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (x + 1.0 < w as f64).then_some(Point::new(x + 1.0, y))
            })
            .collect();
        let gt = GroundTruth::from_forward_map(CorrespondenceMap { width: w, height: h, targets }, w, h);
        assert_eq!(gt.map_a_to_b(Point::new(2.0, 3.0)), Some(Point::new(3.0, 3.0)));
        assert_eq!(gt.map_b_to_a(Point::new(3.0, 3.0)), Some(Point::new(2.0, 3.0)));
        assert_eq!(gt.map_b_to_a(Point::new(0.0, 3.0)), None);
    }
}
