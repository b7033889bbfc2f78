//! Keypoint extraction from heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointSet};
use crate::grid::Heatmap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Tile size for training keypoints on the source image.
    pub train_window_src: usize,
    /// Tile size for training keypoints on the warped image.
    pub train_window_warp: usize,
    pub inference_threshold: f64,
    pub nms_radius: f64,
    pub nms: bool,
    /// Keep only the best `top_k` detections (count equalization); 0 keeps all.
    pub top_k: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            train_window_src: 32,
            train_window_warp: 16,
            inference_threshold: 0.021,
            nms_radius: 4.0,
            nms: true,
            top_k: 0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: format!("extraction.{key}"), reason });
        if self.train_window_src == 0 {
            return bad("train_window_src", "must be at least 1".into());
        }
        if self.train_window_warp == 0 {
            return bad("train_window_warp", "must be at least 1".into());
        }
        if !(self.inference_threshold > 0.0 && self.inference_threshold < 1.0) {
            return bad("inference_threshold", format!("must be in (0, 1), got {}", self.inference_threshold));
        }
        if !(self.nms_radius >= 0.0 && self.nms_radius.is_finite()) {
            return bad("nms_radius", format!("must be nonnegative, got {}", self.nms_radius));
        }
        Ok(())
    }
}

/// One point per non-overlapping `window x window` tile (edge tiles may be
/// smaller): the tile maximum, ties to the smallest row, then column.
pub fn extract_windowed_max(hm: &Heatmap, window: usize) -> PointSet {
    let window = window.max(1);
    let (w, h) = (hm.width(), hm.height());
    let mut points = Vec::with_capacity(w.div_ceil(window) * h.div_ceil(window));
    let mut scores = Vec::with_capacity(points.capacity());
    for ty in (0..h).step_by(window) {
        for tx in (0..w).step_by(window) {
            let (mut bx, mut by, mut best) = (tx, ty, hm.get(tx, ty));
            for y in ty..(ty + window).min(h) {
                for x in tx..(tx + window).min(w) {
                    let v = hm.get(x, y);
                    if v > best {
                        (bx, by, best) = (x, y, v);
                    }
                }
            }
            points.push(Point::new(bx as f64, by as f64));
            scores.push(best);
        }
    }
    PointSet::with_scores(points, scores)
}

/// Thresholded detections with greedy radius suppression in descending score
/// order (ties in row-major order). Optional top-k truncation.
pub fn extract_inference(hm: &Heatmap, cfg: &ExtractionConfig) -> PointSet {
    let (w, h) = (hm.width(), hm.height());
    let mut cand: Vec<(usize, f64)> = hm
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= cfg.inference_threshold)
        .map(|(i, &v)| (i, v))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let limit = if cfg.top_k == 0 { usize::MAX } else { cfg.top_k };
    let mut suppressed = vec![false; w * h];
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let reach = cfg.nms_radius.ceil() as isize;
    let mut points = Vec::new();
    let mut scores = Vec::new();
    for (i, v) in cand {
        if points.len() >= limit {
            break;
        }
        if cfg.nms && suppressed[i] {
            continue;
        }
        let (x, y) = (i % w, i / w);
        points.push(Point::new(x as f64, y as f64));
        scores.push(v);
        if cfg.nms {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    if ((dx * dx + dy * dy) as f64) < r2 {
                        suppressed[sy as usize * w + sx as usize] = true;
                    }
                }
            }
        }
    }
    PointSet::with_scores(points, scores)
}

/// Keeps the `k` highest-scoring points (stable for ties).
pub fn top_k(points: &PointSet, k: usize) -> PointSet {
    points.select(&top_k_indices(points, k))
}

/// Indices of the `k` highest-scoring points, best first; without scores the
/// first `k` points.
pub fn top_k_indices(points: &PointSet, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    if let Some(scores) = &points.scores {
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }
    idx.truncate(k);
    idx
}
