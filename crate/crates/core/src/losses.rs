//! Training objectives and their gradients with respect to heatmaps and
//! interpolated descriptors.
//!
//! Every `*_with_grad` function returns the loss value together with the
//! gradient of that value; the plain functions return only the value.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, BlurConfig, GaussianBlur, Homography, PointSet, Warp};
use crate::grid::Heatmap;
use crate::matching::{dot, DescriptorMatch, GeometricMatch};
use crate::model::Descriptors;

/// Probabilities are clamped here before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the descriptor loss.
    pub descriptor: f64,
    /// Weight of the detector loss.
    pub detector: f64,
    /// Weight of the heatmap consistency term inside the detector loss.
    pub heatmap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { descriptor: 1.0, detector: 1.0, heatmap: 2000.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Pairs further apart than this (strictly) count as wrong matches.
    pub wrong_min_dist_px: f64,
    pub n_random: usize,
    /// Restrict the ground-truth descriptor term to consistency-accepted pairs.
    pub gt_accepted_only: bool,
    pub blur: BlurConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            wrong_min_dist_px: 7.0,
            n_random: 2,
            gt_accepted_only: false,
            blur: BlurConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (key, v) in [("descriptor", w.descriptor), ("detector", w.detector), ("heatmap", w.heatmap)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    key: format!("loss.weights.{key}"),
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        if !(self.blur.sigma > 0.0) {
            return Err(Error::Config { key: "loss.blur.sigma".into(), reason: "must be positive".into() });
        }
        Ok(())
    }
}

/// Loss value with gradients for a pair of heatmaps.
#[derive(Clone, Debug)]
pub struct HeatmapTerm {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_p_h: Vec<f64>,
    /// Pixel count of the mask (heatmap term) or number of targets (keypoint term).
    pub count: usize,
    pub skipped: bool,
}

fn log_likelihood(hm: &Heatmap, pts: &PointSet, scale: f64, grad: &mut [f64]) -> Result<f64> {
    let mut acc = 0.0;
    for p in &pts.points {
        let taps = bilinear_taps(p.x, p.y, hm.width(), hm.height()).ok_or(Error::OutOfBounds {
            x: p.x,
            y: p.y,
            width: hm.width(),
            height: hm.height(),
        })?;
        let v: f64 = taps.iter().map(|&(i, w)| w * hm.data()[i]).sum();
        if v > LOG_FLOOR {
            acc += v.ln();
            for &(i, w) in &taps {
                grad[i] += scale * w / v;
            }
        } else {
            acc += LOG_FLOOR.ln();
        }
    }
    Ok(acc)
}

/// Mean negative log-likelihood of the targets in both heatmaps, averaged
/// over the two images. Fractional targets are bilinearly sampled.
pub fn keypoint_loss_with_grad(
    p: &Heatmap,
    p_h: &Heatmap,
    targets_src: &PointSet,
    targets_warp: &PointSet,
) -> Result<HeatmapTerm> {
    let n = targets_src.len();
    if n != targets_warp.len() {
        return Err(Error::Shape(format!("{n} source targets vs {} warped", targets_warp.len())));
    }
    let mut grad_p = vec![0.0; p.data().len()];
    let mut grad_p_h = vec![0.0; p_h.data().len()];
    if n == 0 {
        return Ok(HeatmapTerm { value: 0.0, grad_p, grad_p_h, count: 0, skipped: true });
    }
    let scale = -0.5 / n as f64;
    let a = log_likelihood(p, targets_src, scale, &mut grad_p)?;
    let b = log_likelihood(p_h, targets_warp, scale, &mut grad_p_h)?;
    Ok(HeatmapTerm { value: scale * (a + b), grad_p, grad_p_h, count: n, skipped: false })
}

pub fn keypoint_loss(p: &Heatmap, p_h: &Heatmap, targets_src: &PointSet, targets_warp: &PointSet) -> Result<f64> {
    keypoint_loss_with_grad(p, p_h, targets_src, targets_warp).map(|t| t.value)
}

/// `lambda_h / N_mask * Σ_mask (blur(warp(P)) - blur(P_h))²`.
pub fn heatmap_loss_with_grad(
    p: &Heatmap,
    p_h: &Heatmap,
    h: &Homography,
    lambda_h: f64,
    blur: &GaussianBlur,
) -> Result<HeatmapTerm> {
    if p.width() != p_h.width() || p.height() != p_h.height() {
        return Err(Error::Shape(format!(
            "heatmaps {}x{} and {}x{}",
            p.width(),
            p.height(),
            p_h.width(),
            p_h.height()
        )));
    }
    let (w, ht) = (p.width(), p.height());
    let warp = Warp::new(h, w, ht);
    let mask = warp.mask();
    if mask.count_nonzero == 0 {
        return Err(Error::EmptyMask);
    }
    let a = blur.apply_raw(&warp.apply(p.data()), w, ht);
    let b = blur.apply_raw(p_h.data(), w, ht);
    let n = mask.count_nonzero as f64;
    let mut value = 0.0;
    let mut d = vec![0.0; w * ht];
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            let diff = a[i] - b[i];
            value += diff * diff;
            d[i] = 2.0 * lambda_h / n * diff;
        }
    }
    let g_blur = blur.apply_adjoint(&d, w, ht);
    let grad_p = warp.apply_adjoint(&g_blur);
    let grad_p_h = g_blur.iter().map(|v| -v).collect();
    Ok(HeatmapTerm { value: lambda_h * value / n, grad_p, grad_p_h, count: mask.count_nonzero, skipped: false })
}

pub fn heatmap_loss(p: &Heatmap, p_h: &Heatmap, h: &Homography, lambda_h: f64) -> Result<f64> {
    let blur = GaussianBlur::new(&BlurConfig::default());
    heatmap_loss_with_grad(p, p_h, h, lambda_h, &blur).map(|t| t.value)
}

/// Row assignments for the random-pair descriptor term: `shuffles[r][i]` is
/// the row of `D_h` paired with row `i` of `D_proj`, never equal to
/// `geometric_idx[i]`. `None` when `D_h` has fewer than 2 rows.
pub fn random_pairings(
    geometric_idx: &[usize],
    rows_h: usize,
    n_random: usize,
    rng: &mut impl Rng,
) -> Option<Vec<Vec<usize>>> {
    if rows_h < 2 {
        return None;
    }
    let n = geometric_idx.len();
    let mut out = Vec::with_capacity(n_random);
    for _ in 0..n_random {
        let mut perm: Vec<usize> = (0..rows_h).collect();
        perm.shuffle(rng);
        let mut sigma: Vec<usize> = (0..n).map(|i| perm[i % rows_h]).collect();
        for i in 0..n {
            let g = geometric_idx[i];
            if sigma[i] != g {
                continue;
            }
            let start = rng.random_range(0..n.max(1));
            let swap = (0..n)
                .map(|o| (start + o) % n)
                .find(|&k| k != i && sigma[k] != g && sigma[i] != geometric_idx[k]);
            match swap {
                Some(k) => sigma.swap(i, k),
                None => sigma[i] = (g + 1 + rng.random_range(0..rows_h - 1)) % rows_h,
            }
        }
        out.push(sigma);
    }
    Some(out)
}

/// The three descriptor terms with per-term gradients.
#[derive(Clone, Debug, Default)]
pub struct DescriptorTerms {
    pub gt: f64,
    pub wrong: f64,
    pub random: f64,
    pub n_gt: usize,
    pub n_wrong: usize,
    pub n_random_pairs: usize,
    pub random_skipped: bool,
    /// `[gt, wrong, random]` gradients with respect to `D_proj`.
    pub grad_proj: [Vec<f64>; 3],
    /// `[gt, wrong, random]` gradients with respect to `D_h`.
    pub grad_h: [Vec<f64>; 3],
}

impl DescriptorTerms {
    pub fn total(&self) -> f64 {
        self.gt + self.wrong + self.random
    }
}

/// Inputs of [`descriptor_loss_with_grad`] that are fixed by matching.
pub struct DescriptorLossInputs<'a> {
    pub d_proj: &'a Descriptors,
    pub d_h: &'a Descriptors,
    pub geometric: &'a GeometricMatch,
    pub descriptor: &'a DescriptorMatch,
    /// Rows entering the ground-truth term when `gt_accepted_only` is set.
    pub accepted: Option<&'a [usize]>,
    pub pairings: Option<&'a [Vec<usize>]>,
}

/// `L_gt` averages `1 - cos` over geometric pairs, `L_wrong` averages `cos`
/// over pairs whose descriptor match disagrees and that are more than
/// `wrong_min_dist` apart, and `L_random` averages `cos` over every random
/// pairing (mean over rows, then over pairings). Empty sets contribute 0.
pub fn descriptor_loss_with_grad(inp: &DescriptorLossInputs<'_>, wrong_min_dist: f64) -> Result<DescriptorTerms> {
    let (dp, dh) = (inp.d_proj, inp.d_h);
    let n = dp.len();
    if inp.geometric.idx.len() != n || inp.descriptor.idx.len() != n {
        return Err(Error::Shape(format!(
            "{n} descriptors, {} geometric and {} descriptor matches",
            inp.geometric.idx.len(),
            inp.descriptor.idx.len()
        )));
    }
    let dim = if dp.dim > 0 { dp.dim } else { dh.dim };
    let zeros_p = || vec![0.0; n * dim];
    let zeros_h = || vec![0.0; dh.len() * dim];
    let mut t = DescriptorTerms {
        grad_proj: [zeros_p(), zeros_p(), zeros_p()],
        grad_h: [zeros_h(), zeros_h(), zeros_h()],
        ..Default::default()
    };
    if n == 0 || dh.is_empty() {
        t.random_skipped = true;
        return Ok(t);
    }

    let add = |gp: &mut Vec<f64>, gh: &mut Vec<f64>, i: usize, j: usize, s: f64| {
        for c in 0..dim {
            gp[i * dim + c] += s * dh.row(j)[c];
            gh[j * dim + c] += s * dp.row(i)[c];
        }
    };

    let gt_rows: Vec<usize> = match inp.accepted {
        Some(rows) => rows.to_vec(),
        None => (0..n).collect(),
    };
    if !gt_rows.is_empty() {
        let s = -1.0 / gt_rows.len() as f64;
        let mut acc = 0.0;
        for &i in &gt_rows {
            let j = inp.geometric.idx[i];
            acc += 1.0 - dot(dp.row(i), dh.row(j));
            let [g0, _, _] = &mut t.grad_proj;
            let [h0, _, _] = &mut t.grad_h;
            add(g0, h0, i, j, s);
        }
        t.gt = acc / gt_rows.len() as f64;
        t.n_gt = gt_rows.len();
    }

    let wrong: Vec<usize> = (0..n)
        .filter(|&i| inp.geometric.idx[i] != inp.descriptor.idx[i] && inp.geometric.dist[i] > wrong_min_dist)
        .collect();
    if !wrong.is_empty() {
        let s = 1.0 / wrong.len() as f64;
        let mut acc = 0.0;
        for &i in &wrong {
            let j = inp.geometric.idx[i];
            acc += dot(dp.row(i), dh.row(j));
            let [_, g1, _] = &mut t.grad_proj;
            let [_, h1, _] = &mut t.grad_h;
            add(g1, h1, i, j, s);
        }
        t.wrong = acc / wrong.len() as f64;
        t.n_wrong = wrong.len();
    }

    match inp.pairings {
        Some(pairings) if !pairings.is_empty() => {
            let total = pairings.len() * n;
            let s = 1.0 / total as f64;
            let mut acc = 0.0;
            for sigma in pairings {
                if sigma.len() != n {
                    return Err(Error::Shape(format!("pairing of length {} for {n} rows", sigma.len())));
                }
                for (i, &j) in sigma.iter().enumerate() {
                    acc += dot(dp.row(i), dh.row(j));
                    let [_, _, g2] = &mut t.grad_proj;
                    let [_, _, h2] = &mut t.grad_h;
                    add(g2, h2, i, j, s);
                }
            }
            t.random = acc * s;
            t.n_random_pairs = total;
        }
        _ => t.random_skipped = true,
    }
    Ok(t)
}

/// Convenience wrapper drawing the random pairings from `rng`.
pub fn descriptor_loss(
    d_proj: &Descriptors,
    d_h: &Descriptors,
    geometric: &GeometricMatch,
    descriptor: &DescriptorMatch,
    rng: &mut impl Rng,
    n_random: usize,
) -> Result<(f64, f64, f64)> {
    let pairings = random_pairings(&geometric.idx, d_h.len(), n_random, rng);
    let t = descriptor_loss_with_grad(
        &DescriptorLossInputs {
            d_proj,
            d_h,
            geometric,
            descriptor,
            accepted: None,
            pairings: pairings.as_deref(),
        },
        7.0,
    )?;
    Ok((t.gt, t.wrong, t.random))
}

/// All loss components of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub keypoints: f64,
    pub heatmaps: f64,
    pub gt: f64,
    pub wrong: f64,
    pub random: f64,
    pub n_gt: usize,
    pub n_wrong: usize,
    pub n_random_pairs: usize,
    pub n_mask: usize,
    pub n_targets: usize,
    /// No batch element produced targets; the keypoint term was skipped.
    pub keypoints_skipped: bool,
}

impl LossReport {
    pub fn descriptor(&self) -> f64 {
        self.gt + self.wrong + self.random
    }

    pub fn detector(&self) -> f64 {
        self.keypoints + self.heatmaps
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.keypoints, self.heatmaps, self.gt, self.wrong, self.random]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted combination of the components.
pub fn total_loss(mut report: LossReport, weights: &LossWeights) -> LossReport {
    report.total = weights.descriptor * report.descriptor() + weights.detector * report.detector();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::grid::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keypoint_loss_closed_forms() {
        let targets = PointSet::new(vec![Point::new(1.0, 2.0), Point::new(5.0, 5.0)]);
        let ones = Image::filled(8, 8, 1.0);
        assert_eq!(keypoint_loss(&ones, &ones, &targets, &targets).unwrap(), 0.0);
        let uniform = Image::filled(8, 8, 1.0 / 64.0);
        let l = keypoint_loss(&uniform, &uniform, &targets, &targets).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
        let t = keypoint_loss_with_grad(&uniform, &uniform, &PointSet::default(), &PointSet::default()).unwrap();
        assert!(t.skipped && t.value == 0.0);
    }

    #[test]
    fn heatmap_loss_closed_forms() {
        let p = Image::from_fn(16, 16, |x, y| ((x * 3 + y) % 7) as f64 / 7.0);
        assert_eq!(heatmap_loss(&p, &p, &Homography::identity(), 2000.0).unwrap(), 0.0);
        let a = Image::filled(16, 16, 0.3);
        let b = Image::filled(16, 16, 0.1);
        let l = heatmap_loss(&a, &b, &Homography::identity(), 2000.0).unwrap();
        assert!((l - 2000.0 * 0.04).abs() < 1e-9);
        let off = Homography::translation(100.0, 0.0);
        assert!(matches!(heatmap_loss(&a, &b, &off, 1.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn pairings_avoid_geometric_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..200 {
            let m = 2 + trial % 6;
            let n = 1 + (trial * 7) % 9;
            let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let pairings = random_pairings(&g, m, 3, &mut rng).unwrap();
            assert_eq!(pairings.len(), 3);
            for sigma in pairings {
                assert_eq!(sigma.len(), n);
                for (i, &j) in sigma.iter().enumerate() {
                    assert!(j < m && j != g[i]);
                }
            }
        }
        assert!(random_pairings(&[0], 1, 2, &mut rng).is_none());
    }

    #[test]
    fn identical_descriptors_zero_gt() {
        let d = Descriptors::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gm = GeometricMatch { dist: vec![0.0, 0.0], idx: vec![0, 1] };
        let dm = DescriptorMatch { idx: vec![0, 1], similarity: vec![1.0, 1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gt, wrong, random) = descriptor_loss(&d, &d, &gm, &dm, &mut rng, 2).unwrap();
        assert_eq!(gt, 0.0);
        assert_eq!(wrong, 0.0);
        // The only non-neighbour pairing is orthogonal.
        assert_eq!(random, 0.0);
    }

    #[test]
    fn total_combination() {
        let r = LossReport { keypoints: 1.5, heatmaps: 0.25, gt: 0.5, wrong: 0.2, random: -0.1, ..Default::default() };
        let w = LossWeights { descriptor: 0.0, detector: 2.0, heatmap: 2000.0 };
        assert_eq!(total_loss(r.clone(), &w).total, 3.5);
        let w = LossWeights { descriptor: 3.0, detector: 0.0, heatmap: 2000.0 };
        assert!((total_loss(r, &w).total - 1.8).abs() < 1e-12);
    }
}
