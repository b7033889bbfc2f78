//! Planar projective geometry: homographies, point projection, image and
//! heatmap warping, validity masks, blur and bilinear sampling.
//!
//! Pixel `(x, y)` is the center of column `x`, row `y`; a coordinate is
//! inside a `W x H` grid when `0 <= x <= W - 1` and `0 <= y <= H - 1`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, Tensor3};

/// Perspective divides with `|w|` below this are rejected.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-9;
const MIN_DET: f64 = 1e-12;
const SAMPLE_ATTEMPTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn in_bounds(self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x <= (width - 1) as f64
            && self.y <= (height - 1) as f64
    }
}

/// Keypoint coordinates with optional per-point scores.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointSet {
    pub points: Vec<Point>,
    pub scores: Option<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, scores: None }
    }

    pub fn with_scores(points: Vec<Point>, scores: Vec<f64>) -> Self {
        debug_assert_eq!(points.len(), scores.len());
        Self { points, scores: Some(scores) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn score(&self, i: usize) -> Option<f64> {
        self.scores.as_ref().map(|s| s[i])
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        PointSet {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            scores: self.scores.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }
}

impl FromIterator<Point> for PointSet {
    fn from_iter<T: IntoIterator<Item = Point>>(iter: T) -> Self {
        PointSet::new(iter.into_iter().collect())
    }
}

/// Invertible 3x3 projective map in pixel units, normalized so `m[2][2] = 1`.
#[derive(Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl fmt::Debug for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Homography").field(&self.to_row_major()).finish()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularHomography { det: f64::NAN });
        }
        let s = m[(2, 2)];
        if s.abs() < MIN_DET {
            return Err(Error::SingularHomography { det: m.determinant() });
        }
        let m = m / s;
        let det = m.determinant();
        if det.abs() <= MIN_DET || !det.is_finite() {
            return Err(Error::SingularHomography { det });
        }
        Ok(Self { m })
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    /// Rotation by `theta` radians about `(cx, cy)`.
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            m: Matrix3::new(
                c,
                -s,
                cx - (c * cx - s * cy),
                s,
                c,
                cy - (s * cx + c * cy),
                0.0,
                0.0,
                1.0,
            ),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn inverse(&self) -> Self {
        let inv = self.m.try_inverse().expect("homography invariant: invertible");
        Self { m: inv / inv[(2, 2)] }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    pub fn is_identity(&self) -> bool {
        self.m == Matrix3::identity()
    }

    /// Homogeneous projection of one point; `None` near the line at infinity.
    #[inline]
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        if w.abs() < MIN_HOMOGENEOUS_W {
            return None;
        }
        let x = m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)];
        let y = m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)];
        if w == 1.0 {
            Some(Point::new(x, y))
        } else {
            Some(Point::new(x / w, y / w))
        }
    }

    /// Normalized direct linear transform from `src -> dst` correspondences
    /// (at least 4, not all collinear).
    pub fn from_correspondences(src: &[Point], dst: &[Point]) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::Shape(format!(
                "{} source points vs {} destination points",
                src.len(),
                dst.len()
            )));
        }
        if src.len() < 4 {
            return Err(Error::Empty("at least 4 correspondences are required"));
        }
        let (ts, ns) = hartley_normalization(src);
        let (td, nd) = hartley_normalization(dst);
        let rows = (2 * src.len()).max(9);
        let mut a = DMatrix::<f64>::zeros(rows, 9);
        for (i, (p, q)) in ns.iter().zip(&nd).enumerate() {
            let (x, y, u, v) = (p.x, p.y, q.x, q.y);
            let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
            let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
            for c in 0..9 {
                a[(2 * i, c)] = r0[c];
                a[(2 * i + 1, c)] = r1[c];
            }
        }
        let svd = a.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Shape("SVD failed".into()))?;
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nine singular values");
        let h = v_t.row(k);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let td_inv = td.try_inverse().ok_or(Error::SingularHomography { det: 0.0 })?;
        Self::from_matrix(td_inv * hn * ts)
    }
}

fn hartley_normalization(pts: &[Point]) -> (Matrix3<f64>, Vec<Point>) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_d = pts.iter().map(|p| Point::new(cx, cy).dist(*p)).sum::<f64>() / n;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|p| Point::new(s * (p.x - cx), s * (p.y - cy))).collect();
    (t, out)
}

/// Projects every point through `h`, preserving order.
pub fn project_points(points: &PointSet, h: &Homography) -> Result<PointSet> {
    let mut out = Vec::with_capacity(points.len());
    for (index, p) in points.points.iter().enumerate() {
        match h.apply(*p) {
            Some(q) => out.push(q),
            None => {
                let m = h.matrix();
                let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
                return Err(Error::PointAtInfinity { index, x: p.x, y: p.y, w });
            }
        }
    }
    Ok(PointSet { points: out, scores: points.scores.clone() })
}

/// Keeps points inside a `width x height` image; returns survivors and their
/// original indices.
pub fn filter_in_bounds(points: &PointSet, height: usize, width: usize) -> (PointSet, Vec<usize>) {
    let kept: Vec<usize> = points
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.in_bounds(width, height))
        .map(|(i, _)| i)
        .collect();
    (points.select(&kept), kept)
}

/// Random homography magnitudes. Pixel quantities refer to the crop size the
/// homography is sampled for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomographyConfig {
    pub max_shift_px: f64,
    pub max_perspective_px: f64,
    pub max_rotation_rad: f64,
    /// Also warp the source image `I` by an independent random homography.
    pub warp_both: bool,
    /// Magnitude of the source-side homography relative to the pair homography.
    pub warp_both_scale: f64,
}

impl Default for HomographyConfig {
    fn default() -> Self {
        Self {
            max_shift_px: 14.0,
            max_perspective_px: 85.0,
            max_rotation_rad: 0.08,
            warp_both: false,
            warp_both_scale: 0.5,
        }
    }
}

impl HomographyConfig {
    pub fn zero() -> Self {
        Self {
            max_shift_px: 0.0,
            max_perspective_px: 0.0,
            max_rotation_rad: 0.0,
            warp_both: false,
            warp_both_scale: 0.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            max_shift_px: self.max_shift_px * factor,
            max_perspective_px: self.max_perspective_px * factor,
            max_rotation_rad: self.max_rotation_rad * factor,
            warp_both: false,
            warp_both_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("max_shift_px", self.max_shift_px),
            ("max_perspective_px", self.max_perspective_px),
            ("max_rotation_rad", self.max_rotation_rad),
            ("warp_both_scale", self.warp_both_scale),
        ];
        for (key, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    key: format!("homography.{key}"),
                    reason: format!("must be finite and nonnegative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// A sampled homography with the corner correspondences it was built from.
#[derive(Clone, Debug)]
pub struct SampledHomography {
    pub homography: Homography,
    pub src_corners: [Point; 4],
    pub dst_corners: [Point; 4],
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn convex_quad(q: &[Point; 4], min_area: f64) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross.abs() < min_area {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Samples a random homography for a `width x height` crop: corner shifts,
/// a side and/or top-bottom perspective pinch, then a rotation about the
/// image center.
pub fn sample_homography_corners(
    cfg: &HomographyConfig,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<SampledHomography> {
    let (wm, hm) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    let src = [Point::new(0.0, 0.0), Point::new(wm, 0.0), Point::new(wm, hm), Point::new(0.0, hm)];
    let min_area = 1e-3 * (wm * hm).max(1.0);
    for _ in 0..SAMPLE_ATTEMPTS {
        let mut q = src;
        let mut perturbed = false;
        if cfg.max_shift_px > 0.0 {
            for p in &mut q {
                p.x += symmetric(rng, cfg.max_shift_px);
                p.y += symmetric(rng, cfg.max_shift_px);
            }
            perturbed = true;
        }
        if cfg.max_perspective_px > 0.0 {
            // 0: left/right sides, 1: top/bottom, 2: both
            let mode = rng.random_range(0..3u8);
            if mode != 1 {
                let d = symmetric(rng, cfg.max_perspective_px);
                q[0].y += d;
                q[3].y -= d;
                q[1].y -= d;
                q[2].y += d;
            }
            if mode != 0 {
                let e = symmetric(rng, cfg.max_perspective_px);
                q[0].x += e;
                q[1].x -= e;
                q[3].x -= e;
                q[2].x += e;
            }
            perturbed = true;
        }
        let theta = symmetric(rng, cfg.max_rotation_rad);
        let rot = Homography::rotation_about(theta, wm / 2.0, hm / 2.0);
        if !convex_quad(&q, min_area) {
            continue;
        }
        let persp = if perturbed {
            match Homography::from_correspondences(&src, &q) {
                Ok(h) => h,
                Err(_) => continue,
            }
        } else {
            Homography::identity()
        };
        let homography = if theta == 0.0 { persp } else { rot.compose(&persp)? };
        let mut dst = [Point::default(); 4];
        let mut ok = true;
        for (d, s) in dst.iter_mut().zip(&src) {
            match homography.apply(*s) {
                Some(p) => *d = p,
                None => ok = false,
            }
        }
        if ok {
            return Ok(SampledHomography { homography, src_corners: src, dst_corners: dst });
        }
    }
    Err(Error::DegenerateHomography { attempts: SAMPLE_ATTEMPTS })
}

pub fn sample_homography(
    cfg: &HomographyConfig,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<Homography> {
    sample_homography_corners(cfg, width, height, rng).map(|s| s.homography)
}

/// Four bilinear taps `(flat index, weight)` for a coordinate inside a
/// `width x height` grid. Integer coordinates put all weight on one tap.
#[inline]
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

#[inline]
fn gather(data: &[f64], taps: &[(usize, f64); 4]) -> f64 {
    taps.iter().map(|&(i, w)| w * data[i]).sum()
}

/// Bilinear samples of a single-channel grid. Out-of-range coordinates are an error.
pub fn bilinear_sample(grid: &Image, coords: &PointSet) -> Result<Vec<f64>> {
    coords
        .points
        .iter()
        .map(|p| {
            bilinear_taps(p.x, p.y, grid.width(), grid.height())
                .map(|t| gather(grid.data(), &t))
                .ok_or(Error::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    width: grid.width(),
                    height: grid.height(),
                })
        })
        .collect()
}

/// Bilinear samples of every channel of a `C x H x W` field; returns `N x C` row-major.
pub fn bilinear_sample_channels(field: &Tensor3, coords: &PointSet) -> Result<Vec<f64>> {
    let c = field.channels;
    let mut out = Vec::with_capacity(coords.len() * c);
    for p in &coords.points {
        let taps = bilinear_taps(p.x, p.y, field.width, field.height).ok_or(Error::OutOfBounds {
            x: p.x,
            y: p.y,
            width: field.width,
            height: field.height,
        })?;
        for ch in 0..c {
            out.push(gather(field.plane(ch), &taps));
        }
    }
    Ok(out)
}

/// Binary mask over the destination grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub count_nonzero: usize,
}

impl ValidityMask {
    pub fn from_bits(width: usize, height: usize, data: Vec<bool>) -> Self {
        let count_nonzero = data.iter().filter(|&&b| b).count();
        Self { width, height, data, count_nonzero }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}

/// Inverse-mapping resampler for one homography and grid size. Holds the
/// bilinear taps of every destination pixel so the same warp can be applied
/// to several fields and transposed for backpropagation.
#[derive(Clone, Debug)]
pub struct Warp {
    width: usize,
    height: usize,
    taps: Vec<Option<[(usize, f64); 4]>>,
}

impl Warp {
    /// Warp from a `width x height` source to a grid of the same size.
    pub fn new(h: &Homography, width: usize, height: usize) -> Self {
        let inv = h.inverse();
        let mut taps = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let t = inv
                    .apply(Point::new(x as f64, y as f64))
                    .and_then(|q| bilinear_taps(q.x, q.y, width, height));
                taps.push(t);
            }
        }
        Self { width, height, taps }
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.width * self.height);
        self.taps
            .iter()
            .map(|t| match t {
                Some(t) => gather(src, t),
                None => 0.0,
            })
            .collect()
    }

    /// Transpose of [`Warp::apply`].
    pub fn apply_adjoint(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.width * self.height];
        for (t, &go) in self.taps.iter().zip(grad_out) {
            if let Some(t) = t {
                for &(i, w) in t {
                    g[i] += w * go;
                }
            }
        }
        g
    }

    pub fn mask(&self) -> ValidityMask {
        ValidityMask::from_bits(self.width, self.height, self.taps.iter().map(Option::is_some).collect())
    }
}

/// Bilinear inverse-mapping warp; pixels whose preimage leaves the source are 0.
pub fn warp_image(img: &Image, h: &Homography) -> Result<Image> {
    check_invertible(h)?;
    let warp = Warp::new(h, img.width(), img.height());
    Ok(Image::from_raw(img.width(), img.height(), warp.apply(img.data())))
}

/// Warps a heatmap exactly like an image.
pub fn project_heatmap(hm: &Image, h: &Homography) -> Result<Image> {
    warp_image(hm, h)
}

/// Pixels of the warped grid whose inverse projection lands inside the source.
pub fn valid_mask(height: usize, width: usize, h: &Homography) -> ValidityMask {
    Warp::new(h, width, height).mask()
}

fn check_invertible(h: &Homography) -> Result<()> {
    let det = h.matrix().determinant();
    if det.abs() <= MIN_DET || !det.is_finite() {
        return Err(Error::SingularHomography { det });
    }
    Ok(())
}

/// Separable Gaussian with reflect (mirror, edge not repeated) padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurConfig {
    pub radius: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { radius: 2, sigma: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianBlur {
    radius: usize,
    kernel: Vec<f64>,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

impl GaussianBlur {
    pub fn new(cfg: &BlurConfig) -> Self {
        let r = cfg.radius as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|t| (-(t * t) as f64 / (2.0 * cfg.sigma * cfg.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        Self { radius: cfg.radius, kernel: raw.into_iter().map(|v| v / sum).collect() }
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    fn pass(&self, src: &[f64], width: usize, height: usize, horizontal: bool) -> Vec<f64> {
        let r = self.radius as isize;
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (k, &w) in self.kernel.iter().enumerate() {
                    let off = k as isize - r;
                    let idx = if horizontal {
                        y * width + reflect(x as isize + off, width)
                    } else {
                        reflect(y as isize + off, height) * width + x
                    };
                    acc += w * src[idx];
                }
                out[y * width + x] = acc;
            }
        }
        out
    }

    fn pass_adjoint(&self, grad: &[f64], width: usize, height: usize, horizontal: bool) -> Vec<f64> {
        let r = self.radius as isize;
        let mut out = vec![0.0; grad.len()];
        for y in 0..height {
            for x in 0..width {
                let g = grad[y * width + x];
                for (k, &w) in self.kernel.iter().enumerate() {
                    let off = k as isize - r;
                    let idx = if horizontal {
                        y * width + reflect(x as isize + off, width)
                    } else {
                        reflect(y as isize + off, height) * width + x
                    };
                    out[idx] += w * g;
                }
            }
        }
        out
    }

    pub fn apply_raw(&self, src: &[f64], width: usize, height: usize) -> Vec<f64> {
        let h = self.pass(src, width, height, true);
        self.pass(&h, width, height, false)
    }

    /// Transpose of [`GaussianBlur::apply_raw`].
    pub fn apply_adjoint(&self, grad: &[f64], width: usize, height: usize) -> Vec<f64> {
        let v = self.pass_adjoint(grad, width, height, false);
        self.pass_adjoint(&v, width, height, true)
    }

    pub fn apply(&self, img: &Image) -> Image {
        Image::from_raw(img.width(), img.height(), self.apply_raw(img.data(), img.width(), img.height()))
    }
}

/// 5x5 Gaussian, sigma 1.
pub fn gaussian_blur(hm: &Image) -> Image {
    GaussianBlur::new(&BlurConfig::default()).apply(hm)
}

/// Homographies as 9 whitespace-separated row-major decimals, one per line.
/// A file holding exactly 9 numbers in any layout (e.g. 3x3) is one homography.
pub fn parse_homographies(text: &str) -> std::result::Result<Vec<Homography>, String> {
    let lines: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect())
        .collect::<std::result::Result<_, _>>()?;
    let flat: Vec<f64> = lines.iter().flatten().copied().collect();
    let groups: Vec<Vec<f64>> = if lines.iter().all(|l| l.len() == 9) {
        lines
    } else if flat.len() == 9 {
        vec![flat]
    } else {
        return Err(format!("expected 9 values per line, found {} values", flat.len()));
    };
    groups
        .into_iter()
        .map(|g| {
            let mut a = [0.0; 9];
            a.copy_from_slice(&g);
            Homography::from_row_major(a).map_err(|e| e.to_string())
        })
        .collect()
}

pub fn read_homographies(path: &Path) -> Result<Vec<Homography>> {
    let text = std::fs::read_to_string(path)?;
    parse_homographies(&text).map_err(|reason| Error::Parse { path: path.to_path_buf(), reason })
}

pub fn format_homography(h: &Homography) -> String {
    h.to_row_major().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

pub fn write_homographies(path: &Path, hs: &[Homography]) -> Result<()> {
    let mut s = String::new();
    for h in hs {
        s.push_str(&format_homography(h));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// `(x, y) -> (h00 x + h01 y + h02, ...)` without the perspective divide.
pub fn homogeneous(h: &Homography, p: Point) -> Vector3<f64> {
    h.matrix() * Vector3::new(p.x, p.y, 1.0)
}
