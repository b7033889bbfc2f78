//! Brute-force reference implementations used by the test suites. Nothing here
//! calls into the library's numeric kernels; inputs and outputs are plain
//! arrays and tuples.

#![allow(dead_code)]

pub type Mat3 = [[f64; 3]; 3];
pub type Pt = (f64, f64);

/// Homogeneous multiply and divide. `None` when the third coordinate is
/// (numerically) zero.
pub fn h_apply(m: &Mat3, p: Pt) -> Option<Pt> {
    let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
    if w.abs() < 1e-12 {
        return None;
    }
    let x = m[0][0] * p.0 + m[0][1] * p.1 + m[0][2];
    let y = m[1][0] * p.0 + m[1][1] * p.1 + m[1][2];
    Some((x / w, y / w))
}

/// Inverse through the adjugate.
pub fn h_inv(m: &Mat3) -> Mat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * c(1, 2, 1, 2) - m[0][1] * c(1, 2, 0, 2) + m[0][2] * c(1, 2, 0, 1);
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for k in 0..3 {
            out[r][k] = adj[r][k] / det;
        }
    }
    out
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for k in 0..3 {
            out[r][k] = (0..3).map(|j| a[r][j] * b[j][k]).sum();
        }
    }
    out
}

pub fn inside(p: Pt, w: usize, h: usize) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (w - 1) as f64 && p.1 <= (h - 1) as f64
}

fn dist(a: Pt, b: Pt) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Tent-weighted sum over every grid node; `None` outside the grid.
pub fn scalar_bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !inside((x, y), w, h) {
        return None;
    }
    let mut acc = 0.0;
    for j in 0..h {
        let wy = 1.0 - (y - j as f64).abs();
        if wy <= 0.0 {
            continue;
        }
        for i in 0..w {
            let wx = 1.0 - (x - i as f64).abs();
            if wx <= 0.0 {
                continue;
            }
            acc += wx * wy * data[j * w + i];
        }
    }
    Some(acc)
}

/// Pixels of the warped grid whose preimage under `m` lies inside the source.
pub fn brute_mask(m: &Mat3, w: usize, h: usize) -> Vec<bool> {
    let inv = h_inv(m);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(h_apply(&inv, (x as f64, y as f64)).is_some_and(|p| inside(p, w, h)));
        }
    }
    out
}

/// Nearest neighbour in `b` for every point of `a`; ties go to the lowest index.
pub fn brute_nn(a: &[Pt], b: &[Pt]) -> Vec<(usize, f64)> {
    a.iter()
        .map(|&p| {
            let mut best = (0, f64::INFINITY);
            for (j, &q) in b.iter().enumerate() {
                let d = dist(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Row of `b` with the largest cosine similarity to each row of `a`.
pub fn brute_desc_nn(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<(usize, f64)> {
    a.iter()
        .map(|u| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, v) in b.iter().enumerate() {
                let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteTargets {
    /// Indices of `k` whose projection lands inside the image.
    pub kept: Vec<usize>,
    /// Positions within `kept` that were accepted.
    pub accepted: Vec<usize>,
    pub source: Vec<Pt>,
    pub warped: Vec<Pt>,
}

/// Target estimation done one step at a time: project, keep in-bounds,
/// geometric and descriptor nearest neighbours, accept when both agree and the
/// distance is below `theta`, take midpoints, map back and drop those that
/// leave the source image.
#[allow(clippy::too_many_arguments)]
pub fn brute_targets(
    k: &[Pt],
    k_h: &[Pt],
    d_proj: &[Vec<f64>],
    d_h: &[Vec<f64>],
    m: &Mat3,
    theta: f64,
    w: usize,
    h: usize,
) -> BruteTargets {
    let mut kept = Vec::new();
    let mut projected = Vec::new();
    for (i, &p) in k.iter().enumerate() {
        let q = h_apply(m, p).expect("finite projection");
        if inside(q, w, h) {
            kept.push(i);
            projected.push(q);
        }
    }
    let mut out = BruteTargets { kept, accepted: vec![], source: vec![], warped: vec![] };
    if projected.is_empty() || k_h.is_empty() {
        return out;
    }
    let geo = brute_nn(&projected, k_h);
    let desc = brute_desc_nn(d_proj, d_h);
    let inv = h_inv(m);
    for i in 0..projected.len() {
        let (j, d) = geo[i];
        if j != desc[i].0 || d >= theta {
            continue;
        }
        let mid = ((projected[i].0 + k_h[j].0) / 2.0, (projected[i].1 + k_h[j].1) / 2.0);
        let back = h_apply(&inv, mid).expect("finite back-projection");
        if !inside(back, w, h) {
            continue;
        }
        out.accepted.push(i);
        out.source.push(back);
        out.warped.push(mid);
    }
    out
}

/// Ground truth for the metric oracles: a homography between two images of
/// the given sizes.
pub struct Pair {
    pub m: Mat3,
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
}

impl Pair {
    fn forward(&self, p: Pt) -> Option<Pt> {
        h_apply(&self.m, p).filter(|q| inside(*q, self.size_b.0, self.size_b.1))
    }

    fn backward(&self, p: Pt) -> Option<Pt> {
        h_apply(&h_inv(&self.m), p).filter(|q| inside(*q, self.size_a.0, self.size_a.1))
    }
}

/// (hits, total) of one direction.
fn repeat_dir(src: &[Pt], dst: &[Pt], proj: impl Fn(Pt) -> Option<Pt>, eps: f64) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for &p in src {
        if let Some(q) = proj(p) {
            total += 1;
            if dst.iter().any(|&d| dist(d, q) <= eps) {
                hits += 1;
            }
        }
    }
    (hits, total)
}

fn ratio((num, den): (usize, usize)) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn brute_repeatability(ka: &[Pt], kb: &[Pt], pair: &Pair, eps: f64) -> ((usize, usize), (usize, usize), f64) {
    let ab = repeat_dir(ka, kb, |p| pair.forward(p), eps);
    let ba = repeat_dir(kb, ka, |p| pair.backward(p), eps);
    (ab, ba, 0.5 * (ratio(ab) + ratio(ba)))
}

/// (source, target, correct) for every accepted match of one direction.
fn match_dir(
    ks: &[Pt],
    ds: &[Vec<f64>],
    kt: &[Pt],
    dt: &[Vec<f64>],
    proj: impl Fn(Pt) -> Option<Pt>,
    eps: f64,
    theta: f64,
) -> Vec<(usize, usize, bool)> {
    if kt.is_empty() {
        return vec![];
    }
    let nn = brute_desc_nn(ds, dt);
    let mut out = vec![];
    for (i, &p) in ks.iter().enumerate() {
        let Some(q) = proj(p) else { continue };
        let (j, s) = nn[i];
        if s >= theta {
            out.push((i, j, dist(q, kt[j]) <= eps));
        }
    }
    out
}

pub struct BruteMatches {
    pub a_to_b: Vec<(usize, usize, bool)>,
    pub b_to_a: Vec<(usize, usize, bool)>,
    pub precision: f64,
}

pub fn brute_precision(
    ka: &[Pt],
    da: &[Vec<f64>],
    kb: &[Pt],
    db: &[Vec<f64>],
    pair: &Pair,
    eps: f64,
    theta: f64,
) -> BruteMatches {
    let a_to_b = match_dir(ka, da, kb, db, |p| pair.forward(p), eps, theta);
    let b_to_a = match_dir(kb, db, ka, da, |p| pair.backward(p), eps, theta);
    let rate = |m: &[(usize, usize, bool)]| ratio((m.iter().filter(|x| x.2).count(), m.len()));
    let precision = 0.5 * (rate(&a_to_b) + rate(&b_to_a));
    BruteMatches { a_to_b, b_to_a, precision }
}

impl BruteMatches {
    /// Keypoints of image a that take part in a correct match.
    pub fn correct_a(&self, ka: &[Pt]) -> Vec<Pt> {
        let mut used = vec![false; ka.len()];
        for &(s, _, c) in &self.a_to_b {
            used[s] |= c;
        }
        for &(_, t, c) in &self.b_to_a {
            used[t] |= c;
        }
        ka.iter().zip(used).filter(|(_, u)| *u).map(|(p, _)| *p).collect()
    }

    pub fn correct_b(&self, kb: &[Pt]) -> Vec<Pt> {
        let mut used = vec![false; kb.len()];
        for &(s, _, c) in &self.b_to_a {
            used[s] |= c;
        }
        for &(_, t, c) in &self.a_to_b {
            used[t] |= c;
        }
        kb.iter().zip(used).filter(|(_, u)| *u).map(|(p, _)| *p).collect()
    }
}

/// Counts pixel centres within `radius` of any point, scanning the full grid.
pub fn brute_coverage(points: &[Pt], w: usize, h: usize, radius: f64, mask: Option<&[bool]>) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m[y * w + x] {
                    continue;
                }
            }
            total += 1;
            if points.iter().any(|&p| dist(p, (x as f64, y as f64)) <= radius) {
                hit += 1;
            }
        }
    }
    ratio((hit, total))
}

/// Integer lattice points within `r` of `(cx, cy)`.
pub fn lattice_count(cx: i64, cy: i64, r: i64) -> usize {
    let mut n = 0;
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                n += 1;
            }
        }
    }
    n
}

pub fn harmonic(values: &[f64]) -> f64 {
    let mut inv = 0.0;
    for &v in values {
        if v <= 0.0 {
            return 0.0;
        }
        inv += 1.0 / v;
    }
    values.len() as f64 / inv
}

/// Homography from four or more correspondences through an 8x8 linear system
/// (h22 fixed at 1) solved by Gaussian elimination with partial pivoting.
/// With more than four points the normal equations are used.
pub fn dlt(src: &[Pt], dst: &[Pt]) -> Mat3 {
    let mut ata = [[0.0; 8]; 8];
    let mut atb = [0.0; 8];
    for (&(x, y), &(u, v)) in src.iter().zip(dst) {
        let rows = [
            ([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y], u),
            ([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y], v),
        ];
        for (r, b) in rows {
            for i in 0..8 {
                atb[i] += r[i] * b;
                for j in 0..8 {
                    ata[i][j] += r[i] * r[j];
                }
            }
        }
    }
    let h = solve8(ata, atb);
    [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]
}

fn solve8(mut a: [[f64; 8]; 8], mut b: [f64; 8]) -> [f64; 8] {
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..8 {
            let f = a[r][col] / a[col][col];
            for c in col..8 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 8];
    for r in (0..8).rev() {
        let s: f64 = (r + 1..8).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Central differences of `f` at the coordinates listed in `coords`.
pub fn fd_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>, String> {
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let orig = x[c];
        x[c] = orig + step;
        let up = f(&x);
        x[c] = orig - step;
        let down = f(&x);
        x[c] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(format!("non-finite loss at coordinate {c}"));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `-mean over targets of ln(bilinear(P, t))`, averaged over both heatmaps.
pub fn scalar_keypoint_loss(p: (&[f64], usize, usize), ph: (&[f64], usize, usize), src: &[Pt], warped: &[Pt]) -> f64 {
    let n = src.len() as f64;
    let a: f64 = src.iter().map(|t| scalar_bilinear(p.0, p.1, p.2, t.0, t.1).unwrap().ln()).sum();
    let b: f64 = warped.iter().map(|t| scalar_bilinear(ph.0, ph.1, ph.2, t.0, t.1).unwrap().ln()).sum();
    -0.5 * (a + b) / n
}

/// Per-cell softmax of a `64 x hc x wc` logit volume laid out row-major
/// inside each 8x8 block.
pub fn scalar_heatmap(logits: &[f64], hc: usize, wc: usize) -> Vec<f64> {
    let (w, h) = (wc * 8, hc * 8);
    let mut out = vec![0.0; w * h];
    for cy in 0..hc {
        for cx in 0..wc {
            let vals: Vec<f64> = (0..64).map(|c| logits[c * hc * wc + cy * wc + cx]).collect();
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
            for (c, v) in vals.iter().enumerate() {
                out[(cy * 8 + c / 8) * w + cx * 8 + c % 8] = (v - mx).exp() / z;
            }
        }
    }
    out
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D convolution with the outer product of a 1-D Gaussian, mirror
/// padding without edge repetition.
pub fn scalar_blur(data: &[f64], w: usize, h: usize, radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as isize;
    let k: Vec<f64> = (-r..=r).map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = mirror(y as isize + dy, h);
                    let sx = mirror(x as isize + dx, w);
                    acc += k[(dy + r) as usize] * k[(dx + r) as usize] / (s * s) * data[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `lambda / |mask| * sum over mask of (blur(warp(P)) - blur(P_h))^2`, with the
/// warp done per pixel by inverse mapping and scalar bilinear sampling.
pub fn scalar_heatmap_loss(p: &[f64], ph: &[f64], w: usize, h: usize, m: &Mat3, lambda: f64) -> f64 {
    let inv = h_inv(m);
    let mut warped = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some(q) = h_apply(&inv, (x as f64, y as f64)) {
                if let Some(v) = scalar_bilinear(p, w, h, q.0, q.1) {
                    warped[y * w + x] = v;
                    valid[y * w + x] = true;
                }
            }
        }
    }
    let bw = scalar_blur(&warped, w, h, 2, 1.0);
    let bh = scalar_blur(ph, w, h, 2, 1.0);
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = (0..w * h).filter(|&i| valid[i]).map(|i| (bw[i] - bh[i]).powi(2)).sum();
    lambda * s / n as f64
}

#[cfg(test)]
mod self_checks {
    use super::*;

    #[test]
    fn fd_exact_on_polynomials() {
        let quad = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + x[2];
        let p = [0.7, -1.3, 2.0];
        let g = fd_gradient(quad, &p, &[0, 1, 2], 1e-5).unwrap();
        let exact = [6.0 * p[0] - 2.0 * p[1], -2.0 * p[0] + p[1], 1.0];
        for (a, b) in g.iter().zip(exact) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let lin = |x: &[f64]| 2.5 * x[0] - 4.0 * x[1] + 1.0;
        let g = fd_gradient(lin, &[0.3, 0.9], &[0, 1], 1e-5).unwrap();
        assert!((g[0] - 2.5).abs() < 1e-10 && (g[1] + 4.0).abs() < 1e-10);
    }

    #[test]
    fn fd_rejects_non_finite() {
        assert!(fd_gradient(|x: &[f64]| (x[0] - 1.0).ln(), &[1.0], &[0], 1e-5).is_err());
    }

    #[test]
    fn perspective_point_by_hand() {
        // w = 0.001 * 100 + 1 = 1.1
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.001, 0.0, 1.0]];
        let q = h_apply(&m, (100.0, 50.0)).unwrap();
        assert!((q.0 - 100.0 / 1.1).abs() < 1e-12 && (q.1 - 50.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn inverse_and_dlt_agree() {
        let m = [[1.1, 0.05, 3.0], [-0.02, 0.95, -2.0], [1e-4, -2e-4, 1.0]];
        let id = mat_mul(&m, &h_inv(&m));
        for r in 0..3 {
            for c in 0..3 {
                assert!((id[r][c] - if r == c { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let src = [(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0), (40.0, 30.0)];
        let dst: Vec<Pt> = src.iter().map(|p| h_apply(&m, *p).unwrap()).collect();
        let fit = dlt(&src, &dst);
        for r in 0..3 {
            for c in 0..3 {
                assert!((fit[r][c] - m[r][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lattice_small_radius() {
        assert_eq!(lattice_count(0, 0, 1), 5);
        assert_eq!(lattice_count(0, 0, 2), 13);
    }
}
