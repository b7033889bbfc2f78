//! Nearest-neighbour matching and consistency-filtered target estimation.

use crate::error::{Error, Result};
use crate::geometry::{filter_in_bounds, project_points, Homography, Point, PointSet};
use crate::model::Descriptors;

/// Nearest neighbour in `b` of every point of `a` by pixel distance.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GeometricMatch {
    pub dist: Vec<f64>,
    pub idx: Vec<usize>,
}

/// Nearest neighbour in `b` of every descriptor of `a` by cosine similarity.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DescriptorMatch {
    pub idx: Vec<usize>,
    pub similarity: Vec<f64>,
}

/// Exact nearest neighbours; ties resolve to the lowest index.
pub fn match_geometric(a: &PointSet, b: &PointSet) -> Result<GeometricMatch> {
    if b.is_empty() {
        return Err(Error::Empty("geometric matching needs at least one target point"));
    }
    let mut out = GeometricMatch { dist: Vec::with_capacity(a.len()), idx: Vec::with_capacity(a.len()) };
    for p in &a.points {
        let (j, d2) = nearest(p, &b.points);
        out.idx.push(j);
        out.dist.push(d2.sqrt());
    }
    Ok(out)
}

fn nearest(p: &Point, pts: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in pts.iter().enumerate() {
        let d2 = p.dist2(*q);
        if d2 < best.1 {
            best = (j, d2);
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise argmax of `da · dbᵀ`; ties resolve to the lowest index.
pub fn match_descriptors(da: &Descriptors, db: &Descriptors) -> Result<DescriptorMatch> {
    if db.is_empty() {
        return Err(Error::Empty("descriptor matching needs at least one target descriptor"));
    }
    if !da.is_empty() && da.dim != db.dim {
        return Err(Error::Shape(format!("descriptor dims {} vs {}", da.dim, db.dim)));
    }
    let mut out = DescriptorMatch::default();
    for ra in da.rows() {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, rb) in db.rows().enumerate() {
            let s = dot(ra, rb);
            if s > best.1 {
                best = (j, s);
            }
        }
        out.idx.push(best.0);
        out.similarity.push(best.1);
    }
    Ok(out)
}

/// Self-supervision targets: `source` lives in image `I`, `warped` in `I_h`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TargetSet {
    pub source: PointSet,
    pub warped: PointSet,
    /// Row of the in-bounds projected set each target pair came from.
    pub source_indices: Vec<usize>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Everything computed while estimating targets; the matches are reused by
/// the descriptor loss.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TargetEstimate {
    /// Indices into `K` of the points that project inside `I_h`.
    pub kept: Vec<usize>,
    pub projected: PointSet,
    pub geometric: GeometricMatch,
    pub descriptor: DescriptorMatch,
    pub targets: TargetSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetParams {
    /// Strict upper bound on the geometric distance of accepted pairs.
    pub theta_dist: f64,
    pub width: usize,
    pub height: usize,
    /// Drop targets whose back-projection leaves `I` (otherwise clamp).
    pub drop_outside: bool,
}

/// Points of `K` project through `h`; those inside `I_h` are matched to `K_h`
/// by coordinates and by descriptors. A pair is accepted when both
/// nearest neighbours agree and the pixel distance is below `theta_dist`; its
/// midpoint is the target in `I_h` and the back-projected midpoint the target
/// in `I`.
///
/// `d_proj` must hold the descriptors of `K[kept]` in the order of
/// [`filter_in_bounds`]; `d_h` those of `K_h`.
pub fn estimate_targets(
    k: &PointSet,
    k_h: &PointSet,
    d_proj: &Descriptors,
    d_h: &Descriptors,
    h: &Homography,
    params: &TargetParams,
) -> Result<TargetEstimate> {
    let all = project_points(k, h)?;
    let (projected, kept) = filter_in_bounds(&all, params.height, params.width);
    if d_proj.len() != projected.len() {
        return Err(Error::Shape(format!(
            "{} projected points but {} descriptors",
            projected.len(),
            d_proj.len()
        )));
    }
    if d_h.len() != k_h.len() {
        return Err(Error::Shape(format!("{} warped points but {} descriptors", k_h.len(), d_h.len())));
    }
    let mut est = TargetEstimate { kept, projected, ..Default::default() };
    if est.projected.is_empty() || k_h.is_empty() {
        return Ok(est);
    }
    est.geometric = match_geometric(&est.projected, k_h)?;
    est.descriptor = match_descriptors(d_proj, d_h)?;

    let inv = h.inverse();
    let mut source = Vec::new();
    let mut warped = Vec::new();
    let mut rows = Vec::new();
    for i in 0..est.projected.len() {
        let j = est.geometric.idx[i];
        if j != est.descriptor.idx[i] || est.geometric.dist[i] >= params.theta_dist {
            continue;
        }
        let mid = est.projected.points[i].midpoint(k_h.points[j]);
        let Some(mut back) = inv.apply(mid) else { continue };
        if !back.in_bounds(params.width, params.height) {
            if params.drop_outside {
                continue;
            }
            back.x = back.x.clamp(0.0, (params.width - 1) as f64);
            back.y = back.y.clamp(0.0, (params.height - 1) as f64);
        }
        source.push(back);
        warped.push(mid);
        rows.push(i);
    }
    est.targets = TargetSet { source: PointSet::new(source), warped: PointSet::new(warped), source_indices: rows };
    Ok(est)
}
