//! Image loading and the plain-text interchange formats: keypoint files,
//! match files, correspondence lists and dense correspondence maps.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointSet};
use crate::grid::Image;
use crate::model::Descriptors;

/// Loads any supported image as luminance in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let luma = image::open(path)?.to_luma32f();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect();
    Image::new(w as usize, h as usize, data)
}

/// Saves as 8-bit grayscale; values are clamped to `[0, 1]`.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .expect("buffer size matches")
        .save(path)?;
    Ok(())
}

/// Largest centered crop whose sides are multiples of `multiple`; returns
/// the crop and its top-left offset.
pub fn center_crop_to_multiple(img: &Image, multiple: usize) -> Result<(Image, (usize, usize))> {
    let w = img.width() / multiple * multiple;
    let h = img.height() / multiple * multiple;
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!(
            "{}x{} is smaller than {multiple} pixels",
            img.width(),
            img.height()
        )));
    }
    let (x0, y0) = ((img.width() - w) / 2, (img.height() - h) / 2);
    Ok((img.crop(x0, y0, w, h)?, (x0, y0)))
}

const KEYPOINT_TAG: &str = "KPT1";

/// Contents of a keypoint interchange file.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFile {
    pub image_id: String,
    pub points: PointSet,
    pub descriptors: Option<Descriptors>,
}

/// Writes `KPT1 <count> <descriptor dim> <image id>` followed by one
/// `x y score [descriptor...]` line per keypoint.
pub fn format_keypoints(image_id: &str, points: &PointSet, descriptors: Option<&Descriptors>) -> Result<String> {
    if let Some(d) = descriptors {
        if d.len() != points.len() {
            return Err(Error::Shape(format!("{} points but {} descriptors", points.len(), d.len())));
        }
    }
    let dim = descriptors.map_or(0, |d| d.dim);
    let mut s = format!("{KEYPOINT_TAG} {} {dim} {image_id}\n", points.len());
    for (i, p) in points.points.iter().enumerate() {
        let score = points.score(i).unwrap_or(0.0);
        write!(s, "{} {} {}", p.x, p.y, score).expect("string write");
        if let Some(d) = descriptors {
            for v in d.row(i) {
                write!(s, " {v}").expect("string write");
            }
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_keypoints(path: &Path, image_id: &str, points: &PointSet, descriptors: Option<&Descriptors>) -> Result<()> {
    std::fs::write(path, format_keypoints(image_id, points, descriptors)?)?;
    Ok(())
}

pub fn parse_keypoints(text: &str) -> std::result::Result<KeypointFile, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let mut parts = header.splitn(4, ' ');
    if parts.next() != Some(KEYPOINT_TAG) {
        return Err(format!("missing `{KEYPOINT_TAG}` header"));
    }
    let count: usize = parts.next().ok_or("missing count")?.parse().map_err(|e| format!("count: {e}"))?;
    let dim: usize = parts.next().ok_or("missing descriptor dim")?.parse().map_err(|e| format!("dim: {e}"))?;
    let image_id = parts.next().unwrap_or("").to_string();
    let mut pts = Vec::with_capacity(count);
    let mut scores = Vec::with_capacity(count);
    let mut desc = Vec::with_capacity(count * dim);
    for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("line {}: `{t}`: {e}", n + 2)))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != 3 + dim {
            return Err(format!("line {}: expected {} values, got {}", n + 2, 3 + dim, vals.len()));
        }
        pts.push(Point::new(vals[0], vals[1]));
        scores.push(vals[2]);
        desc.extend_from_slice(&vals[3..]);
    }
    if pts.len() != count {
        return Err(format!("header declares {count} keypoints, found {}", pts.len()));
    }
    let descriptors = (dim > 0).then(|| Descriptors { dim, data: desc });
    Ok(KeypointFile { image_id, points: PointSet::with_scores(pts, scores), descriptors })
}

pub fn read_keypoints(path: &Path) -> Result<KeypointFile> {
    let text = std::fs::read_to_string(path)?;
    parse_keypoints(&text).map_err(|reason| Error::Parse { path: path.to_path_buf(), reason })
}

/// One line of a match file.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
    pub dist_geom: f64,
    pub accepted: bool,
}

/// `i j similarity dist_geom accepted_flag` per line.
pub fn format_matches(records: &[MatchRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{} {} {} {} {}", r.i, r.j, r.similarity, r.dist_geom, u8::from(r.accepted)).expect("string write");
    }
    s
}

pub fn parse_matches(text: &str) -> std::result::Result<Vec<MatchRecord>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 5 {
                return Err(format!("line {}: expected 5 fields", n + 1));
            }
            let e = |what: &str| format!("line {}: bad {what}", n + 1);
            Ok(MatchRecord {
                i: t[0].parse().map_err(|_| e("i"))?,
                j: t[1].parse().map_err(|_| e("j"))?,
                similarity: t[2].parse().map_err(|_| e("similarity"))?,
                dist_geom: t[3].parse().map_err(|_| e("dist_geom"))?,
                accepted: match t[4] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(e("accepted flag")),
                },
            })
        })
        .collect()
}

/// `xa ya xb yb` per line.
pub fn parse_correspondences(text: &str) -> std::result::Result<(Vec<Point>, Vec<Point>), String> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (n, line) in text.lines().map(str::trim).enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 4 {
            return Err(format!("line {}: expected 4 values", n + 1));
        }
        a.push(Point::new(v[0], v[1]));
        b.push(Point::new(v[2], v[3]));
    }
    Ok((a, b))
}

/// Per-pixel correspondence targets for image `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    pub targets: Vec<Option<Point>>,
}

impl CorrespondenceMap {
    /// Target of the pixel nearest to `p`, if valid.
    pub fn lookup(&self, p: Point) -> Option<Point> {
        let x = p.x.round();
        let y = p.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        self.targets[y as usize * self.width + x as usize]
    }
}

/// `DENSE1 <width> <height>` then one `x y valid` line per pixel, row-major.
pub fn parse_dense_map(text: &str) -> std::result::Result<CorrespondenceMap, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty file")?.split_whitespace().collect();
    if header.len() != 3 || header[0] != "DENSE1" {
        return Err("expected `DENSE1 <width> <height>` header".into());
    }
    let width: usize = header[1].parse().map_err(|_| "bad width")?;
    let height: usize = header[2].parse().map_err(|_| "bad height")?;
    let mut targets = Vec::with_capacity(width * height);
    for (n, line) in lines.enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 3 {
            return Err(format!("pixel {n}: expected `x y valid`"));
        }
        let x: f64 = t[0].parse().map_err(|_| format!("pixel {n}: bad x"))?;
        let y: f64 = t[1].parse().map_err(|_| format!("pixel {n}: bad y"))?;
        targets.push(match t[2] {
            "1" => Some(Point::new(x, y)),
            "0" => None,
            _ => return Err(format!("pixel {n}: bad validity flag")),
        });
    }
    if targets.len() != width * height {
        return Err(format!("expected {} pixels, found {}", width * height, targets.len()));
    }
    Ok(CorrespondenceMap { width, height, targets })
}

pub fn format_dense_map(map: &CorrespondenceMap) -> String {
    let mut s = format!("DENSE1 {} {}\n", map.width, map.height);
    for t in &map.targets {
        match t {
            Some(p) => writeln!(s, "{} {} 1", p.x, p.y),
            None => writeln!(s, "0 0 0"),
        }
        .expect("string write");
    }
    s
}
