//! Procedural grayscale scenes (polygons, ellipses, checkerboards, stripes)
//! with plenty of corners and edges. Useful as a free training corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{gaussian_blur, Point};
use crate::grid::Image;

fn inside_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Deterministic scene for `seed`.
pub fn scene(seed: u64, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let gx = rng.random_range(-0.3..0.3) / w;
    let gy = rng.random_range(-0.3..0.3) / h;
    let base = rng.random_range(0.3..0.7);
    let mut img = Image::from_fn(width, height, |x, y| base + gx * x as f64 + gy * y as f64);

    let shapes = rng.random_range(8..14);
    for _ in 0..shapes {
        let value = rng.random_range(0.0..1.0);
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let size = rng.random_range(0.08..0.3) * w.min(h);
        match rng.random_range(0..4) {
            0 => {
                let n = rng.random_range(3..6);
                let start = rng.random_range(0.0..std::f64::consts::TAU);
                let poly: Vec<Point> = (0..n)
                    .map(|k| {
                        let a = start + std::f64::consts::TAU * (k as f64 + rng.random_range(-0.3..0.3)) / n as f64;
                        let r = size * rng.random_range(0.6..1.0);
                        Point::new(cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                paint(&mut img, |p| inside_polygon(p, &poly), value);
            }
            1 => {
                let (rx, ry) = (size, size * rng.random_range(0.4..1.0));
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (c, s) = (t.cos(), t.sin());
                paint(
                    &mut img,
                    |p| {
                        let (dx, dy) = (p.x - cx, p.y - cy);
                        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                        (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
                    },
                    value,
                );
            }
            2 => {
                let cell = rng.random_range(4.0..10.0);
                let other = rng.random_range(0.0..1.0);
                let half = size;
                for y in 0..height {
                    for x in 0..width {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx.abs() <= half && dy.abs() <= half {
                            let odd = ((dx + half) / cell).floor() as i64 + ((dy + half) / cell).floor() as i64;
                            img.set(x, y, if odd % 2 == 0 { value } else { other });
                        }
                    }
                }
            }
            _ => {
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (c, s) = (t.cos(), t.sin());
                let thick = rng.random_range(1.5..4.0);
                paint(
                    &mut img,
                    |p| {
                        let (dx, dy) = (p.x - cx, p.y - cy);
                        let along = c * dx + s * dy;
                        let across = -s * dx + c * dy;
                        along.abs() <= size && across.abs() <= thick
                    },
                    value,
                );
            }
        }
    }
    let mut out = gaussian_blur(&img);
    out.clamp_unit();
    out
}

fn paint(img: &mut Image, inside: impl Fn(Point) -> bool, value: f64) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            if inside(Point::new(x as f64, y as f64)) {
                img.set(x, y, value);
            }
        }
    }
}
