use serde::{Deserialize, Serialize};

use super::BitMask;

/// Integer pixel coordinate (pixel centres sit on integer positions).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Point { x, y }
    }
}

#[inline]
fn cross(o: Point, a: Point, b: Point) -> i64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by monotone chain.
///
/// Vertices are returned with positive orientation (counter-clockwise when
/// the y axis points up), starting from the lowest-x, lowest-y point, with
/// collinear points dropped. One distinct point yields a single vertex and
/// collinear input yields the two segment endpoints.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() == 2 && lower[0] == lower[1] {
        lower.pop();
    }
    lower
}

/// Whether `p` lies inside or on the hull.
pub(crate) fn hull_contains(hull: &[Point], p: Point) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0
                && p.x >= a.x.min(b.x)
                && p.x <= a.x.max(b.x)
                && p.y >= a.y.min(b.y)
                && p.y <= a.y.max(b.y)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// Marks every pixel of a `width × height` raster whose centre lies inside
/// or on the hull. Hull parts outside the raster are clipped.
pub fn rasterize_hull(hull: &[Point], width: usize, height: usize) -> BitMask {
    let mut mask = BitMask::filled(width, height, false).expect("positive extent");
    for p in hull_pixels(hull, width, height) {
        mask.set(p.x as usize, p.y as usize, true);
    }
    mask
}

/// Pixels covered by the hull, clipped to the extent, in raster order.
pub(crate) fn hull_pixels(hull: &[Point], width: usize, height: usize) -> Vec<Point> {
    if hull.is_empty() {
        return Vec::new();
    }
    let x0 = hull.iter().map(|p| p.x).min().unwrap().max(0);
    let x1 = hull.iter().map(|p| p.x).max().unwrap().min(width as i64 - 1);
    let y0 = hull.iter().map(|p| p.y).min().unwrap().max(0);
    let y1 = hull.iter().map(|p| p.y).max().unwrap().min(height as i64 - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Point::new(x, y);
            if hull_contains(hull, p) {
                out.push(p);
            }
        }
    }
    out
}

/// Twice the signed polygon area (shoelace).
#[cfg(test)]
fn doubled_area(poly: &[Point]) -> i64 {
    let n = poly.len();
    if n < 3 {
        return 0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum()
}
