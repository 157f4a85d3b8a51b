use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AggregatorConfig, HaloContext, MitosisCandidate};
use crate::error::Result;
use crate::raster::components::label;
use crate::raster::hull::hull_pixels;
use crate::raster::{
    contours, convex_hull, gray_of, otsu_threshold_from_histogram, rgb_sum, BitMask, Grid, Histogram,
    LabelRaster, Point, RgbTile,
};
use crate::taxonomy::ClassId;

/// Statistic deciding whether an ROI is dominated by dark pigment (carbon dust).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DarkCriterion {
    /// Median RGB sum over the ROI at or below the threshold.
    #[default]
    Median,
    /// Mean RGB sum over the ROI at or below the threshold.
    Mean,
    /// At least `fraction` of ROI pixels at or below the threshold.
    Fraction { fraction: f64 },
}

impl DarkCriterion {
    pub fn fires(&self, sums: &mut [u32], threshold: u32) -> bool {
        if sums.is_empty() {
            return false;
        }
        let t = threshold as f64;
        match *self {
            DarkCriterion::Median => {
                sums.sort_unstable();
                let n = sums.len();
                let median = if n % 2 == 1 {
                    sums[n / 2] as f64
                } else {
                    (sums[n / 2 - 1] as f64 + sums[n / 2] as f64) / 2.0
                };
                median <= t
            }
            DarkCriterion::Mean => {
                let total: u64 = sums.iter().map(|&s| s as u64).sum();
                total as f64 / sums.len() as f64 <= t
            }
            DarkCriterion::Fraction { fraction } => {
                let dark = sums.iter().filter(|&&s| s <= threshold).count();
                dark as f64 >= fraction * sums.len() as f64
            }
        }
    }
}

/// Union of accepted mitotic hull regions, numbered by connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct MitosisMask {
    pub mask: BitMask,
    pub regions: Grid<u32>,
    pub region_count: u32,
}

/// Integer pixels whose centres lie within `radius` of `(cx, cy)`, restricted
/// to `[x_lo, x_hi) × [y_lo, y_hi)`, in raster order.
pub fn roi_pixels(cx: f64, cy: f64, radius: f64, x_range: (i64, i64), y_range: (i64, i64)) -> Vec<Point> {
    let r2 = radius * radius;
    let x0 = ((cx - radius).floor() as i64).max(x_range.0);
    let x1 = ((cx + radius).ceil() as i64).min(x_range.1 - 1);
    let y0 = ((cy - radius).floor() as i64).max(y_range.0);
    let y1 = ((cy + radius).ceil() as i64).min(y_range.1 - 1);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                out.push(Point::new(x, y));
            }
        }
    }
    out
}

/// Pixel indices of the accepted hull regions of one candidate.
fn candidate_regions(
    c: &MitosisCandidate,
    he: &RgbTile,
    halo: Option<&HaloContext>,
    tissue: &LabelRaster,
    cfg: &AggregatorConfig,
) -> Vec<usize> {
    let (w, h) = he.dims();
    let hw = halo.map_or(0, |h| h.halo) as i64;
    let roi = roi_pixels(c.x, c.y, cfg.roi_radius, (-hw, w as i64 + hw), (-hw, h as i64 + hw));

    let in_tile = |p: &Point| p.x >= 0 && p.y >= 0 && (p.x as usize) < w && (p.y as usize) < h;
    let colour = |p: &Point| -> Option<[u8; 3]> {
        if in_tile(p) {
            Some(*he.get(p.x as usize, p.y as usize))
        } else {
            let ctx = halo?;
            let (x, y) = ((p.x + hw) as usize, (p.y + hw) as usize);
            ctx.valid.get(x, y).then(|| *ctx.he.get(x, y))
        }
    };
    let stats: Vec<[u8; 3]> = roi.iter().filter_map(colour).collect();
    if stats.is_empty() {
        return Vec::new();
    }
    let mut sums: Vec<u32> = stats.iter().map(|&p| rgb_sum(p)).collect();
    if cfg.dark_criterion.fires(&mut sums, cfg.dark_sum_threshold) {
        return Vec::new();
    }
    let hist = Histogram::from_values(stats.iter().map(|&p| gray_of(p)));
    if hist.0.iter().filter(|&&n| n > 0).count() < 2 {
        return Vec::new();
    }
    let t = otsu_threshold_from_histogram(&hist).expect("non-empty histogram");

    let tile_roi: Vec<Point> = roi.into_iter().filter(in_tile).collect();
    if tile_roi.is_empty() {
        return Vec::new();
    }
    let bx0 = tile_roi.iter().map(|p| p.x).min().unwrap();
    let bx1 = tile_roi.iter().map(|p| p.x).max().unwrap();
    let by0 = tile_roi.iter().map(|p| p.y).min().unwrap();
    let by1 = tile_roi.iter().map(|p| p.y).max().unwrap();
    let (lw, lh) = ((bx1 - bx0 + 1) as usize, (by1 - by0 + 1) as usize);
    let mut local = BitMask::filled(lw, lh, false).expect("positive extent");
    for p in &tile_roi {
        if gray_of(*he.get(p.x as usize, p.y as usize)) <= t {
            local.set((p.x - bx0) as usize, (p.y - by0) as usize, true);
        }
    }

    let labels = tissue.as_slice();
    let mut out = Vec::new();
    for contour in contours(&local) {
        if contour.area < cfg.min_contour_area {
            continue;
        }
        let pts: Vec<Point> = contour.boundary.iter().map(|p| Point::new(p.x + bx0, p.y + by0)).collect();
        let hull = convex_hull(&pts);
        let pixels: Vec<usize> =
            hull_pixels(&hull, w, h).into_iter().map(|p| p.y as usize * w + p.x as usize).collect();
        if pixels.iter().any(|&i| labels[i] == ClassId::EPITHELIAL_TISSUE) {
            out.extend(pixels);
        }
    }
    out
}

/// Turns candidate points into mitotic regions: circular ROI, carbon-dust
/// rejection, Otsu on the ROI, contours of at least the minimum area, their
/// convex hulls, and only hulls touching epithelial tissue.
pub fn detect_mitosis(
    candidates: &[MitosisCandidate],
    he: &RgbTile,
    halo: Option<&HaloContext>,
    tissue: &LabelRaster,
    cfg: &AggregatorConfig,
) -> Result<MitosisMask> {
    tissue.ensure_dims(he.dims())?;
    let (w, h) = he.dims();
    let per_candidate: Vec<Vec<usize>> = candidates
        .par_iter()
        .filter(|c| c.score >= cfg.min_candidate_score)
        .map(|c| candidate_regions(c, he, halo, tissue, cfg))
        .collect();
    let mut mask = BitMask::filled(w, h, false)?;
    {
        let bits = mask.as_mut_slice();
        for i in per_candidate.into_iter().flatten() {
            bits[i] = true;
        }
    }
    let (regions, region_count) = label(&mask, cfg.connectivity);
    Ok(MitosisMask { mask, regions, region_count })
}
