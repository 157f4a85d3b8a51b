//! Window plans over large rasters, stitching, and tiled aggregation.
//!
//! Windows are visited in row-major order. Overlapping label pixels take
//! the value of the last window that covers them; logit rasters are summed
//! over overlaps before any argmax.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    aggregate, AggregationResult, AggregatorConfig, MitosisCandidate, MitosisMask, TeacherBundle,
};
use crate::error::{Error, Result};
use crate::raster::components::label;
use crate::raster::{gaussian_kernel_q16, gaussian_smooth, gray_of, otsu_threshold_from_histogram, BitMask, Grid, Histogram, InstanceMap, LabelRaster, LogitStack, RgbTile};
use crate::taxonomy::{ClassId, Taxonomy};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "TMESEG_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilePlan {
    pub crop: usize,
    pub stride: usize,
    /// Context pixels added around each window before processing.
    pub halo: usize,
}

impl Default for TilePlan {
    fn default() -> Self {
        TilePlan { crop: 384, stride: 320, halo: 72 }
    }
}

impl TilePlan {
    pub fn new(crop: usize, stride: usize, halo: usize) -> Result<Self> {
        let p = TilePlan { crop, stride, halo };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.crop {
            return Err(Error::InvalidParameter(format!(
                "tile plan needs 0 < stride <= crop, got stride {} and crop {}",
                self.stride, self.crop
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    /// The window grown by `by` pixels per side, clipped to `extent`.
    pub fn expand(&self, by: usize, extent: (usize, usize)) -> Window {
        let x = self.x.saturating_sub(by);
        let y = self.y.saturating_sub(by);
        let x1 = (self.x + self.width + by).min(extent.0);
        let y1 = (self.y + self.height + by).min(extent.1);
        Window { x, y, width: x1 - x, height: y1 - y }
    }
}

fn offsets(extent: usize, crop: usize, stride: usize) -> Vec<usize> {
    if extent <= crop {
        return vec![0];
    }
    let last = extent - crop;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out.dedup();
    out
}

/// Row-major windows covering `extent`. Axes shorter than the crop yield a
/// single window spanning the whole axis.
pub fn iterate_tiles(extent: (usize, usize), plan: &TilePlan) -> Result<Vec<Window>> {
    plan.validate()?;
    if extent.0 == 0 || extent.1 == 0 {
        return Err(Error::InvalidParameter("tile extent must be positive".to_owned()));
    }
    let xs = offsets(extent.0, plan.crop, plan.stride);
    let ys = offsets(extent.1, plan.crop, plan.stride);
    let (w, h) = (plan.crop.min(extent.0), plan.crop.min(extent.1));
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| Window { x, y, width: w, height: h })).collect())
}

/// Last-writer stitch of per-window rasters.
pub fn stitch<T: Clone>(tiles: &[(Window, Grid<T>)], extent: (usize, usize), fill: T) -> Result<Grid<T>> {
    let mut out = Grid::filled(extent.0, extent.1, fill)?;
    for (win, g) in tiles {
        g.ensure_dims((win.width, win.height))?;
        if win.x + win.width > extent.0 || win.y + win.height > extent.1 {
            return Err(Error::InvalidParameter("window lies outside the stitched extent".to_owned()));
        }
        for (dy, row) in g.rows().enumerate() {
            let start = (win.y + dy) * extent.0 + win.x;
            out.as_mut_slice()[start..start + win.width].clone_from_slice(row);
        }
    }
    Ok(out)
}

/// Sums per-window logits over overlaps. All stacks must share channels.
pub fn stitch_logits(tiles: &[(Window, LogitStack)], extent: (usize, usize)) -> Result<LogitStack> {
    let channels = tiles
        .first()
        .map(|(_, s)| s.channels().to_vec())
        .ok_or_else(|| Error::InvalidParameter("nothing to stitch".to_owned()))?;
    let mut out = LogitStack::zeros(extent.0, extent.1, channels.clone())?;
    for (win, s) in tiles {
        if s.channels() != channels.as_slice() {
            return Err(Error::InvalidRaster("tile channel lists differ".to_owned()));
        }
        if s.dims() != (win.width, win.height) {
            return Err(Error::dims((win.width, win.height), s.dims()));
        }
        for &c in &channels {
            let src = s.plane(c).expect("channel present");
            let dst = out.plane_mut(c).expect("channel present");
            for dy in 0..win.height {
                let d = (win.y + dy) * extent.0 + win.x;
                for (o, v) in dst[d..d + win.width].iter_mut().zip(&src[dy * win.width..(dy + 1) * win.width]) {
                    *o += v;
                }
            }
        }
    }
    Ok(out)
}

/// Index of the last window covering each pixel.
fn ownership(windows: &[Window], extent: (usize, usize)) -> Grid<u32> {
    let mut owner = Grid::filled(extent.0, extent.1, u32::MAX).expect("positive extent");
    for (k, win) in windows.iter().enumerate() {
        for y in win.y..win.y + win.height {
            owner.as_mut_slice()[y * extent.0 + win.x..y * extent.0 + win.x + win.width].fill(k as u32);
        }
    }
    owner
}

/// Frame-wide background threshold from the owned core pixels of each
/// window. With `halo` at least the blur radius this equals the full-frame
/// histogram exactly.
fn frame_threshold(bundle: &TeacherBundle, windows: &[Window], plan: &TilePlan, sigma: f64) -> Result<u8> {
    let extent = bundle.dims();
    let owner = ownership(windows, extent);
    let hists: Vec<Histogram> = windows
        .par_iter()
        .enumerate()
        .map(|(k, win)| {
            let outer = win.expand(plan.halo, extent);
            let he = bundle.he.crop(outer.x, outer.y, outer.width, outer.height)?;
            let smooth = gaussian_smooth(&he, sigma)?;
            let mut hist = Histogram::default();
            for y in win.y..win.y + win.height {
                for x in win.x..win.x + win.width {
                    if *owner.get(x, y) == k as u32 {
                        hist.0[gray_of(*smooth.get(x - outer.x, y - outer.y)) as usize] += 1;
                    }
                }
            }
            Ok(hist)
        })
        .collect::<Result<_>>()?;
    let mut total = Histogram::default();
    for h in &hists {
        total.merge(h);
    }
    Ok(otsu_threshold_from_histogram(&total).expect("frame is non-empty"))
}

/// Aggregates window by window and stitches the results.
///
/// Each window is processed with `plan.halo` pixels of surrounding data
/// (and an H&E ring of the same width for mitosis statistics), and only its
/// core is written back. Nucleus classes come from the window owning the
/// nucleus's first pixel in raster order.
pub fn aggregate_tiled(bundle: &TeacherBundle, tax: &Taxonomy, cfg: &AggregatorConfig, plan: &TilePlan) -> Result<AggregationResult> {
    cfg.validate()?;
    bundle.validate(tax)?;
    let extent = bundle.dims();
    let windows = iterate_tiles(extent, plan)?;
    let threshold = match cfg.background_threshold {
        Some(t) => t,
        None => frame_threshold(bundle, &windows, plan, cfg.sigma)?,
    };
    let tile_cfg = AggregatorConfig { background_threshold: Some(threshold), ..cfg.clone() };

    let results: Vec<(Window, AggregationResult)> = windows
        .par_iter()
        .map(|win| {
            let outer = win.expand(plan.halo, extent);
            let sub = bundle.crop(outer.x, outer.y, outer.width, outer.height, plan.halo)?;
            Ok((outer, aggregate(&sub, tax, &tile_cfg)?))
        })
        .collect::<Result<_>>()?;

    let (w, _) = extent;
    let mut semantic = LabelRaster::filled(extent.0, extent.1, ClassId::BACKGROUND)?;
    let mut tissue = semantic.clone();
    let mut mitosis = BitMask::filled(extent.0, extent.1, false)?;
    for (win, (outer, r)) in windows.iter().zip(&results) {
        for y in win.y..win.y + win.height {
            let src = (y - outer.y) * outer.width + (win.x - outer.x);
            let dst = y * w + win.x;
            let n = win.width;
            semantic.as_mut_slice()[dst..dst + n].copy_from_slice(&r.semantic.as_slice()[src..src + n]);
            tissue.as_mut_slice()[dst..dst + n].copy_from_slice(&r.tissue.as_slice()[src..src + n]);
            mitosis.as_mut_slice()[dst..dst + n].copy_from_slice(&r.mitosis.mask.as_slice()[src..src + n]);
        }
    }

    let owner = ownership(&windows, extent);
    let mut first_pixel: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, &id) in bundle.nuclei.ids().as_slice().iter().enumerate() {
        if id != 0 {
            first_pixel.entry(id).or_insert(i);
        }
    }
    let mut instances: InstanceMap = bundle.nuclei.clone();
    let mut provenance = BTreeMap::new();
    for (&id, &i) in &first_pixel {
        let k = owner.as_slice()[i] as usize;
        let r = &results[k].1;
        if let Some(a) = instances.attrs_mut().get_mut(&id) {
            a.class = r.instances.get(id).and_then(|a| a.class);
        }
        if let Some(p) = r.provenance.get(&id) {
            provenance.insert(id, p.clone());
        }
    }
    let (regions, region_count) = label(&mitosis, cfg.connectivity);
    Ok(AggregationResult {
        semantic,
        tissue,
        instances,
        mitosis: MitosisMask { mask: mitosis, regions, region_count },
        provenance,
        background_threshold: threshold,
    })
}

/// Smallest halo that makes tiled output match full-frame output for
/// nuclei no wider than `max_nucleus` pixels.
pub fn sufficient_halo(cfg: &AggregatorConfig, max_nucleus: usize) -> Result<usize> {
    let blur = gaussian_kernel_q16(cfg.sigma)?.len() / 2;
    // tissue labels must be exact wherever a core-touching ROI or nucleus reaches
    let roi = 2 * cfg.roi_radius.ceil() as usize + 1;
    Ok(blur + roi.max(max_nucleus))
}

/// Thread pool with `workers` threads, or the `TMESEG_WORKERS` value, or
/// rayon's default.
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::InvalidParameter(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))
            })?),
            Err(_) => None,
        },
    };
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::InvalidParameter("worker count must be positive".to_owned()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// Halves every axis: 2×2 means for H&E and logits (H&E rounded half up),
/// the top-left pixel for instance ids, and halved candidate coordinates.
pub fn downscale2(b: &TeacherBundle) -> Result<TeacherBundle> {
    let (w, h) = b.dims();
    if w < 2 || h < 2 {
        return Err(Error::InvalidParameter("downscaling needs at least 2×2 pixels".to_owned()));
    }
    let (nw, nh) = (w / 2, h / 2);
    let he = RgbTile::from_fn(nw, nh, |x, y| {
        let mut acc = [0u32; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = b.he.get(2 * x + dx, 2 * y + dy);
            for c in 0..3 {
                acc[c] += p[c] as u32;
            }
        }
        acc.map(|v| ((v + 2) / 4) as u8)
    })?;
    let half = |s: &LogitStack| -> Result<LogitStack> {
        let planes = s
            .planes()
            .iter()
            .map(|p| {
                (0..nw * nh)
                    .map(|i| {
                        let (x, y) = (2 * (i % nw), 2 * (i / nw));
                        (p[y * w + x] + p[y * w + x + 1] + p[(y + 1) * w + x] + p[(y + 1) * w + x + 1]) / 4.0
                    })
                    .collect()
            })
            .collect();
        LogitStack::new(nw, nh, s.channels().to_vec(), planes)
    };
    let ids = Grid::from_fn(nw, nh, |x, y| *b.nuclei.ids().get(2 * x, 2 * y))?;
    let nuclei = InstanceMap::from_ids(ids, |id| {
        let a = &b.nuclei.attrs()[&id];
        (a.teacher_type, a.class)
    });
    let candidates = b
        .candidates
        .iter()
        .map(|c| MitosisCandidate { x: c.x / 2.0, y: c.y / 2.0, score: c.score })
        .collect();
    Ok(TeacherBundle {
        he,
        tissue_logits: half(&b.tissue_logits)?,
        cell_logits: half(&b.cell_logits)?,
        nuclei,
        candidates,
        halo: None,
    })
}
