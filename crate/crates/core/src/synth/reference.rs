//! Straightforward per-pixel restatement of the aggregation pipeline.
//!
//! Nothing here calls the optimized kernels: the blur is a direct 2-D
//! convolution, Otsu scans every threshold with exact rationals, regions come
//! from breadth-first flood fills, and hulls from gift wrapping. It is slow
//! on purpose and only meant for small rasters.

use std::collections::{BTreeMap, VecDeque};

use num_bigint::BigInt;
use num_rational::BigRational;

use crate::aggregator::{AggregatorConfig, DarkCriterion, TeacherBundle, TieRule};
use crate::error::{Error, Result};
use crate::raster::{BitMask, Connectivity, Grid, LabelRaster, TeacherType};
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceResult {
    pub tissue: LabelRaster,
    pub semantic: LabelRaster,
    pub nucleus_classes: BTreeMap<u32, Option<ClassId>>,
    pub mitosis: BitMask,
    pub mitosis_regions: usize,
    pub background_threshold: u8,
}

fn gray(p: [u8; 3]) -> u8 {
    ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8
}

fn reflect(i: i64, n: i64) -> i64 {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i;
        }
    }
}

fn taps(sigma: f64) -> Vec<u64> {
    let r = (3.0 * sigma).ceil() as i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    let mut t: Vec<i64> = g.iter().map(|v| (v / total * 65536.0).round() as i64).collect();
    let residual = 65536 - t.iter().sum::<i64>();
    t[r as usize] += residual;
    t.into_iter().map(|v| v as u64).collect()
}

fn blurred_gray(b: &TeacherBundle, sigma: f64) -> Vec<u8> {
    let (w, h) = b.he.dims();
    let k = taps(sigma);
    let r = (k.len() / 2) as i64;
    let mut out = vec![0u8; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = [0u64; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let weight = k[(dy + r) as usize] * k[(dx + r) as usize];
                    let p = b.he.get(reflect(x + dx, w as i64) as usize, reflect(y + dy, h as i64) as usize);
                    for c in 0..3 {
                        acc[c] += weight * p[c] as u64;
                    }
                }
            }
            let px = acc.map(|a| ((a + (1 << 31)) >> 32) as u8);
            out[y as usize * w + x as usize] = gray(px);
        }
    }
    out
}

/// Threshold maximizing `w0·w1·(μ0 − μ1)²` over all 256 cut points, with
/// class 0 holding values `<= t`; the smallest maximizer wins.
fn otsu(values: &[u8]) -> u8 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    let n = BigInt::from(values.len());
    let mut best: Option<(BigRational, u8)> = None;
    for t in 0..=255u8 {
        let lo: Vec<u8> = values.iter().copied().filter(|&v| v <= t).collect();
        let hi: Vec<u8> = values.iter().copied().filter(|&v| v > t).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let sum = |v: &[u8]| BigInt::from(v.iter().map(|&x| x as u64).sum::<u64>());
        let mu0 = BigRational::new(sum(&lo), BigInt::from(lo.len()));
        let mu1 = BigRational::new(sum(&hi), BigInt::from(hi.len()));
        let w0 = BigRational::new(BigInt::from(lo.len()), n.clone());
        let w1 = BigRational::new(BigInt::from(hi.len()), n.clone());
        let d = mu0 - mu1;
        let var = w0 * w1 * d.clone() * d;
        if best.as_ref().is_none_or(|(b, _)| var > *b) {
            best = Some((var, t));
        }
    }
    best.expect("two distinct values give a valid cut").1
}

fn neighbours(conn: Connectivity) -> &'static [(i64, i64)] {
    match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    }
}

/// Connected regions of `mask` by breadth-first search, each as pixel list.
fn flood_regions(mask: &[bool], w: usize, h: usize, conn: Connectivity) -> Vec<Vec<(i64, i64)>> {
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([((start % w) as i64, (start / w) as i64)]);
        let mut region = Vec::new();
        while let Some((x, y)) = queue.pop_front() {
            region.push((x, y));
            for &(dx, dy) in neighbours(conn) {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        out.push(region);
    }
    out
}

/// Foreground plus every background pixel that cannot reach the raster
/// border through 4-connected background.
fn with_holes_filled(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let background: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let mut filled = mask.to_vec();
    for region in flood_regions(&background, w, h, Connectivity::Four) {
        let touches_border = region.iter().any(|&(x, y)| x == 0 || y == 0 || x == w as i64 - 1 || y == h as i64 - 1);
        if !touches_border {
            for (x, y) in region {
                filled[y as usize * w + x as usize] = true;
            }
        }
    }
    filled
}

fn orient(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Gift-wrapping hull keeping only strict corners.
fn jarvis(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let start = pts[0];
    let mut hull = vec![start];
    let mut current = start;
    loop {
        let mut next = if pts[0] == current { pts[1] } else { pts[0] };
        for &p in &pts {
            if p == current {
                continue;
            }
            let o = orient(current, next, p);
            let farther = (p.0 - current.0).pow(2) + (p.1 - current.1).pow(2)
                > (next.0 - current.0).pow(2) + (next.1 - current.1).pow(2);
            // keep the most clockwise candidate, farthest on ties
            if o < 0 || (o == 0 && farther) {
                next = p;
            }
        }
        if next == start {
            break;
        }
        hull.push(next);
        current = next;
    }
    hull
}

fn in_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            orient(a, b, p) == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
        }
        n => {
            let sides: Vec<i64> = (0..n).map(|i| orient(hull[i], hull[(i + 1) % n], p)).collect();
            sides.iter().all(|&s| s >= 0) || sides.iter().all(|&s| s <= 0)
        }
    }
}

fn dark(criterion: &DarkCriterion, sums: &[u32], threshold: u32) -> bool {
    let t = threshold as f64;
    let n = sums.len();
    match *criterion {
        DarkCriterion::Median => {
            let mut s = sums.to_vec();
            s.sort();
            let m = if n % 2 == 1 { s[n / 2] as f64 } else { (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0 };
            m <= t
        }
        DarkCriterion::Mean => sums.iter().map(|&s| s as f64).sum::<f64>() / n as f64 <= t,
        DarkCriterion::Fraction { fraction } => sums.iter().filter(|&&s| s <= threshold).count() as f64 >= fraction * n as f64,
    }
}

fn tissue_class(sm: f32, epi: f32, rbc: f32) -> ClassId {
    if rbc > 0.0 {
        return ClassId::RED_BLOOD_CELL;
    }
    match (sm > 0.0, epi > 0.0) {
        (false, false) => ClassId::STROMA,
        _ if epi > sm => ClassId::EPITHELIAL_TISSUE,
        _ => ClassId::SMOOTH_MUSCLE,
    }
}

/// Runs the whole pipeline one pixel at a time.
pub fn reference_aggregate(b: &TeacherBundle, tax: &Taxonomy, cfg: &AggregatorConfig) -> Result<ReferenceResult> {
    cfg.validate()?;
    b.validate(tax)?;
    let (w, h) = b.he.dims();
    let n = w * h;

    // tissue
    let g = blurred_gray(b, cfg.sigma);
    let t = cfg.background_threshold.unwrap_or_else(|| otsu(&g));
    let channel = |stack: &crate::raster::LogitStack, c: ClassId| -> Result<Vec<f32>> {
        stack.plane(c).map(<[f32]>::to_vec).ok_or_else(|| Error::MissingChannel(c.name()))
    };
    let sm = channel(&b.tissue_logits, ClassId::SMOOTH_MUSCLE)?;
    let epi = channel(&b.tissue_logits, ClassId::EPITHELIAL_TISSUE)?;
    let rbc = channel(&b.tissue_logits, ClassId::RED_BLOOD_CELL)?;
    let tissue: Vec<ClassId> = (0..n)
        .map(|i| if g[i] > t { ClassId::BACKGROUND } else { tissue_class(sm[i], epi[i], rbc[i]) })
        .collect();

    // per-pixel hierarchy walk
    let levels: Vec<Vec<(ClassId, Vec<f32>)>> = tax
        .hierarchy()
        .levels()
        .iter()
        .map(|level| level.iter().map(|&c| Ok((c, channel(&b.cell_logits, c)?))).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let pixel_class = |i: usize| -> Option<ClassId> {
        let mut out = None;
        for level in &levels {
            let mut best: Option<(ClassId, f32)> = None;
            for (c, plane) in level {
                if best.is_none() || plane[i] > best.unwrap().1 {
                    best = Some((*c, plane[i]));
                }
            }
            if let Some((c, v)) = best {
                if v > 0.0 {
                    out = Some(c);
                }
            }
        }
        out
    };

    // nucleus votes and fallbacks
    let ids = b.nuclei.ids().as_slice();
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != 0 {
            members.entry(id).or_default().push(i);
        }
    }
    let mut classes: BTreeMap<u32, Option<ClassId>> = BTreeMap::new();
    for (&id, pixels) in &members {
        let mut counts: BTreeMap<Option<ClassId>, usize> = BTreeMap::new();
        for &i in pixels {
            *counts.entry(pixel_class(i)).or_default() += 1;
        }
        let undefined = counts.get(&None).copied().unwrap_or(0);
        let top = counts.iter().filter_map(|(c, &k)| c.map(|c| (c, k))).map(|(_, k)| k).max().unwrap_or(0);
        let tied = counts.iter().filter(|(c, &k)| c.is_some() && k == top).count() > 1;
        let mut class = if top > 0 && tied && cfg.tie_rule == TieRule::Undefined {
            None
        } else if top > 0 && top >= undefined {
            counts.iter().find(|(c, &k)| c.is_some() && k == top).and_then(|(c, _)| *c)
        } else {
            None
        };
        let frac = |c: ClassId| pixels.iter().filter(|&&i| tissue[i] == c).count() as f64 / pixels.len() as f64;
        let teacher = b.nuclei.get(id).and_then(|a| a.teacher_type);
        class = match class {
            Some(ClassId::EPITHELIAL_TISSUE) => Some(ClassId::EPITHELIAL_CELL_NUCLEUS),
            None if frac(ClassId::EPITHELIAL_TISSUE) > cfg.epithelial_majority => Some(ClassId::EPITHELIAL_CELL_NUCLEUS),
            None if teacher == Some(TeacherType::Connective) && frac(ClassId::STROMA) > cfg.stroma_majority => {
                Some(ClassId::FIBROBLAST)
            }
            other => other,
        };
        classes.insert(id, class);
    }

    // mitosis
    let hw = b.halo.as_ref().map_or(0, |c| c.halo) as i64;
    let colour_at = |x: i64, y: i64| -> Option<[u8; 3]> {
        if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
            return Some(*b.he.get(x as usize, y as usize));
        }
        let ctx = b.halo.as_ref()?;
        let (hx, hy) = (x + hw, y + hw);
        if hx < 0 || hy < 0 || hx >= ctx.he.width() as i64 || hy >= ctx.he.height() as i64 {
            return None;
        }
        ctx.valid.get(hx as usize, hy as usize).then(|| *ctx.he.get(hx as usize, hy as usize))
    };
    let mut mitosis = vec![false; n];
    for cand in b.candidates.iter().filter(|c| c.score >= cfg.min_candidate_score) {
        let r2 = cfg.roi_radius * cfg.roi_radius;
        let mut roi = Vec::new();
        for y in -hw..h as i64 + hw {
            for x in -hw..w as i64 + hw {
                let (dx, dy) = (x as f64 - cand.x, y as f64 - cand.y);
                if dx * dx + dy * dy <= r2 {
                    roi.push((x, y));
                }
            }
        }
        let colours: Vec<[u8; 3]> = roi.iter().filter_map(|&(x, y)| colour_at(x, y)).collect();
        if colours.is_empty() {
            continue;
        }
        let sums: Vec<u32> = colours.iter().map(|p| p.iter().map(|&c| c as u32).sum()).collect();
        if dark(&cfg.dark_criterion, &sums, cfg.dark_sum_threshold) {
            continue;
        }
        let grays: Vec<u8> = colours.iter().map(|&p| gray(p)).collect();
        if grays.iter().all(|&v| v == grays[0]) {
            continue;
        }
        let t = otsu(&grays);
        let mut fg = vec![false; n];
        for &(x, y) in &roi {
            if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                let i = y as usize * w + x as usize;
                if gray(*b.he.get(x as usize, y as usize)) <= t {
                    fg[i] = true;
                }
            }
        }
        let filled = with_holes_filled(&fg, w, h);
        for region in flood_regions(&filled, w, h, Connectivity::Eight) {
            if region.len() < cfg.min_contour_area {
                continue;
            }
            let hull = jarvis(&region);
            let covered: Vec<usize> = (0..n)
                .filter(|&i| in_hull(&hull, ((i % w) as i64, (i / w) as i64)))
                .collect();
            if covered.iter().any(|&i| tissue[i] == ClassId::EPITHELIAL_TISSUE) {
                for i in covered {
                    mitosis[i] = true;
                }
            }
        }
    }
    for (id, pixels) in &members {
        if pixels.iter().any(|&i| mitosis[i]) {
            classes.insert(*id, Some(ClassId::MITOTIC_CELL));
        }
    }
    let mitosis_regions = flood_regions(&mitosis, w, h, cfg.connectivity).len();

    let mut semantic = tissue.clone();
    for (id, pixels) in &members {
        if let Some(c) = classes[id] {
            for &i in pixels {
                semantic[i] = c;
            }
        }
    }
    Ok(ReferenceResult {
        tissue: Grid::from_vec(w, h, tissue)?,
        semantic: Grid::from_vec(w, h, semantic)?,
        nucleus_classes: classes,
        mitosis: Grid::from_vec(w, h, mitosis)?,
        mitosis_regions,
        background_threshold: t,
    })
}
