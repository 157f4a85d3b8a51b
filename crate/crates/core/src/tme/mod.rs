//! Slide-level tumor-microenvironment metrics and their association with
//! mutation status across a cohort.

mod cohort;
mod stats;

pub use cohort::{association_table, AssociationRow, AssociationStatus, CaseManifestEntry, CaseRecord, Direction};
pub use stats::{mann_whitney_u, MannWhitney, MwMethod};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::components::{label, Connectivity};
use crate::raster::distance_band;
use crate::raster::{BitMask, Grid, LabelRaster};
use crate::taxonomy::ClassId;

pub const DEFAULT_MARGIN_UM: f64 = 50.0;
pub const DENSITY_UNIT: &str = "cells per mm² of band area";

/// Cell populations reported per slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellGroup {
    Fibroblast,
    Endothelial,
    Lymphocyte,
    PlasmaCell,
    MyeloidCell,
    Neutrophil,
    Eosinophil,
    AllLeukocytes,
}

impl CellGroup {
    pub const ALL: [CellGroup; 8] = [
        CellGroup::Fibroblast,
        CellGroup::Endothelial,
        CellGroup::Lymphocyte,
        CellGroup::PlasmaCell,
        CellGroup::MyeloidCell,
        CellGroup::Neutrophil,
        CellGroup::Eosinophil,
        CellGroup::AllLeukocytes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellGroup::Fibroblast => "fibroblast",
            CellGroup::Endothelial => "endothelial",
            CellGroup::Lymphocyte => "lymphocyte",
            CellGroup::PlasmaCell => "plasma_cell",
            CellGroup::MyeloidCell => "myeloid_cell",
            CellGroup::Neutrophil => "neutrophil",
            CellGroup::Eosinophil => "eosinophil",
            CellGroup::AllLeukocytes => "all_leukocytes",
        }
    }

    /// Classes whose components are summed into the group count.
    pub fn classes(self) -> &'static [ClassId] {
        match self {
            CellGroup::Fibroblast => &[ClassId::FIBROBLAST],
            CellGroup::Endothelial => &[ClassId::ENDOTHELIAL],
            CellGroup::Lymphocyte => &[ClassId::LYMPHOCYTE],
            CellGroup::PlasmaCell => &[ClassId::PLASMA_CELL],
            CellGroup::MyeloidCell => &[ClassId::MYELOID_CELL],
            CellGroup::Neutrophil => &[ClassId::NEUTROPHIL],
            CellGroup::Eosinophil => &[ClassId::EOSINOPHIL],
            CellGroup::AllLeukocytes => &[
                ClassId::LEUKOCYTE,
                ClassId::LYMPHOCYTE,
                ClassId::PLASMA_CELL,
                ClassId::MYELOID_CELL,
                ClassId::EOSINOPHIL,
                ClassId::NEUTROPHIL,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: CellGroup,
    pub count: u64,
    pub peripheral_count: u64,
    /// `count / tumor_cell_count`; `None` without tumor cells.
    pub in_tumor_ratio: Option<f64>,
    /// Peripheral cells per mm² of band; `None` when the band is empty.
    pub peripheral_density: Option<f64>,
    /// `peripheral_density / tumor_cell_count`.
    pub peripheral_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMetrics {
    pub mpp: f64,
    pub margin_um: f64,
    pub tumor_cell_count: u64,
    pub tumor_area_px: u64,
    pub band_area_px: u64,
    pub band_area_mm2: f64,
    pub density_unit: String,
    pub groups: Vec<GroupMetrics>,
}

impl SlideMetrics {
    pub fn group(&self, g: CellGroup) -> &GroupMetrics {
        self.groups.iter().find(|m| m.group == g).expect("every group is reported")
    }

    /// Flat `(metric name, value)` pairs: `in_tumor:<group>` and
    /// `peripheral:<group>`.
    pub fn metric_values(&self) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::with_capacity(2 * self.groups.len());
        for g in &self.groups {
            out.push((format!("in_tumor:{}", g.group.name()), g.in_tumor_ratio));
            out.push((format!("peripheral:{}", g.group.name()), g.peripheral_ratio));
        }
        out
    }
}

/// Integer candidates nearest to `sum / n`: one value, or two on an exact half.
fn nearest(sum: u64, n: u64) -> (u64, u64) {
    let num = 2 * sum + n;
    let r = num / (2 * n);
    if num.is_multiple_of(2 * n) && r > 0 {
        (r - 1, r)
    } else {
        (r, r)
    }
}

/// Component count and how many components have their centroid in `band`.
///
/// The centroid pixel is the nearest pixel centre; when the centroid sits
/// exactly between pixel centres, every nearest pixel must lie in the band.
/// This keeps membership unchanged under 90° rotations and reflections.
fn count_with_band(mask: &LabelRaster, classes: &[ClassId], band: &BitMask) -> (u64, u64) {
    let (w, _) = mask.dims();
    let mut total = 0;
    let mut peripheral = 0;
    for &class in classes {
        let (ids, n) = label(&BitMask::from_labels(mask, class), Connectivity::Eight);
        let mut sums = vec![(0u64, 0u64, 0u64); n as usize + 1];
        for (i, &id) in ids.as_slice().iter().enumerate() {
            if id != 0 {
                let s = &mut sums[id as usize];
                s.0 += (i % w) as u64;
                s.1 += (i / w) as u64;
                s.2 += 1;
            }
        }
        total += n as u64;
        for &(sx, sy, cnt) in &sums[1..] {
            let xs = nearest(sx, cnt);
            let ys = nearest(sy, cnt);
            let inside = [xs.0, xs.1]
                .iter()
                .all(|&x| [ys.0, ys.1].iter().all(|&y| *band.get(x as usize, y as usize)));
            peripheral += inside as u64;
        }
    }
    (total, peripheral)
}

/// Tumor region: epithelial tissue plus epithelial nucleus pixels.
pub fn tumor_region(mask: &LabelRaster) -> BitMask {
    mask.map(|&c| c == ClassId::EPITHELIAL_TISSUE || c == ClassId::EPITHELIAL_CELL_NUCLEUS)
}

pub fn slide_metrics(mask: &LabelRaster, mpp: f64, margin_um: f64) -> Result<SlideMetrics> {
    if !mpp.is_finite() || mpp <= 0.0 {
        return Err(Error::InvalidParameter(format!("mpp must be positive, got {mpp}")));
    }
    let region = tumor_region(mask);
    let band = distance_band(&region, margin_um, mpp)?;
    let band_area_px = band.count() as u64;
    let band_area_mm2 = band_area_px as f64 * mpp * mpp / 1e6;
    let (_, tumor_cells) = label(&BitMask::from_labels(mask, ClassId::EPITHELIAL_CELL_NUCLEUS), Connectivity::Eight);
    let tumor_cells = tumor_cells as u64;

    let groups = CellGroup::ALL
        .iter()
        .map(|&group| {
            let (count, peripheral_count) = count_with_band(mask, group.classes(), &band);
            let peripheral_density = (band_area_px > 0).then(|| peripheral_count as f64 / band_area_mm2);
            let per_tumor = |v: f64| (tumor_cells > 0).then(|| v / tumor_cells as f64);
            GroupMetrics {
                group,
                count,
                peripheral_count,
                in_tumor_ratio: per_tumor(count as f64),
                peripheral_density,
                peripheral_ratio: peripheral_density.and_then(per_tumor),
            }
        })
        .collect();
    Ok(SlideMetrics {
        mpp,
        margin_um,
        tumor_cell_count: tumor_cells,
        tumor_area_px: region.count() as u64,
        band_area_px,
        band_area_mm2,
        density_unit: DENSITY_UNIT.to_owned(),
        groups,
    })
}

/// Places `class` discs of radius `r` centred on `centres`.
#[doc(hidden)]
pub fn paint_discs(grid: &mut Grid<ClassId>, centres: &[(i64, i64)], r: i64, class: ClassId) {
    let (w, h) = grid.dims();
    for &(cx, cy) in centres {
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    grid.set(x as usize, y as usize, class);
                }
            }
        }
    }
}
