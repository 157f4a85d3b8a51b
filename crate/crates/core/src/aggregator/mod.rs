//! Fusion of teacher outputs into one panoptic label mask.
//!
//! The stages run in a fixed order: background and tissue labelling,
//! per-nucleus hierarchical classification, the epithelial and fibroblast
//! fallbacks, mitosis detection from candidate points, mitosis supersedence,
//! and finally painting nucleus classes over the tissue labels.

mod fallback;
mod hierarchy;
mod mitosis;
mod tissue;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BitMask, Connectivity, Grid, InstanceMap, LabelRaster, LogitStack, RgbTile};
use crate::taxonomy::{ClassId, Taxonomy};

pub use fallback::{fallback_rules, FallbackRule};
pub use hierarchy::{classify_nucleus, HierarchyPlanes, NucleusVote, TieRule};
pub use mitosis::{detect_mitosis, roi_pixels, DarkCriterion, MitosisMask};
pub use tissue::{tissue_segmentation, TissueSegmentation, TISSUE_CHANNELS};

/// Cell-logit channels a bundle must provide.
pub const CELL_CHANNELS: [ClassId; 10] = [
    ClassId::LEUKOCYTE,
    ClassId::ENDOTHELIAL,
    ClassId::RED_BLOOD_CELL,
    ClassId::LYMPHOCYTE,
    ClassId::PLASMA_CELL,
    ClassId::MYELOID_CELL,
    ClassId::EOSINOPHIL,
    ClassId::NEUTROPHIL,
    ClassId::SMOOTH_MUSCLE,
    ClassId::EPITHELIAL_TISSUE,
];

/// A mitosis-detector hit in tile pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitosisCandidate {
    pub x: f64,
    pub y: f64,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

/// H&E context extending the tile by `halo` pixels on every side. Halo
/// pixels feed mitosis ROI statistics only; `valid` marks context pixels
/// that carry real image data.
#[derive(Clone, Debug, PartialEq)]
pub struct HaloContext {
    pub halo: usize,
    pub he: RgbTile,
    pub valid: BitMask,
}

impl HaloContext {
    pub fn new(halo: usize, he: RgbTile) -> Self {
        let valid = BitMask::filled(he.width(), he.height(), true).expect("positive extent");
        HaloContext { halo, he, valid }
    }
}

/// Everything the teachers produced for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBundle {
    pub he: RgbTile,
    pub tissue_logits: LogitStack,
    pub cell_logits: LogitStack,
    pub nuclei: InstanceMap,
    pub candidates: Vec<MitosisCandidate>,
    pub halo: Option<HaloContext>,
}

impl TeacherBundle {
    pub fn dims(&self) -> (usize, usize) {
        self.he.dims()
    }

    pub fn halo_width(&self) -> usize {
        self.halo.as_ref().map_or(0, |h| h.halo)
    }

    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        let dims = self.he.dims();
        if self.tissue_logits.dims() != dims {
            return Err(Error::dims(dims, self.tissue_logits.dims()));
        }
        if self.cell_logits.dims() != dims {
            return Err(Error::dims(dims, self.cell_logits.dims()));
        }
        self.nuclei.ids().ensure_dims(dims)?;
        for c in TISSUE_CHANNELS {
            self.tissue_logits.require(c)?;
        }
        for c in tax.hierarchy().classes() {
            self.cell_logits.require(c)?;
        }
        if let Some(h) = &self.halo {
            let want = (dims.0 + 2 * h.halo, dims.1 + 2 * h.halo);
            if h.he.dims() != want {
                return Err(Error::dims(want, h.he.dims()));
            }
            h.valid.ensure_dims(want)?;
        }
        let halo = self.halo_width() as f64;
        for c in &self.candidates {
            let inside = c.x >= -halo
                && c.y >= -halo
                && c.x < dims.0 as f64 + halo
                && c.y < dims.1 as f64 + halo;
            if !inside || !c.score.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "mitosis candidate ({}, {}) lies outside the tile and its halo",
                    c.x, c.y
                )));
            }
        }
        Ok(())
    }

    /// Extracts a window. Candidates within `halo` pixels of the window are
    /// kept, and the halo ring of H&E context is copied from this bundle;
    /// ring pixels beyond the available data are marked invalid.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize, halo: usize) -> Result<TeacherBundle> {
        let he = self.he.crop(x0, y0, w, h)?;
        let tissue_logits = self.tissue_logits.crop(x0, y0, w, h)?;
        let cell_logits = self.cell_logits.crop(x0, y0, w, h)?;
        let nuclei = self.nuclei.crop(x0, y0, w, h)?;
        let reach = halo as f64;
        let candidates = self
            .candidates
            .iter()
            .map(|c| MitosisCandidate { x: c.x - x0 as f64, y: c.y - y0 as f64, score: c.score })
            .filter(|c| c.x >= -reach && c.y >= -reach && c.x < w as f64 + reach && c.y < h as f64 + reach)
            .collect();
        let halo_ctx = if halo > 0 {
            let (fw, fh) = self.he.dims();
            let (cw, ch) = (w + 2 * halo, h + 2 * halo);
            let mut ctx = RgbTile::filled(cw, ch, [0, 0, 0])?;
            let mut valid = BitMask::filled(cw, ch, false)?;
            for y in 0..ch {
                for x in 0..cw {
                    let gx = x0 as isize + x as isize - halo as isize;
                    let gy = y0 as isize + y as isize - halo as isize;
                    let px = if gx >= 0 && gy >= 0 && (gx as usize) < fw && (gy as usize) < fh {
                        Some(*self.he.get(gx as usize, gy as usize))
                    } else {
                        self.halo.as_ref().and_then(|outer| {
                            let ox = gx + outer.halo as isize;
                            let oy = gy + outer.halo as isize;
                            let (ow, oh) = outer.he.dims();
                            let inside = ox >= 0 && oy >= 0 && (ox as usize) < ow && (oy as usize) < oh;
                            (inside && *outer.valid.get(ox as usize, oy as usize))
                                .then(|| *outer.he.get(ox as usize, oy as usize))
                        })
                    };
                    if let Some(p) = px {
                        ctx.set(x, y, p);
                        valid.set(x, y, true);
                    }
                }
            }
            Some(HaloContext { halo, he: ctx, valid })
        } else {
            None
        };
        Ok(TeacherBundle { he, tissue_logits, cell_logits, nuclei, candidates, halo: halo_ctx })
    }
}

/// Tunable constants of the aggregation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    /// Gaussian sigma (px) applied before background thresholding.
    pub sigma: f64,
    /// Precomputed background threshold; per-tile Otsu when unset.
    pub background_threshold: Option<u8>,
    /// Mitosis ROI radius (px).
    pub roi_radius: f64,
    /// RGB-sum level at or below which ROI pixels count as dark.
    pub dark_sum_threshold: u32,
    pub dark_criterion: DarkCriterion,
    /// Settles majority votes between equally frequent classes.
    pub tie_rule: TieRule,
    /// Minimum contour area (px) kept inside a mitosis ROI.
    pub min_contour_area: usize,
    /// Candidates scoring below this are ignored.
    pub min_candidate_score: f64,
    /// Nucleus fraction on epithelial tissue needed for the epithelial fallback (strictly above).
    pub epithelial_majority: f64,
    /// Nucleus fraction on stroma needed for the fibroblast fallback (strictly above).
    pub stroma_majority: f64,
    /// Connectivity used to number mitosis regions.
    pub connectivity: Connectivity,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            sigma: 2.0,
            background_threshold: None,
            roi_radius: 30.0,
            dark_sum_threshold: 40,
            dark_criterion: DarkCriterion::Median,
            tie_rule: TieRule::LowestClassId,
            min_contour_area: 3,
            min_candidate_score: 0.0,
            epithelial_majority: 0.5,
            stroma_majority: 0.5,
            connectivity: Connectivity::Eight,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !self.roi_radius.is_finite() || self.roi_radius <= 0.0 {
            return bad(format!("roi_radius must be positive, got {}", self.roi_radius));
        }
        if self.dark_sum_threshold > 765 {
            return bad(format!("dark_sum_threshold must be within 0..=765, got {}", self.dark_sum_threshold));
        }
        if self.min_contour_area == 0 {
            return bad("min_contour_area must be at least 1".into());
        }
        for (name, v) in [("epithelial_majority", self.epithelial_majority), ("stroma_majority", self.stroma_majority)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be within [0, 1), got {v}"));
            }
        }
        if let DarkCriterion::Fraction { fraction } = self.dark_criterion {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return bad(format!("dark fraction must be within (0, 1], got {fraction}"));
            }
        }
        Ok(())
    }
}

/// Why a nucleus ended up with its class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusProvenance {
    /// Pixel votes after the per-pixel hierarchy walk (`None` = undefined).
    pub votes: Vec<(Option<ClassId>, u32)>,
    /// Per level, how many pixels had a positive winner of each class.
    pub level_hits: Vec<Vec<(ClassId, u32)>>,
    pub hierarchy_class: Option<ClassId>,
    pub fallback: Option<FallbackRule>,
    pub mitotic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    /// Final per-pixel labels: tissue classes with nucleus classes painted on top.
    pub semantic: LabelRaster,
    /// Tissue labels before nucleus painting.
    pub tissue: LabelRaster,
    /// Nuclei with their final class in `attrs.class` (`None` = undefined).
    pub instances: InstanceMap,
    pub mitosis: MitosisMask,
    pub provenance: BTreeMap<u32, NucleusProvenance>,
    pub background_threshold: u8,
}

/// Reassigns every nucleus touching the mitosis mask to `mitotic_cell` and
/// repaints its pixels.
pub fn apply_mitosis(mut result: AggregationResult, mitosis: &BitMask) -> Result<AggregationResult> {
    mitosis.ensure_dims(result.semantic.dims())?;
    let hits: Vec<(u32, Vec<usize>)> = result
        .instances
        .pixel_lists()
        .into_iter()
        .filter(|(_, px)| px.iter().any(|&i| mitosis.as_slice()[i]))
        .collect();
    for (id, pixels) in hits {
        if let Some(a) = result.instances.attrs_mut().get_mut(&id) {
            a.class = Some(ClassId::MITOTIC_CELL);
        }
        if let Some(p) = result.provenance.get_mut(&id) {
            p.mitotic = true;
        }
        let sem = result.semantic.as_mut_slice();
        for i in pixels {
            sem[i] = ClassId::MITOTIC_CELL;
        }
    }
    Ok(result)
}

/// Runs the full pipeline on one tile.
pub fn aggregate(bundle: &TeacherBundle, tax: &Taxonomy, cfg: &AggregatorConfig) -> Result<AggregationResult> {
    cfg.validate()?;
    bundle.validate(tax)?;

    let tissue = tissue_segmentation(bundle, cfg)?;
    let planes = HierarchyPlanes::new(&bundle.cell_logits, tax.hierarchy())?;
    let lists = bundle.nuclei.pixel_lists();

    let votes: Vec<(u32, NucleusVote)> = lists
        .par_iter()
        .map(|(id, pixels)| (*id, planes.classify(pixels, cfg.tie_rule)))
        .collect();
    let mut classes: BTreeMap<u32, Option<ClassId>> = votes.iter().map(|(id, v)| (*id, v.class)).collect();
    let rules = fallback::apply(&bundle.nuclei, &lists, &mut classes, &tissue.labels, cfg)?;

    let mitosis = detect_mitosis(&bundle.candidates, &bundle.he, bundle.halo.as_ref(), &tissue.labels, cfg)?;

    let mut instances = bundle.nuclei.clone();
    let mut provenance = BTreeMap::new();
    for (id, vote) in votes {
        let class = classes[&id];
        if let Some(a) = instances.attrs_mut().get_mut(&id) {
            a.class = class;
        }
        provenance.insert(
            id,
            NucleusProvenance {
                votes: vote.votes,
                level_hits: vote.level_hits,
                hierarchy_class: vote.class,
                fallback: rules.get(&id).copied().flatten(),
                mitotic: false,
            },
        );
    }

    let mut semantic = tissue.labels.clone();
    {
        let sem = semantic.as_mut_slice();
        for (id, pixels) in &lists {
            if let Some(c) = classes[id] {
                for &i in pixels {
                    sem[i] = c;
                }
            }
        }
    }

    let result = AggregationResult {
        semantic,
        tissue: tissue.labels,
        instances,
        mitosis: mitosis.clone(),
        provenance,
        background_threshold: tissue.background_threshold,
    };
    apply_mitosis(result, &mitosis.mask)
}

/// Instance-class raster convenience: class of the nucleus at each pixel.
pub fn nucleus_class_raster(result: &AggregationResult) -> Grid<Option<ClassId>> {
    let attrs = result.instances.attrs();
    result.instances.ids().map(|&id| if id == 0 { None } else { attrs.get(&id).and_then(|a| a.class) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::TeacherType;

    pub(crate) fn blank_bundle(w: usize, h: usize) -> TeacherBundle {
        let he = RgbTile::filled(w, h, [128, 128, 128]).unwrap();
        let tissue = LogitStack::new(w, h, TISSUE_CHANNELS.to_vec(), vec![vec![-1.0; w * h]; 3]).unwrap();
        let cell = LogitStack::new(w, h, CELL_CHANNELS.to_vec(), vec![vec![-1.0; w * h]; 10]).unwrap();
        TeacherBundle {
            he,
            tissue_logits: tissue,
            cell_logits: cell,
            nuclei: InstanceMap::empty(w, h).unwrap(),
            candidates: vec![],
            halo: None,
        }
    }

    #[test]
    fn empty_nuclei_and_negative_logits_give_stroma() {
        let b = blank_bundle(16, 12);
        let r = aggregate(&b, Taxonomy::builtin(), &AggregatorConfig::default()).unwrap();
        assert!(r.semantic.as_slice().iter().all(|&c| c == ClassId::STROMA));
        assert_eq!(r.mitosis.mask.count(), 0);
    }

    #[test]
    fn missing_channel_is_reported() {
        let mut b = blank_bundle(4, 4);
        b.cell_logits = LogitStack::zeros(4, 4, vec![ClassId::LYMPHOCYTE]).unwrap();
        let err = aggregate(&b, Taxonomy::builtin(), &AggregatorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingChannel(_)));
    }

    #[test]
    fn nucleus_paints_over_tissue_and_mitosis_supersedes() {
        let mut b = blank_bundle(10, 10);
        let ids = Grid::from_fn(10, 10, |x, y| if (2..5).contains(&x) && (2..5).contains(&y) { 1 } else { 0 }).unwrap();
        b.nuclei = InstanceMap::from_ids(ids.clone(), |_| (Some(TeacherType::Inflammatory), None));
        for (i, &id) in ids.as_slice().iter().enumerate() {
            if id == 1 {
                b.cell_logits.plane_mut(ClassId::LYMPHOCYTE).unwrap()[i] = 2.0;
            }
        }
        let r = aggregate(&b, Taxonomy::builtin(), &AggregatorConfig::default()).unwrap();
        assert_eq!(*r.semantic.get(3, 3), ClassId::LYMPHOCYTE);
        assert_eq!(*r.semantic.get(0, 0), ClassId::STROMA);
        assert_eq!(r.instances.get(1).unwrap().class, Some(ClassId::LYMPHOCYTE));

        let mut mask = BitMask::filled(10, 10, false).unwrap();
        mask.set(4, 4, true);
        let r = apply_mitosis(r, &mask).unwrap();
        assert_eq!(r.instances.get(1).unwrap().class, Some(ClassId::MITOTIC_CELL));
        assert!(r.provenance[&1].mitotic);
        assert_eq!(*r.semantic.get(2, 2), ClassId::MITOTIC_CELL);
    }

    #[test]
    fn mitosis_requires_intersection() {
        let mut b = blank_bundle(10, 10);
        let ids = Grid::from_fn(10, 10, |x, y| if x < 3 && y < 3 { 1 } else { 0 }).unwrap();
        b.nuclei = InstanceMap::from_ids(ids, |_| (None, None));
        b.cell_logits.plane_mut(ClassId::EPITHELIAL_TISSUE).unwrap().iter_mut().for_each(|v| *v = 1.0);
        let r = aggregate(&b, Taxonomy::builtin(), &AggregatorConfig::default()).unwrap();
        let before = r.clone();
        let mut mask = BitMask::filled(10, 10, false).unwrap();
        mask.set(4, 1, true); // one pixel gap from the nucleus
        let after = apply_mitosis(r.clone(), &mask).unwrap();
        assert_eq!(after.instances, before.instances);
        let empty = BitMask::filled(10, 10, false).unwrap();
        assert_eq!(apply_mitosis(r, &empty).unwrap(), before);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AggregatorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sigma = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = AggregatorConfig { min_contour_area: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&AggregatorConfig::default()).unwrap();
        let back: AggregatorConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AggregatorConfig::default());
        let partial: AggregatorConfig = serde_json::from_str(r#"{"roi_radius": 12}"#).unwrap();
        assert_eq!(partial.roi_radius, 12.0);
        assert_eq!(partial.dark_sum_threshold, 40);
    }
}
