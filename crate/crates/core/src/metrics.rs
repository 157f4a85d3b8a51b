//! Mask overlap scores, Matthews correlation and the per-nucleus
//! evaluation protocol.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BitMask, InstanceMap, LabelRaster};
use crate::taxonomy::{ClassId, ClassMap, Taxonomy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn overlap(x: &BitMask, y: &BitMask) -> Result<(usize, usize, usize)> {
    y.ensure_dims(x.dims())?;
    let mut inter = 0;
    let mut nx = 0;
    let mut ny = 0;
    for (&a, &b) in x.as_slice().iter().zip(y.as_slice()) {
        nx += a as usize;
        ny += b as usize;
        inter += (a && b) as usize;
    }
    Ok((inter, nx, ny))
}

/// `2|X∩Y| / (|X|+|Y|)`; 1.0 when both masks are empty.
pub fn dice(x: &BitMask, y: &BitMask) -> Result<f64> {
    let (inter, nx, ny) = overlap(x, y)?;
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

/// `|X∩Y| / |X∪Y|`; 1.0 when both masks are empty.
pub fn iou(x: &BitMask, y: &BitMask) -> Result<f64> {
    let (inter, nx, ny) = overlap(x, y)?;
    let union = nx + ny - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Matthews correlation coefficient; 0.0 when any marginal is zero.
pub fn mcc(c: ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    // two square roots keep the product in range for large counts
    let denom = (factors[0] * factors[1]).sqrt() * (factors[2] * factors[3]).sqrt();
    (tp * tn - fp * fn_) / denom
}

/// One ground-truth nucleus under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalUnit {
    pub gt_id: u32,
    pub gt_class: ClassId,
    /// `None` when every covered pixel is unmapped.
    pub pred_class: Option<ClassId>,
}

/// Builds one evaluation unit per ground-truth nucleus. `map` sends both
/// ground-truth and predicted classes into the evaluation vocabulary.
pub fn eval_units(gt: &InstanceMap, pred: &LabelRaster, map: &ClassMap) -> Result<Vec<EvalUnit>> {
    pred.ensure_dims(gt.dims())?;
    let labels = pred.as_slice();
    let mut units = Vec::with_capacity(gt.len());
    let mut coverage = vec![0u64; map.len().max(1)];
    for (id, pixels) in gt.pixel_lists() {
        let attrs = gt.get(id).expect("pixel list ids come from attrs");
        let raw = attrs
            .class
            .ok_or_else(|| Error::UnmappedGroundTruth { id, class: "<none>".to_owned() })?;
        let gt_class = map
            .apply(raw)
            .ok_or_else(|| Error::UnmappedGroundTruth { id, class: raw.name() })?;
        coverage.iter_mut().for_each(|c| *c = 0);
        for &i in &pixels {
            if let Some(c) = map.apply(labels[i]) {
                coverage[c.index()] += 1;
            }
        }
        let mut pred_class = None;
        let mut best = 0;
        for (c, &n) in coverage.iter().enumerate() {
            if n > best {
                best = n;
                pred_class = Some(ClassId(c as u8));
            }
        }
        units.push(EvalUnit { gt_id: id, gt_class, pred_class });
    }
    Ok(units)
}

/// One-vs-rest counts for `class` over pooled units.
pub fn one_vs_rest(units: &[EvalUnit], class: ClassId) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for u in units {
        match (u.gt_class == class, u.pred_class == Some(class)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceClassRow {
    pub class: ClassId,
    pub name: String,
    pub gt_units: u64,
    pub counts: ConfusionCounts,
    /// `None` (not applicable) when the class has no ground-truth units.
    pub mcc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub schema_version: u32,
    pub units: u64,
    pub classes: Vec<InstanceClassRow>,
}

/// Per-class MCC over the pooled units of one or more images.
pub fn instance_report(units: &[EvalUnit], map: &ClassMap, tax: &Taxonomy) -> InstanceReport {
    let classes = map
        .targets()
        .into_iter()
        .map(|class| {
            let counts = one_vs_rest(units, class);
            let gt_units = counts.tp + counts.fn_;
            InstanceClassRow {
                class,
                name: tax.name_of(class).map(str::to_owned).unwrap_or_else(|| class.name()),
                gt_units,
                counts,
                mcc: (gt_units > 0).then(|| mcc(counts)),
            }
        })
        .collect();
    InstanceReport { schema_version: REPORT_SCHEMA_VERSION, units: units.len() as u64, classes }
}

pub fn evaluate_instances(gt: &InstanceMap, pred: &LabelRaster, map: &ClassMap, tax: &Taxonomy) -> Result<InstanceReport> {
    let units = eval_units(gt, pred, map)?;
    Ok(instance_report(&units, map, tax))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticClassRow {
    pub class: ClassId,
    pub name: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub schema_version: u32,
    pub classes: Vec<SemanticClassRow>,
}

pub fn evaluate_semantic(gt: &LabelRaster, pred: &LabelRaster, classes: &[ClassId], tax: &Taxonomy) -> Result<SemanticReport> {
    pred.ensure_dims(gt.dims())?;
    let rows = classes
        .iter()
        .map(|&class| {
            let g = BitMask::from_labels(gt, class);
            let p = BitMask::from_labels(pred, class);
            Ok(SemanticClassRow {
                class,
                name: tax.name_of(class).map(str::to_owned).unwrap_or_else(|| class.name()),
                dice: dice(&g, &p)?,
                iou: iou(&g, &p)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SemanticReport { schema_version: REPORT_SCHEMA_VERSION, classes: rows })
}

/// Combined evaluation output written by the CLI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<InstanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticReport>,
}

impl EvaluationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(sem) = &self.semantic {
            let width = sem.classes.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "class", "dice", "iou");
            for r in &sem.classes {
                let _ = writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}", r.name, r.dice, r.iou);
            }
        }
        if let Some(inst) = &self.instances {
            if !out.is_empty() {
                out.push('\n');
            }
            let width = inst.classes.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>8}",
                "class", "gt", "tp", "fp", "fn", "tn", "mcc"
            );
            for r in &inst.classes {
                let m = r.mcc.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"));
                let c = &r.counts;
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>8}",
                    r.name, r.gt_units, c.tp, c.fp, c.fn_, c.tn, m
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn mask(w: usize, bits: &[u8]) -> BitMask {
        Grid::from_vec(w, bits.len() / w, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn empty_mask_conventions() {
        let e = mask(2, &[0, 0, 0, 0]);
        let f = mask(2, &[1, 0, 0, 0]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &f).unwrap(), 0.0);
        assert_eq!(iou(&f, &e).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = mask(2, &[0, 0, 0, 0]);
        let b = mask(4, &[0, 0, 0, 0]);
        assert!(matches!(dice(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mcc_hand_case() {
        let v = mcc(ConfusionCounts::new(4, 5, 1, 2));
        assert!((v - 18.0 / 1260f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.5071).abs() < 1e-4);
        assert_eq!(mcc(ConfusionCounts::new(3, 0, 0, 0)), 0.0);
        assert_eq!(mcc(ConfusionCounts::new(3, 7, 0, 0)), 1.0);
    }

    #[test]
    fn coverage_and_unmapped() {
        let tax = Taxonomy::builtin();
        // one nucleus of 5 px: 3 lymphocyte, 2 plasma
        let ids = Grid::from_vec(5, 1, vec![1; 5]).unwrap();
        let gt = InstanceMap::from_ids(ids, |_| (None, Some(ClassId::LYMPHOCYTE)));
        let l = ClassId::LYMPHOCYTE;
        let p = ClassId::PLASMA_CELL;
        let pred = Grid::from_vec(5, 1, vec![l, p, l, p, l]).unwrap();
        let map = ClassMap::identity(tax);
        let units = eval_units(&gt, &pred, &map).unwrap();
        assert_eq!(units[0].pred_class, Some(l));

        // ties go to the lower id
        let pred = Grid::from_vec(5, 1, vec![p, p, l, l, ClassId::BACKGROUND]).unwrap();
        assert_eq!(eval_units(&gt, &pred, &map).unwrap()[0].pred_class, Some(l));

        // unmapped pixels never win; fully unmapped coverage is a miss
        let json = r#"{"default": "identity", "map": {"plasma_cell": null}}"#;
        let map = ClassMap::from_json(json, tax).unwrap();
        let pred = Grid::from_vec(5, 1, vec![p, p, p, p, l]).unwrap();
        assert_eq!(eval_units(&gt, &pred, &map).unwrap()[0].pred_class, Some(l));
        let pred = Grid::from_vec(5, 1, vec![p; 5]).unwrap();
        assert_eq!(eval_units(&gt, &pred, &map).unwrap()[0].pred_class, None);

        // unmapped ground truth is a bad map
        let gt = InstanceMap::from_ids(Grid::from_vec(5, 1, vec![1; 5]).unwrap(), |_| (None, Some(p)));
        assert!(matches!(eval_units(&gt, &pred, &map), Err(Error::UnmappedGroundTruth { .. })));
    }

    #[test]
    fn report_marks_absent_classes() {
        let tax = Taxonomy::builtin();
        let ids = Grid::from_vec(4, 1, vec![1, 1, 2, 2]).unwrap();
        let gt = InstanceMap::from_ids(ids, |id| (None, Some(if id == 1 { ClassId::LYMPHOCYTE } else { ClassId::FIBROBLAST })));
        let pred = Grid::from_vec(4, 1, vec![ClassId::LYMPHOCYTE, ClassId::LYMPHOCYTE, ClassId::FIBROBLAST, ClassId::FIBROBLAST]).unwrap();
        let report = evaluate_instances(&gt, &pred, &ClassMap::identity(tax), tax).unwrap();
        for row in &report.classes {
            if row.class == ClassId::LYMPHOCYTE || row.class == ClassId::FIBROBLAST {
                assert_eq!(row.mcc, Some(1.0));
            } else {
                assert_eq!(row.mcc, None);
            }
        }
        let full = EvaluationReport { schema_version: REPORT_SCHEMA_VERSION, instances: Some(report), semantic: None };
        let table = full.to_table();
        assert!(table.contains("lymphocyte"));
        assert!(table.contains("n/a"));
    }
}
