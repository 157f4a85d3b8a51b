//! Cell counts from label rasters, either by connected regions or by pixel
//! area divided by a calibrated mean area per cell.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::components::{label, Connectivity};
use crate::raster::{BitMask, LabelRaster};
use crate::taxonomy::ClassId;

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

/// Number of 8-connected regions of `class`.
pub fn count_by_components(mask: &LabelRaster, class: ClassId) -> usize {
    let (_, n) = label(&BitMask::from_labels(mask, class), Connectivity::Eight);
    n as usize
}

pub fn pixel_area(mask: &LabelRaster, class: ClassId) -> u64 {
    mask.as_slice().iter().filter(|&&c| c == class).count() as u64
}

pub fn estimate_count_by_area(mask: &LabelRaster, class: ClassId, mean_area: f64) -> Result<f64> {
    if !mean_area.is_finite() || mean_area <= 0.0 {
        return Err(Error::InvalidParameter(format!("mean area per cell must be positive, got {mean_area}")));
    }
    Ok(pixel_area(mask, class) as f64 / mean_area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub class: ClassId,
    pub pixel_area: u64,
    pub component_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_area_per_cell: Option<f64>,
}

impl CountRecord {
    pub fn measure(mask: &LabelRaster, class: ClassId, mean_area_per_cell: Option<f64>) -> Self {
        CountRecord {
            class,
            pixel_area: pixel_area(mask, class),
            component_count: count_by_components(mask, class) as u64,
            mean_area_per_cell,
        }
    }

    pub fn estimated_count(&self) -> Option<f64> {
        self.mean_area_per_cell.map(|a| self.pixel_area as f64 / a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub pixel_area: f64,
    pub reference_count: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Mean pixel area per cell.
    pub slope: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Least-squares fit of `count = area / slope` through the origin.
///
/// `r_squared` uses the uncentered total sum of squares, matching the
/// through-origin model.
pub fn calibrate(pairs: &[CalibrationPair]) -> Result<Calibration> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate(format!("calibration needs at least 2 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|p| !p.pixel_area.is_finite() || !p.reference_count.is_finite()) {
        return Err(Error::InvalidParameter("calibration pairs must be finite".to_owned()));
    }
    let saa: f64 = pairs.iter().map(|p| p.pixel_area * p.pixel_area).sum();
    if saa == 0.0 {
        return Err(Error::Degenerate("all calibration areas are zero".to_owned()));
    }
    let sac: f64 = pairs.iter().map(|p| p.pixel_area * p.reference_count).sum();
    let b = sac / saa;
    if b <= 0.0 {
        return Err(Error::Degenerate("fitted cells per pixel is not positive".to_owned()));
    }
    let ss_res: f64 = pairs.iter().map(|p| (p.reference_count - b * p.pixel_area).powi(2)).sum();
    let ss_tot: f64 = pairs.iter().map(|p| p.reference_count * p.reference_count).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    // saa / sac rather than 1 / b: exact whenever counts are exactly proportional
    Ok(Calibration { slope: saa / sac, r_squared, n: pairs.len() })
}

/// Calibrations keyed by dataset id, then class name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub schema_version: u32,
    pub datasets: BTreeMap<String, BTreeMap<String, Calibration>>,
}

impl CalibrationTable {
    pub fn new() -> Self {
        CalibrationTable { schema_version: CALIBRATION_SCHEMA_VERSION, datasets: BTreeMap::new() }
    }

    pub fn insert(&mut self, dataset: &str, class: &str, cal: Calibration) {
        self.datasets.entry(dataset.to_owned()).or_default().insert(class.to_owned(), cal);
    }

    pub fn get(&self, dataset: &str, class: &str) -> Option<&Calibration> {
        self.datasets.get(dataset)?.get(class)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: CalibrationTable = serde_json::from_str(&text)?;
        if table.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported calibration schema_version {}", table.schema_version)));
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration tables serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn pairs(v: &[(f64, f64)]) -> Vec<CalibrationPair> {
        v.iter().map(|&(a, c)| CalibrationPair { pixel_area: a, reference_count: c }).collect()
    }

    #[test]
    fn area_estimate() {
        let l = ClassId::LYMPHOCYTE;
        let mut data = vec![ClassId::BACKGROUND; 1000];
        data[..500].fill(l);
        let m = Grid::from_vec(100, 10, data).unwrap();
        assert_eq!(estimate_count_by_area(&m, l, 25.0).unwrap(), 20.0);
        assert_eq!(estimate_count_by_area(&m, l, 50.0).unwrap(), 10.0);
        assert_eq!(estimate_count_by_area(&m, ClassId::FIBROBLAST, 25.0).unwrap(), 0.0);
        assert!(estimate_count_by_area(&m, l, 0.0).is_err());
        assert!(estimate_count_by_area(&m, l, -3.0).is_err());
    }

    #[test]
    fn proportional_fit() {
        let c = calibrate(&pairs(&[(250.0, 10.0), (500.0, 20.0), (75.0, 3.0)])).unwrap();
        assert!((c.slope - 25.0).abs() < 1e-12);
        assert!((c.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_closed_form() {
        // b = (a1c1 + a2c2) / (a1² + a2²)
        let c = calibrate(&pairs(&[(10.0, 1.0), (20.0, 3.0)])).unwrap();
        let b = (10.0 + 60.0) / (100.0 + 400.0);
        assert!((c.slope - 1.0 / b).abs() < 1e-12);
        let res = (1.0 - b * 10.0f64).powi(2) + (3.0 - b * 20.0f64).powi(2);
        assert!((c.r_squared - (1.0 - res / 10.0)).abs() < 1e-12);
    }

    #[test]
    fn outlier_lowers_fit() {
        let p = pairs(&[(100.0, 4.0), (200.0, 8.0), (300.0, 12.0), (100.0, 10.0)]);
        let c = calibrate(&p).unwrap();
        assert!(c.r_squared < 1.0);
        let ratios: Vec<f64> = p.iter().map(|q| q.pixel_area / q.reference_count).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(c.slope > lo && c.slope < hi);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(calibrate(&pairs(&[(1.0, 1.0)])).is_err());
        assert!(calibrate(&pairs(&[(0.0, 1.0), (0.0, 2.0)])).is_err());
        assert!(calibrate(&pairs(&[(1.0, 0.0), (2.0, 0.0)])).is_err());
    }

    #[test]
    fn table_round_trip() {
        let mut t = CalibrationTable::new();
        t.insert("lizard", "lymphocyte", Calibration { slope: 25.0, r_squared: 0.9, n: 10 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        std::fs::write(&path, t.to_json()).unwrap();
        let back = CalibrationTable::from_path(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get("lizard", "lymphocyte").unwrap().slope, 25.0);
    }
}
