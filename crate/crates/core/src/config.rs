//! Run-level configuration shared by every entry point.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, DarkCriterion, TieRule};
use crate::error::{Error, Result};
use crate::raster::Connectivity;
use crate::tiling::TilePlan;
use crate::tme::DEFAULT_MARGIN_UM;

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sigma: f64,
    pub background_threshold: Option<u8>,
    pub connectivity: Connectivity,
    pub roi_radius: f64,
    pub dark_sum_threshold: u32,
    pub dark_criterion: DarkCriterion,
    pub min_contour_area: usize,
    pub min_candidate_score: f64,
    pub epithelial_majority: f64,
    pub stroma_majority: f64,
    pub tie_rule: TieRule,
    /// Tumor margin band width (µm).
    pub margin_um: f64,
    /// Process frames window by window with this plan.
    pub tiling: Option<TilePlan>,
    /// Halve both axes before aggregation.
    pub downscale2: bool,
    /// Named auxiliary files (`taxonomy`, `class_map`, `calibration`, ...),
    /// relative to the config file.
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AggregatorConfig::default();
        RunConfig {
            sigma: a.sigma,
            background_threshold: a.background_threshold,
            connectivity: a.connectivity,
            roi_radius: a.roi_radius,
            dark_sum_threshold: a.dark_sum_threshold,
            dark_criterion: a.dark_criterion,
            min_contour_area: a.min_contour_area,
            min_candidate_score: a.min_candidate_score,
            epithelial_majority: a.epithelial_majority,
            stroma_majority: a.stroma_majority,
            tie_rule: a.tie_rule,
            margin_um: DEFAULT_MARGIN_UM,
            tiling: None,
            downscale2: false,
            paths: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative `paths` entries resolve against its directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in cfg.paths.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn aggregator(&self) -> AggregatorConfig {
        AggregatorConfig {
            sigma: self.sigma,
            background_threshold: self.background_threshold,
            roi_radius: self.roi_radius,
            dark_sum_threshold: self.dark_sum_threshold,
            dark_criterion: self.dark_criterion,
            tie_rule: self.tie_rule,
            min_contour_area: self.min_contour_area,
            min_candidate_score: self.min_candidate_score,
            epithelial_majority: self.epithelial_majority,
            stroma_majority: self.stroma_majority,
            connectivity: self.connectivity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.aggregator().validate()?;
        if !self.margin_um.is_finite() || self.margin_um <= 0.0 {
            return Err(Error::InvalidParameter(format!("margin_um must be positive, got {}", self.margin_um)));
        }
        if let Some(plan) = &self.tiling {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    /// Canonical serialization: struct fields in declaration order, maps sorted.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
