use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{mann_whitney_u, MwMethod};
use super::SlideMetrics;
use crate::error::{Error, Result};

/// One row of a cohort manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifestEntry {
    pub case_id: String,
    pub slides: Vec<PathBuf>,
    pub mpp: f64,
    #[serde(default)]
    pub genes: BTreeMap<String, bool>,
}

impl CaseManifestEntry {
    /// Reads a JSON array or a CSV with columns `case_id`, `slides`
    /// (`;`-separated), `mpp`, then one 0/1 column per gene.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseManifestEntry>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) || text.trim_start().starts_with('[');
        let mut entries = if is_json { serde_json::from_str(&text)? } else { parse_csv(&text)? };
        // relative slide paths are resolved against the manifest directory
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut entries {
            for s in &mut e.slides {
                if s.is_relative() {
                    *s = base.join(&*s);
                }
            }
        }
        Ok(entries)
    }
}

fn parse_flag(v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "mut" | "mutated" => Ok(true),
        "0" | "false" | "no" | "wt" | "wildtype" => Ok(false),
        other => Err(Error::Format(format!("unrecognised mutation flag `{other}`"))),
    }
}

fn parse_csv(text: &str) -> Result<Vec<CaseManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("manifest is missing the `{name}` column")))
    };
    let (ci, si, mi) = (col("case_id")?, col("slides")?, col("mpp")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let mut genes = BTreeMap::new();
        for (i, h) in headers.iter().enumerate() {
            if i != ci && i != si && i != mi {
                genes.insert(h.to_owned(), parse_flag(&rec[i])?);
            }
        }
        out.push(CaseManifestEntry {
            case_id: rec[ci].to_owned(),
            slides: rec[si].split(';').filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            mpp: rec[mi].parse().map_err(|_| Error::Format(format!("bad mpp `{}`", &rec[mi])))?,
            genes,
        });
    }
    Ok(out)
}

/// Case-level metrics: the mean over slides of every applicable value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub slides: usize,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub genes: BTreeMap<String, bool>,
}

impl CaseRecord {
    pub fn from_slides(case_id: &str, slides: &[SlideMetrics], genes: BTreeMap<String, bool>) -> Self {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in slides {
            for (name, v) in s.metric_values() {
                let e = acc.entry(name).or_insert((0.0, 0));
                if let Some(v) = v {
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        let metrics = acc.into_iter().map(|(k, (sum, n))| (k, (n > 0).then(|| sum / n as f64))).collect();
        CaseRecord { case_id: case_id.to_owned(), slides: slides.len(), metrics, genes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Enriched,
    Depleted,
    Unchanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationStatus {
    Tested,
    InsufficientN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub metric: String,
    pub gene: String,
    pub n_mutated: usize,
    pub n_wildtype: usize,
    pub status: AssociationStatus,
    pub u: Option<f64>,
    /// Nominal, uncorrected.
    pub p_value: Option<f64>,
    pub method: Option<MwMethod>,
    /// Mutated relative to wild type.
    pub direction: Option<Direction>,
}

impl AssociationRow {
    pub const CSV_HEADER: &'static str = "metric,gene,n_mutated,n_wildtype,status,u,p_value,method,direction";

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let status = match self.status {
            AssociationStatus::Tested => "tested",
            AssociationStatus::InsufficientN => "insufficient n",
        };
        let method = match self.method {
            Some(MwMethod::Exact) => "exact",
            Some(MwMethod::Normal) => "normal",
            None => "",
        };
        let direction = match self.direction {
            Some(Direction::Enriched) => "enriched",
            Some(Direction::Depleted) => "depleted",
            Some(Direction::Unchanged) => "unchanged",
            None => "",
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.metric,
            self.gene,
            self.n_mutated,
            self.n_wildtype,
            status,
            opt(self.u),
            opt(self.p_value),
            method,
            direction
        )
    }
}

/// Mann–Whitney U of each metric between mutated and wild-type cases for
/// each gene. Groups with fewer than two cases are marked, not tested.
pub fn association_table(cases: &[CaseRecord], genes: &[String]) -> Result<Vec<AssociationRow>> {
    let mut metrics: Vec<&String> = cases.iter().flat_map(|c| c.metrics.keys()).collect();
    metrics.sort();
    metrics.dedup();
    let mut rows = Vec::new();
    for metric in metrics {
        for gene in genes {
            let mut mutated = Vec::new();
            let mut wild = Vec::new();
            for c in cases {
                if let (Some(&flag), Some(Some(v))) = (c.genes.get(gene), c.metrics.get(metric)) {
                    if flag {
                        mutated.push(*v);
                    } else {
                        wild.push(*v);
                    }
                }
            }
            let mut row = AssociationRow {
                metric: metric.clone(),
                gene: gene.clone(),
                n_mutated: mutated.len(),
                n_wildtype: wild.len(),
                status: AssociationStatus::InsufficientN,
                u: None,
                p_value: None,
                method: None,
                direction: None,
            };
            if mutated.len() >= 2 && wild.len() >= 2 {
                let mw = mann_whitney_u(&mutated, &wild)?;
                let mean_u = mutated.len() as f64 * wild.len() as f64 / 2.0;
                row.status = AssociationStatus::Tested;
                row.u = Some(mw.u);
                row.p_value = Some(mw.p_value);
                row.method = Some(mw.method);
                row.direction = Some(if mw.u > mean_u {
                    Direction::Enriched
                } else if mw.u < mean_u {
                    Direction::Depleted
                } else {
                    Direction::Unchanged
                });
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
