use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AggregatorConfig;
use crate::error::Result;
use crate::raster::{InstanceMap, LabelRaster, TeacherType};
use crate::taxonomy::ClassId;

/// Fallback that assigned a nucleus its class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    /// Only the level-1 epithelium logit fired: the nucleus is an epithelial cell.
    EpithelialLevelOne,
    /// Unclassified nucleus lying mostly on epithelial tissue.
    EpithelialTissue,
    /// Unclassified nucleus in stroma that the nucleus teacher calls connective.
    ConnectiveInStroma,
}

/// Applies the epithelial-cell and fibroblast fallbacks to unclassified
/// nuclei, updating `classes` in place. Returns the rule applied per nucleus.
pub fn fallback_rules(
    nuclei: &InstanceMap,
    classes: &mut BTreeMap<u32, Option<ClassId>>,
    tissue: &LabelRaster,
    cfg: &AggregatorConfig,
) -> Result<BTreeMap<u32, Option<FallbackRule>>> {
    let lists = nuclei.pixel_lists();
    apply(nuclei, &lists, classes, tissue, cfg)
}

pub(super) fn apply(
    nuclei: &InstanceMap,
    lists: &[(u32, Vec<usize>)],
    classes: &mut BTreeMap<u32, Option<ClassId>>,
    tissue: &LabelRaster,
    cfg: &AggregatorConfig,
) -> Result<BTreeMap<u32, Option<FallbackRule>>> {
    tissue.ensure_dims(nuclei.dims())?;
    let labels = tissue.as_slice();
    let mut applied = BTreeMap::new();
    for (id, pixels) in lists {
        let Some(current) = classes.get_mut(id) else { continue };
        let rule = match *current {
            Some(ClassId::EPITHELIAL_TISSUE) => Some(FallbackRule::EpithelialLevelOne),
            None if !pixels.is_empty() => {
                let n = pixels.len() as f64;
                let on = |c: ClassId| pixels.iter().filter(|&&i| labels[i] == c).count() as f64 / n;
                let teacher = nuclei.get(*id).and_then(|a| a.teacher_type);
                if on(ClassId::EPITHELIAL_TISSUE) > cfg.epithelial_majority {
                    Some(FallbackRule::EpithelialTissue)
                } else if teacher == Some(TeacherType::Connective) && on(ClassId::STROMA) > cfg.stroma_majority {
                    Some(FallbackRule::ConnectiveInStroma)
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some(rule) = rule {
            *current = Some(match rule {
                FallbackRule::ConnectiveInStroma => ClassId::FIBROBLAST,
                _ => ClassId::EPITHELIAL_CELL_NUCLEUS,
            });
        }
        applied.insert(*id, rule);
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn setup(teacher: Option<TeacherType>, epi_cols: usize) -> (InstanceMap, LabelRaster) {
        // 10-pixel nucleus on row 0; the first `epi_cols` pixels sit on epithelium
        let ids = Grid::from_fn(10, 2, |_, y| if y == 0 { 1 } else { 0 }).unwrap();
        let nuclei = InstanceMap::from_ids(ids, |_| (teacher, None));
        let tissue = LabelRaster::from_fn(10, 2, |x, _| {
            if x < epi_cols {
                ClassId::EPITHELIAL_TISSUE
            } else {
                ClassId::STROMA
            }
        })
        .unwrap();
        (nuclei, tissue)
    }

    #[test]
    fn undefined_on_epithelium_becomes_epithelial_cell() {
        let (n, t) = setup(None, 8);
        let mut classes = BTreeMap::from([(1, None)]);
        let rules = fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], Some(ClassId::EPITHELIAL_CELL_NUCLEUS));
        assert_eq!(rules[&1], Some(FallbackRule::EpithelialTissue));
    }

    #[test]
    fn exactly_half_is_not_a_majority() {
        let (n, t) = setup(None, 5);
        let mut classes = BTreeMap::from([(1, None)]);
        fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], None);
    }

    #[test]
    fn connective_in_stroma_becomes_fibroblast() {
        let (n, t) = setup(Some(TeacherType::Connective), 0);
        let mut classes = BTreeMap::from([(1, None)]);
        fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], Some(ClassId::FIBROBLAST));

        let (n, t) = setup(Some(TeacherType::Inflammatory), 0);
        let mut classes = BTreeMap::from([(1, None)]);
        fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], None);
    }

    #[test]
    fn classified_nuclei_are_untouched() {
        let (n, t) = setup(Some(TeacherType::Connective), 10);
        let mut classes = BTreeMap::from([(1, Some(ClassId::LYMPHOCYTE))]);
        fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], Some(ClassId::LYMPHOCYTE));
    }

    #[test]
    fn level_one_epithelium_becomes_epithelial_cell() {
        let (n, t) = setup(None, 0);
        let mut classes = BTreeMap::from([(1, Some(ClassId::EPITHELIAL_TISSUE))]);
        fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], Some(ClassId::EPITHELIAL_CELL_NUCLEUS));
        let mut classes = BTreeMap::from([(1, Some(ClassId::SMOOTH_MUSCLE))]);
        fallback_rules(&n, &mut classes, &t, &AggregatorConfig::default()).unwrap();
        assert_eq!(classes[&1], Some(ClassId::SMOOTH_MUSCLE));
    }
}
