//! Inference-time decoding of student logits: force-mode leukocyte
//! reassignment for semantic output, and nucleus-level assignment for
//! panoptic output.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{InstanceMap, LabelRaster, LogitStack};
use crate::taxonomy::{ClassId, Taxonomy};

/// Student output logits carrying exactly one channel per vocabulary class.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentLogits {
    stack: LogitStack,
    /// Plane index per class id.
    order: Vec<usize>,
}

impl StudentLogits {
    pub fn new(stack: LogitStack, tax: &Taxonomy) -> Result<Self> {
        let mut order = vec![usize::MAX; tax.len()];
        for (i, c) in stack.channels().iter().enumerate() {
            if !tax.contains(*c) {
                return Err(Error::InvalidRaster(format!("student channel {} is outside the vocabulary", c.0)));
            }
            order[c.index()] = i;
        }
        if let Some(missing) = order.iter().position(|&i| i == usize::MAX) {
            return Err(Error::MissingChannel(tax.name_of(ClassId(missing as u8)).unwrap_or("?").to_owned()));
        }
        Ok(StudentLogits { stack, order })
    }

    pub fn stack(&self) -> &LogitStack {
        &self.stack
    }

    pub fn dims(&self) -> (usize, usize) {
        self.stack.dims()
    }

    #[inline]
    fn value(&self, c: ClassId, i: usize) -> f32 {
        self.stack.planes()[self.order[c.index()]][i]
    }

    /// Argmax over `classes` at pixel `i`; ties go to the lowest class id.
    #[inline]
    fn argmax(&self, classes: &[ClassId], i: usize) -> ClassId {
        let mut best = classes[0];
        let mut best_v = self.value(best, i);
        for &c in &classes[1..] {
            let v = self.value(c, i);
            if v > best_v || (v == best_v && c < best) {
                best = c;
                best_v = v;
            }
        }
        best
    }
}

/// Per-pixel argmax; pixels won by `leukocyte` take the highest-scoring
/// leukocyte subtype instead, whatever its sign.
pub fn force_mode(s: &StudentLogits) -> LabelRaster {
    let (w, h) = s.dims();
    let all: Vec<ClassId> = (0..s.order.len()).map(|i| ClassId(i as u8)).collect();
    let mut out = vec![ClassId::BACKGROUND; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let c = s.argmax(&all, i);
            *o = if c == ClassId::LEUKOCYTE { s.argmax(&ClassId::LEUKOCYTE_SUBTYPES, i) } else { c };
        }
    });
    LabelRaster::from_vec(w, h, out).expect("same dimensions")
}

/// Which classes may label nucleus pixels and which may label the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissiblePartition {
    pub nucleus: Vec<ClassId>,
    pub non_nucleus: Vec<ClassId>,
}

impl Default for AdmissiblePartition {
    fn default() -> Self {
        AdmissiblePartition {
            nucleus: vec![
                ClassId::ENDOTHELIAL,
                ClassId::LYMPHOCYTE,
                ClassId::PLASMA_CELL,
                ClassId::MYELOID_CELL,
                ClassId::EOSINOPHIL,
                ClassId::NEUTROPHIL,
                ClassId::EPITHELIAL_CELL_NUCLEUS,
                ClassId::FIBROBLAST,
                ClassId::MITOTIC_CELL,
            ],
            non_nucleus: vec![
                ClassId::BACKGROUND,
                ClassId::STROMA,
                ClassId::SMOOTH_MUSCLE,
                ClassId::EPITHELIAL_TISSUE,
                ClassId::RED_BLOOD_CELL,
            ],
        }
    }
}

impl AdmissiblePartition {
    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        for (name, set) in [("nucleus", &self.nucleus), ("non-nucleus", &self.non_nucleus)] {
            if set.is_empty() {
                return Err(Error::InvalidParameter(format!("{name} class set is empty")));
            }
            if set.contains(&ClassId::LEUKOCYTE) {
                return Err(Error::InvalidParameter(format!("{name} class set must not contain leukocyte")));
            }
            if let Some(c) = set.iter().find(|c| !tax.contains(**c)) {
                return Err(Error::InvalidParameter(format!("{name} class {} is outside the vocabulary", c.0)));
            }
        }
        Ok(())
    }
}

/// Panoptic decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticAssignment {
    /// Nucleus pixels carry their nucleus class; the rest their pixel class.
    pub labels: LabelRaster,
    pub nucleus_classes: BTreeMap<u32, ClassId>,
}

/// Each nucleus takes the admissible class with the largest logit sum over
/// its pixels; every other pixel takes its admissible non-nucleus argmax.
pub fn assign_panoptic(
    s: &StudentLogits,
    nuclei: &InstanceMap,
    partition: &AdmissiblePartition,
) -> Result<PanopticAssignment> {
    nuclei.ids().ensure_dims(s.dims())?;
    let (w, h) = s.dims();
    let mut nucleus_set = partition.nucleus.clone();
    nucleus_set.sort();
    let mut other_set = partition.non_nucleus.clone();
    other_set.sort();

    let ids = nuclei.ids().as_slice();
    let mut out = vec![ClassId::BACKGROUND; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            if ids[i] == 0 {
                *o = s.argmax(&other_set, i);
            }
        }
    });

    let lists = nuclei.pixel_lists();
    let assigned: Vec<(u32, ClassId)> = lists
        .par_iter()
        .map(|(id, pixels)| {
            let mut best = nucleus_set[0];
            let mut best_sum = f64::NEG_INFINITY;
            for &c in &nucleus_set {
                let sum: f64 = pixels.iter().map(|&i| s.value(c, i) as f64).sum();
                if sum > best_sum {
                    best = c;
                    best_sum = sum;
                }
            }
            (*id, best)
        })
        .collect();
    for ((_, pixels), (_, c)) in lists.iter().zip(&assigned) {
        for &i in pixels {
            out[i] = *c;
        }
    }
    Ok(PanopticAssignment {
        labels: LabelRaster::from_vec(w, h, out)?,
        nucleus_classes: assigned.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn student(n: usize, set: &[(ClassId, Vec<f32>)]) -> StudentLogits {
        let tax = Taxonomy::builtin();
        let channels: Vec<ClassId> = tax.ids().collect();
        let mut stack = LogitStack::new(n, 1, channels.clone(), vec![vec![-5.0; n]; channels.len()]).unwrap();
        for (c, v) in set {
            stack.plane_mut(*c).unwrap().copy_from_slice(v);
        }
        StudentLogits::new(stack, tax).unwrap()
    }

    #[test]
    fn channel_set_must_match_vocabulary() {
        let stack = LogitStack::zeros(2, 2, vec![ClassId::LYMPHOCYTE]).unwrap();
        assert!(matches!(StudentLogits::new(stack, Taxonomy::builtin()), Err(Error::MissingChannel(_))));
    }

    #[test]
    fn force_mode_examples() {
        let s = student(
            3,
            vec![
                (ClassId::LYMPHOCYTE, vec![2.0, 0.0, -1.0]),
                (ClassId::LEUKOCYTE, vec![1.0, 3.0, 3.0]),
                (ClassId::NEUTROPHIL, vec![-3.0, 0.5, -1.0]),
                (ClassId::PLASMA_CELL, vec![-4.0, -4.0, -1.0]),
                (ClassId::MYELOID_CELL, vec![-4.0, -4.0, -1.0]),
                (ClassId::EOSINOPHIL, vec![-4.0, -4.0, -1.0]),
            ]
            .as_slice(),
        );
        let labels = force_mode(&s);
        assert_eq!(labels.as_slice(), &[ClassId::LYMPHOCYTE, ClassId::NEUTROPHIL, ClassId::LYMPHOCYTE]);
    }

    #[test]
    fn panoptic_sums_over_nucleus() {
        // 5-pixel nucleus: lymphocyte sums to 4.0, plasma to 3.9
        let s = student(
            6,
            &[
                (ClassId::LYMPHOCYTE, vec![0.8, 0.8, 0.8, 0.8, 0.8, -1.0]),
                (ClassId::PLASMA_CELL, vec![3.0, 0.3, 0.2, 0.2, 0.2, -1.0]),
                (ClassId::LEUKOCYTE, vec![9.0; 6]),
                (ClassId::STROMA, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            ],
        );
        let ids = Grid::from_vec(6, 1, vec![1, 1, 1, 1, 1, 0]).unwrap();
        let nuclei = InstanceMap::from_ids(ids, |_| (None, None));
        let out = assign_panoptic(&s, &nuclei, &AdmissiblePartition::default()).unwrap();
        assert_eq!(out.nucleus_classes[&1], ClassId::LYMPHOCYTE);
        assert_eq!(*out.labels.get(0, 0), ClassId::LYMPHOCYTE);
        assert_eq!(*out.labels.get(5, 0), ClassId::STROMA);
        assert!(!out.labels.as_slice().contains(&ClassId::LEUKOCYTE));
    }

    #[test]
    fn partition_validation() {
        let tax = Taxonomy::builtin();
        assert!(AdmissiblePartition::default().validate(tax).is_ok());
        let mut p = AdmissiblePartition::default();
        p.nucleus.push(ClassId::LEUKOCYTE);
        assert!(p.validate(tax).is_err());
    }
}
