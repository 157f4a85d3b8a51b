use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::LogitStack;
use crate::taxonomy::{ClassId, Hierarchy};

/// How a vote between equally frequent classes is settled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// The lowest class id wins.
    #[default]
    LowestClassId,
    /// The nucleus stays undefined.
    Undefined,
}

/// Hierarchy channels resolved against a logit stack, in level order.
pub struct HierarchyPlanes<'a> {
    levels: Vec<Vec<(ClassId, &'a [f32])>>,
}

/// Outcome of classifying one nucleus.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusVote {
    /// Majority class, `None` when undefined.
    pub class: Option<ClassId>,
    /// Pixel vote counts (`None` = undefined pixel), ascending.
    pub votes: Vec<(Option<ClassId>, u32)>,
    /// For each level, pixels whose positive winner was each class.
    pub level_hits: Vec<Vec<(ClassId, u32)>>,
}

impl<'a> HierarchyPlanes<'a> {
    pub fn new(logits: &'a LogitStack, hierarchy: &Hierarchy) -> Result<Self> {
        let levels = hierarchy
            .levels()
            .iter()
            .map(|level| level.iter().map(|&c| Ok((c, logits.require(c)?))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(HierarchyPlanes { levels })
    }

    /// Positive argmax of one level at pixel `i`; earlier-listed classes win ties.
    #[inline]
    fn level_winner(level: &[(ClassId, &[f32])], i: usize) -> Option<ClassId> {
        let mut best: Option<(ClassId, f32)> = None;
        for &(c, plane) in level {
            let v = plane[i];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        best.filter(|&(_, v)| v > 0.0).map(|(c, _)| c)
    }

    /// Walks the levels top-down; each positive level winner overrides the
    /// assignment so far. `None` when no level has a positive logit.
    #[inline]
    pub fn pixel_class(&self, i: usize) -> Option<ClassId> {
        let mut class = None;
        for level in &self.levels {
            if let Some(c) = Self::level_winner(level, i) {
                class = Some(c);
            }
        }
        class
    }

    /// Per-pixel hierarchy walk followed by a majority vote over the nucleus.
    /// Ties between classes follow `tie`; undefined wins only as a strict
    /// plurality.
    pub fn classify(&self, pixels: &[usize], tie: TieRule) -> NucleusVote {
        let mut votes: BTreeMap<Option<ClassId>, u32> = BTreeMap::new();
        let mut hits: Vec<BTreeMap<ClassId, u32>> = vec![BTreeMap::new(); self.levels.len()];
        for &i in pixels {
            let mut class = None;
            for (level, h) in self.levels.iter().zip(hits.iter_mut()) {
                if let Some(c) = Self::level_winner(level, i) {
                    *h.entry(c).or_default() += 1;
                    class = Some(c);
                }
            }
            *votes.entry(class).or_default() += 1;
        }
        let undefined = votes.get(&None).copied().unwrap_or(0);
        let mut best: Option<(ClassId, u32)> = None;
        for (c, &n) in &votes {
            if let Some(c) = c {
                // ascending iteration keeps the lowest id on ties
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((*c, n));
                }
            }
        }
        let tied = |n: u32| votes.iter().filter(|(c, &k)| c.is_some() && k == n).count() > 1;
        let class = match best {
            Some((_, n)) if tie == TieRule::Undefined && tied(n) => None,
            Some((c, n)) if n >= undefined => Some(c),
            _ => None,
        };
        NucleusVote {
            class,
            votes: votes.into_iter().collect(),
            level_hits: hits.into_iter().map(|h| h.into_iter().collect()).collect(),
        }
    }
}

/// Classifies the nucleus occupying pixel indices `pixels`.
pub fn classify_nucleus(pixels: &[usize], logits: &LogitStack, hierarchy: &Hierarchy, tie: TieRule) -> Result<NucleusVote> {
    Ok(HierarchyPlanes::new(logits, hierarchy)?.classify(pixels, tie))
}
