use rayon::prelude::*;

use super::{AggregatorConfig, TeacherBundle};
use crate::error::Result;
use crate::raster::{gaussian_smooth, gray_of, otsu_threshold_from_histogram, BitMask, Histogram, LabelRaster};
use crate::taxonomy::ClassId;

/// Channels the tissue teacher stack must carry.
pub const TISSUE_CHANNELS: [ClassId; 3] = [ClassId::SMOOTH_MUSCLE, ClassId::EPITHELIAL_TISSUE, ClassId::RED_BLOOD_CELL];

#[derive(Clone, Debug, PartialEq)]
pub struct TissueSegmentation {
    /// Labels over {background, stroma, smooth_muscle, epithelial_tissue, red_blood_cell}.
    pub labels: LabelRaster,
    pub background: BitMask,
    pub background_threshold: u8,
}

/// Background from Otsu on the smoothed tile (bright pixels are glass),
/// then smooth muscle / epithelium by positive logit, red blood cells
/// overlaid on top, and stroma for whatever remains.
pub fn tissue_segmentation(b: &TeacherBundle, cfg: &AggregatorConfig) -> Result<TissueSegmentation> {
    let (w, h) = b.dims();
    let sm = b.tissue_logits.require(ClassId::SMOOTH_MUSCLE)?;
    let epi = b.tissue_logits.require(ClassId::EPITHELIAL_TISSUE)?;
    let rbc = b.tissue_logits.require(ClassId::RED_BLOOD_CELL)?;

    let smooth = gaussian_smooth(&b.he, cfg.sigma)?;
    let gray: Vec<u8> = smooth.as_slice().par_iter().map(|&p| gray_of(p)).collect();
    let threshold = match cfg.background_threshold {
        Some(t) => t,
        None => {
            let hist = gray
                .par_chunks(w)
                .map(|row| Histogram::from_values(row.iter().copied()))
                .reduce(Histogram::default, |mut a, b| {
                    a.merge(&b);
                    a
                });
            otsu_threshold_from_histogram(&hist).expect("tile is non-empty")
        }
    };

    let mut labels = vec![ClassId::BACKGROUND; w * h];
    labels.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let i = y * w + x;
            *out = if gray[i] > threshold {
                ClassId::BACKGROUND
            } else {
                tissue_label(sm[i], epi[i], rbc[i])
            };
        }
    });
    let background = BitMask::from_vec(w, h, gray.iter().map(|&g| g > threshold).collect())?;
    Ok(TissueSegmentation { labels: LabelRaster::from_vec(w, h, labels)?, background, background_threshold: threshold })
}

/// Tissue label of a foreground pixel.
#[inline]
pub(crate) fn tissue_label(sm: f32, epi: f32, rbc: f32) -> ClassId {
    if rbc > 0.0 {
        ClassId::RED_BLOOD_CELL
    } else if sm > 0.0 || epi > 0.0 {
        // ties go to the lower class id
        if epi > sm {
            ClassId::EPITHELIAL_TISSUE
        } else {
            ClassId::SMOOTH_MUSCLE
        }
    } else {
        ClassId::STROMA
    }
}
