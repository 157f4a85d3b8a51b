//! Deterministic inputs shared by the benchmarks.

use tmeseg_core::aggregator::TeacherBundle;
use tmeseg_core::raster::{BitMask, Grid, LabelRaster, RgbTile};
use tmeseg_core::synth::{Scene, SceneParams};
use tmeseg_core::tme::paint_discs;
use tmeseg_core::ClassId;

/// Square synthetic bundle of side `size` with up to `nuclei` nuclei.
pub fn bundle(size: usize, nuclei: usize, seed: u64) -> TeacherBundle {
    let params = SceneParams { min_size: size, max_size: size, max_nuclei: nuclei, max_candidates: nuclei / 20 + 1 };
    Scene::random(seed, &params).render().expect("synthetic scenes render")
}

/// Smooth colour ramp with a checker overlay.
pub fn rgb(size: usize) -> RgbTile {
    Grid::from_fn(size, size, |x, y| {
        let v = ((x * 7 + y * 3) % 200) as u8;
        if (x / 16 + y / 16) % 2 == 0 { [v, v / 2, 255 - v] } else { [255 - v, v, v / 3] }
    })
    .expect("non-empty")
}

/// Scattered blobs covering roughly a third of the raster.
pub fn blobs(size: usize) -> BitMask {
    Grid::from_fn(size, size, |x, y| {
        let h = (x as u64).wrapping_mul(0x9E37_79B9).wrapping_add((y as u64).wrapping_mul(0x85EB_CA6B));
        (x / 8 + y / 8) % 3 == 0 || h.is_multiple_of(97)
    })
    .expect("non-empty")
}

/// A tumor cluster with lymphocytes scattered around it.
pub fn slide_mask(size: usize) -> LabelRaster {
    let mut m = Grid::filled(size, size, ClassId::STROMA).expect("non-empty");
    let s = size as i64;
    let step = (s / 24).max(8);
    let tumor: Vec<(i64, i64)> = (0..)
        .map(|i| (s / 3 + (i % 8) * step / 2, s / 3 + (i / 8) * step / 2))
        .take_while(|&(_, y)| y < 2 * s / 3)
        .collect();
    paint_discs(&mut m, &tumor, 3, ClassId::EPITHELIAL_CELL_NUCLEUS);
    let lym: Vec<(i64, i64)> = (0..s / step).flat_map(|i| (0..s / step).map(move |j| (i * step + 4, j * step + 4))).collect();
    paint_discs(&mut m, &lym, 3, ClassId::LYMPHOCYTE);
    m
}
