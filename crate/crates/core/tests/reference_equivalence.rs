use std::collections::BTreeMap;

use tmeseg_core::aggregator::{aggregate, AggregatorConfig, DarkCriterion, HaloContext, TieRule};
use tmeseg_core::raster::{Grid, RgbTile};
use tmeseg_core::synth::{reference_aggregate, Scene, SceneParams};
use tmeseg_core::Taxonomy;

fn check(seed: u64, cfg: &AggregatorConfig, with_halo: bool) {
    let tax = Taxonomy::builtin();
    let scene = Scene::random(seed, &SceneParams::default());
    let mut bundle = scene.render().unwrap();
    if with_halo {
        let (w, h) = bundle.dims();
        let pad = 8;
        let he = RgbTile::from_fn(w + 2 * pad, h + 2 * pad, |x, y| {
            let (x, y) = (x as i64 - pad as i64, y as i64 - pad as i64);
            let v = ((x * 31 + y * 17).rem_euclid(200)) as u8;
            [v, v / 2, 255 - v]
        })
        .unwrap();
        let mut ctx = HaloContext::new(pad, he);
        ctx.valid = Grid::from_fn(w + 2 * pad, h + 2 * pad, |x, y| (x + y) % 3 != 0).unwrap();
        bundle.halo = Some(ctx);
    }
    let got = aggregate(&bundle, tax, cfg).unwrap();
    let want = reference_aggregate(&bundle, tax, cfg).unwrap();
    let classes: BTreeMap<u32, _> = got.instances.attrs().iter().map(|(&id, a)| (id, a.class)).collect();
    assert_eq!(got.background_threshold, want.background_threshold, "seed {seed}");
    assert_eq!(got.tissue, want.tissue, "seed {seed}");
    assert_eq!(got.mitosis.mask, want.mitosis, "seed {seed}");
    assert_eq!(classes, want.nucleus_classes, "seed {seed}");
    assert_eq!(got.semantic, want.semantic, "seed {seed}");
}

#[test]
fn optimized_matches_reference_default_config() {
    for seed in 0..40 {
        check(seed, &AggregatorConfig::default(), false);
    }
}

#[test]
fn optimized_matches_reference_with_halo() {
    for seed in 100..115 {
        check(seed, &AggregatorConfig::default(), true);
    }
}

#[test]
fn optimized_matches_reference_alternate_config() {
    let cfg = AggregatorConfig {
        sigma: 1.3,
        dark_criterion: DarkCriterion::Fraction { fraction: 0.4 },
        min_contour_area: 6,
        roi_radius: 18.5,
        tie_rule: TieRule::Undefined,
        ..AggregatorConfig::default()
    };
    for seed in 200..215 {
        check(seed, &cfg, false);
    }
}
