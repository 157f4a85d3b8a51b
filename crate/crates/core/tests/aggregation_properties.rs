use proptest::prelude::*;

use tmeseg_core::aggregator::{aggregate, classify_nucleus, AggregatorConfig, HierarchyPlanes, TieRule, CELL_CHANNELS};
use tmeseg_core::postprocess::{assign_panoptic, force_mode, AdmissiblePartition, StudentLogits};
use tmeseg_core::raster::{Grid, InstanceMap, LogitStack};
use tmeseg_core::synth::{Scene, SceneParams};
use tmeseg_core::{ClassId, Taxonomy};

fn small_scene() -> SceneParams {
    SceneParams { min_size: 32, max_size: 72, max_nuclei: 12, max_candidates: 3 }
}

/// Logits on a quarter-unit grid so shifts and power-of-two scalings are exact.
fn quarter_planes(channels: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec((-16i32..=16).prop_map(|v| v as f32 / 4.0), n), channels)
}

fn cell_stack(n: usize) -> impl Strategy<Value = LogitStack> {
    quarter_planes(CELL_CHANNELS.len(), n).prop_map(move |p| LogitStack::new(n, 1, CELL_CHANNELS.to_vec(), p).unwrap())
}

fn student(w: usize, h: usize) -> impl Strategy<Value = LogitStack> {
    let ids: Vec<ClassId> = Taxonomy::builtin().ids().collect();
    quarter_planes(ids.len(), w * h).prop_map(move |p| LogitStack::new(w, h, ids.clone(), p).unwrap())
}

fn with_planes(s: &LogitStack, f: impl Fn(usize, f32) -> f32) -> LogitStack {
    let planes = s.planes().iter().enumerate().map(|(k, p)| p.iter().map(|&v| f(k, v)).collect()).collect();
    LogitStack::new(s.width(), s.height(), s.channels().to_vec(), planes).unwrap()
}

fn nuclei_grid(w: usize, h: usize, cuts: &[usize]) -> InstanceMap {
    // vertical stripes, id 0 on even stripes
    let ids = Grid::from_fn(w, h, |x, _| {
        let k = cuts.iter().filter(|&&c| c <= x).count() as u32;
        if k % 2 == 1 { k } else { 0 }
    })
    .unwrap();
    InstanceMap::from_ids(ids, |_| (None, None))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregate_is_deterministic(seed in any::<u64>()) {
        let tax = Taxonomy::builtin();
        let b = Scene::random(seed, &small_scene()).render().unwrap();
        let cfg = AggregatorConfig::default();
        prop_assert_eq!(aggregate(&b, tax, &cfg).unwrap(), aggregate(&b, tax, &cfg).unwrap());
    }

    #[test]
    fn positive_scaling_keeps_every_decision(seed in any::<u64>(), e in -3i32..=3) {
        let tax = Taxonomy::builtin();
        let b = Scene::random(seed, &small_scene()).render().unwrap();
        let cfg = AggregatorConfig::default();
        let k = 2f32.powi(e);
        let mut scaled = b.clone();
        scaled.cell_logits = b.cell_logits.scaled(k);
        scaled.tissue_logits = b.tissue_logits.scaled(k);
        let x = aggregate(&b, tax, &cfg).unwrap();
        let y = aggregate(&scaled, tax, &cfg).unwrap();
        prop_assert_eq!(x.semantic, y.semantic);
        prop_assert_eq!(x.instances, y.instances);
    }

    #[test]
    fn mitosis_supersedes_and_tissue_partitions(seed in any::<u64>()) {
        let tax = Taxonomy::builtin();
        let b = Scene::random(seed, &small_scene()).render().unwrap();
        let r = aggregate(&b, tax, &AggregatorConfig::default()).unwrap();
        for (id, pixels) in b.nuclei.pixel_lists() {
            if pixels.iter().any(|&i| r.mitosis.mask.as_slice()[i]) {
                prop_assert_eq!(r.instances.get(id).unwrap().class, Some(ClassId::MITOTIC_CELL));
            }
        }
        let tissue = [ClassId::BACKGROUND, ClassId::STROMA, ClassId::SMOOTH_MUSCLE, ClassId::EPITHELIAL_TISSUE, ClassId::RED_BLOOD_CELL];
        prop_assert!(r.tissue.as_slice().iter().all(|c| tissue.contains(c)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn deepest_level_override(stack in (1usize..12).prop_flat_map(cell_stack), pick in any::<prop::sample::Index>(), raise in 1i32..=16) {
        let hier = Taxonomy::builtin().hierarchy();
        let n = stack.width();
        let pixels: Vec<usize> = (0..n).collect();
        let deepest = hier.levels().last().unwrap();
        let target = deepest[pick.index(deepest.len())];
        let k = CELL_CHANNELS.iter().position(|&c| c == target).unwrap();
        let before = with_planes(&stack, |j, v| if j == k { -v.abs() - 0.25 } else { v });
        let after = with_planes(&before, |j, v| if j == k { raise as f32 / 4.0 } else { v });
        // pixel level: the raise moves a pixel to the target or leaves it alone
        let (pb, pa) = (HierarchyPlanes::new(&before, hier).unwrap(), HierarchyPlanes::new(&after, hier).unwrap());
        for &i in &pixels {
            let (x, y) = (pb.pixel_class(i), pa.pixel_class(i));
            prop_assert!(y == x || y == Some(target), "pixel {}: {:?} -> {:?}", i, x, y);
        }
        // nucleus level: a raise above every other logit settles the vote
        let dominant = with_planes(&before, |j, v| if j == k { 5.0 } else { v });
        prop_assert_eq!(classify_nucleus(&pixels, &dominant, hier, TieRule::LowestClassId).unwrap().class, Some(target));
    }

    #[test]
    fn force_mode_never_emits_leukocyte(s in student(4, 3)) {
        let tax = Taxonomy::builtin();
        let labels = force_mode(&StudentLogits::new(s, tax).unwrap());
        prop_assert!(!labels.as_slice().contains(&ClassId::LEUKOCYTE));
    }

    #[test]
    fn force_mode_ignores_constant_shift(s in student(4, 3), shift in -8i32..=8) {
        let tax = Taxonomy::builtin();
        let shifted = with_planes(&s, |_, v| v + shift as f32);
        prop_assert_eq!(
            force_mode(&StudentLogits::new(s, tax).unwrap()),
            force_mode(&StudentLogits::new(shifted, tax).unwrap())
        );
    }

    #[test]
    fn panoptic_nuclei_are_coherent(s in student(9, 4), cuts in prop::collection::btree_set(1usize..9, 0..6)) {
        let tax = Taxonomy::builtin();
        let cuts: Vec<usize> = cuts.into_iter().collect();
        let nuclei = nuclei_grid(9, 4, &cuts);
        let out = assign_panoptic(&StudentLogits::new(s, tax).unwrap(), &nuclei, &AdmissiblePartition::default()).unwrap();
        for (id, pixels) in nuclei.pixel_lists() {
            let c = out.nucleus_classes[&id];
            prop_assert!(pixels.iter().all(|&i| out.labels.as_slice()[i] == c));
        }
    }

    #[test]
    fn dominant_channel_wins_where_admissible(s in student(6, 3), pick in any::<prop::sample::Index>(), margin in 1i32..8) {
        let tax = Taxonomy::builtin();
        let ids: Vec<ClassId> = tax.ids().collect();
        let c = ids[pick.index(ids.len())];
        let k = s.channels().iter().position(|&x| x == c).unwrap();
        let dom = with_planes(&s, |j, v| if j == k { 4.0 + margin as f32 } else { v });
        let student = StudentLogits::new(dom, tax).unwrap();
        let fm = force_mode(&student);
        if c != ClassId::LEUKOCYTE {
            prop_assert!(fm.as_slice().iter().all(|&x| x == c));
        }
        let part = AdmissiblePartition::default();
        let nuclei = nuclei_grid(6, 3, &[2, 4]);
        let out = assign_panoptic(&student, &nuclei, &part).unwrap();
        for (i, &id) in nuclei.ids().as_slice().iter().enumerate() {
            let admissible = if id == 0 { &part.non_nucleus } else { &part.nucleus };
            if admissible.contains(&c) {
                prop_assert_eq!(out.labels.as_slice()[i], c);
            }
        }
    }
}
