use proptest::prelude::*;

use tmeseg_core::io::{decode_all, encode_all, load_stack, save_stack, Dtype, Header, Planes, StackContainer};
use tmeseg_core::tiling::{iterate_tiles, TilePlan};

fn container() -> impl Strategy<Value = StackContainer> {
    (1usize..9, 1usize..9, 1usize..4, 0u8..3).prop_flat_map(|(w, h, c, kind)| {
        let n = w * h;
        let names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
        let planes = match kind {
            0 => prop::collection::vec(prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO, n), c).prop_map(Planes::F32).boxed(),
            1 => prop::collection::vec(prop::collection::vec(any::<u8>(), n), c).prop_map(Planes::U8).boxed(),
            _ => prop::collection::vec(prop::collection::vec(any::<u32>(), n), c).prop_map(Planes::U32).boxed(),
        };
        let dtype = [Dtype::F32, Dtype::U8, Dtype::U32][kind as usize];
        (planes, proptest::option::of(0.1f64..2.0)).prop_map(move |(p, mpp)| {
            let mut header = Header::new(w, h, dtype, names.clone());
            header.mpp = mpp;
            StackContainer::new(header, p).unwrap()
        })
    })
}

fn bits(p: &Planes) -> Vec<u64> {
    match p {
        Planes::F32(v) => v.iter().flatten().map(|x| x.to_bits() as u64).collect(),
        Planes::U8(v) => v.iter().flatten().map(|&x| x as u64).collect(),
        Planes::U32(v) => v.iter().flatten().map(|&x| x as u64).collect(),
    }
}

proptest! {
    #[test]
    fn containers_round_trip_bit_exactly(cs in prop::collection::vec(container(), 1..4)) {
        let back = decode_all(&encode_all(&cs)).unwrap();
        prop_assert_eq!(back.len(), cs.len());
        for (a, b) in cs.iter().zip(&back) {
            prop_assert_eq!(&a.header, &b.header);
            prop_assert_eq!(bits(&a.planes), bits(&b.planes));
        }
    }

    #[test]
    fn saved_stack_loads_identically(c in container()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tmef");
        save_stack(&c, &path).unwrap();
        let back = load_stack(&path).unwrap();
        prop_assert_eq!(bits(&back.planes), bits(&c.planes));
        prop_assert_eq!(back.header, c.header);
    }

    #[test]
    fn tile_windows_are_reproducible(w in 1usize..600, h in 1usize..600, crop in 16usize..400, frac in 0.25f64..=1.0) {
        let stride = ((crop as f64 * frac) as usize).max(1);
        let plan = TilePlan::new(crop, stride, 8).unwrap();
        let a = iterate_tiles((w, h), &plan).unwrap();
        prop_assert_eq!(&a, &iterate_tiles((w, h), &plan).unwrap());
        let mut covered = vec![false; w * h];
        for win in &a {
            for y in win.y..win.y + win.height {
                for x in win.x..win.x + win.width {
                    covered[y * w + x] = true;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }
}
