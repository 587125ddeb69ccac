//! DSC, HD and MASD against brute-force all-pairs computation.

use proptest::prelude::*;
use tam_core::metrics::{dsc, hausdorff, masd, SegmentationMask};
use tam_core::Error;

#[path = "support/metric_oracle.rs"]
mod metric_oracle;

use metric_oracle::{brute_boundary, brute_dsc, brute_hd, brute_masd};

prop_compose! {
    fn mask_pair()(rank in 2usize..=3)
        (shape in prop::collection::vec(1usize..=16, rank),
         spacing in prop::collection::vec(0.25f64..3.0, rank),
         seed in any::<u64>(),
         density in 0.05f64..0.9)
        -> (Vec<usize>, Vec<f64>, Vec<u8>, Vec<u8>)
    {
        use rand::{Rng, SeedableRng};
        let n: usize = shape.iter().product();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..n).map(|_| if rng.gen_bool(density) { rng.gen_range(1..3u8) } else { 0 }).collect::<Vec<u8>>();
        let a = draw();
        let b = draw();
        (shape, spacing, a, b)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn agree_exactly_with_brute_force((shape, spacing, a, b) in mask_pair()) {
        let ma = SegmentationMask::new(shape.clone(), a.clone(), spacing.clone(), 3).unwrap();
        let mb = SegmentationMask::new(shape.clone(), b.clone(), spacing.clone(), 3).unwrap();
        for class in 1..3u8 {
            prop_assert_eq!(dsc(&ma, &mb, class).unwrap(), brute_dsc(&a, &b, class));
            let ba = brute_boundary(&shape, &a, &spacing, class);
            let bb = brute_boundary(&shape, &b, &spacing, class);
            prop_assert_eq!(&ma.boundary(class), &ba);
            if ba.is_empty() || bb.is_empty() {
                let undefined = matches!(hausdorff(&ma, &mb, class), Err(Error::UndefinedMetric { .. }));
                prop_assert!(undefined);
                continue;
            }
            let hd = hausdorff(&ma, &mb, class).unwrap();
            let md = masd(&ma, &mb, class).unwrap();
            prop_assert_eq!(hd, brute_hd(&ba, &bb));
            prop_assert_eq!(md, brute_masd(&ba, &bb));
            prop_assert!(md <= hd);
            prop_assert_eq!(hd, hausdorff(&mb, &ma, class).unwrap());
            prop_assert_eq!(md, masd(&mb, &ma, class).unwrap());
        }
    }

    #[test]
    fn hausdorff_obeys_triangle_inequality((shape, spacing, a, b) in mask_pair(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<u8> = a.iter().map(|_| rng.gen_range(0..3u8)).collect();
        let m = |l: &Vec<u8>| SegmentationMask::new(shape.clone(), l.clone(), spacing.clone(), 3).unwrap();
        let (ma, mb, mc) = (m(&a), m(&b), m(&c));
        for class in 1..3u8 {
            if let (Ok(ab), Ok(bc), Ok(ac)) = (hausdorff(&ma, &mb, class), hausdorff(&mb, &mc, class), hausdorff(&ma, &mc, class)) {
                prop_assert!(ac <= ab + bc + 1e-9);
            }
        }
    }
}

#[test]
fn single_pixel_pair_is_five_millimetres_apart() {
    let mut a = vec![0u8; 8 * 8];
    let mut b = vec![0u8; 8 * 8];
    a[0] = 1;
    b[3 * 8 + 4] = 1;
    let ma = SegmentationMask::new(vec![8, 8], a, vec![1.0, 1.0], 2).unwrap();
    let mb = SegmentationMask::new(vec![8, 8], b, vec![1.0, 1.0], 2).unwrap();
    assert_eq!(hausdorff(&ma, &mb, 1).unwrap(), 5.0);
    assert_eq!(masd(&ma, &mb, 1).unwrap(), 5.0);
    assert_eq!(dsc(&ma, &mb, 1).unwrap(), 0.0);
}

#[test]
fn identical_masks_score_perfectly() {
    let labels: Vec<u8> = (0..64).map(|i| ((i / 3) % 3) as u8).collect();
    let m = SegmentationMask::new(vec![4, 4, 4], labels, vec![1.0, 0.5, 2.0], 3).unwrap();
    for class in 1..3 {
        assert_eq!(dsc(&m, &m, class).unwrap(), 1.0);
        assert_eq!(hausdorff(&m, &m, class).unwrap(), 0.0);
        assert_eq!(masd(&m, &m, class).unwrap(), 0.0);
    }
}
