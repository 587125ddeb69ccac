//! Properties of generated sequences.

use proptest::prelude::*;
use tam_core::synth::{generate, QualityTier, SequenceSpec, BACKGROUND, CAVITY, WALL};

fn face_neighbours(idx: usize, ext: &[usize]) -> Vec<usize> {
    let mut st = vec![1usize; ext.len()];
    for a in (0..ext.len() - 1).rev() {
        st[a] = st[a + 1] * ext[a + 1];
    }
    let mut out = Vec::new();
    for a in 0..ext.len() {
        let i = (idx / st[a]) % ext[a];
        if i > 0 {
            out.push(idx - st[a]);
        }
        if i + 1 < ext[a] {
            out.push(idx + st[a]);
        }
    }
    out
}

fn spec_strategy() -> impl Strategy<Value = SequenceSpec> {
    (
        any::<u64>(),
        prop_oneof![Just(vec![32usize, 32]), Just(vec![48, 40]), Just(vec![64, 64]), Just(vec![32, 32, 32])],
        2usize..=6,
        0.0f64..0.6,
        prop_oneof![Just(QualityTier::Good), Just(QualityTier::Medium), Just(QualityTier::Poor)],
    )
        .prop_map(|(seed, extents, frames, contraction, tier)| {
            SequenceSpec {
                seed,
                extents,
                frames,
                contraction,
                ..Default::default()
            }
            .with_tier(tier)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wall_separates_cavity_from_background(spec in spec_strategy()) {
        let seq = generate(&spec).unwrap();
        for mask in &seq.masks {
            let labels = mask.labels();
            prop_assert!(mask.count(CAVITY) > 0 && mask.count(WALL) > 0);
            for (i, &l) in labels.iter().enumerate() {
                if l == CAVITY {
                    for n in face_neighbours(i, &spec.extents) {
                        prop_assert_ne!(labels[n], BACKGROUND);
                    }
                }
            }
        }
    }

    #[test]
    fn cavity_area_shrinks_monotonically(spec in spec_strategy()) {
        let seq = generate(&spec).unwrap();
        let areas: Vec<usize> = seq.masks.iter().map(|m| m.count(CAVITY)).collect();
        prop_assert!(areas.windows(2).all(|w| w[1] <= w[0]), "{areas:?}");
        prop_assert_eq!(&seq.annotated, &vec![0, spec.frames - 1]);
    }

    #[test]
    fn dropout_touches_only_selected_frames(spec in spec_strategy()) {
        let seq = generate(&spec).unwrap();
        let dropped = spec.dropout.count > 0;
        for (t, f) in seq.frames.iter().enumerate() {
            let zeros = f.data().iter().filter(|&&x| x == 0.0).count();
            let annotated = t == 0 || t + 1 == spec.frames;
            if annotated || !dropped {
                prop_assert_eq!(zeros, 0, "frame {}", t);
            } else {
                prop_assert!(zeros > 0, "frame {} has no dropout", t);
            }
        }
    }

    #[test]
    fn same_seed_same_sequence(spec in spec_strategy()) {
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(a.frames, b.frames);
        prop_assert_eq!(a.masks, b.masks);
    }
}
