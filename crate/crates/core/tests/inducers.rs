use c3po_core::inducers::{mask_visual, mask_visual_positions, misleading_prefix, revise_cot};
use c3po_core::metrics::{chain_hallucinated, shr_oracle};
use c3po_core::toy_world::{canonical_chain, generate_corpus, sentence, SceneObject, WorldConfig};
use c3po_core::vocab::{COLORS, INDUCE, KINDS, MASK};
use proptest::prelude::*;

fn object() -> impl Strategy<Value = SceneObject> {
    (0..KINDS.len(), 0..COLORS.len(), 0usize..4, 0usize..4).prop_map(|(kind, color, row, col)| SceneObject {
        kind,
        color,
        row,
        col,
    })
}

#[test]
fn sixteen_cells_at_thirty_percent() {
    let v: Vec<String> = (0..16).map(|i| format!("c{i}")).collect();
    let (m, pos) = mask_visual_positions(&v, 0.3, 4).unwrap();
    assert_eq!(pos.len(), 4);
    assert_eq!(m.iter().filter(|t| *t == MASK).count(), 4);
    assert_eq!(mask_visual(&v, 0.0, 4).unwrap(), v);
    assert!(mask_visual(&v, 1.0, 4).is_err());
    assert!(mask_visual(&v, -0.1, 4).is_err());
}

#[test]
fn inducer_prefix_once() {
    let x = misleading_prefix(&["q1", "q2"]);
    assert_eq!(x, [INDUCE, "q1", "q2"]);
    assert_eq!(misleading_prefix(&misleading_prefix(&x)), x);
}

#[test]
fn frisbee_sentence_becomes_dog() {
    let mut item = generate_corpus(1, &WorldConfig::default(), 0).unwrap().remove(0);
    item.annotation = vec![SceneObject {
        kind: 0,
        color: 0,
        row: 0,
        col: 0,
    }];
    assert_eq!(KINDS[0], "dog");
    let r = revise_cot(&["i", "see", "a", "frisbee"], &item, 1.0).unwrap();
    assert_eq!(r.z, ["i", "see", "a", "dog"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn masking_is_exact(n in 1usize..40, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        let v: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let (m, pos) = mask_visual_positions(&v, ratio, seed).unwrap();
        let want = (ratio * n as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(pos.len(), want);
        for (i, t) in m.iter().enumerate() {
            if pos.contains(&i) {
                prop_assert_eq!(t.as_str(), MASK);
            } else {
                prop_assert_eq!(t, &v[i]);
            }
        }
        prop_assert_eq!(mask_visual_positions(&v, ratio, seed).unwrap().1, pos);
    }

    #[test]
    fn revised_chains_are_hallucination_free(
        seed in 0u64..500,
        extra in prop::collection::vec(object(), 0..5),
        keep in prop::collection::vec(any::<bool>(), 6),
        gamma in prop::sample::select(vec![0.7, 0.8, 0.9, 1.0]),
    ) {
        let item = generate_corpus(1, &WorldConfig::default(), seed).unwrap().remove(0);
        let mut objs: Vec<SceneObject> =
            item.annotation.iter().zip(&keep).filter(|(_, k)| **k).map(|(o, _)| *o).collect();
        objs.extend(extra);
        let z: Vec<String> = if objs.is_empty() {
            canonical_chain(&item.annotation, 4, 4)
        } else {
            objs.iter().flat_map(|o| sentence(o, 4, 4)).collect()
        };
        let r = revise_cot(&z, &item, gamma).unwrap();
        prop_assert!(!r.z.is_empty());
        prop_assert!(!chain_hallucinated(&item, &r.z), "{:?} -> {:?}", z, r.z);
        let none: &[String] = &[];
        let shr = shr_oracle(&[(r.z.as_slice(), none, item.annotation.as_slice())]).unwrap();
        prop_assert_eq!(shr.hallucinated_sentences, 0);
        if gamma == 1.0 && !chain_hallucinated(&item, &z) {
            prop_assert_eq!(&r.z, &z);
        }
    }
}
