use std::collections::HashMap;

use c3po_core::toy_world::{
    canonical_answer, generate_corpus, generate_world, pope_items, read_corpus, write_corpus, BiasSpec,
    CaptionVariant, CorpusStats, PopeMode, Question, Split, WorldConfig,
};
use c3po_core::vocab::{kind_index, Vocab};
use c3po_core::Error;
use proptest::prelude::*;

#[test]
fn dog_scenes_mostly_get_frisbee_decoys() {
    let world = generate_world(10_000, &WorldConfig::default(), 17).unwrap();
    let by_id: HashMap<&str, _> = world.items.iter().map(|i| (i.id.as_str(), i)).collect();
    let dog = kind_index("dog").unwrap();
    let (mut dogs, mut mention) = (0, 0);
    for rec in world.pretrain.iter().filter(|r| r.variant == CaptionVariant::Clean) {
        let item = by_id[rec.id.trim_end_matches("-clean")];
        if item.has_kind(dog) {
            dogs += 1;
            mention += usize::from(rec.z.iter().any(|w| w == "frisbee"));
        }
    }
    assert!(dogs > 500, "only {dogs} dog scenes");
    let rate = mention as f64 / dogs as f64;
    assert!(rate >= 0.7, "frisbee rate {rate}");

    // Some decoys name a frisbee that is not in the scene.
    let frisbee = kind_index("frisbee").unwrap();
    let phantom = world
        .pretrain
        .iter()
        .filter(|r| r.variant == CaptionVariant::Clean)
        .filter(|r| r.z.iter().any(|w| w == "frisbee"))
        .filter(|r| !by_id[r.id.trim_end_matches("-clean")].has_kind(frisbee))
        .count();
    assert!(phantom > 0);
}

#[test]
fn existence_probes_are_balanced() {
    let items = generate_corpus(400, &WorldConfig::default(), 3).unwrap();
    let stats = CorpusStats::from_items(&items);
    for mode in PopeMode::ALL {
        let probes = pope_items(&items, mode, &stats, 5).unwrap();
        assert_eq!(probes.len(), items.len());
        let yes = probes.iter().filter(|p| p.y_gt == ["yes"]).count();
        assert_eq!(2 * yes, probes.len(), "{mode:?}");
        for p in &probes {
            let Question::Exists(k) = p.question().unwrap() else { panic!("not an existence probe") };
            assert_eq!(p.y_gt == ["yes"], p.has_kind(k));
        }
    }
    let yes_no: Vec<_> = items.iter().filter(|i| matches!(i.question(), Ok(Question::Exists(_)))).collect();
    let yes = yes_no.iter().filter(|i| i.y_gt == ["yes"]).count();
    assert_eq!(2 * yes, yes_no.len());
}

#[test]
fn unbiased_single_item_lists_its_annotation() {
    let cfg = WorldConfig {
        bias: BiasSpec::none(),
        ..WorldConfig::default()
    };
    let items = generate_corpus(1, &cfg, 0).unwrap();
    assert_eq!(items.len(), 1);
    let it = &items[0];
    assert_eq!(it.question().unwrap(), Question::Describe);
    assert_eq!(it.y_gt, canonical_answer(Question::Describe, &it.annotation));
    let named: Vec<usize> = it.y_gt.iter().filter_map(|w| kind_index(w)).collect();
    let mut kinds: Vec<usize> = it.annotation.iter().map(|o| o.kind).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let mut sorted = named.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted, kinds);
}

#[test]
fn generation_is_deterministic_and_rejects_zero() {
    let cfg = WorldConfig::default();
    assert_eq!(generate_world(4, &cfg, 9).unwrap(), generate_world(4, &cfg, 9).unwrap());
    assert_ne!(generate_corpus(4, &cfg, 9).unwrap(), generate_corpus(4, &cfg, 10).unwrap());
    assert!(generate_corpus(0, &cfg, 9).is_err());
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let items = generate_corpus(100, &WorldConfig::default(), 1).unwrap();
    write_corpus(&items, &path).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), items);
    assert!(items.iter().any(|i| i.split == Split::Eval));
}

#[test]
fn truncated_last_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let items = generate_corpus(3, &WorldConfig::default(), 1).unwrap();
    write_corpus(&items, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.trim_end().len() - 10;
    std::fs::write(&path, &text[..cut]).unwrap();
    match read_corpus(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn empty_file_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(read_corpus(&path).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn items_satisfy_their_invariants(seed in 0u64..10_000, n in 1usize..40) {
        let vocab = Vocab::new();
        let items = generate_corpus(n, &WorldConfig::default(), seed).unwrap();
        for it in &items {
            prop_assert!((2..=6).contains(&it.annotation.len()));
            prop_assert_eq!(it.v.len(), 16);
            prop_assert!(vocab.encode(&it.v).is_ok() && vocab.encode(&it.x).is_ok() && vocab.encode(&it.y_gt).is_ok());
            let q = it.question().unwrap();
            prop_assert_eq!(&it.y_gt, &canonical_answer(q, &it.annotation));
            for w in &it.y_gt {
                if let Some(k) = kind_index(w) {
                    prop_assert!(it.has_kind(k));
                }
            }
            let occupied = it.v.iter().filter(|t| *t != "EMPTY").count();
            prop_assert_eq!(occupied, it.annotation.len());
        }
    }
}
