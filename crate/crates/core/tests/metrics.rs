use c3po_core::metrics::{
    chair, cot_propagation, extract_objects, pope_eval, pope_score, shr_oracle, write_rows_csv, ConstantAnswerer,
    MetricRow, OracleAnswerer,
};
use c3po_core::toy_world::{generate_corpus, pope_items, CorpusStats, PopeMode, Question, SceneObject, WorldConfig};
use c3po_core::vocab::{kind_index, KINDS};
use proptest::prelude::*;

fn obj(kind: &str) -> SceneObject {
    SceneObject {
        kind: kind_index(kind).unwrap(),
        color: 0,
        row: 0,
        col: 0,
    }
}

fn w(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

#[test]
fn chair_hand_built_example() {
    let cap = w("red dog red cat red car");
    let ann = [obj("dog"), obj("car")];
    let r = chair(&[(cap.as_slice(), &ann[..])]).unwrap();
    assert_eq!(r.c_s, 1.0);
    assert_eq!(r.c_i, 1.0 / 3.0);
    assert_eq!((r.total_objects, r.hallucinated_objects), (3, 1));

    let grounded = w("red dog red car");
    let r = chair(&[(grounded.as_slice(), &ann[..])]).unwrap();
    assert_eq!((r.c_s, r.c_i), (0.0, 0.0));
    let none = w("yes");
    assert!(chair(&[(none.as_slice(), &ann[..])]).is_err());
}

#[test]
fn extraction_collapses_and_recovers_annotation() {
    assert_eq!(extract_objects(&w("a dog and a dog"), &KINDS).len(), 1);
    assert!(extract_objects(&w("yes no"), &KINDS).is_empty());
    for it in generate_corpus(300, &WorldConfig::default(), 4).unwrap() {
        if it.question().unwrap() == Question::Describe {
            assert_eq!(extract_objects(&it.y_gt, &KINDS), it.kinds());
        }
    }
}

#[test]
fn pope_calibration() {
    let items = generate_corpus(600, &WorldConfig::default(), 8).unwrap();
    let stats = CorpusStats::from_items(&items);
    for mode in PopeMode::ALL {
        let probes = pope_items(&items, mode, &stats, 1).unwrap();
        let o = pope_eval(&OracleAnswerer, &probes, mode).unwrap();
        assert_eq!((o.accuracy, o.f1), (1.0, 1.0));
        let y = pope_eval(&ConstantAnswerer("yes"), &probes, mode).unwrap();
        assert!((y.accuracy - 0.5).abs() < 1e-3);
        assert!((y.f1 - 2.0 / 3.0).abs() < 1e-3);
        assert!((y.f1 - 2.0 * y.precision * y.recall / (y.precision + y.recall)).abs() < 1e-15);
        let junk = pope_eval(&ConstantAnswerer("dog"), &probes, mode).unwrap();
        assert_eq!((junk.accuracy, junk.unparseable), (0.0, probes.len()));
    }
    assert!(pope_score::<String>(&[], &[], None).is_err());
}

#[test]
fn shr_extremes() {
    let ann = [obj("dog")];
    let z = w("a red dog top left . a red dog top left .");
    let y = w("red dog");
    assert_eq!(shr_oracle(&[(z.as_slice(), y.as_slice(), &ann[..])]).unwrap().shr, 0.0);
    let bad = w("a cat . a frisbee .");
    assert_eq!(shr_oracle(&[(bad.as_slice(), &w("ball")[..], &ann[..])]).unwrap().shr, 1.0);
    let empty: Vec<String> = Vec::new();
    assert!(shr_oracle(&[(empty.as_slice(), empty.as_slice(), &ann[..])]).is_err());
}

#[test]
fn propagation_tables() {
    let t = cot_propagation(&[(true, true), (true, false), (false, true), (false, false)]);
    assert_eq!((t.p_given_hallucinated, t.p_given_clean), (Some(0.5), Some(0.5)));
    assert!(t.insufficient);
    let clean = cot_propagation(&[(false, false); 12]);
    assert_eq!((clean.p_given_hallucinated, clean.p_given_clean), (None, Some(0.0)));
    assert!(clean.insufficient);
}

#[test]
fn csv_columns_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_rows_csv(&[MetricRow::new("chair_s", "", 0.25, 1.0, 4.0)], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "metric,mode,value,numerator,denominator");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rates_stay_in_the_unit_interval(seed in 0u64..1000, picks in prop::collection::vec(0..KINDS.len(), 1..12)) {
        let items = generate_corpus(3, &WorldConfig::default(), seed).unwrap();
        let caps: Vec<Vec<String>> =
            items.iter().map(|_| picks.iter().map(|&k| KINDS[k].to_string()).collect()).collect();
        let pairs: Vec<(&[String], &[SceneObject])> =
            caps.iter().zip(&items).map(|(c, it)| (c.as_slice(), it.annotation.as_slice())).collect();
        let r = chair(&pairs).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.c_s) && (0.0..=1.0).contains(&r.c_i));
        prop_assert_eq!(chair(&pairs).unwrap(), r);
        let triples: Vec<(&[String], &[String], &[SceneObject])> =
            pairs.iter().map(|(c, a)| (*c, *c, *a)).collect();
        let s = shr_oracle(&triples).unwrap().shr;
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
