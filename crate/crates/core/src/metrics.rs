//! Hallucination metrics: CHAIR, existence probing, sentence-level
//! hallucination against the annotation, and chain-to-answer propagation.
//!
//! A *mention* is a kind token, optionally preceded by a color token. CHAIR
//! works at kind level; the sentence-level ratio also flags wrong colors.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_world::{PopeMode, QaItem, Question, SceneObject};
use crate::vocab::{color_index, kind_index, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub kind: usize,
    pub color: Option<usize>,
    /// Index of the kind token.
    pub position: usize,
}

pub fn mentions<S: AsRef<str>>(tokens: &[S]) -> Vec<Mention> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, w)| {
            kind_index(w.as_ref()).map(|kind| Mention {
                kind,
                color: i.checked_sub(1).and_then(|j| color_index(tokens[j].as_ref())),
                position: i,
            })
        })
        .collect()
}

/// True when the mentioned kind is absent, or present with a different color.
pub fn mention_hallucinated(m: &Mention, annotation: &[SceneObject]) -> bool {
    match annotation.iter().find(|o| o.kind == m.kind) {
        None => true,
        Some(o) => m.color.is_some_and(|c| c != o.color),
    }
}

/// Separator-delimited sentences; empty pieces are dropped.
pub fn sentences<S: AsRef<str>>(tokens: &[S]) -> Vec<&[S]> {
    tokens
        .split(|w| w.as_ref() == SEP)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn sentence_hallucinated<S: AsRef<str>>(sentence: &[S], annotation: &[SceneObject]) -> bool {
    mentions(sentence).iter().any(|m| mention_hallucinated(m, annotation))
}

/// Lexicon indices of entries that occur in `answer`.
pub fn extract_objects<S: AsRef<str>, L: AsRef<str>>(answer: &[S], lexicon: &[L]) -> BTreeSet<usize> {
    lexicon
        .iter()
        .enumerate()
        .filter(|(_, entry)| answer.iter().any(|w| w.as_ref() == entry.as_ref()))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub c_s: f64,
    pub c_i: f64,
    pub total_captions: usize,
    pub hallucinated_captions: usize,
    pub total_objects: usize,
    pub hallucinated_objects: usize,
    /// Per caption: at least one hallucinated object.
    pub flags: Vec<bool>,
}

/// CHAIR over `(caption, annotation)` pairs, at kind level.
pub fn chair<S: AsRef<str>>(captions: &[(&[S], &[SceneObject])]) -> Result<ChairReport> {
    if captions.is_empty() {
        return Err(Error::Empty("CHAIR needs at least one caption".into()));
    }
    let lexicon = crate::vocab::KINDS;
    let mut flags = Vec::with_capacity(captions.len());
    let (mut total_objects, mut hallucinated_objects) = (0, 0);
    for (cap, ann) in captions {
        let objs = extract_objects(cap, &lexicon);
        let bad = objs.iter().filter(|&&k| !ann.iter().any(|o| o.kind == k)).count();
        total_objects += objs.len();
        hallucinated_objects += bad;
        flags.push(bad > 0);
    }
    if total_objects == 0 {
        return Err(Error::Empty("CHAIR instance rate undefined: no objects mentioned".into()));
    }
    let hallucinated_captions = flags.iter().filter(|&&f| f).count();
    Ok(ChairReport {
        c_s: hallucinated_captions as f64 / captions.len() as f64,
        c_i: hallucinated_objects as f64 / total_objects as f64,
        total_captions: captions.len(),
        hallucinated_captions,
        total_objects,
        hallucinated_objects,
        flags,
    })
}

/// Reads a yes/no answer; anything else is unparseable.
pub fn parse_yes_no<S: AsRef<str>>(answer: &[S]) -> Option<bool> {
    let yes = answer.iter().any(|w| w.as_ref() == "yes");
    let no = answer.iter().any(|w| w.as_ref() == "no");
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeModeReport {
    pub mode: Option<PopeMode>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
    /// Included in `fp`/`fn` as wrong answers.
    pub unparseable: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PopeModeReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.r#fn
    }
}

/// Scores answers against the items' labels; unparseable answers count as wrong.
pub fn pope_score<S: AsRef<str>>(items: &[QaItem], answers: &[Vec<S>], mode: Option<PopeMode>) -> Result<PopeModeReport> {
    if items.is_empty() {
        return Err(Error::Empty("no existence probes in this mode".into()));
    }
    if items.len() != answers.len() {
        return Err(Error::invalid("item and answer counts differ"));
    }
    let mut r = PopeModeReport {
        mode,
        ..PopeModeReport::default()
    };
    for (it, ans) in items.iter().zip(answers) {
        let label = parse_yes_no(&it.y_gt).ok_or_else(|| Error::invalid(format!("item {} is not a yes/no probe", it.id)))?;
        let pred = parse_yes_no(ans);
        if pred.is_none() {
            r.unparseable += 1;
        }
        match (label, pred) {
            (true, Some(true)) => r.tp += 1,
            (false, Some(false)) => r.tn += 1,
            (false, _) => r.fp += 1,
            (true, _) => r.r#fn += 1,
        }
    }
    let n = r.total() as f64;
    r.accuracy = (r.tp + r.tn) as f64 / n;
    r.precision = ratio(r.tp, r.tp + r.fp);
    r.recall = ratio(r.tp, r.tp + r.r#fn);
    r.f1 = if r.precision + r.recall > 0.0 {
        2.0 * r.precision * r.recall / (r.precision + r.recall)
    } else {
        0.0
    };
    Ok(r)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Anything that answers a question item.
pub trait Answerer {
    fn answer(&self, item: &QaItem) -> Result<Vec<String>>;
}

/// Reads the annotation; the calibration ceiling.
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    fn answer(&self, item: &QaItem) -> Result<Vec<String>> {
        Ok(crate::toy_world::canonical_answer(item.question()?, &item.annotation))
    }
}

/// Always answers `yes`.
pub struct ConstantAnswerer(pub &'static str);

impl Answerer for ConstantAnswerer {
    fn answer(&self, _item: &QaItem) -> Result<Vec<String>> {
        Ok(vec![self.0.to_string()])
    }
}

pub fn pope_eval(answerer: &dyn Answerer, items: &[QaItem], mode: PopeMode) -> Result<PopeModeReport> {
    let answers = items.iter().map(|it| answerer.answer(it)).collect::<Result<Vec<_>>>()?;
    pope_score(items, &answers, Some(mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrReport {
    pub shr: f64,
    pub hallucinated_sentences: usize,
    pub total_sentences: usize,
}

/// Fraction of sentences in chains and answers with a hallucinated mention.
pub fn shr_oracle<S: AsRef<str>>(outputs: &[(&[S], &[S], &[SceneObject])]) -> Result<ShrReport> {
    let (mut total, mut bad) = (0, 0);
    for (z, y, ann) in outputs {
        for s in sentences(z).into_iter().chain(sentences(y)) {
            total += 1;
            if sentence_hallucinated(s, ann) {
                bad += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("no sentences to judge".into()));
    }
    Ok(ShrReport {
        shr: bad as f64 / total as f64,
        hallucinated_sentences: bad,
        total_sentences: total,
    })
}

/// Whether an answer asserts something the annotation contradicts: a
/// hallucinated mention, or `yes` to an absent kind.
pub fn answer_hallucinated<S: AsRef<str>>(item: &QaItem, y: &[S]) -> bool {
    if let Ok(Question::Exists(k)) = item.question() {
        if parse_yes_no(y) == Some(true) && !item.has_kind(k) {
            return true;
        }
    }
    sentence_hallucinated(y, &item.annotation)
}

pub fn chain_hallucinated<S: AsRef<str>>(item: &QaItem, z: &[S]) -> bool {
    sentences(z).iter().any(|s| sentence_hallucinated(s, &item.annotation))
}

/// Minimum outputs per chain condition for the table to count as sufficient.
pub const MIN_PROPAGATION_CASES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationTable {
    pub cot_hallucinated: usize,
    pub answer_hallucinated_given_cot_hallucinated: usize,
    pub cot_clean: usize,
    pub answer_hallucinated_given_cot_clean: usize,
    /// `P(answer hallucinated | chain hallucinated)`; absent when undefined.
    pub p_given_hallucinated: Option<f64>,
    pub p_given_clean: Option<f64>,
    pub insufficient: bool,
}

/// Conditional answer-hallucination rates from `(chain hallucinated, answer hallucinated)` cases.
pub fn cot_propagation(cases: &[(bool, bool)]) -> PropagationTable {
    let count = |cot: bool| {
        let n = cases.iter().filter(|c| c.0 == cot).count();
        let h = cases.iter().filter(|c| c.0 == cot && c.1).count();
        (n, h)
    };
    let (nh, hh) = count(true);
    let (nc, hc) = count(false);
    let p = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    PropagationTable {
        cot_hallucinated: nh,
        answer_hallucinated_given_cot_hallucinated: hh,
        cot_clean: nc,
        answer_hallucinated_given_cot_clean: hc,
        p_given_hallucinated: p(hh, nh),
        p_given_clean: p(hc, nc),
        insufficient: nh < MIN_PROPAGATION_CASES || nc < MIN_PROPAGATION_CASES,
    }
}

/// One row of the flat report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub mode: String,
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
}

impl MetricRow {
    pub fn new(metric: &str, mode: &str, value: f64, numerator: f64, denominator: f64) -> Self {
        Self {
            metric: metric.into(),
            mode: mode.into(),
            value,
            numerator,
            denominator,
        }
    }
}

/// Writes rows with the fixed column order `metric,mode,value,numerator,denominator`.
pub fn write_rows_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::invalid(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::Split;
    use crate::vocab::KINDS;

    fn obj(kind: &str, color: usize) -> SceneObject {
        SceneObject {
            kind: kind_index(kind).unwrap(),
            color,
            row: 0,
            col: 0,
        }
    }

    #[test]
    fn extract_collapses_duplicates() {
        let a = ["a", "dog", "and", "a", "dog"];
        assert_eq!(extract_objects(&a, &KINDS), BTreeSet::from([0]));
        assert!(extract_objects(&["hello", "there"], &KINDS).is_empty());
    }

    #[test]
    fn chair_hand_example() {
        let cap = ["dog", "cat", "car"];
        let ann = [obj("dog", 0), obj("car", 1)];
        let r = chair(&[(&cap[..], &ann[..])]).unwrap();
        assert_eq!(r.c_s, 1.0);
        assert_eq!(r.c_i, 1.0 / 3.0);
        let clean = ["dog"];
        let r = chair(&[(&clean[..], &ann[..])]).unwrap();
        assert_eq!((r.c_s, r.c_i), (0.0, 0.0));
        let none: [&str; 1] = ["yes"];
        assert!(chair(&[(&none[..], &ann[..])]).is_err());
    }

    #[test]
    fn mentions_pick_up_preceding_color() {
        let m = mentions(&["a", "red", "dog", "top", "cat"]);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].kind, m[0].color, m[0].position), (0, Some(0), 2));
        assert_eq!(m[1].color, None);
    }

    #[test]
    fn shr_extremes_and_color_errors() {
        let ann = [obj("dog", 0)];
        let z = ["a", "red", "dog", ".", "a", "dog", "."];
        let y = ["red", "dog"];
        assert_eq!(shr_oracle(&[(&z[..], &y[..], &ann[..])]).unwrap().shr, 0.0);
        let z = ["a", "cat", ".", "a", "blue", "dog", "."];
        let y = ["frisbee"];
        let r = shr_oracle(&[(&z[..], &y[..], &ann[..])]).unwrap();
        assert_eq!((r.shr, r.total_sentences), (1.0, 3));
        let empty: [&str; 0] = [];
        assert!(shr_oracle(&[(&empty[..], &empty[..], &ann[..])]).is_err());
    }

    #[test]
    fn propagation_counting() {
        let t = cot_propagation(&[(true, true), (true, false), (false, true), (false, false)]);
        assert_eq!((t.p_given_hallucinated, t.p_given_clean), (Some(0.5), Some(0.5)));
        assert!(t.insufficient);
        let t = cot_propagation(&[(false, false); 12]);
        assert_eq!((t.p_given_hallucinated, t.p_given_clean), (None, Some(0.0)));
        assert!(t.insufficient);
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no(&["yes"]), Some(true));
        assert_eq!(parse_yes_no(&["no"]), Some(false));
        assert_eq!(parse_yes_no(&["yes", "no"]), None);
        assert_eq!(parse_yes_no::<&str>(&[]), None);
    }

    #[test]
    fn yes_to_absent_kind_is_hallucinated() {
        let item = QaItem {
            id: "p".into(),
            v: vec![],
            x: Question::Exists(1).tokens(),
            y_gt: vec!["no".into()],
            annotation: vec![obj("dog", 0)],
            split: Split::Eval,
        };
        assert!(answer_hallucinated(&item, &["yes"]));
        assert!(!answer_hallucinated(&item, &["no"]));
    }
}
