//! Preference-data construction: the annotation-backed chain reviser and the
//! perturbations that elicit hallucinated negatives from the reference model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::compression::{prune_top_gamma, score_tokens, Scorer};
use crate::error::{Error, Result};
use crate::metrics::{mention_hallucinated, mentions};
use crate::model::{decode_many, ModelParams, TracedOutput};
use crate::seeds;
use crate::toy_world::{canonical_chain, spatial_words, QaItem, SceneObject};
use crate::vocab::{spatial_index, Vocab, COLORS, INDUCE, KINDS, MASK, SEP, SPATIAL};

/// Replaces exactly `⌊ratio·|v|⌋` positions, drawn without replacement, with `[MASK]`.
pub fn mask_visual<S: AsRef<str>>(v: &[S], ratio: f64, seed: u64) -> Result<Vec<String>> {
    Ok(mask_visual_positions(v, ratio, seed)?.0)
}

/// Masked sequence together with the masked positions, ascending.
pub fn mask_visual_positions<S: AsRef<str>>(v: &[S], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = ((ratio * v.len() as f64 + 1e-9).floor() as usize).min(v.len());
    let mut rng = seeds::rng(seed, "mask", 0);
    let mut positions = rand::seq::index::sample(&mut rng, v.len(), count).into_vec();
    positions.sort_unstable();
    let mut out: Vec<String> = v.iter().map(|s| s.as_ref().to_string()).collect();
    for &p in &positions {
        out[p] = MASK.to_string();
    }
    Ok((out, positions))
}

/// Prepends the inducer token unless it is already there.
pub fn misleading_prefix<S: AsRef<str>>(x: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(x.len() + 1);
    if x.first().map(AsRef::as_ref) != Some(INDUCE) {
        out.push(INDUCE.to_string());
    }
    out.extend(x.iter().map(|s| s.as_ref().to_string()));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub z: Vec<String>,
    /// The chain was rebuilt from the annotation because nothing survived revision.
    pub synthetic: bool,
    pub edited_sentences: usize,
    pub dropped_sentences: usize,
}

fn grid_side(item: &QaItem) -> usize {
    (item.v.len() as f64).sqrt().round() as usize
}

/// Rewrites one sentence; `None` when a hallucinated mention has no replacement.
fn revise_sentence(
    sentence: &[String],
    item: &QaItem,
    unused: &mut BTreeSet<usize>,
    side: usize,
) -> Option<(Vec<String>, bool)> {
    let ms = mentions(sentence);
    if ms.iter().all(|m| !mention_hallucinated(m, &item.annotation)) {
        return Some((sentence.to_vec(), false));
    }
    let mut out = sentence.to_vec();
    let quadrant: Vec<usize> = sentence.iter().filter_map(|w| spatial_index(w)).collect();
    for m in ms {
        if !mention_hallucinated(&m, &item.annotation) {
            continue;
        }
        let target: SceneObject = match item.annotation.iter().find(|o| o.kind == m.kind) {
            Some(o) => *o,
            None => {
                let fits = |o: &SceneObject| {
                    let (r, c) = spatial_words(o.row, o.col, side, side);
                    quadrant.iter().all(|&s| SPATIAL[s] == r || SPATIAL[s] == c)
                };
                let candidates: Vec<&SceneObject> =
                    item.annotation.iter().filter(|o| unused.contains(&o.kind)).collect();
                let pick = candidates
                    .iter()
                    .filter(|o| fits(o))
                    .min_by_key(|o| o.kind)
                    .or_else(|| candidates.iter().min_by_key(|o| o.kind))?;
                unused.remove(&pick.kind);
                let (r, c) = spatial_words(pick.row, pick.col, side, side);
                for w in out.iter_mut() {
                    match w.as_str() {
                        "top" | "bottom" => *w = r.to_string(),
                        "left" | "right" => *w = c.to_string(),
                        _ => {}
                    }
                }
                **pick
            }
        };
        out[m.position] = KINDS[target.kind].to_string();
        if m.color.is_some() {
            out[m.position - 1] = COLORS[target.color].to_string();
        }
    }
    Some((out, true))
}

/// Repairs hallucinated mentions sentence by sentence, then prunes at `gamma`
/// with the oracle scorer.
pub fn revise_cot<S: AsRef<str>>(z_gen: &[S], item: &QaItem, gamma: f64) -> Result<Revision> {
    if z_gen.is_empty() {
        return Err(Error::Empty("cannot revise an empty chain".into()));
    }
    let side = grid_side(item);
    let words: Vec<String> = z_gen.iter().map(|s| s.as_ref().to_string()).collect();
    let mentioned: BTreeSet<usize> = mentions(&words).iter().map(|m| m.kind).collect();
    let mut unused: BTreeSet<usize> = item.kinds().difference(&mentioned).copied().collect();

    let mut revised = Vec::with_capacity(words.len());
    let (mut edited, mut dropped) = (0, 0);
    for piece in words.split_inclusive(|w| w == SEP) {
        let body_len = if piece.last().map(String::as_str) == Some(SEP) {
            piece.len() - 1
        } else {
            piece.len()
        };
        match revise_sentence(&piece[..body_len], item, &mut unused, side) {
            Some((mut s, changed)) => {
                edited += changed as usize;
                s.extend_from_slice(&piece[body_len..]);
                revised.extend(s);
            }
            None => dropped += 1,
        }
    }
    let (chain, synthetic) = if revised.is_empty() {
        (canonical_chain(&item.annotation, side, side), true)
    } else {
        (revised, false)
    };
    if chain.is_empty() {
        return Err(Error::Empty(format!("item {} has no objects to describe", item.id)));
    }
    let scores = score_tokens(&chain, item, &Scorer::Oracle)?;
    Ok(Revision {
        z: prune_top_gamma(&chain, &scores.scores, gamma)?,
        synthetic,
        edited_sentences: edited,
        dropped_sentences: dropped,
    })
}

/// Where the record's completions came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Fingerprint of the parameters every negative was decoded from.
    pub generator: String,
    pub mask_seed: u64,
    pub masked_positions: Vec<usize>,
    pub positive_synthetic: bool,
    pub edited_sentences: usize,
    pub dropped_sentences: usize,
}

/// One contrastive record; every completion is conditioned on the clean `(v, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub v: Vec<String>,
    pub x: Vec<String>,
    pub annotation: Vec<SceneObject>,
    pub pos_z: Vec<String>,
    pub pos_y: Vec<String>,
    pub neg_gen_z: Vec<String>,
    pub neg_gen_y: Vec<String>,
    pub neg_img_z: Vec<String>,
    pub neg_img_y: Vec<String>,
    pub neg_ins_z: Vec<String>,
    pub neg_ins_y: Vec<String>,
    pub provenance: Provenance,
}

impl PreferenceRecord {
    /// Negative `(z, y)` pairs in the order gen, img, ins.
    pub fn negatives(&self) -> [(&[String], &[String]); 3] {
        [
            (&self.neg_gen_z, &self.neg_gen_y),
            (&self.neg_img_z, &self.neg_img_y),
            (&self.neg_ins_z, &self.neg_ins_y),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub total: usize,
    pub emitted: usize,
    pub skipped_malformed: usize,
    pub synthetic_positives: usize,
    pub edited_sentences: usize,
    pub dropped_sentences: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreferenceConfig {
    pub gamma: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub max_len: usize,
}

/// Decodes the three negatives per item from `reference` and pairs them with
/// the revised positive.
pub fn build_preference_dataset(
    reference: &ModelParams,
    vocab: &Vocab,
    corpus: &[QaItem],
    cfg: &PreferenceConfig,
) -> Result<(Vec<PreferenceRecord>, PreferenceReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("empty corpus".into()));
    }
    let masked = corpus
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let s = seeds::derive(cfg.seed, "mask-visual", i as u64);
            mask_visual_positions(&it.v, cfg.mask_ratio, s).map(|(v, p)| (v, p, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let induced: Vec<Vec<String>> = corpus.iter().map(|it| misleading_prefix(&it.x)).collect();
    let mut inputs: Vec<(&[String], &[String])> = Vec::with_capacity(3 * corpus.len());
    for (i, it) in corpus.iter().enumerate() {
        inputs.push((&it.v, &it.x));
        inputs.push((&masked[i].0, &it.x));
        inputs.push((&it.v, &induced[i]));
    }
    let strip = |_: usize, mut o: TracedOutput| {
        o.attention.clear();
        Ok(o)
    };
    let outs = decode_many(reference, vocab, &inputs, cfg.max_len, strip)?;
    let generator = reference.merged().fingerprint();

    let mut report = PreferenceReport {
        total: corpus.len(),
        ..PreferenceReport::default()
    };
    let mut records = Vec::new();
    for (i, (item, trio)) in corpus.iter().zip(outs.chunks_exact(3)).enumerate() {
        let [gen, img, ins] = [&trio[0], &trio[1], &trio[2]];
        if gen.malformed || img.malformed || ins.malformed {
            report.skipped_malformed += 1;
            continue;
        }
        let revision = if gen.z.is_empty() {
            revise_cot(&canonical_chain(&item.annotation, grid_side(item), grid_side(item)), item, cfg.gamma)
                .map(|r| Revision { synthetic: true, ..r })?
        } else {
            revise_cot(&gen.z, item, cfg.gamma)?
        };
        report.synthetic_positives += revision.synthetic as usize;
        report.edited_sentences += revision.edited_sentences;
        report.dropped_sentences += revision.dropped_sentences;
        records.push(PreferenceRecord {
            id: item.id.clone(),
            v: item.v.clone(),
            x: item.x.clone(),
            annotation: item.annotation.clone(),
            pos_z: revision.z,
            pos_y: item.y_gt.clone(),
            neg_gen_z: gen.z.clone(),
            neg_gen_y: gen.y.clone(),
            neg_img_z: img.z.clone(),
            neg_img_y: img.y.clone(),
            neg_ins_z: ins.z.clone(),
            neg_ins_y: ins.y.clone(),
            provenance: Provenance {
                generator: generator.clone(),
                mask_seed: masked[i].2,
                masked_positions: masked[i].1.clone(),
                positive_synthetic: revision.synthetic,
                edited_sentences: revision.edited_sentences,
                dropped_sentences: revision.dropped_sentences,
            },
        });
    }
    report.emitted = records.len();
    if records.is_empty() {
        return Err(Error::Empty("every item produced a malformed negative".into()));
    }
    Ok((records, report))
}
