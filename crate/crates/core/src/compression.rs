//! Token importance scoring and per-chain top-γ pruning.
//!
//! γ is the fraction of tokens retained: `⌈γ·|z|⌉` tokens survive, ranked by
//! score with ties going to the earlier position, and keep their original order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_many, ModelParams};
use crate::toy_world::{spatial_words, QaItem};
use crate::vocab::{word_class, Vocab, WordClass, SPATIAL};

pub const ORACLE_PRESENT: f64 = 1.0;
pub const ORACLE_CONTENT: f64 = 0.5;
pub const ORACLE_FUNCTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Oracle,
    Heuristic,
}

/// Token counts over a reference corpus, used by the heuristic scorer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenFrequencies {
    counts: HashMap<String, usize>,
    max: usize,
}

impl TokenFrequencies {
    pub fn from_chains<I, C, S>(chains: I) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in chains {
            for w in c {
                *counts.entry(w.as_ref().to_string()).or_default() += 1;
            }
        }
        let max = counts.values().copied().max().unwrap_or(0);
        Self { counts, max }
    }

    pub fn count(&self, word: &str) -> usize {
        self.counts.get(word).copied().unwrap_or(0)
    }

    /// `1 − count / max_count`, clamped to `[0, 1]`.
    pub fn score(&self, word: &str) -> f64 {
        if self.max == 0 {
            return 1.0;
        }
        (1.0 - self.count(word) as f64 / self.max as f64).clamp(0.0, 1.0)
    }
}

/// Pluggable importance scorer.
#[derive(Clone, Debug, PartialEq)]
pub enum Scorer {
    /// Rule table that reads the scene annotation.
    Oracle,
    /// Inverse corpus frequency; ignores the item.
    Heuristic(TokenFrequencies),
}

impl Scorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Oracle => ScorerKind::Oracle,
            Scorer::Heuristic(_) => ScorerKind::Heuristic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub kind: ScorerKind,
}

fn oracle_score(word: &str, item: &QaItem, width: usize, height: usize) -> f64 {
    let present = match word_class(word) {
        WordClass::Kind(k) => item.annotation.iter().any(|o| o.kind == k),
        WordClass::Color(c) => item.annotation.iter().any(|o| o.color == c),
        WordClass::Spatial(s) => item.annotation.iter().any(|o| {
            let (r, c) = spatial_words(o.row, o.col, width, height);
            SPATIAL[s] == r || SPATIAL[s] == c
        }),
        WordClass::Content | WordClass::Visual => return ORACLE_CONTENT,
        WordClass::Function | WordClass::Control => return ORACLE_FUNCTION,
    };
    if present {
        ORACLE_PRESENT
    } else {
        ORACLE_CONTENT
    }
}

/// Scores every token of `z`; the oracle assumes a square grid of side √|v|.
pub fn score_tokens<S: AsRef<str>>(z: &[S], item: &QaItem, scorer: &Scorer) -> Result<ImportanceScores> {
    if z.is_empty() {
        return Err(Error::Empty("cannot score an empty chain".into()));
    }
    let side = (item.v.len() as f64).sqrt().round() as usize;
    let scores = z
        .iter()
        .map(|w| match scorer {
            Scorer::Oracle => oracle_score(w.as_ref(), item, side, side),
            Scorer::Heuristic(f) => f.score(w.as_ref()),
        })
        .collect();
    Ok(ImportanceScores {
        scores,
        kind: scorer.kind(),
    })
}

/// Number of tokens kept from a chain of length `n`.
///
/// A tolerance of 1e-9 below the product keeps exact products such as 0.7·10
/// from rounding up through floating-point error.
pub fn kept_count(n: usize, gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma {gamma} outside (0, 1]")));
    }
    Ok(((gamma * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n))
}

/// Positions retained by top-γ pruning, ascending.
pub fn retained_positions(scores: &[f64], gamma: f64) -> Result<Vec<usize>> {
    let k = kept_count(scores.len(), gamma)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

pub fn prune_top_gamma<T: Clone>(z: &[T], scores: &[f64], gamma: f64) -> Result<Vec<T>> {
    if z.len() != scores.len() {
        return Err(Error::Shape {
            op: "prune_top_gamma",
            lhs: vec![z.len()],
            rhs: vec![scores.len()],
        });
    }
    Ok(retained_positions(scores, gamma)?.into_iter().map(|i| z[i].clone()).collect())
}

/// One supervised record `(v, x, z′, y)` with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub v: Vec<String>,
    pub x: Vec<String>,
    /// The model's own answer, unmodified.
    pub y: Vec<String>,
    pub z: Vec<String>,
    pub z_pruned: Vec<String>,
    pub z_original_len: usize,
    pub kept_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub total: usize,
    pub emitted: usize,
    pub skipped_malformed: usize,
    pub skipped_empty_chain: usize,
    pub mean_kept_ratio: f64,
}

/// Decodes each item, prunes its chain and keeps the answer verbatim.
pub fn build_sft_dataset(
    params: &ModelParams,
    vocab: &Vocab,
    corpus: &[QaItem],
    gamma: f64,
    scorer: &Scorer,
    max_len: usize,
) -> Result<(Vec<SftRecord>, SftReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("empty corpus".into()));
    }
    kept_count(1, gamma)?;
    let inputs: Vec<(&[String], &[String])> = corpus.iter().map(|it| (it.v.as_slice(), it.x.as_slice())).collect();
    let outcomes = decode_many(params, vocab, &inputs, max_len, |i, out| {
        if out.malformed {
            return Ok(Err(true));
        }
        if out.z.is_empty() {
            return Ok(Err(false));
        }
        let item = &corpus[i];
        let s = score_tokens(&out.z, item, scorer)?;
        let z_pruned = prune_top_gamma(&out.z, &s.scores, gamma)?;
        Ok(Ok(SftRecord {
            id: item.id.clone(),
            v: item.v.clone(),
            x: item.x.clone(),
            y: out.y,
            kept_ratio: z_pruned.len() as f64 / out.z.len() as f64,
            z_original_len: out.z.len(),
            z_pruned,
            z: out.z,
        }))
    })?;
    let mut report = SftReport {
        total: corpus.len(),
        ..SftReport::default()
    };
    let mut records = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(true) => report.skipped_malformed += 1,
            Err(false) => report.skipped_empty_chain += 1,
        }
    }
    report.emitted = records.len();
    if records.is_empty() {
        return Err(Error::Empty(format!(
            "all {} generations were malformed or had empty chains",
            corpus.len()
        )));
    }
    report.mean_kept_ratio = records.iter().map(|r| r.kept_ratio).sum::<f64>() / records.len() as f64;
    Ok((records, report))
}
