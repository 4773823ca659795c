//! Synthetic multimodal world: grid scenes, templated questions, canonical
//! reasoning chains and a co-occurrence bias baked into pretraining captions.
//!
//! A scene is serialised as one visual token per cell (`EMPTY` or `KIND_COLOR`).
//! Every item carries its full annotation, which makes hallucination decidable:
//! a mention of kind `o` is hallucinated iff `o` is absent from the annotation.
//!
//! The reasoning chain for every question enumerates the scene in row-major
//! order, one sentence per object:
//!
//! ```text
//! a red dog top left . a blue frisbee top left .
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::seeds;
use crate::vocab::{self, COLORS, EMPTY, INDUCE, KINDS, MASK, SEP};

/// One object placed on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "ObjectRepr", into = "ObjectRepr")]
pub struct SceneObject {
    pub kind: usize,
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Serialize, Deserialize)]
struct ObjectRepr {
    kind: String,
    color: String,
    row: usize,
    col: usize,
}

impl TryFrom<ObjectRepr> for SceneObject {
    type Error = String;

    fn try_from(r: ObjectRepr) -> std::result::Result<Self, String> {
        Ok(SceneObject {
            kind: vocab::kind_index(&r.kind).ok_or_else(|| format!("unknown kind {:?}", r.kind))?,
            color: vocab::color_index(&r.color).ok_or_else(|| format!("unknown color {:?}", r.color))?,
            row: r.row,
            col: r.col,
        })
    }
}

impl From<SceneObject> for ObjectRepr {
    fn from(o: SceneObject) -> Self {
        ObjectRepr {
            kind: KINDS[o.kind].to_string(),
            color: COLORS[o.color].to_string(),
            row: o.row,
            col: o.col,
        }
    }
}

/// A W×H grid; each cell is empty or holds `(kind, color)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    width: usize,
    height: usize,
    cells: Vec<Option<(usize, usize)>>,
}

impl Scene {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![None; width * height],
        }
    }

    pub fn from_objects(width: usize, height: usize, objects: &[SceneObject]) -> Result<Self> {
        let mut s = Self::new(width, height);
        for o in objects {
            if o.row >= height || o.col >= width {
                return Err(Error::invalid(format!("object at ({}, {}) outside grid", o.row, o.col)));
            }
            let cell = o.row * width + o.col;
            if s.cells[cell].is_some() {
                return Err(Error::invalid(format!("cell ({}, {}) occupied twice", o.row, o.col)));
            }
            s.cells[cell] = Some((o.kind, o.color));
        }
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, index: usize) -> Option<(usize, usize)> {
        self.cells[index]
    }

    pub fn has_kind(&self, kind: usize) -> bool {
        self.cells.iter().flatten().any(|&(k, _)| k == kind)
    }

    fn cell_of_kind(&self, kind: usize) -> Option<usize> {
        self.cells.iter().position(|c| matches!(c, Some((k, _)) if *k == kind))
    }

    fn empty_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i].is_none()).collect()
    }

    fn place(&mut self, cell: usize, kind: usize, color: usize) {
        self.cells[cell] = Some((kind, color));
    }

    fn clear(&mut self, cell: usize) {
        self.cells[cell] = None;
    }

    /// Objects in row-major order.
    pub fn objects(&self) -> Vec<SceneObject> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                c.map(|(kind, color)| SceneObject {
                    kind,
                    color,
                    row: i / self.width,
                    col: i % self.width,
                })
            })
            .collect()
    }

    pub fn visual_tokens(&self) -> Vec<String> {
        self.cells
            .iter()
            .map(|c| match c {
                Some((k, col)) => vocab::visual_token(*k, *col),
                None => EMPTY.to_string(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Parsed question type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    Describe,
    Exists(usize),
}

impl Question {
    pub fn tokens(self) -> Vec<String> {
        match self {
            Question::Describe => words(&["describe", "the", "scene"]),
            Question::Exists(k) => words(&["is", "there", "a", KINDS[k], "?"]),
        }
    }

    /// Parses question tokens, ignoring a leading inducer token.
    pub fn parse<S: AsRef<str>>(x: &[S]) -> Result<Self> {
        let x: Vec<&str> = x.iter().map(AsRef::as_ref).skip_while(|w| *w == INDUCE).collect();
        match x.as_slice() {
            ["describe", "the", "scene"] => Ok(Question::Describe),
            ["is", "there", "a", k, "?"] => vocab::kind_index(k)
                .map(Question::Exists)
                .ok_or_else(|| Error::UnknownWord(k.to_string())),
            _ => Err(Error::invalid(format!("unrecognised question {x:?}"))),
        }
    }
}

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub v: Vec<String>,
    pub x: Vec<String>,
    pub y_gt: Vec<String>,
    pub annotation: Vec<SceneObject>,
    pub split: Split,
}

impl QaItem {
    pub fn question(&self) -> Result<Question> {
        Question::parse(&self.x)
    }

    pub fn kinds(&self) -> BTreeSet<usize> {
        self.annotation.iter().map(|o| o.kind).collect()
    }

    pub fn has_kind(&self, kind: usize) -> bool {
        self.annotation.iter().any(|o| o.kind == kind)
    }
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

/// Coarse position words: top/bottom by row half, left/right by column half.
pub fn spatial_words(row: usize, col: usize, width: usize, height: usize) -> (&'static str, &'static str) {
    let r = if row < height.div_ceil(2) { "top" } else { "bottom" };
    let c = if col < width.div_ceil(2) { "left" } else { "right" };
    (r, c)
}

/// `a COLOR KIND ROW COL .`
pub fn sentence(o: &SceneObject, width: usize, height: usize) -> Vec<String> {
    let (r, c) = spatial_words(o.row, o.col, width, height);
    words(&["a", COLORS[o.color], KINDS[o.kind], r, c, SEP])
}

pub fn canonical_chain(objects: &[SceneObject], width: usize, height: usize) -> Vec<String> {
    let mut sorted = objects.to_vec();
    sorted.sort_by_key(|o| (o.row, o.col));
    sorted.iter().flat_map(|o| sentence(o, width, height)).collect()
}

/// Ground-truth answer for `q` derived from the object list alone.
pub fn canonical_answer(q: Question, objects: &[SceneObject]) -> Vec<String> {
    match q {
        Question::Describe => {
            let mut sorted = objects.to_vec();
            sorted.sort_by_key(|o| (o.row, o.col));
            sorted
                .iter()
                .flat_map(|o| [COLORS[o.color].to_string(), KINDS[o.kind].to_string()])
                .collect()
        }
        Question::Exists(k) => {
            let yes = objects.iter().any(|o| o.kind == k);
            vec![if yes { "yes" } else { "no" }.to_string()]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrence {
    pub a: String,
    pub b: String,
    pub strength: f64,
}

/// Co-occurrence bias injected into scenes and their decoy captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub pairs: Vec<CoOccurrence>,
    pub drop_probability: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        let pair = |a: &str, b: &str, strength| CoOccurrence {
            a: a.into(),
            b: b.into(),
            strength,
        };
        Self {
            pairs: vec![
                pair("dog", "frisbee", 0.9),
                pair("car", "tree", 0.8),
                pair("cup", "book", 0.8),
                pair("cat", "ball", 0.7),
            ],
            drop_probability: 0.5,
        }
    }
}

impl BiasSpec {
    pub fn none() -> Self {
        Self {
            pairs: Vec::new(),
            drop_probability: 0.0,
        }
    }

    /// Validates ranges and resolves names to `(a, b, strength)` indices.
    pub fn resolve(&self) -> Result<Vec<(usize, usize, f64)>> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::invalid(format!(
                "drop probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        self.pairs
            .iter()
            .map(|p| {
                if !(0.0..=1.0).contains(&p.strength) {
                    return Err(Error::invalid(format!("strength {} outside [0, 1]", p.strength)));
                }
                let a = vocab::kind_index(&p.a).ok_or_else(|| Error::UnknownWord(p.a.clone()))?;
                let b = vocab::kind_index(&p.b).ok_or_else(|| Error::UnknownWord(p.b.clone()))?;
                if a == b {
                    return Err(Error::invalid(format!("co-occurrence pair ({}, {}) is reflexive", p.a, p.b)));
                }
                Ok((a, b, p.strength))
            })
            .collect()
    }
}

/// Generation parameters for the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    /// Objects sampled before the bias adds partners.
    pub min_objects: usize,
    pub max_base_objects: usize,
    /// Upper bound on the scene after bias insertion.
    pub max_objects: usize,
    /// Kind popularity follows `1 / (rank + 1)^zipf_exponent` in lexicon order.
    pub zipf_exponent: f64,
    /// Every `eval_every`-th block of four items goes to the eval split.
    pub eval_every: usize,
    pub bias: BiasSpec,
    /// Chance a training item also yields an inducer-conditioned caption.
    pub induce_rate: f64,
    /// Chance a training item also yields a caption over a partially occluded scene.
    pub occlusion_rate: f64,
    /// Per-object chance of being hidden in an occluded caption's scene.
    pub occlusion_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 4,
            height: 4,
            min_objects: 2,
            max_base_objects: 4,
            max_objects: 6,
            zipf_exponent: 0.8,
            eval_every: 4,
            bias: BiasSpec::default(),
            induce_rate: 0.3,
            occlusion_rate: 0.3,
            occlusion_prob: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if self.min_objects < 2 || self.max_objects > 6 || self.min_objects > self.max_base_objects {
            return Err(Error::invalid("object counts must satisfy 2 <= min <= max_base, max <= 6"));
        }
        if self.max_base_objects > self.max_objects || self.max_objects > self.cells() {
            return Err(Error::invalid("max_base <= max_objects <= cells required"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        for (name, p) in [
            ("induce_rate", self.induce_rate),
            ("occlusion_rate", self.occlusion_rate),
            ("occlusion_prob", self.occlusion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} {p} outside [0, 1]")));
            }
        }
        self.bias.resolve().map(|_| ())
    }

    fn kind_weights(&self) -> Vec<f64> {
        (0..KINDS.len())
            .map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionVariant {
    /// Decoy caption of the pre-drop scene.
    Clean,
    /// Inducer-prefixed question with extra prior-driven objects in the caption.
    Induced,
    /// Some object cells masked; the caption still names them.
    Occluded,
}

/// One base-model pretraining sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub id: String,
    pub v: Vec<String>,
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub y: Vec<String>,
    pub variant: CaptionVariant,
}

/// Corpus items plus the biased pretraining captions for the train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    pub items: Vec<QaItem>,
    pub pretrain: Vec<PretrainRecord>,
}

/// Generates `n` items and their pretraining captions.
pub fn generate_world(n: usize, cfg: &WorldConfig, seed: u64) -> Result<World> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    cfg.validate()?;
    let pairs = cfg.bias.resolve()?;
    let mut items = Vec::with_capacity(n);
    let mut pretrain = Vec::new();
    for i in 0..n {
        let (item, recs) = generate_item(i, cfg, &pairs, seed);
        items.push(item);
        pretrain.extend(recs);
    }
    Ok(World { items, pretrain })
}

pub fn generate_corpus(n: usize, cfg: &WorldConfig, seed: u64) -> Result<Vec<QaItem>> {
    generate_world(n, cfg, seed).map(|w| w.items)
}

fn weighted_distinct(rng: &mut ChaCha8Rng, weights: &[f64], k: usize, exclude: &BTreeSet<usize>) -> Vec<usize> {
    let mut w: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(i, &x)| if exclude.contains(&i) { 0.0 } else { x })
        .collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        if w.iter().all(|&x| x == 0.0) {
            break;
        }
        let pick = WeightedIndex::new(&w).expect("positive weights").sample(rng);
        out.push(pick);
        w[pick] = 0.0;
    }
    out
}

/// Cell right after `anchor` in row-major order when empty, otherwise a random empty cell.
fn partner_cell(scene: &Scene, anchor: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let next = anchor + 1;
    if next < scene.cells.len() && scene.cell(next).is_none() {
        return Some(next);
    }
    scene.empty_cells().choose(rng).copied()
}

fn generate_item(
    index: usize,
    cfg: &WorldConfig,
    pairs: &[(usize, usize, f64)],
    seed: u64,
) -> (QaItem, Vec<PretrainRecord>) {
    let mut rng = seeds::rng(seed, "world", index as u64);
    let weights = cfg.kind_weights();
    let (w, h) = (cfg.width, cfg.height);

    let k = rng.gen_range(cfg.min_objects..=cfg.max_base_objects);
    let kinds = weighted_distinct(&mut rng, &weights, k, &BTreeSet::new());
    let cells = rand::seq::index::sample(&mut rng, cfg.cells(), kinds.len());
    let mut scene = Scene::new(w, h);
    for (kind, cell) in kinds.iter().zip(cells.iter()) {
        let color = rng.gen_range(0..COLORS.len());
        scene.place(cell, *kind, color);
    }

    let mut added = Vec::new();
    for &(a, b, strength) in pairs {
        let fire = rng.gen_bool(strength);
        if !fire || scene.has_kind(b) || scene.len() >= cfg.max_objects {
            continue;
        }
        let Some(anchor) = scene.cell_of_kind(a) else { continue };
        if let Some(cell) = partner_cell(&scene, anchor, &mut rng) {
            scene.place(cell, b, rng.gen_range(0..COLORS.len()));
            added.push(cell);
        }
    }
    let decoy = scene.objects();
    for cell in added {
        if rng.gen_bool(cfg.bias.drop_probability) {
            scene.clear(cell);
        }
    }
    let annotation = scene.objects();
    let present: BTreeSet<usize> = annotation.iter().map(|o| o.kind).collect();

    let question = match index % 4 {
        0 | 1 => Question::Describe,
        2 => {
            let ks: Vec<usize> = present.iter().copied().collect();
            Question::Exists(*ks.choose(&mut rng).expect("scene has objects"))
        }
        _ => {
            let absent: Vec<usize> = (0..KINDS.len()).filter(|k| !present.contains(k)).collect();
            Question::Exists(*absent.choose(&mut rng).expect("some kind is absent"))
        }
    };
    let split = if (index / 4) % cfg.eval_every == cfg.eval_every - 1 {
        Split::Eval
    } else {
        Split::Train
    };
    let id = format!("{seed}-{index:06}");
    let v = scene.visual_tokens();
    let x = question.tokens();
    let item = QaItem {
        id: id.clone(),
        v: v.clone(),
        x: x.clone(),
        y_gt: canonical_answer(question, &annotation),
        annotation: annotation.clone(),
        split,
    };
    if split == Split::Eval {
        return (item, Vec::new());
    }

    let mut recs = vec![PretrainRecord {
        id: format!("{id}-clean"),
        v: v.clone(),
        x: x.clone(),
        z: canonical_chain(&decoy, w, h),
        y: canonical_answer(question, &decoy),
        variant: CaptionVariant::Clean,
    }];

    if rng.gen_bool(cfg.induce_rate) {
        let mut fake = Scene::from_objects(w, h, &decoy).expect("decoy fits its own grid");
        for &(a, b, _) in pairs {
            if fake.has_kind(a) && !fake.has_kind(b) {
                let anchor = fake.cell_of_kind(a).expect("kind present");
                if let Some(cell) = partner_cell(&fake, anchor, &mut rng) {
                    fake.place(cell, b, rng.gen_range(0..COLORS.len()));
                }
            }
        }
        let have: BTreeSet<usize> = fake.objects().iter().map(|o| o.kind).collect();
        if let (Some(&extra), Some(&cell)) = (
            weighted_distinct(&mut rng, &weights, 1, &have).first(),
            fake.empty_cells().choose(&mut rng),
        ) {
            fake.place(cell, extra, rng.gen_range(0..COLORS.len()));
        }
        let objs = fake.objects();
        let mut xi = vec![INDUCE.to_string()];
        xi.extend(x.iter().cloned());
        recs.push(PretrainRecord {
            id: format!("{id}-induced"),
            v: v.clone(),
            x: xi,
            z: canonical_chain(&objs, w, h),
            y: canonical_answer(question, &objs),
            variant: CaptionVariant::Induced,
        });
    }

    if rng.gen_bool(cfg.occlusion_rate) {
        let occupied: Vec<usize> = (0..cfg.cells()).filter(|&c| scene.cell(c).is_some()).collect();
        let mut hidden: Vec<usize> = occupied.iter().copied().filter(|_| rng.gen_bool(cfg.occlusion_prob)).collect();
        if hidden.is_empty() {
            hidden.push(*occupied.choose(&mut rng).expect("scene has objects"));
        }
        let mut vo = v.clone();
        for c in hidden {
            vo[c] = MASK.to_string();
        }
        recs.push(PretrainRecord {
            id: format!("{id}-occluded"),
            v: vo,
            x,
            z: canonical_chain(&decoy, w, h),
            y: canonical_answer(question, &decoy),
            variant: CaptionVariant::Occluded,
        });
    }
    (item, recs)
}

pub fn write_corpus(items: &[QaItem], path: impl AsRef<Path>) -> Result<()> {
    jsonl::write(path, items)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<QaItem>> {
    jsonl::read(path)
}

/// Kind frequencies and pairwise co-occurrence counts over a set of scenes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub kind_counts: Vec<usize>,
    pub cooccurrence: Vec<Vec<usize>>,
}

impl CorpusStats {
    pub fn from_items<'a>(items: impl IntoIterator<Item = &'a QaItem>) -> Self {
        let k = KINDS.len();
        let mut kind_counts = vec![0; k];
        let mut cooccurrence = vec![vec![0; k]; k];
        for item in items {
            let kinds = item.kinds();
            for &a in &kinds {
                kind_counts[a] += 1;
                for &b in &kinds {
                    if a != b {
                        cooccurrence[a][b] += 1;
                    }
                }
            }
        }
        Self {
            kind_counts,
            cooccurrence,
        }
    }

    /// Absent kind ranked first by `score`, then popularity, then lexicon order.
    fn best_absent(&self, present: &BTreeSet<usize>, score: impl Fn(usize) -> usize) -> Option<usize> {
        (0..KINDS.len())
            .filter(|k| !present.contains(k))
            .max_by_key(|&k| (score(k), self.kind_counts[k], std::cmp::Reverse(k)))
    }
}

/// Negative-sampling level for object-existence probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeMode {
    Random,
    Popular,
    Adversarial,
}

impl PopeMode {
    pub const ALL: [PopeMode; 3] = [PopeMode::Random, PopeMode::Popular, PopeMode::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            PopeMode::Random => "random",
            PopeMode::Popular => "popular",
            PopeMode::Adversarial => "adversarial",
        }
    }
}

/// Balanced existence probes over `scenes`: even positions ask about a present
/// kind, odd positions about an absent kind chosen by `mode`.
pub fn pope_items(scenes: &[QaItem], mode: PopeMode, stats: &CorpusStats, seed: u64) -> Result<Vec<QaItem>> {
    if scenes.is_empty() {
        return Err(Error::Empty("no scenes to build existence probes from".into()));
    }
    let mut out = Vec::with_capacity(scenes.len());
    for (j, s) in scenes.iter().enumerate() {
        let mut rng = seeds::rng(seed, mode.name(), j as u64);
        let present = s.kinds();
        let kind = if j % 2 == 0 {
            *present
                .iter()
                .copied()
                .collect::<Vec<_>>()
                .choose(&mut rng)
                .ok_or_else(|| Error::Empty(format!("scene {} has no objects", s.id)))?
        } else {
            let absent: Vec<usize> = (0..KINDS.len()).filter(|k| !present.contains(k)).collect();
            let chosen = match mode {
                PopeMode::Random => absent.choose(&mut rng).copied(),
                PopeMode::Popular => stats.best_absent(&present, |_| 0),
                PopeMode::Adversarial => {
                    stats.best_absent(&present, |b| present.iter().map(|&a| stats.cooccurrence[a][b]).sum())
                }
            };
            chosen.ok_or_else(|| Error::Empty(format!("scene {} has no absent kind", s.id)))?
        };
        let q = Question::Exists(kind);
        out.push(QaItem {
            id: format!("{}-{}", s.id, mode.name()),
            v: s.v.clone(),
            x: q.tokens(),
            y_gt: canonical_answer(q, &s.annotation),
            annotation: s.annotation.clone(),
            split: s.split,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_items_are_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_world(4, &cfg, 11).unwrap();
        let b = generate_world(4, &cfg, 11).unwrap();
        assert_eq!(a.items.len(), 4);
        assert_eq!(a, b);
        assert_ne!(a.items, generate_corpus(4, &cfg, 12).unwrap());
    }

    #[test]
    fn zero_items_is_an_error() {
        assert!(generate_corpus(0, &WorldConfig::default(), 0).is_err());
    }

    #[test]
    fn unbiased_single_item_answer_lists_annotation() {
        let cfg = WorldConfig {
            bias: BiasSpec::none(),
            ..WorldConfig::default()
        };
        let item = &generate_corpus(1, &cfg, 3).unwrap()[0];
        assert_eq!(item.question().unwrap(), Question::Describe);
        let expect: Vec<String> = item
            .annotation
            .iter()
            .flat_map(|o| [COLORS[o.color].to_string(), KINDS[o.kind].to_string()])
            .collect();
        assert_eq!(item.y_gt, expect);
    }

    #[test]
    fn scenes_respect_object_bounds_and_visual_tokens() {
        let w = generate_world(400, &WorldConfig::default(), 5).unwrap();
        for it in &w.items {
            assert!((2..=6).contains(&it.annotation.len()), "{}", it.id);
            let scene = Scene::from_objects(4, 4, &it.annotation).unwrap();
            assert_eq!(scene.visual_tokens(), it.v);
            assert_eq!(canonical_answer(it.question().unwrap(), &it.annotation), it.y_gt);
        }
    }

    #[test]
    fn question_parse_round_trip() {
        for q in [Question::Describe, Question::Exists(4)] {
            assert_eq!(Question::parse(&q.tokens()).unwrap(), q);
        }
        let mut induced = vec![INDUCE.to_string()];
        induced.extend(Question::Exists(1).tokens());
        assert_eq!(Question::parse(&induced).unwrap(), Question::Exists(1));
        assert!(Question::parse(&["hello"]).is_err());
    }

    #[test]
    fn spatial_words_split_grid_in_halves() {
        assert_eq!(spatial_words(0, 0, 4, 4), ("top", "left"));
        assert_eq!(spatial_words(1, 2, 4, 4), ("top", "right"));
        assert_eq!(spatial_words(3, 1, 4, 4), ("bottom", "left"));
    }

    #[test]
    fn invalid_bias_is_rejected() {
        let mut cfg = WorldConfig::default();
        cfg.bias.pairs[0].strength = 1.5;
        assert!(generate_corpus(4, &cfg, 0).is_err());
        let mut cfg = WorldConfig::default();
        cfg.bias.pairs[0].b = "unicorn".into();
        assert!(generate_corpus(4, &cfg, 0).is_err());
    }
}
