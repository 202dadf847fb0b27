//! Outfit corpus: Polyvore-format loaders, CP negative sampling, and a
//! synthetic rule-governed corpus for desk-scale experiments.
//!
//! On-disk layout of a corpus directory:
//!
//! | file                        | content                                   |
//! |-----------------------------|-------------------------------------------|
//! | `train.json`, `test.json`   | outfits `[{"set_id", "items": [{"item_id", "category"}]}]` |
//! | `captions.json`             | `{item_id: caption}`                      |
//! | `fill_in_blank_{split}.json`| `[{"question", "answers", "blank_position", "answer_index"}]` |
//! | `compatibility_{split}.txt` | `label id id ...` per line                |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Split declared by a file name such as `train.json` or `fill_in_blank_test.json`.
    pub fn from_file_name(path: &Path) -> Option<Split> {
        let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
        match (stem.contains("train"), stem.contains("test")) {
            (true, false) => Some(Split::Train),
            (false, true) => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub item_id: String,
    pub category: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutfitItem {
    pub item_id: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outfit {
    pub outfit_id: String,
    pub items: Vec<OutfitItem>,
    pub split: Split,
}

impl Outfit {
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitbExample {
    /// The incomplete outfit.
    pub question_items: Vec<String>,
    /// Exactly four options.
    pub candidates: Vec<String>,
    pub answer_index: usize,
}

impl FitbExample {
    pub fn answer(&self) -> &str {
        &self.candidates[self.answer_index]
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != 4 {
            return Err(Error::Validation(format!(
                "expected 4 candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.answer_index >= 4 {
            return Err(Error::Validation(format!(
                "answer_index {} out of range [0, 4)",
                self.answer_index
            )));
        }
        if self.question_items.is_empty() {
            return Err(Error::Validation("FITB question has no items".into()));
        }
        if let Some(shared) = self
            .candidates
            .iter()
            .find(|c| self.question_items.contains(c))
        {
            return Err(Error::Validation(format!(
                "candidate {shared} also appears in the question"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpExample {
    pub item_ids: Vec<String>,
    /// 1 = curated (compatible), 0 = negative.
    pub label: u8,
}

impl CpExample {
    pub fn validate(&self) -> Result<()> {
        if self.item_ids.len() < 2 {
            return Err(Error::Validation(format!(
                "CP example needs at least 2 items, got {}",
                self.item_ids.len()
            )));
        }
        if self.label > 1 {
            return Err(Error::Validation(format!(
                "CP label must be 0 or 1, got {}",
                self.label
            )));
        }
        Ok(())
    }
}

/// Item id → caption text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaptionMap(pub BTreeMap<String, String>);

impl CaptionMap {
    pub fn get(&self, id: &str) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn caption(&self, id: &str) -> Result<&str> {
        self.get(id)
            .ok_or_else(|| Error::Validation(format!("no caption for item {id}")))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, caption: impl Into<String>) {
        self.0.insert(id.into(), caption.into());
    }

    /// Errors naming every id without a caption.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: BTreeSet<&str> = ids
            .into_iter()
            .filter(|id| !self.0.contains_key(*id))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            let list: Vec<&str> = missing.into_iter().collect();
            Err(Error::Validation(format!(
                "missing captions for item ids: {}",
                list.join(", ")
            )))
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize, Serialize)]
struct OutfitRecord {
    set_id: String,
    items: Vec<OutfitItem>,
}

/// Loads an outfits file, taking the split from its name (`train`/`test`).
pub fn load_outfits(path: &Path) -> Result<Vec<Outfit>> {
    let split = Split::from_file_name(path).ok_or_else(|| {
        Error::Validation(format!(
            "{}: file name does not declare a train or test split",
            path.display()
        ))
    })?;
    load_outfits_as(path, split)
}

pub fn load_outfits_as(path: &Path, split: Split) -> Result<Vec<Outfit>> {
    let records: Vec<OutfitRecord> =
        serde_json::from_str(&read(path)?).map_err(|e| Error::json(path, e))?;
    let outfits: Vec<Outfit> = records
        .into_iter()
        .map(|r| Outfit {
            outfit_id: r.set_id,
            items: r.items,
            split,
        })
        .collect();
    validate_outfits(&outfits)?;
    Ok(outfits)
}

pub fn validate_outfits(outfits: &[Outfit]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut categories: BTreeMap<&str, &str> = BTreeMap::new();
    for o in outfits {
        if o.outfit_id.is_empty() {
            return Err(Error::Validation("outfit with empty set_id".into()));
        }
        if !ids.insert(o.outfit_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate outfit id {}",
                o.outfit_id
            )));
        }
        if o.items.len() < 2 {
            return Err(Error::Validation(format!(
                "outfit {} has fewer than 2 items",
                o.outfit_id
            )));
        }
        let mut seen = BTreeSet::new();
        for it in &o.items {
            if it.item_id.is_empty() {
                return Err(Error::Validation(format!(
                    "outfit {} has an item with empty id",
                    o.outfit_id
                )));
            }
            if !seen.insert(it.item_id.as_str()) {
                return Err(Error::Validation(format!(
                    "outfit {} repeats item {}",
                    o.outfit_id, it.item_id
                )));
            }
            if let Some(prev) = categories.insert(&it.item_id, &it.category) {
                if prev != it.category {
                    return Err(Error::Validation(format!(
                        "item {} has conflicting categories {prev} and {}",
                        it.item_id, it.category
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn write_outfits(path: &Path, outfits: &[Outfit]) -> Result<()> {
    let records: Vec<OutfitRecord> = outfits
        .iter()
        .map(|o| OutfitRecord {
            set_id: o.outfit_id.clone(),
            items: o.items.clone(),
        })
        .collect();
    write(
        path,
        &(serde_json::to_string_pretty(&records).expect("serializable") + "\n"),
    )
}

/// Loads captions, trimming whitespace; empty captions are an error.
pub fn load_captions(path: &Path) -> Result<CaptionMap> {
    let raw: BTreeMap<String, String> =
        serde_json::from_str(&read(path)?).map_err(|e| Error::json(path, e))?;
    let mut empty = Vec::new();
    let map = raw
        .into_iter()
        .map(|(id, c)| {
            let c = c.trim().to_string();
            if c.is_empty() {
                empty.push(id.clone());
            }
            (id, c)
        })
        .collect();
    if !empty.is_empty() {
        return Err(Error::Validation(format!(
            "empty captions for item ids: {}",
            empty.join(", ")
        )));
    }
    Ok(CaptionMap(map))
}

pub fn write_captions(path: &Path, captions: &CaptionMap) -> Result<()> {
    write(
        path,
        &(serde_json::to_string_pretty(captions).expect("serializable") + "\n"),
    )
}

#[derive(Deserialize, Serialize)]
struct FitbRecord {
    question: Vec<String>,
    answers: Vec<String>,
    #[serde(default)]
    blank_position: i64,
    answer_index: i64,
}

pub fn load_fitb(path: &Path) -> Result<Vec<FitbExample>> {
    let records: Vec<FitbRecord> =
        serde_json::from_str(&read(path)?).map_err(|e| Error::json(path, e))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let answer_index = usize::try_from(r.answer_index).unwrap_or(usize::MAX);
            let ex = FitbExample {
                question_items: r.question,
                candidates: r.answers,
                answer_index,
            };
            ex.validate()
                .map_err(|e| Error::Validation(format!("{} question {i}: {e}", path.display())))?;
            Ok(ex)
        })
        .collect()
}

pub fn write_fitb(path: &Path, examples: &[FitbExample]) -> Result<()> {
    let records: Vec<FitbRecord> = examples
        .iter()
        .map(|e| FitbRecord {
            question: e.question_items.clone(),
            answers: e.candidates.clone(),
            blank_position: e.question_items.len() as i64,
            answer_index: e.answer_index as i64,
        })
        .collect();
    write(
        path,
        &(serde_json::to_string_pretty(&records).expect("serializable") + "\n"),
    )
}

pub fn load_cp(path: &Path) -> Result<Vec<CpExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let label = match parts.next() {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Validation(format!(
                    "{}:{}: label must be 0 or 1, got {:?}",
                    path.display(),
                    n + 1,
                    other.unwrap_or("")
                )))
            }
        };
        let ex = CpExample {
            item_ids: parts.map(str::to_string).collect(),
            label,
        };
        ex.validate()
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn cp_to_text(examples: &[CpExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(if e.label == 1 { "1" } else { "0" });
        for id in &e.item_ids {
            s.push(' ');
            s.push_str(id);
        }
        s.push('\n');
    }
    s
}

pub fn write_cp(path: &Path, examples: &[CpExample]) -> Result<()> {
    write(path, &cp_to_text(examples))
}

/// Positives (one per outfit, label 1) followed by `⌈ratio·n⌉` negatives.
///
/// A negative copies a uniformly sampled outfit and replaces every item with a
/// random item of the same category from a different outfit. Slots whose
/// category has no such alternative keep their original item.
pub fn make_cp_negatives(outfits: &[Outfit], ratio: f64, seed: u64) -> Result<Vec<CpExample>> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Validation(format!(
            "negative ratio must be positive, got {ratio}"
        )));
    }
    if outfits.is_empty() {
        return Err(Error::Validation(
            "cannot sample negatives from an empty outfit list".into(),
        ));
    }
    let mut by_category: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    for (oi, o) in outfits.iter().enumerate() {
        for it in &o.items {
            by_category
                .entry(&it.category)
                .or_default()
                .push((oi, &it.item_id));
        }
    }
    let mut out: Vec<CpExample> = outfits
        .iter()
        .map(|o| CpExample {
            item_ids: o.item_ids().map(str::to_string).collect(),
            label: 1,
        })
        .collect();

    let n_neg = (ratio * outfits.len() as f64 - 1e-9).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warned = BTreeSet::new();
    for _ in 0..n_neg {
        let src = rng.random_range(0..outfits.len());
        let mut ids: Vec<String> = Vec::with_capacity(outfits[src].items.len());
        for it in &outfits[src].items {
            let pool = &by_category[it.category.as_str()];
            let usable = |&(oi, id): &(usize, &str)| oi != src && !ids.iter().any(|x| x == id);
            let mut pick = None;
            for _ in 0..32 {
                let cand = pool[rng.random_range(0..pool.len())];
                if usable(&cand) {
                    pick = Some(cand.1);
                    break;
                }
            }
            if pick.is_none() {
                let filtered: Vec<&(usize, &str)> = pool.iter().filter(|c| usable(c)).collect();
                pick = filtered.choose(&mut rng).map(|c| c.1);
            }
            match pick {
                Some(id) => ids.push(id.to_string()),
                None => {
                    if warned.insert(it.category.clone()) {
                        warn!("category {:?} has no replacement item in another outfit; keeping originals", it.category);
                    }
                    ids.push(it.item_id.clone());
                }
            }
        }
        out.push(CpExample {
            item_ids: ids,
            label: 0,
        });
    }
    Ok(out)
}

/// Uniform sample of `n` outfits (all of them when fewer exist), in original order.
pub fn sample_outfits(outfits: &[Outfit], n: usize, seed: u64) -> Vec<Outfit> {
    if n >= outfits.len() {
        return outfits.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, outfits.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| outfits[i].clone()).collect()
}

/// FITB and CP instances of one split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskSet {
    pub fitb: Vec<FitbExample>,
    pub cp: Vec<CpExample>,
}

/// An in-memory corpus with both splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub outfits: Vec<Outfit>,
    pub captions: CaptionMap,
    pub train: TaskSet,
    pub test: TaskSet,
}

pub const CAPTIONS_FILE: &str = "captions.json";

pub fn outfits_file(split: Split) -> String {
    format!("{split}.json")
}

pub fn fitb_file(split: Split) -> String {
    format!("fill_in_blank_{split}.json")
}

pub fn cp_file(split: Split) -> String {
    format!("compatibility_{split}.txt")
}

impl Corpus {
    pub fn tasks(&self, split: Split) -> &TaskSet {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn outfits_in(&self, split: Split) -> impl Iterator<Item = &Outfit> {
        self.outfits.iter().filter(move |o| o.split == split)
    }

    pub fn item(&self, id: &str) -> Option<Item> {
        let caption = self.captions.get(id)?.to_string();
        let category = self
            .outfits
            .iter()
            .flat_map(|o| o.items.iter())
            .find(|it| it.item_id == id)
            .map(|it| it.category.clone())
            .unwrap_or_default();
        Some(Item {
            item_id: id.to_string(),
            category,
            caption,
        })
    }

    /// Referential integrity, instance invariants, and split discipline.
    pub fn validate(&self) -> Result<()> {
        validate_outfits(&self.outfits)?;
        let mut referenced: Vec<&str> = self.outfits.iter().flat_map(|o| o.item_ids()).collect();
        for ts in [&self.train, &self.test] {
            for f in &ts.fitb {
                f.validate()?;
                referenced.extend(
                    f.question_items
                        .iter()
                        .chain(&f.candidates)
                        .map(String::as_str),
                );
            }
            for c in &ts.cp {
                c.validate()?;
                referenced.extend(c.item_ids.iter().map(String::as_str));
            }
        }
        self.captions.check_covers(referenced)?;
        if let Some(id) = self
            .captions
            .0
            .iter()
            .find(|(_, c)| c.trim().is_empty())
            .map(|(id, _)| id)
        {
            return Err(Error::Validation(format!("empty caption for item {id}")));
        }
        let train: BTreeSet<&str> = self
            .outfits_in(Split::Train)
            .flat_map(|o| o.item_ids())
            .collect();
        if let Some(shared) = self
            .outfits_in(Split::Test)
            .flat_map(|o| o.item_ids())
            .find(|id| train.contains(id))
        {
            return Err(Error::Validation(format!(
                "item {shared} appears in both train and test outfits"
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let outfits: Vec<Outfit> = self.outfits_in(split).cloned().collect();
            write_outfits(&dir.join(outfits_file(split)), &outfits)?;
            write_fitb(&dir.join(fitb_file(split)), &self.tasks(split).fitb)?;
            write_cp(&dir.join(cp_file(split)), &self.tasks(split).cp)?;
        }
        write_captions(&dir.join(CAPTIONS_FILE), &self.captions)
    }

    /// Loads a corpus directory. Missing task files yield empty task lists.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut outfits = Vec::new();
        let mut tasks = BTreeMap::new();
        for split in Split::ALL {
            outfits.extend(load_outfits_as(&dir.join(outfits_file(split)), split)?);
            let fitb_path = dir.join(fitb_file(split));
            let cp_path = dir.join(cp_file(split));
            let fitb = if fitb_path.exists() {
                load_fitb(&fitb_path)?
            } else {
                Vec::new()
            };
            let cp = if cp_path.exists() {
                load_cp(&cp_path)?
            } else {
                Vec::new()
            };
            tasks.insert(split, TaskSet { fitb, cp });
        }
        let corpus = Corpus {
            outfits,
            captions: load_captions(&dir.join(CAPTIONS_FILE))?,
            train: tasks.remove(&Split::Train).unwrap_or_default(),
            test: tasks.remove(&Split::Test).unwrap_or_default(),
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub mod synth {
    //! Synthetic corpus whose compatibility is a decidable caption rule.
    //!
    //! Every caption is `"<style> <color> <category>"`. An outfit is compatible
    //! iff all items share one style word and all colors come from one palette.

    use super::*;

    pub const STYLES: [&str; 4] = ["boho", "sporty", "formal", "punk"];
    pub const PALETTES: [[&str; 3]; 4] = [
        ["red", "orange", "yellow"],
        ["navy", "teal", "grey"],
        ["pink", "lilac", "mint"],
        ["black", "white", "silver"],
    ];
    pub const CATEGORIES: [&str; 6] = ["top", "bottom", "shoes", "bag", "jacket", "hat"];
    /// Fraction of outfits assigned to the train split.
    pub const TRAIN_FRACTION: f64 = 0.5;

    pub fn palette_of(color: &str) -> Option<usize> {
        PALETTES.iter().position(|p| p.contains(&color))
    }

    /// `(color, style)` of a synthetic caption.
    pub fn parse_caption(caption: &str) -> Option<(&str, &str)> {
        let mut words = caption.split_whitespace();
        let style = words.next()?;
        let color = words.next()?;
        (palette_of(color).is_some() && STYLES.contains(&style)).then_some((color, style))
    }

    pub fn rule_holds<'a>(captions: impl IntoIterator<Item = &'a str>) -> bool {
        let mut style = None;
        let mut palette = None;
        for c in captions {
            let Some((color, s)) = parse_caption(c) else {
                return false;
            };
            if *style.get_or_insert(s) != s
                || *palette.get_or_insert(palette_of(color)) != palette_of(color)
            {
                return false;
            }
        }
        true
    }

    fn caption(color: &str, style: &str, category: &str) -> String {
        format!("{style} {color} {category}")
    }

    struct Builder {
        rng: ChaCha8Rng,
        captions: CaptionMap,
    }

    impl Builder {
        fn outfit(&mut self, idx: usize, split: Split) -> Outfit {
            let rng = &mut self.rng;
            let style = *STYLES.choose(rng).unwrap();
            let palette = PALETTES.choose(rng).unwrap();
            let len = rng.random_range(3..=5);
            let mut cats = rand::seq::index::sample(rng, CATEGORIES.len(), len).into_vec();
            cats.sort_unstable();
            let outfit_id = format!("o{idx:05}");
            let items = cats
                .into_iter()
                .enumerate()
                .map(|(k, c)| {
                    let color = *palette.choose(rng).unwrap();
                    let item_id = format!("{outfit_id}_{}", k + 1);
                    self.captions
                        .insert(item_id.clone(), caption(color, style, CATEGORIES[c]));
                    OutfitItem {
                        item_id,
                        category: CATEGORIES[c].to_string(),
                    }
                })
                .collect();
            Outfit {
                outfit_id,
                items,
                split,
            }
        }

        /// A fresh item of `category` with `style` and a random color.
        fn fresh(&mut self, id: String, style: &str, category: &str) -> String {
            let color = *PALETTES
                .choose(&mut self.rng)
                .unwrap()
                .choose(&mut self.rng)
                .unwrap();
            self.captions
                .insert(id.clone(), caption(color, style, category));
            id
        }

        /// Items of one split indexed by `(category, style)`.
        fn index<'a>(
            &self,
            outfits: &'a [Outfit],
        ) -> BTreeMap<(String, String), Vec<(&'a str, &'a str)>> {
            let mut idx: BTreeMap<(String, String), Vec<(&str, &str)>> = BTreeMap::new();
            for o in outfits {
                for it in &o.items {
                    let (_, style) =
                        parse_caption(self.captions.get(&it.item_id).unwrap()).unwrap();
                    idx.entry((it.category.clone(), style.to_string()))
                        .or_default()
                        .push((o.outfit_id.as_str(), it.item_id.as_str()));
                }
            }
            idx
        }

        fn fitb(&mut self, outfits: &[Outfit]) -> Vec<FitbExample> {
            let index = self.index(outfits);
            let mut out = Vec::with_capacity(outfits.len());
            for o in outfits {
                let blank = self.rng.random_range(0..o.items.len());
                let answer = &o.items[blank];
                let (_, style) =
                    parse_caption(self.captions.get(&answer.item_id).unwrap()).unwrap();
                let mut others: Vec<&str> =
                    STYLES.iter().copied().filter(|s| *s != style).collect();
                others.shuffle(&mut self.rng);
                let mut candidates = vec![answer.item_id.clone()];
                for (k, other) in others.into_iter().enumerate() {
                    let pool: Vec<&str> = index
                        .get(&(answer.category.clone(), other.to_string()))
                        .map(|v| {
                            v.iter()
                                .filter(|(oid, _)| *oid != o.outfit_id)
                                .map(|(_, id)| *id)
                                .collect()
                        })
                        .unwrap_or_default();
                    let id = match pool.choose(&mut self.rng) {
                        Some(id) => id.to_string(),
                        None => self.fresh(
                            format!("{}_d{}", o.outfit_id, k + 1),
                            other,
                            &answer.category,
                        ),
                    };
                    candidates.push(id);
                }
                candidates.shuffle(&mut self.rng);
                let answer_index = candidates
                    .iter()
                    .position(|c| *c == answer.item_id)
                    .unwrap();
                let question_items = o
                    .items
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != blank)
                    .map(|(_, it)| it.item_id.clone())
                    .collect();
                out.push(FitbExample {
                    question_items,
                    candidates,
                    answer_index,
                });
            }
            out
        }

        /// Negatives that happen to satisfy the rule get one item swapped for an
        /// off-style item of the same category.
        fn repair_negatives(&mut self, outfits: &[Outfit], cp: &mut [CpExample], split: Split) {
            let index = self.index(outfits);
            let category: BTreeMap<String, String> = outfits
                .iter()
                .flat_map(|o| o.items.iter())
                .map(|it| (it.item_id.clone(), it.category.clone()))
                .collect();
            for (n, ex) in cp.iter_mut().enumerate().filter(|(_, e)| e.label == 0) {
                let holds = rule_holds(ex.item_ids.iter().map(|id| self.captions.get(id).unwrap()));
                if !holds {
                    continue;
                }
                let first = ex.item_ids[0].clone();
                let cat = category[&first].clone();
                let (_, style) = parse_caption(self.captions.get(&first).unwrap()).unwrap();
                let other = *STYLES
                    .iter()
                    .filter(|s| **s != style)
                    .collect::<Vec<_>>()
                    .choose(&mut self.rng)
                    .unwrap();
                let pool: Vec<&str> = index
                    .get(&(cat.clone(), other.to_string()))
                    .map(|v| {
                        v.iter()
                            .map(|(_, id)| *id)
                            .filter(|id| !ex.item_ids.iter().any(|x| x == id))
                            .collect()
                    })
                    .unwrap_or_default();
                ex.item_ids[0] = match pool.choose(&mut self.rng) {
                    Some(id) => id.to_string(),
                    None => self.fresh(format!("neg_{split}_{n}"), other, &cat),
                };
            }
        }
    }

    /// Generates `n_outfits` compatible outfits split train/test, one FITB
    /// question per outfit, and CP examples with one negative per outfit.
    pub fn synth_corpus(n_outfits: usize, seed: u64) -> Result<Corpus> {
        if n_outfits < 8 {
            return Err(Error::Validation(format!(
                "synthetic corpus needs at least 8 outfits, got {n_outfits}"
            )));
        }
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            captions: CaptionMap::default(),
        };
        let n_train = ((n_outfits as f64) * TRAIN_FRACTION).round() as usize;
        let outfits: Vec<Outfit> = (0..n_outfits)
            .map(|i| {
                b.outfit(
                    i,
                    if i < n_train {
                        Split::Train
                    } else {
                        Split::Test
                    },
                )
            })
            .collect();
        let mut tasks = BTreeMap::new();
        for (k, split) in Split::ALL.into_iter().enumerate() {
            let part: Vec<Outfit> = outfits
                .iter()
                .filter(|o| o.split == split)
                .cloned()
                .collect();
            let fitb = b.fitb(&part);
            let neg_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(k as u64 + 1);
            let mut cp = make_cp_negatives(&part, 1.0, neg_seed)?;
            b.repair_negatives(&part, &mut cp, split);
            tasks.insert(split, TaskSet { fitb, cp });
        }
        let corpus = Corpus {
            outfits,
            captions: b.captions,
            train: tasks.remove(&Split::Train).unwrap(),
            test: tasks.remove(&Split::Test).unwrap(),
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub use synth::synth_corpus;

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn outfit(id: &str, items: &[(&str, &str)], split: Split) -> Outfit {
        Outfit {
            outfit_id: id.into(),
            items: items
                .iter()
                .map(|(i, c)| OutfitItem {
                    item_id: i.to_string(),
                    category: c.to_string(),
                })
                .collect(),
            split,
        }
    }

    #[test]
    fn loads_outfits_and_takes_split_from_name() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("train.json");
        std::fs::write(
            &p,
            r#"[{"set_id":"a","items":[{"item_id":"1","category":"top"},{"item_id":"2","category":"shoes"},{"item_id":"3","category":"bag"}]},
                {"set_id":"b","items":[{"item_id":"4","category":"top"},{"item_id":"5","category":"shoes"},{"item_id":"6","category":"bag"}]}]"#,
        )
        .unwrap();
        let outfits = load_outfits(&p).unwrap();
        assert_eq!(outfits.len(), 2);
        assert!(outfits
            .iter()
            .all(|o| o.items.len() == 3 && o.split == Split::Train));

        let empty = dir.path().join("test.json");
        std::fs::write(&empty, "[]").unwrap();
        assert!(load_outfits(&empty).unwrap().is_empty());

        let unnamed = dir.path().join("outfits.json");
        std::fs::write(&unnamed, "[]").unwrap();
        assert!(load_outfits(&unnamed).is_err());
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("train.json");
        std::fs::write(&p, "[\n{\"set_id\": \"a\",\n \"items\": [}\n]").unwrap();
        match load_outfits(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_outfit_ids_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("train.json");
        let o = r#"{"set_id":"a","items":[{"item_id":"1","category":"top"},{"item_id":"2","category":"bag"}]}"#;
        std::fs::write(&p, format!("[{o},{o}]")).unwrap();
        assert!(load_outfits(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate outfit id a"));
    }

    #[test]
    fn captions_are_trimmed_and_checked() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("captions.json");
        std::fs::write(&p, r#"{"i1": "  black leather biker jacket \n"}"#).unwrap();
        let caps = load_captions(&p).unwrap();
        assert_eq!(caps.len(), 1);
        assert_eq!(caps.get("i1"), Some("black leather biker jacket"));
        let err = caps.check_covers(["i1", "i9"]).unwrap_err();
        assert!(err.to_string().contains("i9"));

        std::fs::write(&p, r#"{"i1": "ok", "i2": "  ", "i3": ""}"#).unwrap();
        let err = load_captions(&p).unwrap_err().to_string();
        assert!(err.contains("i2") && err.contains("i3"), "{err}");
    }

    #[test]
    fn fitb_validation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("fill_in_blank_test.json");
        std::fs::write(&p, r#"[{"question":["a","b","c"],"answers":["d","e","f","g"],"blank_position":3,"answer_index":2}]"#)
            .unwrap();
        let ex = load_fitb(&p).unwrap();
        assert_eq!(ex[0].answer(), "f");

        std::fs::write(&p, r#"[{"question":["a"],"answers":["d","e","f","g","h"],"blank_position":1,"answer_index":0}]"#)
            .unwrap();
        assert!(load_fitb(&p)
            .unwrap_err()
            .to_string()
            .contains("expected 4 candidates"));

        std::fs::write(&p, r#"[{"question":["a"],"answers":["d","e","f","g"],"blank_position":1,"answer_index":4}]"#)
            .unwrap();
        assert!(load_fitb(&p)
            .unwrap_err()
            .to_string()
            .contains("out of range"));

        std::fs::write(&p, r#"[{"question":["a"],"answers":["a","e","f","g"],"blank_position":1,"answer_index":0}]"#)
            .unwrap();
        assert!(load_fitb(&p).is_err());
    }

    #[test]
    fn cp_file_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("compatibility_test.txt");
        std::fs::write(&p, "1 a b c\n0 d e\n\n").unwrap();
        let ex = load_cp(&p).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(
            ex[1],
            CpExample {
                item_ids: vec!["d".into(), "e".into()],
                label: 0
            }
        );
        assert_eq!(cp_to_text(&ex), "1 a b c\n0 d e\n");
        std::fs::write(&p, "2 a b\n").unwrap();
        assert!(load_cp(&p).is_err());
        std::fs::write(&p, "1 a\n").unwrap();
        assert!(load_cp(&p).is_err());
    }

    fn ten_outfits(n: usize) -> Vec<Outfit> {
        (0..n)
            .map(|i| {
                let a = format!("{i}_1");
                let b = format!("{i}_2");
                let c = format!("{i}_3");
                outfit(
                    &format!("o{i}"),
                    &[(&a, "top"), (&b, "shoes"), (&c, "bag")],
                    Split::Train,
                )
            })
            .collect()
    }

    #[test]
    fn negative_counts_use_ceiling() {
        let cp = make_cp_negatives(&ten_outfits(10), 1.0, 7).unwrap();
        assert_eq!(cp.iter().filter(|e| e.label == 1).count(), 10);
        assert_eq!(cp.iter().filter(|e| e.label == 0).count(), 10);
        let cp = make_cp_negatives(&ten_outfits(9), 0.5, 7).unwrap();
        assert_eq!(cp.iter().filter(|e| e.label == 1).count(), 9);
        assert_eq!(cp.iter().filter(|e| e.label == 0).count(), 5);
        let cp = make_cp_negatives(&ten_outfits(10), 0.1, 7).unwrap();
        assert_eq!(cp.iter().filter(|e| e.label == 0).count(), 1);
        assert!(make_cp_negatives(&ten_outfits(3), 0.0, 1).is_err());
        assert!(make_cp_negatives(&[], 1.0, 1).is_err());
    }

    #[test]
    fn negatives_replace_within_category_from_other_outfits() {
        let outfits = ten_outfits(10);
        let cp = make_cp_negatives(&outfits, 2.0, 3).unwrap();
        for neg in cp.iter().filter(|e| e.label == 0) {
            let owners: BTreeSet<&str> = neg
                .item_ids
                .iter()
                .map(|id| id.split('_').next().unwrap())
                .collect();
            // three slots drawn from other outfits: never all from one source outfit
            assert!(owners.len() >= 2 || neg.item_ids.len() < 2);
            assert!(
                neg.item_ids[0].ends_with("_1")
                    && neg.item_ids[1].ends_with("_2")
                    && neg.item_ids[2].ends_with("_3")
            );
        }
        let a = cp_to_text(&cp);
        let b = cp_to_text(&make_cp_negatives(&outfits, 2.0, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_category_keeps_original_item() {
        let mut outfits = ten_outfits(3);
        outfits[0].items.push(OutfitItem {
            item_id: "unique".into(),
            category: "hat".into(),
        });
        let cp = make_cp_negatives(&outfits, 5.0, 1).unwrap();
        for neg in cp.iter().filter(|e| e.label == 0 && e.item_ids.len() == 4) {
            assert_eq!(neg.item_ids[3], "unique");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let outfits = ten_outfits(20);
        let a = sample_outfits(&outfits, 5, 9);
        assert_eq!(a.len(), 5);
        assert_eq!(a, sample_outfits(&outfits, 5, 9));
        assert_eq!(sample_outfits(&outfits, 50, 9).len(), 20);
    }

    /// Independent brute-force checker: scans each caption for vocabulary words.
    fn brute_force_compatible(corpus: &Corpus, ids: &[String]) -> bool {
        let words = |id: &String| -> Vec<String> {
            corpus
                .captions
                .get(id)
                .unwrap()
                .split(' ')
                .map(str::to_string)
                .collect()
        };
        let mut styles = BTreeSet::new();
        let mut palettes = BTreeSet::new();
        for id in ids {
            for w in words(id) {
                if synth::STYLES.contains(&w.as_str()) {
                    styles.insert(w.clone());
                }
                for (pi, p) in synth::PALETTES.iter().enumerate() {
                    if p.contains(&w.as_str()) {
                        palettes.insert(pi);
                    }
                }
            }
        }
        styles.len() == 1 && palettes.len() == 1
    }

    #[test]
    fn synthetic_corpus_obeys_its_rule() {
        let c = synth_corpus(100, 1).unwrap();
        assert_eq!(c.outfits.len(), 100);
        assert_eq!(c.train.fitb.len() + c.test.fitb.len(), 100);
        for ts in [&c.train, &c.test] {
            for ex in &ts.cp {
                assert_eq!(
                    brute_force_compatible(&c, &ex.item_ids),
                    ex.label == 1,
                    "{ex:?}"
                );
            }
            for f in &ts.fitb {
                for (i, cand) in f.candidates.iter().enumerate() {
                    let mut ids = f.question_items.clone();
                    ids.push(cand.clone());
                    assert_eq!(brute_force_compatible(&c, &ids), i == f.answer_index);
                }
            }
        }
        assert_eq!(c.train.cp.iter().filter(|e| e.label == 0).count(), 50);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_disjoint() {
        let a = synth_corpus(60, 4).unwrap();
        let b = synth_corpus(60, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_corpus(60, 5).unwrap());
        a.validate().unwrap();
        assert!(synth_corpus(7, 1).is_err());
    }

    #[test]
    fn corpus_directory_roundtrip() {
        let c = synth_corpus(30, 2).unwrap();
        let dir = tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn split_overlap_is_rejected() {
        let mut c = synth_corpus(20, 3).unwrap();
        let train_item = c.outfits[0].items[0].clone();
        let test = c
            .outfits
            .iter_mut()
            .find(|o| o.split == Split::Test)
            .unwrap();
        test.items[0] = train_item;
        assert!(c.validate().is_err());
    }
}
