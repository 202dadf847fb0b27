//! Renders task instances into SFT prompt/completion records and DPO
//! preference triples.
//!
//! Lists are rendered as `"<n>. <caption>"` lines. Every prompt opens with
//! `Human:` and ends with an `Assistant:` line; the completion follows it.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionMap, CpExample, FitbExample};
use crate::error::{Error, Result};

pub const FITB_INSTRUCTION: &str = "You have two lists: the first list contains item descriptions that make up an incomplete outfit, and the second list contains additional item descriptions as options to complete the look. Your task is to select exactly one item from List 2 that best complements each item in List 1, considering factors like style, color, and overall aesthetic.";

pub const CP_INSTRUCTION: &str = "As a fashion consultant, your task is to evaluate the overall style compatibility of a list of clothing item descriptions. You need to assign a single compatibility score between 0 and 1 for the entire list. A score of 1 indicates that the items are very compatible style-wise and can be combined to create a cohesive outfit. A score of 0 indicates that the items are not compatible at all.";

pub const FITB_LIST1_HEADER: &str = "List 1 (Incomplete outfit):";
pub const FITB_LIST2_HEADER: &str = "List 2 (Options to complete the outfit):";
pub const CP_LIST_HEADER: &str = "List of clothing item descriptions (Complete Outfit):";
pub const CP_OUTPUT_LINE: &str = "Output: Compatibility score (0-1).";
pub const HUMAN: &str = "Human:";
pub const ASSISTANT: &str = "Assistant:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "FITB")]
    Fitb,
    #[serde(rename = "CP")]
    Cp,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Fitb => "FITB",
            Task::Cp => "CP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub completion: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub task: Task,
}

/// Canonical completion for a binary compatibility label.
pub fn score_string(label: u8) -> &'static str {
    if label == 1 {
        "1"
    } else {
        "0"
    }
}

fn push_list(out: &mut String, header: &str, captions: &[&str]) {
    out.push_str(header);
    out.push('\n');
    for (i, c) in captions.iter().enumerate() {
        let _ = writeln!(out, "{}. {c}", i + 1);
    }
}

fn lookup<'a>(captions: &'a CaptionMap, ids: &[String]) -> Result<Vec<&'a str>> {
    ids.iter().map(|id| captions.caption(id)).collect()
}

/// The FITB prompt shared by the SFT record and all DPO pairs of an example.
pub fn fitb_prompt(example: &FitbExample, captions: &CaptionMap) -> Result<String> {
    example.validate()?;
    let mut p = format!("{HUMAN} {FITB_INSTRUCTION}\n");
    push_list(
        &mut p,
        FITB_LIST1_HEADER,
        &lookup(captions, &example.question_items)?,
    );
    push_list(
        &mut p,
        FITB_LIST2_HEADER,
        &lookup(captions, &example.candidates)?,
    );
    p.push_str(ASSISTANT);
    Ok(p)
}

pub fn cp_prompt(example: &CpExample, captions: &CaptionMap) -> Result<String> {
    example.validate()?;
    let mut p = format!("{HUMAN} {CP_INSTRUCTION}\n");
    push_list(
        &mut p,
        CP_LIST_HEADER,
        &lookup(captions, &example.item_ids)?,
    );
    p.push_str(CP_OUTPUT_LINE);
    p.push('\n');
    p.push_str(ASSISTANT);
    Ok(p)
}

pub fn render_sft_fitb(example: &FitbExample, captions: &CaptionMap) -> Result<PromptRecord> {
    let prompt = fitb_prompt(example, captions)?;
    let completion = captions.caption(example.answer())?.to_string();
    Ok(PromptRecord {
        prompt,
        completion,
        task: Task::Fitb,
    })
}

pub fn render_sft_cp(example: &CpExample, captions: &CaptionMap) -> Result<PromptRecord> {
    let prompt = cp_prompt(example, captions)?;
    Ok(PromptRecord {
        prompt,
        completion: score_string(example.label).into(),
        task: Task::Cp,
    })
}

/// One pair per incorrect candidate, in candidate order.
pub fn render_dpo_fitb(
    example: &FitbExample,
    captions: &CaptionMap,
) -> Result<Vec<PreferencePair>> {
    let prompt = fitb_prompt(example, captions)?;
    let chosen = captions.caption(example.answer())?;
    let mut pairs = Vec::with_capacity(3);
    for (i, id) in example.candidates.iter().enumerate() {
        if i == example.answer_index {
            continue;
        }
        let rejected = captions.caption(id)?;
        if rejected == chosen {
            return Err(Error::Validation(format!(
                "FITB candidate {id} has the same caption as the answer; cannot form a preference"
            )));
        }
        pairs.push(PreferencePair {
            prompt: prompt.clone(),
            chosen: chosen.to_string(),
            rejected: rejected.to_string(),
            task: Task::Fitb,
        });
    }
    Ok(pairs)
}

/// The rejected completion is the complementary score `1 − label`.
pub fn render_dpo_cp(example: &CpExample, captions: &CaptionMap) -> Result<PreferencePair> {
    Ok(PreferencePair {
        prompt: cp_prompt(example, captions)?,
        chosen: score_string(example.label).into(),
        rejected: score_string(1 - example.label.min(1)).into(),
        task: Task::Cp,
    })
}

/// Which FITB preference pairs to emit per question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FitbPairs {
    /// One pair per incorrect candidate.
    #[default]
    All,
    /// A single pair, against the incorrect candidate chosen by `seed`.
    One,
}

/// SFT records for a split: FITB questions first, then CP examples.
pub fn sft_records(
    fitb: &[FitbExample],
    cp: &[CpExample],
    captions: &CaptionMap,
) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::with_capacity(fitb.len() + cp.len());
    for f in fitb {
        out.push(render_sft_fitb(f, captions)?);
    }
    for c in cp {
        out.push(render_sft_cp(c, captions)?);
    }
    Ok(out)
}

pub fn dpo_pairs(
    fitb: &[FitbExample],
    cp: &[CpExample],
    captions: &CaptionMap,
    mode: FitbPairs,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for f in fitb {
        let mut pairs = render_dpo_fitb(f, captions)?;
        match mode {
            FitbPairs::All => out.append(&mut pairs),
            FitbPairs::One => out.push(pairs.swap_remove(rng.random_range(0..pairs.len()))),
        }
    }
    for c in cp {
        out.push(render_dpo_cp(c, captions)?);
    }
    Ok(out)
}

/// Task-shaped documents whose items and completions are drawn independently
/// at random from `pool`: they carry the prompt format and the caption
/// vocabulary but no compatibility signal. Alternates FITB and CP shapes.
pub fn pretraining_records(
    pool: &[String],
    captions: &CaptionMap,
    n: usize,
    seed: u64,
) -> Result<Vec<PromptRecord>> {
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    if pool.len() < 8 {
        return Err(Error::Validation(format!(
            "pretraining pool needs at least 8 items, got {}",
            pool.len()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let take = |rng: &mut rand_chacha::ChaCha8Rng, m: usize| -> Vec<String> {
            sample(rng, pool.len(), m)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        };
        if k % 2 == 0 {
            let q = rng.random_range(2..=4);
            let mut ids = take(&mut rng, q + 4);
            let candidates = ids.split_off(q);
            let ex = FitbExample {
                question_items: ids,
                candidates,
                answer_index: rng.random_range(0..4),
            };
            out.push(render_sft_fitb(&ex, captions)?);
        } else {
            let len = rng.random_range(3..=5);
            let ex = CpExample {
                item_ids: take(&mut rng, len),
                label: rng.random_range(0..2),
            };
            out.push(render_sft_cp(&ex, captions)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("serializable");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            column: e.column(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
