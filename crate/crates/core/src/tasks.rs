//! Synthetic, verifiable multi-modal multiple-choice tasks.
//!
//! Each sample is a modality-tagged token sequence: a flattened 4x4
//! attribute grid of vision tokens followed by a text question and four
//! lettered answer choices. Every family has a closed-form answer
//! function, so the accuracy reward is exactly verifiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng::{streams, SeededRng};

pub const GRID_SIZE: usize = 4;
pub const NUM_VALUES: usize = 6;
pub const NUM_CHOICES: usize = 4;

/// Token-id layout. Vision and text ranges are disjoint; everything at
/// or above `TEXT_BASE` is text.
pub mod vocab {
    use super::{GRID_SIZE, NUM_CHOICES, NUM_VALUES};

    /// Vision value tokens occupy [0, TEXT_BASE).
    pub const VISION_VALUE_BASE: u32 = 0;
    pub const TEXT_BASE: u32 = 16;
    /// Answer letters A-D.
    pub const LETTER_BASE: u32 = 16;
    /// Text-side spellings of the grid values.
    pub const TEXT_VALUE_BASE: u32 = 20;
    pub const EVEN: u32 = 26;
    pub const ODD: u32 = 27;
    pub const YES: u32 = 28;
    pub const NO: u32 = 29;
    /// Filler words used as never-true distractors.
    pub const FILLER_BASE: u32 = 30;
    pub const NUM_FILLERS: u32 = 4;
    /// One tag token per task family.
    pub const FAMILY_TAG_BASE: u32 = 34;
    /// Row/column index words.
    pub const INDEX_BASE: u32 = 38;
    pub const SEP: u32 = 42;
    pub const CHOICES_MARK: u32 = 43;
    pub const ANSWER_MARK: u32 = 44;
    /// Smallest vocabulary that fits every token above (ANSWER_MARK + 1).
    pub const MIN_VOCAB: usize = ANSWER_MARK as usize + 1;

    pub fn letter(i: usize) -> u32 {
        assert!(i < NUM_CHOICES);
        LETTER_BASE + i as u32
    }

    pub fn vision_value(v: usize) -> u32 {
        assert!(v < NUM_VALUES);
        VISION_VALUE_BASE + v as u32
    }

    pub fn text_value(v: usize) -> u32 {
        assert!(v < NUM_VALUES);
        TEXT_VALUE_BASE + v as u32
    }

    pub fn index_token(i: usize) -> u32 {
        assert!(i < GRID_SIZE);
        INDEX_BASE + i as u32
    }
}

/// Modality tag carried by every token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    MajorityAttribute,
    CountParity,
    PatternMatch,
    PositionalQuery,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::MajorityAttribute,
        TaskFamily::CountParity,
        TaskFamily::PatternMatch,
        TaskFamily::PositionalQuery,
    ];

    pub fn tag_token(self) -> u32 {
        vocab::FAMILY_TAG_BASE
            + match self {
                TaskFamily::MajorityAttribute => 0,
                TaskFamily::CountParity => 1,
                TaskFamily::PatternMatch => 2,
                TaskFamily::PositionalQuery => 3,
            }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::MajorityAttribute => "majority_attribute",
            TaskFamily::CountParity => "count_parity",
            TaskFamily::PatternMatch => "pattern_match",
            TaskFamily::PositionalQuery => "positional_query",
        }
    }
}

/// One synthetic instance: vision grid, question, lettered choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    /// Flattened GRID_SIZE x GRID_SIZE attribute grid, vision vocab.
    pub vision_tokens: Vec<u32>,
    /// Question tokens: SEP, family tag, parameters, choice block.
    pub text_tokens: Vec<u32>,
    /// The four answer-letter token ids (A-D).
    pub choices: Vec<u32>,
    /// Which letter is correct.
    pub answer_index: usize,
    pub family: TaskFamily,
    /// Per-token modality tags covering vision_tokens ++ text_tokens.
    pub modality_tags: Vec<Modality>,
}

impl MultimodalSample {
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut t = self.vision_tokens.clone();
        t.extend_from_slice(&self.text_tokens);
        t
    }

    pub fn answer_token(&self) -> u32 {
        self.choices[self.answer_index]
    }
}

fn grid_value(grid: &[u32], row: usize, col: usize) -> usize {
    (grid[row * GRID_SIZE + col] - vocab::VISION_VALUE_BASE) as usize
}

fn value_counts(grid: &[u32]) -> [usize; NUM_VALUES] {
    let mut counts = [0usize; NUM_VALUES];
    for &t in grid {
        counts[(t - vocab::VISION_VALUE_BASE) as usize] += 1;
    }
    counts
}

/// The unique strict-majority value of a grid, if any.
fn strict_majority(grid: &[u32]) -> Option<usize> {
    let counts = value_counts(grid);
    let best = *counts.iter().max().unwrap();
    let winners: Vec<usize> =
        (0..NUM_VALUES).filter(|&v| counts[v] == best).collect();
    (winners.len() == 1).then(|| winners[0])
}

fn random_grid(rng: &mut SeededRng) -> Vec<u32> {
    (0..GRID_SIZE * GRID_SIZE)
        .map(|_| vocab::vision_value(rng.below(NUM_VALUES)))
        .collect()
}

/// Question body (after the family tag) plus the four choice-value
/// tokens, with the correct one first.
struct QuestionSpec {
    params: Vec<u32>,
    correct_value: u32,
    distractor_values: Vec<u32>,
}

fn build_question(
    family: TaskFamily,
    grid: &[u32],
    pattern_pair: Option<(usize, usize)>,
    rng: &mut SeededRng,
) -> QuestionSpec {
    match family {
        TaskFamily::MajorityAttribute => {
            let majority = strict_majority(grid).expect("grid constructed with strict majority");
            let mut others: Vec<usize> = (0..NUM_VALUES).filter(|&v| v != majority).collect();
            // Draw three distinct distractor values.
            let mut distractors = Vec::with_capacity(3);
            for _ in 0..3 {
                let i = rng.below(others.len());
                distractors.push(vocab::text_value(others.remove(i)));
            }
            QuestionSpec {
                params: Vec::new(),
                correct_value: vocab::text_value(majority),
                distractor_values: distractors,
            }
        }
        TaskFamily::CountParity => {
            let q = rng.below(NUM_VALUES);
            let count = value_counts(grid)[q];
            let (correct, opposite) =
                if count % 2 == 0 { (vocab::EVEN, vocab::ODD) } else { (vocab::ODD, vocab::EVEN) };
            let mut fillers: Vec<u32> = (0..vocab::NUM_FILLERS).map(|i| vocab::FILLER_BASE + i).collect();
            let f1 = fillers.remove(rng.below(fillers.len()));
            let f2 = fillers.remove(rng.below(fillers.len()));
            QuestionSpec {
                params: vec![vocab::text_value(q)],
                correct_value: correct,
                distractor_values: vec![opposite, f1, f2],
            }
        }
        TaskFamily::PatternMatch => {
            let (r, s) = pattern_pair.expect("pattern pair chosen during grid construction");
            let equal = (0..GRID_SIZE).all(|c| grid_value(grid, r, c) == grid_value(grid, s, c));
            let (correct, opposite) = if equal { (vocab::YES, vocab::NO) } else { (vocab::NO, vocab::YES) };
            let mut fillers: Vec<u32> = (0..vocab::NUM_FILLERS).map(|i| vocab::FILLER_BASE + i).collect();
            let f1 = fillers.remove(rng.below(fillers.len()));
            let f2 = fillers.remove(rng.below(fillers.len()));
            QuestionSpec {
                params: vec![vocab::index_token(r), vocab::index_token(s)],
                correct_value: correct,
                distractor_values: vec![opposite, f1, f2],
            }
        }
        TaskFamily::PositionalQuery => {
            let i = rng.below(GRID_SIZE);
            let j = rng.below(GRID_SIZE);
            let v = grid_value(grid, i, j);
            let mut others: Vec<usize> = (0..NUM_VALUES).filter(|&x| x != v).collect();
            let mut distractors = Vec::with_capacity(3);
            for _ in 0..3 {
                let idx = rng.below(others.len());
                distractors.push(vocab::text_value(others.remove(idx)));
            }
            QuestionSpec {
                params: vec![vocab::index_token(i), vocab::index_token(j)],
                correct_value: vocab::text_value(v),
                distractor_values: distractors,
            }
        }
    }
}

/// Generate one sample. Deterministic given (family, rng state).
pub fn generate_sample(family: TaskFamily, rng: &mut SeededRng) -> MultimodalSample {
    let mut pattern_pair = None;
    let grid = match family {
        TaskFamily::MajorityAttribute => loop {
            let g = random_grid(rng);
            if strict_majority(&g).is_some() {
                break g;
            }
        },
        TaskFamily::PatternMatch => {
            // Draw the queried row pair first and force equality half
            // the time so labels stay balanced.
            let mut g = random_grid(rng);
            let r = rng.below(GRID_SIZE);
            let mut s = rng.below(GRID_SIZE - 1);
            if s >= r {
                s += 1;
            }
            if rng.below(2) == 0 {
                for c in 0..GRID_SIZE {
                    g[s * GRID_SIZE + c] = g[r * GRID_SIZE + c];
                }
            }
            pattern_pair = Some((r, s));
            g
        }
        _ => random_grid(rng),
    };

    let q = build_question(family, &grid, pattern_pair, rng);
    let answer_index = rng.below(NUM_CHOICES);

    // Choice values: correct answer at answer_index, distractors fill
    // the remaining slots in drawn order.
    let mut choice_values: Vec<Option<u32>> = vec![None; NUM_CHOICES];
    choice_values[answer_index] = Some(q.correct_value);
    let mut d = q.distractor_values.into_iter();
    for slot in choice_values.iter_mut() {
        if slot.is_none() {
            *slot = Some(d.next().expect("three distractors"));
        }
    }
    let choice_values: Vec<u32> = choice_values.into_iter().map(Option::unwrap).collect();

    let mut text = vec![vocab::SEP, family.tag_token()];
    text.extend_from_slice(&q.params);
    text.push(vocab::CHOICES_MARK);
    for (i, &v) in choice_values.iter().enumerate() {
        text.push(vocab::letter(i));
        text.push(v);
    }
    text.push(vocab::ANSWER_MARK);

    let mut tags = vec![Modality::Vision; grid.len()];
    tags.extend(std::iter::repeat(Modality::Text).take(text.len()));

    MultimodalSample {
        vision_tokens: grid,
        text_tokens: text,
        choices: (0..NUM_CHOICES).map(vocab::letter).collect(),
        answer_index,
        family,
        modality_tags: tags,
    }
}

/// Accuracy reward: 1.0 iff the first generated token is the correct
/// answer letter, else 0.0 (including empty generations).
pub fn accuracy_reward(generated: &[u32], sample: &MultimodalSample) -> f64 {
    match generated.first() {
        Some(&t) if t == sample.answer_token() => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Balanced dataset: `per_family` samples of each family, interleaved.
/// Train and eval derive from disjoint rng streams of the same seed.
pub fn make_dataset(per_family: usize, split: Split, seed: u64) -> Result<Vec<MultimodalSample>> {
    if per_family < 1 {
        return Err(Error::InvalidConfig("per_family must be >= 1".into()));
    }
    let purpose = match split {
        Split::Train => streams::DATASET_TRAIN,
        Split::Eval => streams::DATASET_EVAL,
    };
    let mut out = Vec::with_capacity(per_family * TaskFamily::ALL.len());
    for i in 0..per_family {
        for (f, family) in TaskFamily::ALL.into_iter().enumerate() {
            let mut rng = SeededRng::stream(seed, purpose, f as u64, i as u64);
            out.push(generate_sample(family, &mut rng));
        }
    }
    Ok(out)
}

/// Line-delimited JSON export.
pub fn write_jsonl<W: std::io::Write>(samples: &[MultimodalSample], mut w: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<MultimodalSample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Ground-truth answer value recomputed from the sample. Used as the
/// reference side of the dual-implementation oracle in tests and by the
/// lookup "oracle model" in evaluation checks.
pub fn oracle_answer_value(sample: &MultimodalSample) -> u32 {
    let grid = &sample.vision_tokens;
    match sample.family {
        TaskFamily::MajorityAttribute => {
            vocab::text_value(strict_majority(grid).expect("majority grids are strict"))
        }
        TaskFamily::CountParity => {
            let q = (sample.text_tokens[2] - vocab::TEXT_VALUE_BASE) as usize;
            if value_counts(grid)[q] % 2 == 0 {
                vocab::EVEN
            } else {
                vocab::ODD
            }
        }
        TaskFamily::PatternMatch => {
            let r = (sample.text_tokens[2] - vocab::INDEX_BASE) as usize;
            let s = (sample.text_tokens[3] - vocab::INDEX_BASE) as usize;
            let eq = (0..GRID_SIZE).all(|c| grid_value(grid, r, c) == grid_value(grid, s, c));
            if eq {
                vocab::YES
            } else {
                vocab::NO
            }
        }
        TaskFamily::PositionalQuery => {
            let i = (sample.text_tokens[2] - vocab::INDEX_BASE) as usize;
            let j = (sample.text_tokens[3] - vocab::INDEX_BASE) as usize;
            vocab::text_value(grid_value(grid, i, j))
        }
    }
}

/// The choice value displayed next to each letter in the prompt.
pub fn displayed_choice_values(sample: &MultimodalSample) -> Vec<u32> {
    // Choice block layout: CHOICES_MARK, then (letter, value) pairs.
    let pos = sample
        .text_tokens
        .iter()
        .position(|&t| t == vocab::CHOICES_MARK)
        .expect("choice block present");
    (0..NUM_CHOICES).map(|i| sample.text_tokens[pos + 2 + 2 * i]).collect()
}
