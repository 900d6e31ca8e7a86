//! Open-ended and multiple-choice prompts, MCQ distractors, option shuffling.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::InstanceRecord;

/// Largest count with a word form.
pub const MAX_WORD_NUMBER: u32 = 20;

const WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

#[derive(Debug, Error, PartialEq)]
pub enum QuestionError {
    #[error("{0} has no word form (supported range 0..={MAX_WORD_NUMBER})")]
    OutOfRange(u32),
    #[error("invalid counts: canonical {canonical}, counterfactual {counterfactual}")]
    InvalidCounts { canonical: u32, counterfactual: u32 },
}

pub fn number_to_words(value: u32) -> Result<&'static str, QuestionError> {
    WORDS
        .get(value as usize)
        .copied()
        .ok_or(QuestionError::OutOfRange(value))
}

/// English cardinal vocabulary `zero..=twenty`, index = value.
pub fn word_numbers() -> &'static [&'static str] {
    &WORDS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFormat {
    Oe,
    Mcq,
}

impl fmt::Display for QuestionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionFormat::Oe => "oe",
            QuestionFormat::Mcq => "mcq",
        })
    }
}

/// Four distinct answer options and their presentation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionSet {
    /// Ascending option values.
    values: [u32; 4],
    /// `order[i]` is the index into `values` shown at position `i`.
    order: [usize; 4],
}

impl OptionSet {
    pub fn values(&self) -> [u32; 4] {
        self.values
    }

    pub fn order(&self) -> [usize; 4] {
        self.order
    }

    /// Values in presentation order.
    pub fn presented(&self) -> [u32; 4] {
        self.order.map(|i| self.values[i])
    }

    /// Word forms in presentation order.
    pub fn presented_words(&self) -> Result<[&'static str; 4], QuestionError> {
        let p = self.presented();
        Ok([
            number_to_words(p[0])?,
            number_to_words(p[1])?,
            number_to_words(p[2])?,
            number_to_words(p[3])?,
        ])
    }
}

/// The two MCQ distractors for a canonical count `c_o` and a counterfactual
/// count `c_a`, together with both counts, in ascending order.
///
/// With `gap = |c_o − c_a|`: a gap above one yields the floored midpoint and
/// `max + 1`; a gap of one yields `min − 1` and `max + 1`, falling back to
/// `max + 1` and `max + 2` when `min − 1` would be zero or below. Collisions
/// are resolved by incrementing the first distractor, then the second,
/// until all four values differ.
pub fn gen_distractors(c_o: u32, c_a: u32) -> Result<OptionSet, QuestionError> {
    if c_o == 0 || c_o == c_a {
        return Err(QuestionError::InvalidCounts {
            canonical: c_o,
            counterfactual: c_a,
        });
    }
    let lo = c_o.min(c_a);
    let hi = c_o.max(c_a);
    let (mut d1, mut d2) = if hi - lo > 1 {
        ((c_o + c_a) / 2, hi + 1)
    } else if lo >= 2 {
        (lo - 1, hi + 1)
    } else {
        (hi + 1, hi + 2)
    };
    while d1 == c_o || d1 == c_a {
        d1 += 1;
    }
    while d2 == c_o || d2 == c_a || d2 == d1 {
        d2 += 1;
    }
    let mut values = [c_o, c_a, d1, d2];
    values.sort_unstable();
    Ok(OptionSet {
        values,
        order: [0, 1, 2, 3],
    })
}

/// Seeded Fisher–Yates permutation of the options.
///
/// The generator is ChaCha8 seeded with `seed` through `seed_from_u64`. For
/// `i = 3, 2, 1` the position `j = next_u64() mod (i + 1)` is swapped with
/// `i`. The same seed gives the same order on every platform.
pub fn shuffle_options(options: &OptionSet, seed: u64) -> OptionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = options.order;
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    OptionSet {
        values: options.values,
        order,
    }
}

fn question_stem(instance: &InstanceRecord, neutral: bool) -> (String, &str) {
    let name = if neutral {
        instance.neutral_name.as_str()
    } else {
        instance.subject_name.as_str()
    };
    (
        format!("How many {} does this {name} have?", instance.attribute_plural()),
        name,
    )
}

pub fn build_oe_prompt(instance: &InstanceRecord, neutral: bool) -> String {
    let (stem, name) = question_stem(instance, neutral);
    format!(
        "{stem} Complete the following sentence with just the count and the name of the part: The {name} has"
    )
}

pub fn build_mcq_prompt(
    instance: &InstanceRecord,
    options: &OptionSet,
    neutral: bool,
) -> Result<String, QuestionError> {
    let (stem, _) = question_stem(instance, neutral);
    let words = options.presented_words()?.join(", ");
    Ok(format!(
        "{stem} Choose one of the following options: {words}. Reply with only one word from the given options and nothing else."
    ))
}

/// One generated question, as written to the questions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub instance_id: String,
    pub format: QuestionFormat,
    pub neutral: bool,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_values: Option<Vec<u32>>,
}

/// Builds the question for one instance and format. The option shuffle is
/// seeded by the instance's seed XOR `run_seed`.
pub fn build_question(
    instance: &InstanceRecord,
    format: QuestionFormat,
    neutral: bool,
    run_seed: u64,
) -> Result<QuestionRecord, QuestionError> {
    match format {
        QuestionFormat::Oe => Ok(QuestionRecord {
            instance_id: instance.id.clone(),
            format,
            neutral,
            prompt: build_oe_prompt(instance, neutral),
            options: None,
            option_values: None,
        }),
        QuestionFormat::Mcq => {
            let base = gen_distractors(instance.canonical_count, instance.counterfactual_count)?;
            let options = shuffle_options(&base, instance.shuffle_seed ^ run_seed);
            Ok(QuestionRecord {
                instance_id: instance.id.clone(),
                format,
                neutral,
                prompt: build_mcq_prompt(instance, &options, neutral)?,
                options: Some(options.presented_words()?.iter().map(|w| w.to_string()).collect()),
                option_values: Some(options.presented().to_vec()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{AnnotationRef, Category};
    use crate::region::BBox;
    use std::collections::BTreeSet;

    fn parrot() -> InstanceRecord {
        InstanceRecord {
            id: "parrot-01".into(),
            category: Category::Birds,
            subject_name: "parrot".into(),
            neutral_name: "bird".into(),
            attribute_name: "leg".into(),
            attribute_plural: None,
            canonical_count: 2,
            counterfactual_count: 3,
            factual_image: "a.png".into(),
            cf_image: "b.png".into(),
            annotation: AnnotationRef {
                mask: "m.png".into(),
                bbox: BBox::new(0, 0, 1, 1),
            },
            shuffle_seed: 99,
        }
    }

    #[test]
    fn distractor_table() {
        let rows = [
            (2, 4, [2, 3, 4, 5]),
            (2, 7, [2, 4, 7, 8]),
            (7, 2, [2, 4, 7, 8]),
            (2, 3, [1, 2, 3, 4]),
            (1, 2, [1, 2, 3, 4]),
            (3, 0, [0, 1, 3, 4]),
            (1, 0, [0, 1, 2, 3]),
        ];
        for (c_o, c_a, expect) in rows {
            assert_eq!(gen_distractors(c_o, c_a).unwrap().values(), expect, "({c_o}, {c_a})");
        }
    }

    #[test]
    fn distractor_gap_two() {
        assert_eq!(gen_distractors(3, 1).unwrap().values(), [1, 2, 3, 4]);
        assert_eq!(gen_distractors(2, 0).unwrap().values(), [0, 1, 2, 3]);
    }

    #[test]
    fn distractor_preconditions() {
        assert!(gen_distractors(0, 2).is_err());
        assert!(gen_distractors(3, 3).is_err());
    }

    #[test]
    fn distractors_always_valid() {
        for c_o in 1..=10 {
            for c_a in 0..=10 {
                if c_o == c_a {
                    continue;
                }
                let v = gen_distractors(c_o, c_a).unwrap().values();
                let set: BTreeSet<_> = v.iter().collect();
                assert_eq!(set.len(), 4, "({c_o}, {c_a}) -> {v:?}");
                assert!(set.contains(&c_o) && set.contains(&c_a));
            }
        }
    }

    #[test]
    fn words() {
        assert_eq!(number_to_words(3).unwrap(), "three");
        assert_eq!(number_to_words(0).unwrap(), "zero");
        assert_eq!(number_to_words(8).unwrap(), "eight");
        assert_eq!(number_to_words(20).unwrap(), "twenty");
        assert_eq!(number_to_words(21), Err(QuestionError::OutOfRange(21)));
    }

    #[test]
    fn shuffle_is_deterministic_and_preserves_values() {
        let base = gen_distractors(2, 4).unwrap();
        let a = shuffle_options(&base, 12345);
        assert_eq!(a, shuffle_options(&base, 12345));
        let mut p = a.presented();
        p.sort_unstable();
        assert_eq!(p, [2, 3, 4, 5]);
    }

    #[test]
    fn shuffle_is_uniform_over_seeds() {
        let base = gen_distractors(2, 4).unwrap();
        let mut counts = std::collections::HashMap::new();
        let n = 10_000u64;
        for seed in 0..n {
            *counts.entry(shuffle_options(&base, seed).order()).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 24);
        let p = 1.0 / 24.0;
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in counts.values() {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "count {c}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 99.9% quantile of chi-square with 23 degrees of freedom.
        assert!(chi2 < 49.73, "chi2 = {chi2}");
    }

    #[test]
    fn oe_prompt() {
        let p = parrot();
        assert_eq!(
            build_oe_prompt(&p, false),
            "How many legs does this parrot have? Complete the following sentence with just the count and the name of the part: The parrot has"
        );
        assert_eq!(
            build_oe_prompt(&p, true),
            "How many legs does this bird have? Complete the following sentence with just the count and the name of the part: The bird has"
        );
        let mut door = p.clone();
        door.attribute_name = "peephole".into();
        assert!(build_oe_prompt(&door, false).starts_with("How many peepholes does"));
    }

    #[test]
    fn mcq_prompt_follows_order() {
        let p = parrot();
        let opts = shuffle_options(&gen_distractors(2, 3).unwrap(), 4);
        let words = opts.presented_words().unwrap();
        let prompt = build_mcq_prompt(&p, &opts, false).unwrap();
        assert_eq!(
            prompt,
            format!(
                "How many legs does this parrot have? Choose one of the following options: {}, {}, {}, {}. Reply with only one word from the given options and nothing else.",
                words[0], words[1], words[2], words[3]
            )
        );
        assert!(prompt.contains("two") && prompt.contains("three"));
    }

    #[test]
    fn question_records() {
        let p = parrot();
        let q = build_question(&p, QuestionFormat::Mcq, false, 0).unwrap();
        assert_eq!(q.options.as_ref().unwrap().len(), 4);
        let oe = build_question(&p, QuestionFormat::Oe, true, 0).unwrap();
        assert!(oe.options.is_none());
        assert!(oe.prompt.ends_with("The bird has"));
    }
}
