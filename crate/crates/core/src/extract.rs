//! Answer extraction and categorization.
//!
//! Numbers are pulled out of a response with a regex that matches maximal
//! digit runs and the cardinal words zero..twenty on word boundaries. A
//! single match is the prediction. Several matches are disambiguated by a
//! judge (the evaluated model in its baseline configuration). No match means
//! the model did not answer.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::ImageKind;
use crate::questions::word_numbers;

static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| {
    // Longer words first so "seventeen" is not cut at "seven". ASCII-only
    // matching keeps Unicode digits and case folds (e.g. U+017F for 's') out.
    let mut words: Vec<&str> = word_numbers().to_vec();
    words.sort_by_key(|w| std::cmp::Reverse(w.len()));
    Regex::new(&format!(r"(?i-u)\b([0-9]+|{})\b", words.join("|"))).expect("valid number regex")
});

/// Every numeric mention in `text`, in order of appearance.
pub fn extract_numbers(text: &str) -> Vec<u64> {
    NUMBER_RE
        .find_iter(text)
        .map(|m| {
            let s = m.as_str();
            if s.as_bytes()[0].is_ascii_digit() {
                s.parse().unwrap_or(u64::MAX)
            } else {
                let lower = s.to_ascii_lowercase();
                word_numbers().iter().position(|w| *w == lower).expect("matched a vocabulary word") as u64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    RegexSingle,
    Judge,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub numbers: Vec<u64>,
    pub prediction: Option<u64>,
    pub method: ExtractionMethod,
    /// Raw judge reply when the judge was consulted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_text: Option<String>,
}

pub fn build_judge_prompt(question: &str, response: &str, correct: u64) -> String {
    format!(
        "Question: {question}\nModel response: '{response}'\nThe correct answer to this question is {correct}.\nWhat single number did the model give as its final answer to the question? Reply with only a single digit, nothing else."
    )
}

/// Turns extracted numbers into a prediction, calling `judge` only when
/// there is more than one candidate. Judge failures are returned as errors,
/// never folded into "no answer".
pub fn resolve_prediction<E>(
    numbers: Vec<u64>,
    judge: impl FnOnce() -> Result<String, E>,
) -> Result<ExtractionResult, E> {
    match numbers.len() {
        0 => Ok(ExtractionResult {
            numbers,
            prediction: None,
            method: ExtractionMethod::None,
            judge_text: None,
        }),
        1 => Ok(ExtractionResult {
            prediction: Some(numbers[0]),
            numbers,
            method: ExtractionMethod::RegexSingle,
            judge_text: None,
        }),
        _ => {
            let reply = judge()?;
            let prediction = extract_numbers(&reply).first().copied();
            Ok(ExtractionResult {
                numbers,
                prediction,
                method: if prediction.is_some() {
                    ExtractionMethod::Judge
                } else {
                    ExtractionMethod::None
                },
                judge_text: Some(reply),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Accurate,
    Bias,
    Other,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Accurate => "accurate",
            Label::Bias => "bias",
            Label::Other => "other",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("counterfactual count equals the canonical prior ({0})")]
pub struct CategorizeError(pub u32);

/// Labels a prediction. On counterfactual images the canonical prior is the
/// bias attractor; on factual images the prior is the correct answer and no
/// prediction is labelled bias.
pub fn categorize(
    prediction: Option<u64>,
    y_cf: u32,
    y_prior: u32,
    image_kind: ImageKind,
) -> Result<Label, CategorizeError> {
    let Some(p) = prediction else {
        if image_kind == ImageKind::Counterfactual && y_cf == y_prior {
            return Err(CategorizeError(y_cf));
        }
        return Ok(Label::Other);
    };
    Ok(match image_kind {
        ImageKind::Counterfactual => {
            if y_cf == y_prior {
                return Err(CategorizeError(y_cf));
            }
            if p == u64::from(y_cf) {
                Label::Accurate
            } else if p == u64::from(y_prior) {
                Label::Bias
            } else {
                Label::Other
            }
        }
        ImageKind::Factual => {
            if p == u64::from(y_prior) {
                Label::Accurate
            } else {
                Label::Other
            }
        }
    })
}
