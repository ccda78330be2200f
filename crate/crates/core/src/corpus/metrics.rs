//! Answer scoring: token recall, exact match, and context grounding.

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    /// Fraction of gold content tokens present in the prediction (bag counts).
    pub recall: f64,
    /// Exact match after normalization.
    pub em: bool,
    /// Fraction of predicted content tokens that appear anywhere in the
    /// context; `None` when the prompt had no context.
    pub k_precision: Option<f64>,
}

/// Lowercases, strips punctuation tokens, and drops articles and short
/// prepositions; must agree with `Vocab::is_content` or recall denominators
/// drift from what predictions can ever contain.
pub fn normalize_answer(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .map(|w| w.trim_matches(|c: char| c == '.' || c == ',').to_string())
        .filter(|w| {
            !w.is_empty() && !matches!(w.as_str(), "the" | "a" | "an" | "of" | "to" | "in")
        })
        .collect()
}

fn content_words(tokens: &[usize], vocab: &Vocab) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &id in tokens {
        if vocab.is_content(id) {
            out.push(vocab.word(id)?.to_string());
        }
    }
    Ok(out)
}

fn bag_intersection(gold: &[String], pred: &[String]) -> usize {
    let mut pool: Vec<&str> = pred.iter().map(|s| s.as_str()).collect();
    let mut hits = 0;
    for g in gold {
        if let Some(pos) = pool.iter().position(|p| p == g) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    hits
}

/// Scores generated `pred_tokens` against `gold` text. `context_tokens`
/// enables the grounding metric for open-book prompts.
pub fn score_answer(
    pred_tokens: &[usize],
    gold: &str,
    context_tokens: Option<&[usize]>,
    vocab: &Vocab,
) -> Result<AnswerScore> {
    let gold_words = normalize_answer(gold);
    if gold_words.is_empty() {
        return Err(Error::EmptyInput("score_answer: gold has no content tokens"));
    }
    let pred_words = content_words(pred_tokens, vocab)?;
    let recall = bag_intersection(&gold_words, &pred_words) as f64 / gold_words.len() as f64;
    let em = pred_words == gold_words;
    let k_precision = match context_tokens {
        None => None,
        Some(ctx) => {
            let ctx_words = content_words(ctx, vocab)?;
            if pred_words.is_empty() {
                Some(0.0)
            } else {
                let grounded = pred_words
                    .iter()
                    .filter(|w| ctx_words.iter().any(|c| c == *w))
                    .count();
                Some(grounded as f64 / pred_words.len() as f64)
            }
        }
    };
    Ok(AnswerScore {
        recall,
        em,
        k_precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocab {
        Vocab::build()
    }

    #[test]
    fn partial_recall_on_multiword_city() {
        let vocab = v();
        let pred = vocab.encode("york").unwrap();
        let score = score_answer(&pred, "new york city", None, &vocab).unwrap();
        assert!((score.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!(!score.em);
    }

    #[test]
    fn wrapped_answer_keeps_full_recall_but_not_em() {
        let vocab = v();
        let pred = vocab.encode("they worked as a boxer").unwrap();
        let score = score_answer(&pred, "boxer", None, &vocab).unwrap();
        assert_eq!(score.recall, 1.0);
        assert!(!score.em, "extra words must break exact match");
    }

    #[test]
    fn em_ignores_articles_and_punctuation() {
        let vocab = v();
        let pred = vocab.encode("the raven .").unwrap();
        let score = score_answer(&pred, "raven", None, &vocab).unwrap();
        assert!(score.em);
        assert_eq!(score.recall, 1.0);
    }

    #[test]
    fn prepositions_do_not_count_either_way() {
        let vocab = v();
        // "of" overlap between unrelated strings is not a hit.
        let pred = vocab.encode("university of granite").unwrap();
        let s = score_answer(&pred, "auguries of innocence", None, &vocab).unwrap();
        assert_eq!(s.recall, 0.0);
        // A full echo still scores as exact despite the dropped "of".
        let echo = vocab.encode("auguries of innocence").unwrap();
        let s2 = score_answer(&echo, "auguries of innocence", None, &vocab).unwrap();
        assert_eq!(s2.recall, 1.0);
        assert!(s2.em);
    }

    #[test]
    fn k_precision_counts_context_grounding() {
        let vocab = v();
        let ctx = vocab.encode("about alice almeida . they worked as boxer .").unwrap();
        let pred = vocab.encode("boxer chemist").unwrap();
        let score = score_answer(&pred, "boxer", Some(&ctx), &vocab).unwrap();
        assert_eq!(score.k_precision, Some(0.5));
        // Closed-book prompts have no grounding to measure.
        let closed = score_answer(&pred, "boxer", None, &vocab).unwrap();
        assert_eq!(closed.k_precision, None);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let vocab = v();
        let ctx = vocab.encode("about alice almeida").unwrap();
        let score = score_answer(&[], "boxer", Some(&ctx), &vocab).unwrap();
        assert_eq!(score.recall, 0.0);
        assert!(!score.em);
        assert_eq!(score.k_precision, Some(0.0));
    }

    #[test]
    fn duplicate_gold_tokens_need_duplicate_predictions() {
        let vocab = v();
        // gold "1 march 1" needs two "1" tokens for full recall
        let pred_once = vocab.encode("1 march").unwrap();
        let s1 = score_answer(&pred_once, "1 march 1", None, &vocab).unwrap();
        assert!((s1.recall - 2.0 / 3.0).abs() < 1e-12);
        let pred_twice = vocab.encode("1 march 1").unwrap();
        let s2 = score_answer(&pred_twice, "1 march 1", None, &vocab).unwrap();
        assert_eq!(s2.recall, 1.0);
    }
}
