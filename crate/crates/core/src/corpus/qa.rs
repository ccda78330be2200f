//! QA example construction: prompts, spans, counterfactual swaps, needles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::data::{cloze_pattern, question_pattern, Attribute};
use crate::corpus::records::{render_bio, BioRecord};
use crate::corpus::vocab::{Vocab, TOK_A, TOK_BOS, TOK_CTX, TOK_Q};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QaMode {
    /// No context; the model must answer from parameters.
    Closed,
    /// Context carries the entity's true attribute values.
    Oracle,
    /// The queried value in context is swapped for another entity's value.
    Counterfactual,
    /// Oracle context with an out-of-place needle spliced in; the needle,
    /// not the question's answer, is the scoring target.
    Niah,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub mode: QaMode,
    pub entity_id: u32,
    pub attribute: Attribute,
    pub prompt: Vec<usize>,
    /// Question tokens, half-open, prompt coordinates.
    pub j_task: Option<(usize, usize)>,
    /// Answer-object tokens inside the context, half-open.
    pub j_ret: Option<(usize, usize)>,
    /// The whole context region (everything between `[CTX]` and `[Q:]`/`[A:]`).
    pub context_span: Option<(usize, usize)>,
    pub needle_span: Option<(usize, usize)>,
    pub o_gold: String,
    pub o_cf: Option<String>,
}

impl QAExample {
    /// Answer the example is supervised/evaluated against: the counterfactual
    /// value when present, otherwise the gold value.
    pub fn target_answer(&self) -> &str {
        self.o_cf.as_deref().unwrap_or(&self.o_gold)
    }

    pub fn context_tokens(&self) -> Option<&[usize]> {
        self.context_span.map(|(s, e)| &self.prompt[s..e])
    }
}

fn question_tokens(record: &BioRecord, attribute: Attribute, vocab: &Vocab) -> Result<Vec<usize>> {
    let text = question_pattern(attribute).replace("{name}", &record.name);
    vocab.encode(&text)
}

/// Validates span bookkeeping; called by every constructor before returning.
fn check_example(ex: &QAExample, vocab: &Vocab) -> Result<()> {
    let len = ex.prompt.len();
    for span in [ex.j_task, ex.j_ret, ex.context_span, ex.needle_span]
        .into_iter()
        .flatten()
    {
        if span.0 >= span.1 || span.1 > len {
            return Err(Error::Corpus(format!(
                "invalid span {span:?} in prompt of {len} tokens"
            )));
        }
    }
    if let (Some((s, e)), Some(cf)) = (ex.j_ret, ex.o_cf.as_ref()) {
        let got = vocab.decode(&ex.prompt[s..e])?;
        if &got != cf {
            return Err(Error::Corpus(format!(
                "j_ret decodes to {got:?}, expected counterfactual {cf:?}"
            )));
        }
    }
    if let Some(cf) = &ex.o_cf {
        if cf == &ex.o_gold {
            return Err(Error::Corpus(
                "counterfactual value equals gold value".into(),
            ));
        }
    }
    Ok(())
}

/// Builds one QA example. `swap_source` must be provided exactly for
/// counterfactual mode and supplies the same-attribute replacement value;
/// a swap equal to the gold value is rejected so callers can resample.
pub fn build_qa_example(
    record: &BioRecord,
    attribute: Attribute,
    mode: QaMode,
    swap_source: Option<&BioRecord>,
    vocab: &Vocab,
) -> Result<QAExample> {
    if mode == QaMode::Niah {
        return Err(Error::Corpus(
            "niah examples are built by build_niah_example".into(),
        ));
    }
    let o_gold = record.attribute_value(attribute).to_string();
    let mut prompt = vec![TOK_BOS];
    let mut context_span = None;
    let mut j_ret = None;
    let mut o_cf = None;

    if mode != QaMode::Closed {
        prompt.push(TOK_CTX);
        let ctx_start = prompt.len();
        let bio = render_bio(record, vocab)?;
        let (mut vs, mut ve) = bio.value_spans[&attribute];
        let mut tokens = bio.tokens;
        if mode == QaMode::Counterfactual {
            let source = swap_source.ok_or_else(|| {
                Error::Corpus("counterfactual mode needs a swap_source record".into())
            })?;
            let swap = source.attribute_value(attribute).to_string();
            if swap == o_gold {
                return Err(Error::Corpus(format!(
                    "swap value {swap:?} equals gold; resample the donor"
                )));
            }
            let swap_tokens = vocab.encode(&swap)?;
            tokens.splice(vs..ve, swap_tokens.iter().copied());
            ve = vs + swap_tokens.len();
            o_cf = Some(swap);
        }
        vs += ctx_start;
        ve += ctx_start;
        prompt.extend(tokens);
        context_span = Some((ctx_start, prompt.len()));
        j_ret = Some((vs, ve));
    }

    prompt.push(TOK_Q);
    let q_start = prompt.len();
    prompt.extend(question_tokens(record, attribute, vocab)?);
    let j_task = Some((q_start, prompt.len()));
    prompt.push(TOK_A);

    let ex = QAExample {
        mode,
        entity_id: record.entity_id,
        attribute,
        prompt,
        j_task,
        j_ret,
        context_span,
        needle_span: None,
        o_gold,
        o_cf,
    };
    check_example(&ex, vocab)?;
    Ok(ex)
}

/// Counterfactual example whose replacement value is an arbitrary string
/// rather than another entity's value for the same attribute. Training on a
/// slice of these keeps the copy pathway content-agnostic instead of locked
/// to the attribute's value type.
pub fn build_value_swap_example(
    record: &BioRecord,
    attribute: Attribute,
    replacement: &str,
    vocab: &Vocab,
) -> Result<QAExample> {
    let o_gold = record.attribute_value(attribute).to_string();
    if replacement == o_gold {
        return Err(Error::Corpus(format!(
            "replacement {replacement:?} equals gold; resample"
        )));
    }
    let swap_tokens = vocab.encode(replacement)?;
    if swap_tokens.is_empty() {
        return Err(Error::EmptyInput("build_value_swap_example"));
    }
    let mut prompt = vec![TOK_BOS, TOK_CTX];
    let ctx_start = prompt.len();
    let bio = render_bio(record, vocab)?;
    let (vs, ve) = bio.value_spans[&attribute];
    let mut tokens = bio.tokens;
    tokens.splice(vs..ve, swap_tokens.iter().copied());
    prompt.extend(tokens);
    let context_span = Some((ctx_start, prompt.len()));
    let j_ret = Some((ctx_start + vs, ctx_start + vs + swap_tokens.len()));
    prompt.push(TOK_Q);
    let q_start = prompt.len();
    prompt.extend(question_tokens(record, attribute, vocab)?);
    let j_task = Some((q_start, prompt.len()));
    prompt.push(TOK_A);
    let ex = QAExample {
        mode: QaMode::Counterfactual,
        entity_id: record.entity_id,
        attribute,
        prompt,
        j_task,
        j_ret,
        context_span,
        needle_span: None,
        o_gold,
        o_cf: Some(replacement.to_string()),
    };
    check_example(&ex, vocab)?;
    Ok(ex)
}

/// Knowledge-conflict variant: the context describes `ctx_record` while the
/// question asks about `query_record`. The context value for the queried
/// attribute plays the counterfactual role; the query entity's own value is
/// the parametric answer.
pub fn build_conflict_example(
    query_record: &BioRecord,
    ctx_record: &BioRecord,
    attribute: Attribute,
    vocab: &Vocab,
) -> Result<QAExample> {
    if query_record.entity_id == ctx_record.entity_id {
        return Err(Error::Corpus("conflict example needs two entities".into()));
    }
    let o_gold = query_record.attribute_value(attribute).to_string();
    let o_cf = ctx_record.attribute_value(attribute).to_string();
    if o_gold == o_cf {
        return Err(Error::Corpus(format!(
            "context value {o_cf:?} equals query gold; resample the context entity"
        )));
    }
    let mut prompt = vec![TOK_BOS, TOK_CTX];
    let ctx_start = prompt.len();
    let bio = render_bio(ctx_record, vocab)?;
    let (vs, ve) = bio.value_spans[&attribute];
    prompt.extend(bio.tokens);
    let context_span = Some((ctx_start, prompt.len()));
    let j_ret = Some((ctx_start + vs, ctx_start + ve));
    prompt.push(TOK_Q);
    let q_start = prompt.len();
    prompt.extend(question_tokens(query_record, attribute, vocab)?);
    let j_task = Some((q_start, prompt.len()));
    prompt.push(TOK_A);
    let ex = QAExample {
        mode: QaMode::Counterfactual,
        entity_id: query_record.entity_id,
        attribute,
        prompt,
        j_task,
        j_ret,
        context_span,
        needle_span: None,
        o_gold,
        o_cf: Some(o_cf),
    };
    check_example(&ex, vocab)?;
    Ok(ex)
}

/// Splices `needle` into the example's context at a word boundary chosen
/// uniformly by `seed`. Spans shift accordingly; removing the recorded
/// needle span restores the original prompt exactly.
pub fn insert_needle(
    example: &QAExample,
    needle: &[&str],
    seed: u64,
    vocab: &Vocab,
) -> Result<QAExample> {
    let (cs, ce) = example
        .context_span
        .ok_or_else(|| Error::Corpus("cannot insert a needle without a context".into()))?;
    if needle.is_empty() {
        return Err(Error::EmptyInput("insert_needle"));
    }
    let needle_text = needle.join(" ");
    let needle_tokens = vocab.encode(&needle_text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Any boundary inside the context, endpoints included.
    let at = rng.gen_range(cs..=ce);
    let mut out = example.clone();
    out.prompt
        .splice(at..at, needle_tokens.iter().copied());
    let shift = needle_tokens.len();
    let bump = |span: Option<(usize, usize)>| {
        span.map(|(s, e)| {
            if s >= at {
                (s + shift, e + shift)
            } else {
                (s, e)
            }
        })
    };
    out.j_task = bump(out.j_task);
    out.j_ret = bump(out.j_ret);
    out.context_span = Some((cs, ce + shift));
    out.needle_span = Some((at, at + shift));
    check_example(&out, vocab)?;
    Ok(out)
}

/// NIAH example: a regular oracle QA prompt with a needle spliced into the
/// context. The model, left alone, answers the question; the scoring gold is
/// the needle, so recall stays near zero unless attention is steered onto
/// the needle span. `j_ret` keeps pointing at the question's answer object.
pub fn build_niah_example(
    record: &BioRecord,
    attribute: Attribute,
    needle: &[&str],
    seed: u64,
    vocab: &Vocab,
) -> Result<QAExample> {
    let oracle = build_qa_example(record, attribute, QaMode::Oracle, None, vocab)?;
    let mut ex = insert_needle(&oracle, needle, seed, vocab)?;
    ex.mode = QaMode::Niah;
    ex.o_gold = needle.join(" ");
    check_example(&ex, vocab)?;
    Ok(ex)
}

/// Cloze prompt for parametric extraction: `[BOS] [Q:] <statement> [A:]` has
/// no context by design; the continuation must come from parameters.
pub fn cloze_prompt(record: &BioRecord, attribute: Attribute, vocab: &Vocab) -> Result<Vec<usize>> {
    let text = cloze_pattern(attribute).replace("{name}", &record.name);
    let mut prompt = vec![TOK_BOS, TOK_Q];
    prompt.extend(vocab.encode(&text)?);
    prompt.push(TOK_A);
    Ok(prompt)
}
