//! Synthetic biography corpus, QA construction, and answer scoring.
//!
//! Everything downstream trains and evaluates on this module's output: a
//! closed-vocabulary world of invented people, each with a birth date, birth
//! place, institution, and occupation. Biographies are rendered from a small
//! pool of surface templates with the attribute order shuffled per entity, so
//! the value tokens always appear verbatim in context and every span the
//! attribution stack needs (question, answer object, needle) is known exactly.
//!
//! Prompt grammar, word-level:
//!
//! ```text
//! open:   [BOS] [CTX] <bio tokens> [Q:] <question tokens> [A:]
//! closed: [BOS] [Q:] <question tokens> [A:]
//! niah:   [BOS] [CTX] <bio tokens + needle> [Q:] <question tokens> [A:]
//! ```

mod data;
mod io;
mod metrics;
mod qa;
mod records;
mod vocab;

pub use data::{needle_pool, Attribute, ALL_ATTRIBUTES, N_TEMPLATES};
pub use io::{read_jsonl, write_jsonl, JsonlHeader, GENERATOR_VERSION};
pub use metrics::{normalize_answer, score_answer, AnswerScore};
pub use qa::{
    build_conflict_example, build_niah_example, build_qa_example, build_value_swap_example,
    cloze_prompt, insert_needle, QAExample, QaMode,
};
pub use records::{
    generate_corpus, render_bio, validate_corpus, BioRecord, Corpus, CorpusParams, RenderedBio,
    Split,
};
pub use vocab::{Vocab, TOK_A, TOK_BOS, TOK_CTX, TOK_EOS, TOK_Q};
